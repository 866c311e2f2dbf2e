#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "pmrl/view_selection.hpp"

using namespace pmrl;
using pmrl::testutil::fd_max_rel_err;

namespace {

geom::Camera make_camera(const Eigen::Vector3d& center, int wh = 32) {
  geom::Camera cam;
  cam.K << 1.2 * wh, 0, wh / 2.0, 0, 1.2 * wh, wh / 2.0, 0, 0, 1;
  cam.R = Eigen::Matrix3d::Identity();
  cam.t = -center;
  cam.width = wh;
  cam.height = wh;
  cam.d_min = 0.2;
  cam.d_max = 20.0;
  return cam;
}

feat::Correlation corr_of(std::initializer_list<double> xs) {
  Array a({xs.size()});
  std::size_t i = 0;
  for (double x : xs) a[i++] = x;
  return {ad::constant(std::move(a)), true};
}

}  // namespace

TEST_CASE("priors for an identical source camera") {
  const auto cam = make_camera({0, 0, 0});
  const auto omega = geom::plane_from_depth_normal(
      2.0, {0, 0, -1}, geom::pixel_center(16, 16), cam.K);
  const auto pri = vsel::compute_priors(omega, 16, 16, cam, cam);
  CHECK(pri.visible);
  CHECK(pri.scale_ratio == doctest::Approx(1.0).epsilon(1e-9));
  // Triangulation angle 0 (up to acos conditioning near 1), so the
  // difference equals the target itself.
  CHECK(pri.tri_angle_diff == doctest::Approx(vsel::kTau0).epsilon(1e-6));
}

TEST_CASE("perpendicular rays give a 90 degree triangulation angle") {
  // Reference at the origin, source at (1,0,0), plane point (0.5,0,0.5):
  // the two rays to the point are orthogonal.
  const auto cam_ref = make_camera({0, 0, 0});
  const auto cam_src = make_camera({1, 0, 0});
  const Eigen::Vector3d x(0.5, 0, 0.5);
  const auto [p, d] = geom::project(cam_ref, x);
  const auto omega = geom::plane_from_depth_normal(d, {0, 0, -1}, p, cam_ref.K);
  // Nearest integer pixel; the half-pixel offset shifts the angle by ~1e-3.
  const int px = static_cast<int>(p.x() - 0.5), py = static_cast<int>(p.y() - 0.5);
  const auto pri = vsel::compute_priors(omega, px, py, cam_ref, cam_src);
  CHECK(pri.visible);
  CHECK(pri.tri_angle_diff ==
        doctest::Approx(M_PI / 2 - vsel::kTau0).epsilon(1e-2));
}

TEST_CASE("incident angle vanishes for a head-on source") {
  const auto cam_ref = make_camera({0, 0, 0});
  const auto cam_src = make_camera({0, 0, 0.5});
  // Fronto-parallel plane near the optical axis; the source sits on the
  // axis between camera and plane, so its ray is nearly along the normal.
  const auto omega = geom::plane_from_depth_normal(
      2.0, {0, 0, -1}, geom::pixel_center(16, 16), cam_ref.K);
  const auto pri = vsel::compute_priors(omega, 16, 16, cam_ref, cam_src);
  CHECK(pri.visible);
  CHECK(pri.incident_angle < 0.05);
}

TEST_CASE("point behind the source camera is flagged invisible") {
  const auto cam_ref = make_camera({0, 0, 0});
  const auto cam_src = make_camera({0, 0, 4.0});  // plane point at z=2
  const auto omega = geom::plane_from_depth_normal(
      2.0, {0, 0, -1}, geom::pixel_center(16, 16), cam_ref.K);
  const auto pri = vsel::compute_priors(omega, 16, 16, cam_ref, cam_src);
  CHECK(!pri.visible);
}

TEST_CASE("scale ratio matches a finite-difference footprint oracle") {
  const auto cam_ref = make_camera({0, 0, 0});
  const auto cam_src = make_camera({0.3, -0.2, 1.0});
  Eigen::Vector3d n(0.2, 0.1, -0.97);
  n.normalize();
  const auto omega =
      geom::plane_from_depth_normal(2.5, n, geom::pixel_center(10, 20),
                                    cam_ref.K);
  const auto pri = vsel::compute_priors(omega, 10, 20, cam_ref, cam_src);
  REQUIRE(pri.visible);

  // Independent footprint: push the corners of a tiny square through the
  // homography and take the area ratio.
  const auto H = geom::homography(omega, cam_ref, cam_src);
  const Eigen::Vector2d p = geom::pixel_center(10, 20);
  const double e = 1e-4;
  Eigen::Vector2d q0, qx, qy;
  REQUIRE(geom::apply_homography(H, p, q0));
  REQUIRE(geom::apply_homography(H, p + Eigen::Vector2d(e, 0), qx));
  REQUIRE(geom::apply_homography(H, p + Eigen::Vector2d(0, e), qy));
  const double area =
      std::abs((qx - q0).x() * (qy - q0).y() - (qx - q0).y() * (qy - q0).x());
  CHECK(pri.scale_ratio == doctest::Approx(area / (e * e)).epsilon(1e-4));
}

TEST_CASE("scale ratio is clamped") {
  const auto cam_ref = make_camera({0, 0, 0});
  auto cam_src = make_camera({0, 0, 2.45});  // almost on the plane point
  const auto omega = geom::plane_from_depth_normal(
      2.5, {0, 0, -1}, geom::pixel_center(16, 16), cam_ref.K);
  const auto pri = vsel::compute_priors(omega, 16, 16, cam_ref, cam_src);
  REQUIRE(pri.visible);
  CHECK(pri.scale_ratio == 8.0);
}

TEST_CASE("visibility net") {
  std::mt19937_64 rng(1);
  vsel::GeometricPriors pri;
  pri.scale_ratio = 1.2;
  pri.incident_angle = 0.4;
  pri.tri_angle_diff = 0.1;
  auto corr = corr_of({0.3, -0.1, 0.2, 0.05});

  SUBCASE("zero weights sit at one half") {
    nn::ParamStore store;
    auto net = vsel::VisibilityNet::create(store, rng, 4, 0.0);
    auto v = vsel::visibility_score(pri, corr, net);
    CHECK(v->value[0] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("geometry-invisible forces zero") {
    nn::ParamStore store;
    auto net = vsel::VisibilityNet::create(store, rng, 4, 0.3);
    vsel::GeometricPriors bad = pri;
    bad.visible = false;
    CHECK(vsel::visibility_score(bad, corr, net)->value[0] == 0.0);
    feat::Correlation invalid{ad::constant(Array({4})), false};
    CHECK(vsel::visibility_score(pri, invalid, net)->value[0] == 0.0);
  }
  SUBCASE("gradient vs finite differences") {
    nn::ParamStore store;
    auto net = vsel::VisibilityNet::create(store, rng, 4, 0.4);
    std::vector<ad::NodePtr> params;
    for (auto& [n, p] : store.all()) params.push_back(p);
    auto f = [&] { return ad::sum(vsel::visibility_score(pri, corr, net)); };
    CHECK(fd_max_rel_err(params, f) < 1e-4);
  }
}

TEST_CASE("view sampling") {
  std::mt19937_64 rng(2);
  SUBCASE("degenerate distribution always picks the support") {
    std::vector<double> v{1.0, 0.0, 0.0};
    CHECK(vsel::sample_views(v, 1, vsel::SampleMode::kGreedy, rng) ==
          std::vector<int>{0});
    for (int i = 0; i < 50; ++i)
      CHECK(vsel::sample_views(v, 1, vsel::SampleMode::kStochastic, rng) ==
            std::vector<int>{0});
  }
  SUBCASE("greedy breaks ties by lower id and ignores rescaling") {
    std::vector<double> v{0.4, 0.9, 0.4, 0.9};
    auto top = vsel::sample_views(v, 3, vsel::SampleMode::kGreedy, rng);
    CHECK(top == std::vector<int>{1, 3, 0});
    for (auto& x : v) x *= 17.0;
    CHECK(vsel::sample_views(v, 3, vsel::SampleMode::kGreedy, rng) == top);
  }
  SUBCASE("uniform stochastic frequencies match the multinomial") {
    // Without-replacement draws from uniform weights include each of the 5
    // views with probability exactly N/S = 0.4.
    std::vector<double> v{1, 1, 1, 1, 1};
    std::vector<int> count(5, 0);
    const int trials = 10000;
    for (int i = 0; i < trials; ++i)
      for (int id : vsel::sample_views(v, 2, vsel::SampleMode::kStochastic,
                                       rng))
        ++count[id];
    const double sigma = std::sqrt(trials * 0.4 * 0.6);
    for (int c : count) CHECK(std::abs(c - trials * 0.4) <= 3.0 * sigma);
  }
  SUBCASE("zero mass pads greedily") {
    std::vector<double> v{0.0, 0.0, 0.7};
    auto out = vsel::sample_views(v, 2, vsel::SampleMode::kStochastic, rng);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == 2);
    CHECK(out[1] == 0);  // best remaining id on ties
  }
}

TEST_CASE("weighted correlation") {
  SUBCASE("single view passes through") {
    auto g = corr_of({0.1, 0.2, 0.3, 0.4});
    auto r = vsel::weighted_correlation({g}, {ad::constant(0.37)});
    REQUIRE(r.valid);
    for (int i = 0; i < 4; ++i)
      CHECK(r.g->value[i] == doctest::Approx(g.g->value[i]).epsilon(1e-12));
  }
  SUBCASE("equal weights average") {
    auto r = vsel::weighted_correlation(
        {corr_of({1, 1, 1, 1}), corr_of({0, 0, 0, 0})},
        {ad::constant(0.4), ad::constant(0.4)});
    REQUIRE(r.valid);
    for (int i = 0; i < 4; ++i)
      CHECK(r.g->value[i] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("invariant to a common positive rescale") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    std::vector<feat::Correlation> gs{corr_of({0.3, -0.2}), corr_of({1.0, 0.5}),
                                      corr_of({-0.4, 0.9})};
    std::vector<double> v{u(rng), u(rng), u(rng)};
    auto mk = [&](double c) {
      std::vector<ad::NodePtr> vs;
      for (double x : v) vs.push_back(ad::constant(c * x));
      return vsel::weighted_correlation(gs, vs);
    };
    auto a = mk(1.0), b = mk(7.3);
    for (int i = 0; i < 2; ++i)
      CHECK(std::abs(a.g->value[i] - b.g->value[i]) < 1e-12);
  }
  SUBCASE("convex combination stays in the componentwise hull") {
    auto r = vsel::weighted_correlation(
        {corr_of({0.2, -1.0}), corr_of({0.8, 2.0}), corr_of({0.5, 0.0})},
        {ad::constant(0.2), ad::constant(0.5), ad::constant(0.9)});
    REQUIRE(r.valid);
    CHECK(r.g->value[0] >= 0.2);
    CHECK(r.g->value[0] <= 0.8);
    CHECK(r.g->value[1] >= -1.0);
    CHECK(r.g->value[1] <= 2.0);
  }
  SUBCASE("invalid members are dropped; all invalid flags the output") {
    feat::Correlation bad{ad::constant(Array({2})), false};
    auto good = corr_of({0.6, 0.7});
    auto r = vsel::weighted_correlation({bad, good},
                                        {ad::constant(0.9), ad::constant(0.1)});
    REQUIRE(r.valid);
    for (int i = 0; i < 2; ++i)
      CHECK(r.g->value[i] == doctest::Approx(good.g->value[i]).epsilon(1e-12));
    auto all_bad =
        vsel::weighted_correlation({bad, bad}, {ad::constant(0.5),
                                                ad::constant(0.5)});
    CHECK(!all_bad.valid);
  }
  SUBCASE("gradient flows through scores and correlations") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> d(0.0, 1.0);
    auto mkp = [&](std::size_t n) {
      Array a({n});
      for (std::size_t i = 0; i < n; ++i) a[i] = d(rng);
      return ad::param(std::move(a));
    };
    auto g0 = mkp(3), g1 = mkp(3);
    auto v0 = ad::param(Array({1}, {0.6})), v1 = ad::param(Array({1}, {0.3}));
    auto f = [&] {
      auto r = vsel::weighted_correlation({{g0, true}, {g1, true}}, {v0, v1});
      return ad::sum(ad::square(r.g));
    };
    CHECK(fd_max_rel_err({g0, g1, v0, v1}, f) < 1e-6);
  }
}
