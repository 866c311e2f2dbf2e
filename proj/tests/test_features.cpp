#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "fd_check.hpp"
#include "pmrl/features.hpp"
#include "pmrl/scene.hpp"

using namespace pmrl;
using pmrl::testutil::fd_max_rel_err;

namespace {

io::FloatImage noise_image(int w, int h, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  io::FloatImage img(w, h, 1);
  for (auto& v : img.data) v = d(rng);
  return img;
}

}  // namespace

TEST_CASE("pyramid shapes and zero-weight collapse") {
  std::mt19937_64 rng(1);
  nn::ParamStore store;
  auto w = feat::FpnWeights::create(store, rng, 0.3);
  const auto img = noise_image(64, 64, 2);
  const auto pyr = feat::extract_pyramid(img, w);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.level_for(8).fmap->value.shape() ==
        std::vector<std::size_t>{32, 8, 8});
  CHECK(pyr.level_for(4).fmap->value.shape() ==
        std::vector<std::size_t>{16, 16, 16});
  CHECK(pyr.level_for(2).fmap->value.shape() ==
        std::vector<std::size_t>{8, 32, 32});

  // Deterministic given weights.
  const auto pyr2 = feat::extract_pyramid(img, w);
  for (int denom : {8, 4, 2}) {
    const auto& a = pyr.level_for(denom).fmap->value;
    const auto& b = pyr2.level_for(denom).fmap->value;
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
  }

  nn::ParamStore zero_store;
  feat::FpnWeights zw;
  std::mt19937_64 zr(3);
  zw = feat::FpnWeights::create(zero_store, zr, 0.0);
  const auto zpyr = feat::extract_pyramid(img, zw);
  for (const auto& lvl : zpyr.levels)
    for (std::size_t i = 0; i < lvl.fmap->value.numel(); ++i)
      CHECK(lvl.fmap->value[i] == 0.0);
}

TEST_CASE("pyramid gradient vs finite differences") {
  std::mt19937_64 rng(4);
  nn::ParamStore store;
  auto w = feat::FpnWeights::create(store, rng, 0.4);
  const auto img = noise_image(8, 8, 5);
  auto f = [&] {
    const auto pyr = feat::extract_pyramid(img, w);
    ad::NodePtr loss;
    for (const auto& lvl : pyr.levels) {
      auto term = ad::sum(ad::square(lvl.fmap));
      loss = loss ? ad::add(loss, term) : term;
    }
    return loss;
  };
  CHECK(fd_max_rel_err({w.conv1, w.conv2, w.conv3, w.lat1, w.lat2, w.td1,
                        w.td2},
                       f) < 1e-3);
}

TEST_CASE("bilinear sampling") {
  Array a({1, 2, 2});
  a.at3(0, 0, 0) = 0.0;
  a.at3(0, 0, 1) = 0.0;
  a.at3(0, 1, 0) = 4.0;
  a.at3(0, 1, 1) = 4.0;
  auto fm = ad::constant(a);

  SUBCASE("integer coordinates hit the grid exactly") {
    auto s = feat::bilinear_sample(fm, {1.0, 1.0});
    REQUIRE(s.has_value());
    CHECK((*s)->value[0] == 4.0);
  }
  SUBCASE("midpoint of four values averages them") {
    auto s = feat::bilinear_sample(fm, {0.5, 0.5});
    REQUIRE(s.has_value());
    CHECK((*s)->value[0] == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("outside the grid is flagged") {
    CHECK(!feat::bilinear_sample(fm, {-0.1, 0.5}).has_value());
    CHECK(!feat::bilinear_sample(fm, {0.5, 1.0001}).has_value());
  }
  SUBCASE("gradient w.r.t. the feature map") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> d(0.0, 1.0);
    Array big({3, 4, 5});
    for (std::size_t i = 0; i < big.numel(); ++i) big[i] = d(rng);
    auto p = ad::param(big);
    auto f = [&] {
      auto s = feat::bilinear_sample(p, {2.3, 1.7});
      REQUIRE(s.has_value());
      return ad::sum(ad::square(*s));
    };
    CHECK(fd_max_rel_err({p}, f) < 1e-6);
  }
}

TEST_CASE("group correlation analytic cases") {
  auto v = [](std::initializer_list<double> xs) {
    Array a({xs.size()});
    std::size_t i = 0;
    for (double x : xs) a[i++] = x;
    return ad::constant(std::move(a));
  };
  auto g1 = feat::group_correlation(v({1, 0, 1, 0}), v({1, 0, 1, 0}), 2);
  CHECK(g1->value[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(g1->value[1] == doctest::Approx(0.5).epsilon(1e-15));

  auto g2 = feat::group_correlation(v({1, 0, 1, 0}), v({1, 0, 0, 1}), 2);
  CHECK(g2->value[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(g2->value[1] == 0.0);

  // G=1 is the scaled full dot product.
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  Array a({8}), b({8});
  double dp = 0.0;
  for (int i = 0; i < 8; ++i) {
    a[i] = d(rng);
    b[i] = d(rng);
    dp += a[i] * b[i];
  }
  auto g3 = feat::group_correlation(ad::constant(a), ad::constant(b), 1);
  CHECK(std::abs(g3->value[0] - dp / 8.0) < 1e-12);

  CHECK_THROWS_AS(feat::group_correlation(v({1, 0, 1}), v({1, 0, 1}), 2),
                  std::invalid_argument);
}

TEST_CASE("attention weights") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0.0, 1.0);
  Array fm({4, 9, 9});
  for (std::size_t i = 0; i < fm.numel(); ++i) fm[i] = d(rng);
  auto fmap = ad::constant(fm);
  feat::SupportWindow win{3, 3};

  SUBCASE("zero projection gives uniform weights") {
    auto h = ad::constant(Array({4}));
    auto w = feat::attention_weights(fmap, 4, 4, win, h);
    REQUIRE(w->value.numel() == 9);
    for (int i = 0; i < 9; ++i)
      CHECK(w->value[i] == doctest::Approx(1.0 / 9).epsilon(1e-12));
  }
  SUBCASE("a dominant logit takes all the mass") {
    Array spiked = fm;
    Array h({4});
    h[0] = 1.0;
    // Boost channel 0 at the window center only.
    spiked.at3(0, 4, 4) = 500.0;
    auto w = feat::attention_weights(ad::constant(spiked), 4, 4, win,
                                     ad::constant(h));
    CHECK(w->value[4] > 0.999);
  }
  SUBCASE("weights sum to one for random h") {
    Array h({4});
    for (int i = 0; i < 4; ++i) h[i] = d(rng);
    auto w = feat::attention_weights(fmap, 4, 4, win, ad::constant(h));
    double s = 0.0;
    for (int i = 0; i < 9; ++i) {
      CHECK(w->value[i] > 0.0);
      s += w->value[i];
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  SUBCASE("border clamping keeps the distribution well formed") {
    Array h({4});
    h[0] = 0.3;
    auto w = feat::attention_weights(fmap, 0, 0, win, ad::constant(h));
    double s = 0.0;
    for (int i = 0; i < 9; ++i) s += w->value[i];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

namespace {

geom::Camera toy_camera(int wh) {
  geom::Camera cam;
  cam.K << 1.2 * wh, 0, wh / 2.0, 0, 1.2 * wh, wh / 2.0, 0, 0, 1;
  cam.width = wh;
  cam.height = wh;
  cam.d_min = 0.5;
  cam.d_max = 10.0;
  return cam;
}

}  // namespace

TEST_CASE("identity-warp self correlation matches a direct computation") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0.0, 1.0);
  Array fm({8, 16, 16});
  for (std::size_t i = 0; i < fm.numel(); ++i) fm[i] = d(rng);
  auto fmap = ad::constant(fm);
  Array h({8});
  for (int i = 0; i < 8; ++i) h[i] = d(rng);
  auto hn = ad::constant(h);

  const auto cam = toy_camera(16);
  Eigen::Vector3d n(0.1, -0.05, -0.99);
  n.normalize();
  const geom::OrientedPoint omega =
      geom::plane_from_depth_normal(2.0, n, geom::pixel_center(8, 8), cam.K);

  feat::SupportWindow win{3, 2};
  const int px = 8, py = 8, G = 4;
  auto res =
      feat::patch_correlation(omega, px, py, fmap, fmap, cam, cam, win, hn, G);
  REQUIRE(res.valid);

  // Direct oracle: attention-weighted self group correlation, plain doubles.
  std::vector<double> logits;
  std::vector<std::array<double, 4>> corrs;
  for (auto [dx, dy] : win.offsets()) {
    const int qx = std::clamp(px + dx, 0, 15), qy = std::clamp(py + dy, 0, 15);
    double l = 0.0;
    for (int c = 0; c < 8; ++c) l += fm.at3(c, qy, qx) * h[c];
    logits.push_back(l / std::sqrt(8.0));
    std::array<double, 4> gc{};
    for (int g = 0; g < G; ++g)
      for (int c = 2 * g; c < 2 * g + 2; ++c)
        gc[g] += fm.at3(c, qy, qx) * fm.at3(c, qy, qx) * (G / 8.0);
    corrs.push_back(gc);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - mx);
    z += l;
  }
  std::array<double, 4> expect{};
  for (std::size_t i = 0; i < corrs.size(); ++i)
    for (int g = 0; g < G; ++g) expect[g] += logits[i] / z * corrs[i][g];
  for (int g = 0; g < G; ++g) {
    CHECK(std::abs(res.g->value[g] - expect[g]) < 1e-9);
    CHECK(res.g->value[g] >= 0.0);
  }
}

TEST_CASE("all supports out of the source image flags the result") {
  Array fm({4, 8, 8});
  auto fmap = ad::constant(fm);
  auto h = ad::constant(Array({4}));
  auto cam_ref = toy_camera(8);
  auto cam_src = cam_ref;
  cam_src.t = {50.0, 0.0, 0.0};  // warp lands far outside
  geom::OrientedPoint omega = geom::plane_from_depth_normal(
      2.0, {0, 0, -1}, geom::pixel_center(4, 4), cam_ref.K);
  auto res = feat::patch_correlation(omega, 4, 4, fmap, fmap, cam_ref, cam_src,
                                     {3, 1}, h, 4);
  CHECK(!res.valid);
  for (int g = 0; g < 4; ++g) CHECK(res.g->value[g] == 0.0);
}

TEST_CASE("ground-truth plane out-correlates a depth-perturbed plane") {
  synth::SceneConfig cfg;
  cfg.width = 64;
  cfg.height = 64;
  cfg.num_patches = 6;
  cfg.num_cameras = 3;
  const auto scene = synth::generate_scene(11, cfg);
  const auto& cam_ref_full = scene.cameras[0];
  const auto& cam_src_full = scene.cameras[2];  // widest baseline of the arc
  const auto view_ref = synth::render_view(scene, cam_ref_full);
  const auto view_src = synth::render_view(scene, cam_src_full);

  const int denom = 2;
  const auto pyr_ref = feat::extract_pyramid_intensity(view_ref.image);
  const auto pyr_src = feat::extract_pyramid_intensity(view_src.image);
  const auto& fr = pyr_ref.level_for(denom).fmap;
  const auto& fs = pyr_src.level_for(denom).fmap;
  const auto cam_ref = feat::level_camera(cam_ref_full, denom);
  const auto cam_src = feat::level_camera(cam_src_full, denom);
  auto h = ad::constant(Array({1}));
  // A dilated window spans several texture wavelengths, so a wrong-depth
  // warp decorrelates instead of landing on one smooth plateau.
  feat::SupportWindow win{3, 3};

  int total = 0, wins = 0;
  for (int y = 0; y < cam_ref.height; ++y)
    for (int x = 0; x < cam_ref.width; ++x) {
      const auto px = geom::pixel_center(x, y);
      const auto hit = synth::cast_ray(scene, cam_ref, px);
      if (!hit) continue;
      const auto& patch = scene.patches[hit->first];
      // World plane into the reference camera frame, camera-facing.
      Eigen::Vector3d n = cam_ref.R * patch.n;
      double delta = patch.delta + patch.n.dot(cam_ref.center());
      if (n.dot(cam_ref.ray(px)) > 0) {
        n = -n;
        delta = -delta;
      }
      const geom::OrientedPoint gt{n, delta};
      const auto pert = geom::plane_from_depth_normal(
          hit->second * 1.2, n, px, cam_ref.K);

      // The claim is about textured single-surface windows: skip supports
      // that cross a patch boundary or are occluded in the source, and
      // low-contrast windows where any plane correlates equally well.
      bool clean = true;
      double fmin = 1e9, fmax = -1e9;
      const Eigen::Matrix3d Hgt = geom::homography(gt, cam_ref, cam_src);
      for (auto [dx, dy] : win.offsets()) {
        const int qx = std::clamp(x + dx, 0, cam_ref.width - 1);
        const int qy = std::clamp(y + dy, 0, cam_ref.height - 1);
        const auto qhit =
            synth::cast_ray(scene, cam_ref, geom::pixel_center(qx, qy));
        if (!qhit || qhit->first != hit->first) {
          clean = false;
          break;
        }
        Eigen::Vector2d wq;
        if (!geom::apply_homography(Hgt, geom::pixel_center(qx, qy), wq)) {
          clean = false;
          break;
        }
        const auto shit = synth::cast_ray(scene, cam_src, wq);
        if (!shit || shit->first != hit->first) {
          clean = false;
          break;
        }
        fmin = std::min(fmin, fr->value.at3(0, qy, qx));
        fmax = std::max(fmax, fr->value.at3(0, qy, qx));
      }
      if (!clean || fmax - fmin < 0.3) continue;

      auto a = feat::patch_correlation(gt, x, y, fr, fs, cam_ref, cam_src, win,
                                       h, 1);
      auto b = feat::patch_correlation(pert, x, y, fr, fs, cam_ref, cam_src,
                                       win, h, 1);
      if (!a.valid || !b.valid) continue;
      ++total;
      wins += a.g->value[0] >= b.g->value[0];
    }
  REQUIRE(total > 80);
  CHECK(static_cast<double>(wins) / total >= 0.95);
}

TEST_CASE("end-to-end correlation gradient vs finite differences") {
  std::mt19937_64 rng(12);
  nn::ParamStore store;
  auto w = feat::FpnWeights::create(store, rng, 0.3);
  const auto img_ref = noise_image(16, 16, 13);
  const auto img_src = noise_image(16, 16, 14);
  const auto cam = toy_camera(16);
  const auto lcam = feat::level_camera(cam, 4);
  const geom::OrientedPoint omega = geom::plane_from_depth_normal(
      2.0, {0, 0, -1}, geom::pixel_center(2, 2), lcam.K);

  auto f = [&] {
    const auto pr = feat::extract_pyramid(img_ref, w);
    const auto ps = feat::extract_pyramid(img_src, w);
    ad::NodePtr loss;
    for (auto [x, y] : {std::pair{1, 1}, {2, 1}, {2, 2}, {1, 2}, {3, 2}}) {
      auto res = feat::patch_correlation(omega, x, y, pr.level_for(4).fmap,
                                         ps.level_for(4).fmap, lcam, lcam,
                                         {3, 1}, w.h4, 4);
      REQUIRE(res.valid);
      auto term = ad::sum(ad::square(res.g));
      loss = loss ? ad::add(loss, term) : term;
    }
    return loss;
  };
  CHECK(fd_max_rel_err({w.conv1, w.lat2, w.td2, w.h4}, f) < 1e-3);
}
