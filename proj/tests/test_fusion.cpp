#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "pmrl/fusion.hpp"

using namespace pmrl;

namespace {

geom::Camera make_cam(const Eigen::Vector3d& center, int w = 12, int h = 10) {
  geom::Camera cam;
  cam.width = w;
  cam.height = h;
  cam.K << 15.0, 0.0, w / 2.0, 0.0, 15.0, h / 2.0, 0.0, 0.0, 1.0;
  cam.R = Eigen::Matrix3d::Identity();
  cam.t = -center;
  cam.d_min = 0.5;
  cam.d_max = 10.0;
  return cam;
}

// Maps of the world plane n_w . X + delta = 0, exact.
fuse::ViewMaps plane_view(const geom::Camera& cam, const Eigen::Vector3d& n_w,
                          double delta) {
  fuse::ViewMaps v;
  v.cam = cam;
  v.depth = io::FloatImage(cam.width, cam.height, 1);
  v.normal = io::FloatImage(cam.width, cam.height, 3);
  // Plane in the camera frame: X_w = R^T (X_c - t) turns n_w . X_w + delta
  // into n_c . X_c + (delta - n_c . t) with n_c = R n_w.
  const Eigen::Vector3d nf = cam.R * n_w;
  const double df = delta - nf.dot(cam.t);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const auto p = geom::pixel_center(x, y);
      Eigen::Vector3d n_use = nf;
      double d_use = df;
      if (n_use.dot(cam.ray(p)) > 0) {
        n_use = -n_use;
        d_use = -d_use;
      }
      const double d = geom::depth_from_plane({n_use, d_use}, p, cam.K);
      v.depth.at(x, y) = static_cast<float>(d);
      for (int c = 0; c < 3; ++c)
        v.normal.at(x, y, c) = static_cast<float>(n_use[c]);
    }
  return v;
}

double plane_residual(const Eigen::Vector3d& x, const Eigen::Vector3d& n_w,
                      double delta) {
  return std::abs(n_w.dot(x) + delta);
}

}  // namespace

TEST_CASE("consistency: exact plane maps agree across views") {
  const Eigen::Vector3d n_w(0, 0, -1);
  const double delta = 3.0;
  std::vector<fuse::ViewMaps> views{
      plane_view(make_cam({0, 0, 0}), n_w, delta),
      plane_view(make_cam({0.3, 0, 0}), n_w, delta),
      plane_view(make_cam({0, 0.25, 0}), n_w, delta)};
  fuse::ConsistencyThresholds th;

  const auto count = consistency_mask(views[0], {views[1], views[2]}, th);
  int full = 0;
  for (int y = 0; y < views[0].cam.height; ++y)
    for (int x = 0; x < views[0].cam.width; ++x) {
      // Sources whose landing pixel stays in bounds must agree.
      const auto xw = geom::unproject(views[0].cam, geom::pixel_center(x, y),
                                      views[0].depth.at(x, y));
      int in_bounds = 0;
      for (int s = 1; s <= 2; ++s) {
        const auto q = geom::project(views[s].cam, xw).first;
        const int sx = static_cast<int>(std::floor(q.x()));
        const int sy = static_cast<int>(std::floor(q.y()));
        in_bounds += sx >= 0 && sy >= 0 && sx < views[s].cam.width &&
                     sy < views[s].cam.height;
      }
      CHECK(count[y * views[0].cam.width + x] == in_bounds);
      full += in_bounds == 2;
    }
  CHECK(full > 40);  // the checks exercise the both-sources path
}

TEST_CASE("consistency: a depth-scaled source fails everywhere") {
  const Eigen::Vector3d n_w(0, 0, -1);
  std::vector<fuse::ViewMaps> views{plane_view(make_cam({0, 0, 0}), n_w, 3.0),
                                    plane_view(make_cam({0.3, 0, 0}), n_w, 3.0)};
  for (auto& d : views[1].depth.data) d *= 2.0f;
  fuse::ConsistencyThresholds th;
  const auto count = consistency_mask(views[0], {views[1]}, th);
  for (int c : count) CHECK(c == 0);
}

TEST_CASE("consistency: hand-enumerated three-view 2x2 case") {
  // Identical poses: the landing pixel is the reference pixel itself, so the
  // outcome per (pixel, source) is hand-computable from the raw values.
  const Eigen::Vector3d n_w(0, 0, -1);
  const auto cam = make_cam({0, 0, 0}, 2, 2);
  std::vector<fuse::ViewMaps> views{plane_view(cam, n_w, 3.0),
                                    plane_view(cam, n_w, 3.0),
                                    plane_view(cam, n_w, 3.0)};
  // Source 1: pixel (1,0) depth off by 3% (> 1% threshold).
  views[1].depth.at(1, 0) *= 1.03f;
  // Source 2: pixel (0,1) normal tilted by 20 degrees (> 10 threshold).
  const double a = 20.0 * M_PI / 180.0;
  views[2].normal.at(0, 1, 0) = static_cast<float>(std::sin(a));
  views[2].normal.at(0, 1, 2) = static_cast<float>(-std::cos(a));
  // Source 2: pixel (1,1) invalid depth.
  views[2].depth.at(1, 1) = 0.0f;

  fuse::ConsistencyThresholds th;
  const auto count = consistency_mask(views[0], {views[1], views[2]}, th);
  CHECK(count[0] == 2);  // (0,0): both agree
  CHECK(count[1] == 1);  // (1,0): source 1 depth off
  CHECK(count[2] == 1);  // (0,1): source 2 normal off
  CHECK(count[3] == 1);  // (1,1): source 2 invalid
}

TEST_CASE("fusion: perfect maps fuse onto the plane") {
  fuse::ConsistencyThresholds th;

  SUBCASE("fronto-parallel plane is exact") {
    // Constant depth: the consensus average cannot move off the plane.
    const Eigen::Vector3d n_w(0, 0, -1);
    std::vector<fuse::ViewMaps> views{
        plane_view(make_cam({0, 0, 0}), n_w, 3.0),
        plane_view(make_cam({0.3, 0, 0}), n_w, 3.0),
        plane_view(make_cam({0, 0.25, 0}), n_w, 3.0)};
    const auto cloud = fuse::fuse(views, th);
    REQUIRE(!cloud.points.empty());
    for (const auto& p : cloud.points) {
      CHECK(plane_residual(p.x, n_w, 3.0) < 1e-5);
      CHECK(p.support >= th.min_consistent_views + 1);
      CHECK(std::abs(std::abs(p.n.dot(n_w)) - 1.0) < 1e-6);
    }
  }

  SUBCASE("tilted plane within a pixel footprint") {
    // Source depths are read at integer pixels, up to half a pixel away from
    // the exact reprojection, so the consensus depth carries an error of the
    // order of the pixel footprint times the plane slope (~5e-3 here).
    const Eigen::Vector3d n_unit = Eigen::Vector3d(0.2, -0.1, -1.0).normalized();
    const double delta = 3.0 / Eigen::Vector3d(0.2, -0.1, -1.0).norm();
    std::vector<fuse::ViewMaps> views{
        plane_view(make_cam({0, 0, 0}), n_unit, delta),
        plane_view(make_cam({0.3, 0, 0}), n_unit, delta),
        plane_view(make_cam({0, 0.25, 0}), n_unit, delta)};
    const auto cloud = fuse::fuse(views, th);
    REQUIRE(!cloud.points.empty());
    for (const auto& p : cloud.points) {
      CHECK(plane_residual(p.x, n_unit, delta) < 0.02);
      CHECK(p.support >= th.min_consistent_views + 1);
      CHECK(std::abs(std::abs(p.n.dot(n_unit)) - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("fusion: thresholds and empties") {
  fuse::ConsistencyThresholds th;
  SUBCASE("empty input") { CHECK(fuse::fuse({}, th).points.empty()); }
  SUBCASE("one agreeing source is below the minimum") {
    const Eigen::Vector3d n_w(0, 0, -1);
    std::vector<fuse::ViewMaps> views{
        plane_view(make_cam({0, 0, 0}), n_w, 3.0),
        plane_view(make_cam({0.3, 0, 0}), n_w, 3.0)};
    CHECK(th.min_consistent_views == 2);
    CHECK(fuse::fuse(views, th).points.empty());
    fuse::ConsistencyThresholds loose = th;
    loose.min_consistent_views = 1;
    CHECK(!fuse::fuse(views, loose).points.empty());
  }
}

TEST_CASE("fusion: view order does not change the point set") {
  // Identical poses make the consensus groups themselves symmetric, so any
  // processing order must produce the same set.
  const Eigen::Vector3d n_w(0, 0, -1);
  const auto cam = make_cam({0, 0, 0});
  std::vector<fuse::ViewMaps> views{plane_view(cam, n_w, 3.0),
                                    plane_view(cam, n_w, 3.0),
                                    plane_view(cam, n_w, 3.0)};
  fuse::ConsistencyThresholds th;
  auto a = fuse::fuse(views, th);
  std::swap(views[0], views[2]);
  auto b = fuse::fuse(views, th);
  REQUIRE(a.points.size() == b.points.size());
  auto key = [](const fuse::FusedPoint& p, const fuse::FusedPoint& q) {
    return std::lexicographical_compare(p.x.data(), p.x.data() + 3,
                                        q.x.data(), q.x.data() + 3);
  };
  std::sort(a.points.begin(), a.points.end(), key);
  std::sort(b.points.begin(), b.points.end(), key);
  for (std::size_t i = 0; i < a.points.size(); ++i)
    CHECK((a.points[i].x - b.points[i].x).norm() < 1e-12);
}

TEST_CASE("cloud metrics: anchors and brute-force oracle") {
  auto cloud_of = [](std::initializer_list<Eigen::Vector3d> pts) {
    fuse::PointCloud c;
    for (const auto& p : pts) c.points.push_back({p, {0, 0, 1}, 2});
    return c;
  };

  SUBCASE("identical clouds") {
    const auto c = cloud_of({{0, 0, 0}, {1, 0, 0}, {0, 2, 0}});
    const auto m = fuse::cloud_metrics(c, c, 0.02);
    CHECK(m.accuracy == 1.0);
    CHECK(m.completeness == 1.0);
    CHECK(m.f1 == 1.0);
  }

  SUBCASE("harmonic mean at half precision, half recall") {
    const auto pred = cloud_of({{0, 0, 0}, {5, 0, 0}});
    const auto gt = cloud_of({{0, 0, 0}, {9, 9, 9}});
    const auto m = fuse::cloud_metrics(pred, gt, 0.1);
    CHECK(m.accuracy == 0.5);
    CHECK(m.completeness == 0.5);
    CHECK(m.f1 == doctest::Approx(0.5));
  }

  SUBCASE("empty sides") {
    const auto c = cloud_of({{0, 0, 0}});
    const auto m1 = fuse::cloud_metrics({}, c, 0.1);
    CHECK(!m1.accuracy_defined);
    CHECK(m1.completeness_defined);
    CHECK(m1.f1 == 0.0);
    const auto m2 = fuse::cloud_metrics(c, {}, 0.1);
    CHECK(!m2.completeness_defined);
  }

  SUBCASE("random clouds vs all-pairs distances") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    fuse::PointCloud pred, gt;
    for (int i = 0; i < 40; ++i)
      pred.points.push_back({{u(rng), u(rng), u(rng)}, {0, 0, 1}, 2});
    for (int i = 0; i < 30; ++i)
      gt.points.push_back({{u(rng), u(rng), u(rng)}, {0, 0, 1}, 2});
    const double tau = 0.25;
    const auto m = fuse::cloud_metrics(pred, gt, tau);
    int acc = 0, comp = 0;
    for (const auto& p : pred.points) {
      double best = 1e9;
      for (const auto& g : gt.points)
        best = std::min(best, (p.x - g.x).norm());
      acc += best <= tau;
    }
    for (const auto& g : gt.points) {
      double best = 1e9;
      for (const auto& p : pred.points)
        best = std::min(best, (p.x - g.x).norm());
      comp += best <= tau;
    }
    CHECK(m.accuracy == doctest::Approx(acc / 40.0));
    CHECK(m.completeness == doctest::Approx(comp / 30.0));
    CHECK(m.f1 >= std::min(m.accuracy, m.completeness));
    CHECK(m.f1 <= std::max(m.accuracy, m.completeness));
  }
}

TEST_CASE("depth metrics") {
  io::FloatImage gt(4, 3, 1), pred(4, 3, 1);
  std::vector<char> mask(12, 1);
  for (auto& v : gt.data) v = 2.0f;

  SUBCASE("exact prediction") {
    pred = gt;
    const auto m = fuse::depth_metrics(pred, gt, mask);
    CHECK(m.defined);
    CHECK(m.mae == 0.0);
    CHECK(m.rmse == 0.0);
    CHECK(m.frac_2pct == 1.0);
  }

  SUBCASE("constant offset") {
    for (int i = 0; i < 12; ++i) pred.data[i] = 2.1f;
    const auto m = fuse::depth_metrics(pred, gt, mask);
    CHECK(m.mae == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(m.rmse == doctest::Approx(0.1).epsilon(1e-6));
    CHECK(m.frac_2pct == 0.0);  // 5% relative error
    CHECK(m.frac_5pct == 1.0);
  }

  SUBCASE("empty mask is flagged") {
    std::fill(mask.begin(), mask.end(), 0);
    CHECK(!fuse::depth_metrics(pred, gt, mask).defined);
  }

  SUBCASE("random case equals the scalar loop") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> u(1.0f, 4.0f);
    for (int i = 0; i < 12; ++i) {
      gt.data[i] = u(rng);
      pred.data[i] = u(rng);
      mask[i] = i % 3 != 0;
    }
    const auto m = fuse::depth_metrics(pred, gt, mask);
    double mae = 0, se = 0, f2 = 0, f5 = 0;
    int n = 0;
    for (int i = 0; i < 12; ++i) {
      if (!mask[i]) continue;
      const double e = std::abs(double(pred.data[i]) - double(gt.data[i]));
      mae += e;
      se += e * e;
      f2 += e / gt.data[i] <= 0.02;
      f5 += e / gt.data[i] <= 0.05;
      ++n;
    }
    CHECK(m.n == n);
    CHECK(m.mae == doctest::Approx(mae / n).epsilon(1e-12));
    CHECK(m.rmse == doctest::Approx(std::sqrt(se / n)).epsilon(1e-12));
    CHECK(m.frac_2pct == doctest::Approx(f2 / n));
    CHECK(m.frac_5pct == doctest::Approx(f5 / n));
  }
}

TEST_CASE("grid dedup keeps one point per cell") {
  fuse::PointCloud c;
  c.points.push_back({{0.01, 0.01, 0.01}, {0, 0, 1}, 2});
  c.points.push_back({{0.02, 0.02, 0.02}, {0, 0, 1}, 2});  // same 0.1 cell
  c.points.push_back({{0.55, 0.0, 0.0}, {0, 0, 1}, 2});
  const auto d = fuse::dedup_grid(c, 0.1);
  REQUIRE(d.points.size() == 2);
  CHECK(d.points[0].x == Eigen::Vector3d(0.01, 0.01, 0.01));
}

TEST_CASE("binary PLY layout") {
  fuse::PointCloud c;
  c.points.push_back({{1.0, 2.0, 3.0}, {0, 0, 1}, 2});
  c.points.push_back({{-4.0, 5.5, -6.25}, {1, 0, 0}, 3});
  const auto path =
      (std::filesystem::temp_directory_path() / "pmrl_test.ply").string();
  fuse::write_ply(path, c);

  std::ifstream in(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
  const std::string header =
      "ply\nformat binary_little_endian 1.0\nelement vertex 2\n"
      "property float x\nproperty float y\nproperty float z\n"
      "property float nx\nproperty float ny\nproperty float nz\nend_header\n";
  REQUIRE(content.size() == header.size() + 2 * 6 * sizeof(float));
  CHECK(content.compare(0, header.size(), header) == 0);
  float v[12];
  std::memcpy(v, content.data() + header.size(), sizeof(v));
  CHECK(v[0] == 1.0f);
  CHECK(v[2] == 3.0f);
  CHECK(v[5] == 1.0f);
  CHECK(v[6] == -4.0f);
  CHECK(v[8] == -6.25f);
  std::filesystem::remove(path);
}
