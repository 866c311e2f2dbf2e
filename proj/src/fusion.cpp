#include "pmrl/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <unordered_map>

namespace pmrl::fuse {

namespace {

struct Observation {
  int view = -1;
  int px = 0, py = 0;
  double ref_depth = 0.0;          // depth of the source point in the
                                   // reference camera (for the consensus)
  Eigen::Vector3d n_world = Eigen::Vector3d::Zero();
};

bool valid_depth(const io::FloatImage& depth, int x, int y) {
  const float d = depth.at(x, y);
  return std::isfinite(d) && d > 0.0f;
}

Eigen::Vector3d world_normal(const ViewMaps& v, int x, int y) {
  const Eigen::Vector3d nc(v.normal.at(x, y, 0), v.normal.at(x, y, 1),
                           v.normal.at(x, y, 2));
  return v.cam.R.transpose() * nc;
}

// Checks reference pixel (x, y) against one source view. On success fills
// the source observation used for the consensus.
bool consistent(const ViewMaps& ref, int x, int y, const ViewMaps& src,
                const ConsistencyThresholds& th, Observation* obs) {
  const double d = ref.depth.at(x, y);
  const Eigen::Vector2d p = geom::pixel_center(x, y);
  const Eigen::Vector3d xw = geom::unproject(ref.cam, p, d);
  Eigen::Vector2d q;
  try {
    q = geom::project(src.cam, xw).first;
  } catch (const geom::BehindCameraError&) {
    return false;
  }
  const int sx = static_cast<int>(std::floor(q.x()));
  const int sy = static_cast<int>(std::floor(q.y()));
  if (sx < 0 || sy < 0 || sx >= src.cam.width || sy >= src.cam.height)
    return false;
  if (!valid_depth(src.depth, sx, sy)) return false;

  const Eigen::Vector3d xs =
      geom::unproject(src.cam, geom::pixel_center(sx, sy), src.depth.at(sx, sy));
  Eigen::Vector2d back;
  double d_back;
  try {
    std::tie(back, d_back) = geom::project(ref.cam, xs);
  } catch (const geom::BehindCameraError&) {
    return false;
  }
  if ((back - p).norm() > th.max_reproj_px) return false;
  if (std::abs(d_back - d) / d > th.max_rel_depth) return false;

  const Eigen::Vector3d nr = world_normal(ref, x, y);
  const Eigen::Vector3d ns = world_normal(src, sx, sy);
  const double c = std::clamp(nr.normalized().dot(ns.normalized()), -1.0, 1.0);
  if (std::acos(c) > th.max_normal_angle) return false;

  if (obs) {
    obs->px = sx;
    obs->py = sy;
    obs->ref_depth = d_back;
    obs->n_world = ns;
  }
  return true;
}

}  // namespace

std::vector<int> consistency_mask(const ViewMaps& ref,
                                  const std::vector<ViewMaps>& srcs,
                                  const ConsistencyThresholds& th) {
  std::vector<int> count(
      static_cast<std::size_t>(ref.cam.width) * ref.cam.height, 0);
  for (int y = 0; y < ref.cam.height; ++y)
    for (int x = 0; x < ref.cam.width; ++x) {
      if (!valid_depth(ref.depth, x, y)) continue;
      int c = 0;
      for (const auto& src : srcs)
        c += consistent(ref, x, y, src, th, nullptr);
      count[static_cast<std::size_t>(y) * ref.cam.width + x] = c;
    }
  return count;
}

PointCloud fuse(const std::vector<ViewMaps>& views,
                const ConsistencyThresholds& th) {
  PointCloud cloud;
  std::vector<std::vector<char>> used(views.size());
  for (std::size_t v = 0; v < views.size(); ++v)
    used[v].assign(
        static_cast<std::size_t>(views[v].cam.width) * views[v].cam.height, 0);

  for (std::size_t r = 0; r < views.size(); ++r) {
    const auto& ref = views[r];
    for (int y = 0; y < ref.cam.height; ++y)
      for (int x = 0; x < ref.cam.width; ++x) {
        const std::size_t ri = static_cast<std::size_t>(y) * ref.cam.width + x;
        if (used[r][ri] || !valid_depth(ref.depth, x, y)) continue;
        std::vector<Observation> agree;
        for (std::size_t s = 0; s < views.size(); ++s) {
          if (s == r) continue;
          Observation obs;
          obs.view = static_cast<int>(s);
          if (!consistent(ref, x, y, views[s], th, &obs)) continue;
          const std::size_t si =
              static_cast<std::size_t>(obs.py) * views[s].cam.width + obs.px;
          if (used[s][si]) continue;
          agree.push_back(obs);
        }
        if (static_cast<int>(agree.size()) < th.min_consistent_views) continue;

        double depth_sum = ref.depth.at(x, y);
        Eigen::Vector3d n_sum = world_normal(ref, x, y);
        for (const auto& o : agree) {
          depth_sum += o.ref_depth;
          n_sum += o.n_world;
          used[o.view][static_cast<std::size_t>(o.py) * views[o.view].cam.width +
                       o.px] = 1;
        }
        used[r][ri] = 1;
        FusedPoint fp;
        fp.support = static_cast<int>(agree.size()) + 1;
        fp.x = geom::unproject(ref.cam, geom::pixel_center(x, y),
                               depth_sum / fp.support);
        fp.n = n_sum.normalized();
        cloud.points.push_back(fp);
      }
  }
  return cloud;
}

namespace {

struct CellKey {
  std::int64_t x, y, z;
  bool operator==(const CellKey& o) const {
    return x == o.x && y == o.y && z == o.z;
  }
};
struct CellHash {
  std::size_t operator()(const CellKey& k) const {
    std::size_t h = static_cast<std::size_t>(k.x) * 73856093ULL;
    h ^= static_cast<std::size_t>(k.y) * 19349663ULL;
    h ^= static_cast<std::size_t>(k.z) * 83492791ULL;
    return h;
  }
};

CellKey cell_of(const Eigen::Vector3d& p, double cell) {
  return {static_cast<std::int64_t>(std::floor(p.x() / cell)),
          static_cast<std::int64_t>(std::floor(p.y() / cell)),
          static_cast<std::int64_t>(std::floor(p.z() / cell))};
}

using Grid = std::unordered_map<CellKey, std::vector<std::size_t>, CellHash>;

Grid build_grid(const PointCloud& cloud, double cell) {
  Grid g;
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    g[cell_of(cloud.points[i].x, cell)].push_back(i);
  return g;
}

// Any point of `cloud` within tau of p? Cells are tau-sized, so the 27
// neighboring cells cover the ball.
bool has_neighbor(const Eigen::Vector3d& p, const PointCloud& cloud,
                  const Grid& grid, double tau) {
  const CellKey c = cell_of(p, tau);
  for (std::int64_t dz = -1; dz <= 1; ++dz)
    for (std::int64_t dy = -1; dy <= 1; ++dy)
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const auto it = grid.find({c.x + dx, c.y + dy, c.z + dz});
        if (it == grid.end()) continue;
        for (std::size_t i : it->second)
          if ((cloud.points[i].x - p).norm() <= tau) return true;
      }
  return false;
}

}  // namespace

CloudMetrics cloud_metrics(const PointCloud& pred, const PointCloud& gt,
                           double tau) {
  CloudMetrics m;
  m.n_pred = pred.points.size();
  m.n_gt = gt.points.size();
  const Grid gt_grid = build_grid(gt, tau);
  const Grid pred_grid = build_grid(pred, tau);
  if (!pred.points.empty()) {
    std::size_t hit = 0;
    for (const auto& p : pred.points)
      hit += has_neighbor(p.x, gt, gt_grid, tau);
    m.accuracy = static_cast<double>(hit) / pred.points.size();
    m.accuracy_defined = true;
  }
  if (!gt.points.empty()) {
    std::size_t hit = 0;
    for (const auto& p : gt.points)
      hit += has_neighbor(p.x, pred, pred_grid, tau);
    m.completeness = static_cast<double>(hit) / gt.points.size();
    m.completeness_defined = true;
  }
  if (m.accuracy_defined && m.completeness_defined &&
      m.accuracy + m.completeness > 0.0)
    m.f1 = 2.0 * m.accuracy * m.completeness / (m.accuracy + m.completeness);
  return m;
}

DepthMetrics depth_metrics(const io::FloatImage& pred,
                           const io::FloatImage& gt,
                           const std::vector<char>& mask) {
  if (pred.width != gt.width || pred.height != gt.height)
    throw std::invalid_argument("depth_metrics: shape mismatch");
  if (mask.size() != static_cast<std::size_t>(gt.width) * gt.height)
    throw std::invalid_argument("depth_metrics: mask size mismatch");
  DepthMetrics m;
  double se = 0.0;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * gt.width + x;
      if (!mask[i] || !(gt.at(x, y) > 0.0f)) continue;
      const double err = std::abs(pred.at(x, y) - gt.at(x, y));
      const double rel = err / gt.at(x, y);
      m.mae += err;
      se += err * err;
      m.frac_2pct += rel <= 0.02;
      m.frac_5pct += rel <= 0.05;
      ++m.n;
    }
  if (m.n) {
    m.mae /= m.n;
    m.rmse = std::sqrt(se / m.n);
    m.frac_2pct /= m.n;
    m.frac_5pct /= m.n;
    m.defined = true;
  }
  return m;
}

PointCloud dedup_grid(const PointCloud& cloud, double cell) {
  PointCloud out;
  std::unordered_map<CellKey, char, CellHash> seen;
  for (const auto& p : cloud.points)
    if (seen.emplace(cell_of(p.x, cell), 1).second) out.points.push_back(p);
  return out;
}

void write_ply(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ply: cannot open " + path);
  out << "ply\nformat binary_little_endian 1.0\n"
      << "element vertex " << cloud.points.size() << "\n"
      << "property float x\nproperty float y\nproperty float z\n"
      << "property float nx\nproperty float ny\nproperty float nz\n"
      << "end_header\n";
  for (const auto& p : cloud.points) {
    const float v[6] = {static_cast<float>(p.x.x()), static_cast<float>(p.x.y()),
                        static_cast<float>(p.x.z()), static_cast<float>(p.n.x()),
                        static_cast<float>(p.n.y()), static_cast<float>(p.n.z())};
    out.write(reinterpret_cast<const char*>(v), sizeof(v));
  }
  if (!out) throw std::runtime_error("write_ply: write failed for " + path);
}

}  // namespace pmrl::fuse
