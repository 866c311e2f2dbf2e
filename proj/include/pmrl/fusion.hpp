#pragma once

#include <string>
#include <vector>

#include "pmrl/geometry.hpp"
#include "pmrl/pfm.hpp"

namespace pmrl::fuse {

struct ConsistencyThresholds {
  double max_reproj_px = 1.0;
  double max_rel_depth = 0.01;
  double max_normal_angle = 10.0 * M_PI / 180.0;
  int min_consistent_views = 2;
};

// One view's estimated maps at the evaluation scale. Depth 0 or negative
// marks an invalid pixel; normals are unit vectors in the camera frame.
struct ViewMaps {
  io::FloatImage depth;   // 1 channel
  io::FloatImage normal;  // 3 channels
  geom::Camera cam;
};

struct FusedPoint {
  Eigen::Vector3d x = Eigen::Vector3d::Zero();  // world
  Eigen::Vector3d n = Eigen::Vector3d::Zero();  // world, unit
  int support = 0;                              // agreeing observations
};

struct PointCloud {
  std::vector<FusedPoint> points;
};

// Number of source views whose depth map agrees with each reference pixel
// under all three checks (reprojection distance, relative depth, normal
// angle). Missing or invalid source depth counts as inconsistent.
std::vector<int> consistency_mask(const ViewMaps& ref,
                                  const std::vector<ViewMaps>& srcs,
                                  const ConsistencyThresholds& th);

// Consensus fusion over all views: every view acts as reference once; a
// pixel with at least min_consistent_views agreeing sources contributes one
// point at the mean of the consistent depths (in the reference frame), with
// the normalized mean of the agreeing normals. Observations already consumed
// by an earlier reference are skipped so surfaces are not duplicated.
PointCloud fuse(const std::vector<ViewMaps>& views,
                const ConsistencyThresholds& th);

struct CloudMetrics {
  double accuracy = 0.0;      // fraction of pred within tau of gt
  double completeness = 0.0;  // fraction of gt within tau of pred
  double f1 = 0.0;
  bool accuracy_defined = false;
  bool completeness_defined = false;
  std::size_t n_pred = 0, n_gt = 0;
};
// Nearest-neighbor queries via a spatial grid hash with cell size tau.
CloudMetrics cloud_metrics(const PointCloud& pred, const PointCloud& gt,
                           double tau);

struct DepthMetrics {
  double mae = 0.0;
  double rmse = 0.0;
  double frac_2pct = 0.0;  // |err|/gt <= 0.02
  double frac_5pct = 0.0;
  bool defined = false;
  int n = 0;
};
// Over mask && gt > 0. Empty mask leaves `defined` false.
DepthMetrics depth_metrics(const io::FloatImage& pred,
                           const io::FloatImage& gt,
                           const std::vector<char>& mask);

// Keep one point per occupied grid cell (the first encountered).
PointCloud dedup_grid(const PointCloud& cloud, double cell);

// Binary little-endian PLY, vertex elements x,y,z,nx,ny,nz as float32.
void write_ply(const std::string& path, const PointCloud& cloud);

}  // namespace pmrl::fuse
