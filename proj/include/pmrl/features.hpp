#pragma once

#include <optional>
#include <random>
#include <vector>

#include "pmrl/geometry.hpp"
#include "pmrl/nn.hpp"
#include "pmrl/pfm.hpp"

namespace pmrl::feat {

using ad::NodePtr;

// One pyramid level: feature map [C, H, W] at 1/denom of input resolution.
struct FeatureLevel {
  int denom = 8;  // 8, 4 or 2
  NodePtr fmap;
};

struct FeaturePyramid {
  std::vector<FeatureLevel> levels;  // coarse to fine: 1/8, 1/4, 1/2
  const FeatureLevel& level_for(int denom) const;
};

// alpha x alpha support window with spacing beta between taps.
struct SupportWindow {
  int size = 3;      // alpha, odd
  int dilation = 3;  // beta
  std::vector<std::pair<int, int>> offsets() const;  // size*size entries
};

// FPN weights: 3 stride-2 stages (8/16/32 channels) plus 1x1 lateral and
// top-down merge convs. Registered under "fpn.*"; the per-level attention
// projections live under "attn.h.*".
struct FpnWeights {
  NodePtr conv1, conv2, conv3;  // [8,1,3,3] [16,8,3,3] [32,16,3,3]
  NodePtr lat1, lat2;           // [8,8,1,1] [16,16,1,1]
  NodePtr td1, td2;             // [8,16,1,1] [16,32,1,1]
  NodePtr h8, h4, h2;           // attention projections [32] [16] [8]

  static FpnWeights create(nn::ParamStore& store, std::mt19937_64& rng,
                           double stddev = 0.2);
  static FpnWeights from_store(const nn::ParamStore& store);
  NodePtr attn_h(int denom) const;
};

// Learned pyramid: channels 32/16/8 at 1/8, 1/4, 1/2. Inputs not divisible
// by 8 are edge-padded on the right/bottom first.
FeaturePyramid extract_pyramid(const io::FloatImage& image,
                               const FpnWeights& w);

// Handcrafted baseline: single-channel mean-pooled intensity, normalized to
// zero mean / unit variance per image, as constants at the same scales.
FeaturePyramid extract_pyramid_intensity(const io::FloatImage& image);

// Bilinear taps for grid coordinate q, where fmap[c][j][i] sits at (i, j).
// nullopt once q leaves [0, w-1] x [0, h-1].
std::optional<std::vector<ad::GatherTap>> bilinear_taps(
    int width, int height, const Eigen::Vector2d& q);

// Interpolated feature column [C]; nullopt outside the map.
std::optional<NodePtr> bilinear_sample(const NodePtr& fmap,
                                       const Eigen::Vector2d& q);

// g-th entry = (G/C) <f_ref|_g, f_src|_g>. C must divide by G.
NodePtr group_correlation(const NodePtr& f_ref, const NodePtr& f_src,
                          int groups);

// How a ref/src feature pair is turned into a per-group score.
enum class CorrKind {
  kDot,     // learned features: group inner product
  kNegSsd,  // handcrafted intensity path: photo-consistency -(G/C)*||a-b||^2
};

// Softmax over the window of (F^r_q . h) / sqrt(C), offsets clamped to the
// image bounds. Shared across source views.
NodePtr attention_weights(const NodePtr& fmap_ref, int px, int py,
                          const SupportWindow& window, const NodePtr& h);

struct Correlation {
  NodePtr g;           // [G]; zeros when invalid
  bool valid = false;
};

// Attention-aggregated group correlation of the plane-induced warp of the
// support window into the source view. Invalid when the plane is degenerate
// or more than half the warped supports leave the source image; attention
// mass is renormalized over the surviving supports.
Correlation patch_correlation(const geom::OrientedPoint& omega, int px, int py,
                              const NodePtr& fmap_ref, const NodePtr& fmap_src,
                              const geom::Camera& cam_ref,
                              const geom::Camera& cam_src,
                              const SupportWindow& window, const NodePtr& h,
                              int groups, CorrKind kind = CorrKind::kDot);

// Camera for a pyramid level: intrinsics and extents divided by denom.
geom::Camera level_camera(const geom::Camera& cam, int denom);

}  // namespace pmrl::feat
