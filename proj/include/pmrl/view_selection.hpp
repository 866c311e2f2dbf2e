#pragma once

#include <random>
#include <vector>

#include "pmrl/features.hpp"
#include "pmrl/geometry.hpp"
#include "pmrl/nn.hpp"

namespace pmrl::vsel {

using ad::NodePtr;

// Triangulation angle target (radians).
constexpr double kTau0 = 15.0 * M_PI / 180.0;
constexpr double kScaleClampLo = 1.0 / 8.0;
constexpr double kScaleClampHi = 8.0;

struct GeometricPriors {
  double scale_ratio = 1.0;    // source/reference footprint, clamped
  double incident_angle = 0.0; // angle(n, -source ray), [0, pi]
  double tri_angle_diff = 0.0; // |triangulation angle - tau0|
  bool visible = true;         // false: behind a camera / degenerate plane
};

// Priors of the plane point under pixel p of the reference, seen from the
// source camera.
GeometricPriors compute_priors(const geom::OrientedPoint& omega, int px,
                               int py, const geom::Camera& cam_ref,
                               const geom::Camera& cam_src,
                               double tau0 = kTau0);

// Sigmoid MLP over [priors, correlation]: (3+G) -> 16 -> 16 -> 1,
// registered under "vis.*".
struct VisibilityNet {
  nn::Mlp mlp;
  static VisibilityNet create(nn::ParamStore& store, std::mt19937_64& rng,
                              int groups, double stddev = 0.3);
  static VisibilityNet from_store(const nn::ParamStore& store);
};

// v-hat in (0,1); forced to a constant 0 (no graph) when the geometry says
// invisible or the correlation is invalid.
NodePtr visibility_score(const GeometricPriors& priors,
                         const feat::Correlation& corr,
                         const VisibilityNet& net);

enum class SampleMode { kGreedy, kStochastic };

// N view indices. Greedy: top-N by score, ties to the lower id. Stochastic:
// draws without replacement proportional to the scores; if fewer than N
// scores are positive the rest is padded greedily.
std::vector<int> sample_views(const std::vector<double>& vhat, int n,
                              SampleMode mode, std::mt19937_64& rng);

// sum_v vhat_v G_v / sum_v vhat_v over the given (already selected) views;
// invalid members are dropped, an empty valid set flags the result.
feat::Correlation weighted_correlation(
    const std::vector<feat::Correlation>& gs,
    const std::vector<NodePtr>& vhat);

}  // namespace pmrl::vsel
