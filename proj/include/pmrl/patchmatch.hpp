#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "pmrl/features.hpp"
#include "pmrl/geometry.hpp"
#include "pmrl/nn.hpp"
#include "pmrl/pfm.hpp"
#include "pmrl/view_selection.hpp"

namespace pmrl::pm {

using ad::NodePtr;

// Checkerboard-compatible propagation kernels: every offset has an odd
// coordinate sum, so candidates always come from the opposite parity.
struct Kernel {
  std::vector<std::pair<int, int>> offsets;  // (dx, dy)
};
Kernel kernel_a();  // 4-neighborhood
Kernel kernel_b();  // + knight-move ring, 8 offsets
Kernel kernel_c();  // + long axial jumps for the coarsest level

struct PerturbConfig {
  double rho0 = 0.2, rho1 = 0.02;                  // depth factor range
  double eta0 = 30.0 * M_PI / 180.0;               // normal cone start
  double eta1 = 5.0 * M_PI / 180.0;                // normal cone end
  // Geometric decay across the iterations of one scale.
  double rho(int it, int iters) const;
  double eta(int it, int iters) const;
};

// Per-pixel stacked-GRU hidden states, L layers of width dh.
struct HiddenMap {
  int width = 0, height = 0, layers = 0, dh = 0;
  std::vector<double> data;

  HiddenMap() = default;
  HiddenMap(int w, int h, int l, int d)
      : width(w), height(h), layers(l), dh(d),
        data(static_cast<std::size_t>(w) * h * l * d, 0.0) {}
  double* at(int x, int y, int layer) {
    return data.data() + ((static_cast<std::size_t>(y) * width + x) * layers +
                          layer) * dh;
  }
  const double* at(int x, int y, int layer) const {
    return const_cast<HiddenMap*>(this)->at(x, y, layer);
  }
};

// L stacked GRU cells over [correlation, smoothness] inputs plus a linear
// score head; registered under "gru.*".
struct GruStack {
  std::vector<nn::GruWeights> layers;
  NodePtr head_w, head_b;  // [1, dh], [1]
  int dh = 8;

  static GruStack create(nn::ParamStore& store, std::mt19937_64& rng, int din,
                         int dh = 8, int n_layers = 3, double stddev = 0.3);
  static GruStack from_store(const nn::ParamStore& store);
};

// Everything learned, or the handcrafted-equivalent baseline (identity
// intensity features, h = 0, G = 1, score = mean correlation, no GRU).
struct PipelineWeights {
  bool baseline = false;
  int groups = 4;
  feat::FpnWeights fpn;
  vsel::VisibilityNet vis;
  GruStack gru;

  static PipelineWeights create(nn::ParamStore& store, std::mt19937_64& rng,
                                int groups = 4);
  static PipelineWeights from_store(const nn::ParamStore& store,
                                    int groups = 4);
  static PipelineWeights make_baseline();
};

// One inverse-depth-uniform, Gaussian-normal draw at pixel center p; also the
// per-sweep random-search candidate.
geom::OrientedPoint random_point(const Eigen::Vector2d& p,
                                 const geom::Camera& cam,
                                 std::mt19937_64& rng);

// Inverse-depth-uniform depths, Gaussian unit normals flipped camera-facing.
geom::OrientedPointMap init_map(std::uint64_t seed, const geom::Camera& cam);

// [4,H,W] tensor (n, delta) of the plane map.
Array plane_tensor(const geom::OrientedPointMap& map);

// One shifted copy of the plane tensor per kernel offset, realized as
// one-hot convolution filters; out-of-border entries are all-zero.
std::vector<Array> shift_plane_maps(const Array& planes, const Kernel& k);

// M(a,b) = |n_a.X_b + delta_a| + |n_b.X_a + delta_b| with X the pixels' 3D
// points under their own plane; `sentinel` on degenerate planes.
double smoothness(const geom::OrientedPoint& a, const geom::OrientedPoint& b,
                  const Eigen::Vector2d& p, const Eigen::Vector2d& q,
                  const Eigen::Matrix3d& K, double sentinel);

// Candidate scores via the stacked GRU + head; zeta_next holds each
// candidate's would-be hidden state (values only: hidden states are inputs,
// not differentiated through time).
struct Regularized {
  std::vector<NodePtr> z;                        // null for invalid
  std::vector<std::vector<Array>> zeta_next;     // [candidate][layer]
};
Regularized regularize_scores(const std::vector<feat::Correlation>& gv,
                              const std::vector<bool>& valid,
                              const std::vector<std::array<double, 4>>& smooth,
                              const HiddenMap& hidden, int x, int y,
                              const GruStack& gru);

// Depth scaled by uniform[1-rho, 1+rho] (clamped to the camera's range),
// normal rotated by at most eta within the camera-facing hemisphere.
geom::OrientedPoint perturb_point(const geom::OrientedPoint& cur,
                                  const Eigen::Vector2d& p,
                                  const geom::Camera& cam, double rho,
                                  double eta, std::mt19937_64& rng);

// Greedy argmax with ties resolved to the current candidate, then the
// lowest index; -1 if nothing is valid.
int select_greedy(const std::vector<double>& z, const std::vector<bool>& valid,
                  int current_idx);
// epsilon-greedy: softmax sample over valid candidates with probability
// epsilon, otherwise greedy.
int select_epsilon(const std::vector<double>& z,
                   const std::vector<bool>& valid, int current_idx,
                   double epsilon, std::mt19937_64& rng);

// Nearest-neighbor upsampling; depth and normal preserved, delta
// re-anchored on the fine pixel's ray.
geom::OrientedPointMap upsample_map(const geom::OrientedPointMap& coarse,
                                    const geom::Camera& cam_coarse,
                                    const geom::Camera& cam_fine);
HiddenMap upsample_hidden(const HiddenMap& coarse, int fine_w, int fine_h);

struct EngineConfig {
  std::vector<int> denoms{8, 4, 2};
  std::vector<int> iters{8, 2, 2};
  feat::SupportWindow window{3, 3};
  int n_views = 3;                 // selected source views per pixel
  int m_worst = 2;                 // worst views in the training denominator
  bool long_range_coarsest = true; // kernel-C at the coarsest level
  PerturbConfig perturb;
  double smooth_sentinel = 10.0;
  double baseline_smooth_weight = 0.25;  // handcrafted path only
  std::uint64_t seed = 0;
};

// Hook interface driving one episode. The default implementation is pure
// greedy inference; training overrides the decisions and observes nodes.
class EpisodeHooks {
 public:
  virtual ~EpisodeHooks() = default;
  virtual void select_views(int step, int x, int y,
                            const std::vector<double>& vhat, int n, int m,
                            std::mt19937_64& rng, std::vector<int>& views,
                            std::vector<int>& worst);
  virtual int choose(int step, int x, int y, const std::vector<double>& z,
                     const std::vector<bool>& valid, int current_idx,
                     std::mt19937_64& rng);
  // Candidate-level graph access (training pass 2). z entries are null for
  // invalid candidates; vhat is per source view.
  virtual void on_pixel(int step, int x, int y,
                        const std::vector<NodePtr>& z,
                        const std::vector<bool>& valid,
                        const std::vector<geom::OrientedPoint>& cand,
                        int current_idx, int chosen,
                        const std::vector<NodePtr>& vhat,
                        const std::vector<int>& views,
                        const std::vector<int>& worst) {}
  // Right after the coarsest-scale random initialization; tests may replace
  // the starting map.
  virtual void on_init(geom::OrientedPointMap& map, const geom::Camera& lcam) {}
  // Before a parity sweep reads the map (candidate lists are built from
  // exactly this state).
  virtual void on_sweep_start(int step, int parity,
                              const geom::OrientedPointMap& map,
                              const geom::Camera& lcam) {}
  // After both parities of one iteration.
  virtual void on_iteration(int step, int scale_idx,
                            const geom::OrientedPointMap& map,
                            const geom::Camera& lcam) {}
};

// One reference view's coarse-to-fine PatchMatch run.
class Episode {
 public:
  Episode(const std::vector<io::FloatImage>& images,
          const std::vector<geom::Camera>& cams, int ref,
          std::vector<int> sources, const PipelineWeights& weights,
          const EngineConfig& cfg);

  int total_steps() const;
  void run(EpisodeHooks* hooks = nullptr);

  const geom::OrientedPointMap& map() const { return map_; }
  const geom::Camera& level_cam() const { return lcam_ref_; }
  io::FloatImage depth_image() const;
  io::FloatImage normal_image() const;

 private:
  void run_scale(int scale_idx, int& step, EpisodeHooks* hooks);
  void sweep(int scale_idx, int it, int step, int parity, EpisodeHooks* hooks);

  const std::vector<io::FloatImage>& images_;
  const std::vector<geom::Camera>& cams_;
  int ref_;
  std::vector<int> sources_;
  const PipelineWeights& w_;
  EngineConfig cfg_;

  std::vector<feat::FeaturePyramid> pyramids_;  // per view (ref + sources)
  geom::OrientedPointMap map_;
  HiddenMap hidden_;
  geom::Camera lcam_ref_;
  std::vector<geom::Camera> lcam_src_;
  feat::SupportWindow window_{3, 3};  // dilation rescaled per level
  NodePtr fmap_ref_;
  std::vector<NodePtr> fmap_src_;
  NodePtr attn_h_;
};

// Greedy inference for one reference view (NoGrad internally).
struct ViewResult {
  io::FloatImage depth;   // 1 channel
  io::FloatImage normal;  // 3 channels, reference camera frame
};
ViewResult run_inference(const std::vector<io::FloatImage>& images,
                         const std::vector<geom::Camera>& cams, int ref,
                         const std::vector<int>& sources,
                         const PipelineWeights& weights,
                         const EngineConfig& cfg);

}  // namespace pmrl::pm
