#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pmrl/patchmatch.hpp"
#include "pmrl/scene.hpp"

namespace pmrl::rl {

using ad::NodePtr;

// Non-finite loss or gradient: the run cannot continue meaningfully.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RewardConfig {
  double sigma_d = 0.05;                 // fraction of the camera depth range
  double sigma_n = 15.0 * M_PI / 180.0;  // radians
  double gamma_S = 0.0;                  // candidate agent: immediate reward
  double gamma_V = 1.0;                  // view agent: reward-to-go
  double epsilon0 = 0.9;
  double epsilon_decay = 0.999;
  // Stub for the draft's tau-decayed reward term; unused (semantics unclear).
  double tau = 0.0;
};

// Unnormalized Gaussian kernel of the plane at p against ground truth
// (depth d_star, camera-frame unit normal n_star): perfect match -> 1.
// Depth residual is normalized by the camera's depth range; degenerate
// planes score 0.
double reward(const geom::OrientedPoint& omega, const Eigen::Vector2d& p,
              const geom::Camera& cam, double d_star,
              const Eigen::Vector3d& n_star, const RewardConfig& cfg);

// G^t = sum_{t'>=t} gamma^{t'-t} r^{t'}, by backward recursion.
std::vector<double> returns(const std::vector<double>& rewards, double gamma);

// epsilon0 * decay^step.
double epsilon_at(std::int64_t step, const RewardConfig& cfg);

// -g * sum_k nk[k] * log softmax_k(z over valid candidates). The policy is
// the softmax of the regularized scores; nk are the reward-kernel weights of
// each candidate against ground truth. Throws if no candidate is valid.
NodePtr candidate_policy_loss(const std::vector<NodePtr>& z,
                              const std::vector<bool>& valid,
                              const std::vector<double>& nk, double g);

// -g * [log sum_{v in N} vhat_v - log sum_{m in N union M} vhat_m]. Only the
// selected and worst views enter the denominator so good-but-unselected
// views are not pushed down.
NodePtr view_policy_loss(const std::vector<NodePtr>& vhat,
                         const std::vector<int>& views,
                         const std::vector<int>& worst, double g);

// One multi-view training sample: a synthetic scene, its rendered images,
// and the source set for the reference view.
struct TrainScene {
  synth::SyntheticScene scene;
  std::vector<io::FloatImage> images;  // one per camera
  int ref = 0;
  std::vector<int> sources;
};
TrainScene make_train_scene(std::uint64_t scene_seed,
                            const synth::SceneConfig& cfg, int n_sources,
                            std::uint64_t view_seed);

// Exploration pass of one episode (no graph): epsilon-greedy candidate and
// view decisions, per-step reward maps on the finest grid (0 where ground
// truth is undefined).
struct EpisodeRollout {
  geom::OrientedPointMap map;  // finest-scale result
  geom::Camera cam;            // finest level camera
  std::vector<std::vector<double>> rewards;  // [step][y*w+x], finest grid
  std::vector<char> has_gt;                  // finest grid
};
EpisodeRollout rollout(const TrainScene& ts, const pm::PipelineWeights& w,
                       const pm::EngineConfig& ec, const RewardConfig& rc,
                       std::int64_t step_base);

struct TrainConfig {
  pm::EngineConfig engine;  // training defaults: schedule (2,1,1), N=1, M=2
  RewardConfig reward;
  double lr0 = 0.001;
  double lr_decay = 0.5;  // per epoch
  int epochs = 30;
  std::uint64_t seed = 0;
  std::string log_path;        // train.log.jsonl; empty = no log
  std::string checkpoint_dir;  // empty = no checkpoints

  TrainConfig() {
    engine.iters = {2, 1, 1};
    engine.long_range_coarsest = false;  // kernel B everywhere
    engine.n_views = 1;
    engine.m_worst = 2;
  }
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double epsilon = 0.0;      // at the first step of the epoch
  double mean_reward = 0.0;  // final-iteration reward, mean over scenes
  double depth_mae = 0.0;    // finest-scale |d - d*|, mean over scenes
  double cand_loss = 0.0;
  double view_loss = 0.0;
};

// One pass over the dataset: per scene, a reward-recording exploration
// episode followed by a graph-building replay, one Adam step per scene.
// Throws on non-finite loss with the offending pixel in the message.
EpochStats train_epoch(const std::vector<TrainScene>& scenes,
                       nn::ParamStore& store, const pm::PipelineWeights& w,
                       const TrainConfig& cfg, int epoch);

// Full loop: lr halved per epoch, one JSON line per epoch appended to
// cfg.log_path, checkpoint per epoch in cfg.checkpoint_dir. start_epoch
// resumes mid-run: epoch indices, lr and epsilon schedules stay global, so
// a resumed run equals an uninterrupted one bit for bit.
std::vector<EpochStats> train(const std::vector<TrainScene>& scenes,
                              nn::ParamStore& store,
                              const pm::PipelineWeights& w,
                              const TrainConfig& cfg, int start_epoch = 0);

}  // namespace pmrl::rl
