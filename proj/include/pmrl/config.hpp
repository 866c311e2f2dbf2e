#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

#include "pmrl/fusion.hpp"
#include "pmrl/rl.hpp"
#include "pmrl/scene.hpp"

namespace pmrl::cfg {

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// All tunables of the pipeline, grouped by stage. Angles are radians and
// match the internal representation exactly, so configs round-trip through
// JSON without loss.
struct PipelineConfig {
  std::uint64_t seed = 0;
  int threads = 1;  // cap on data-parallel width; results independent of it

  synth::SceneConfig scene;
  int num_scenes = 8;
  int num_sources = 2;  // source views per training reference

  int groups = 4;           // correlation groups
  pm::EngineConfig engine;  // inference schedule (8,2,2)
  rl::RewardConfig reward;

  // Training-specific engine overrides; the rest is shared with `engine`.
  std::vector<int> train_iters{2, 1, 1};
  int train_n_views = 1;
  int train_m_worst = 2;
  double lr0 = 0.001;
  double lr_decay = 0.5;
  int epochs = 30;

  fuse::ConsistencyThresholds fusion;
  double tau = 0.02;        // cloud metric threshold, scene units
  double dedup_cell = 0.01;

  // The inference/training configs with the shared fields resolved.
  pm::EngineConfig inference_engine() const;
  rl::TrainConfig train_config() const;
};

// Unknown keys are rejected; missing keys keep their defaults. Throws
// ValidationError naming the offending key or field.
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& c);
void validate(const PipelineConfig& c);

PipelineConfig load_config(const std::string& path);  // "" -> defaults

// FNV-1a over the canonical JSON dump; embedded in logs and manifests.
std::string config_hash(const PipelineConfig& c);

}  // namespace pmrl::cfg
