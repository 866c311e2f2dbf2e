#include "pmrl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace pmrl::cfg {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ValidationError("config: '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key))
      throw ValidationError("config: unknown key '" + section + key + "'");
}

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

void fail(const std::string& what) {
  throw ValidationError("config: " + what);
}

}  // namespace

pm::EngineConfig PipelineConfig::inference_engine() const {
  pm::EngineConfig e = engine;
  e.seed = seed;
  return e;
}

rl::TrainConfig PipelineConfig::train_config() const {
  rl::TrainConfig t;
  t.engine = engine;
  t.engine.iters = train_iters;
  t.engine.n_views = train_n_views;
  t.engine.m_worst = train_m_worst;
  t.engine.long_range_coarsest = false;
  t.engine.seed = seed;
  t.reward = reward;
  t.lr0 = lr0;
  t.lr_decay = lr_decay;
  t.epochs = epochs;
  t.seed = seed;
  return t;
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  check_keys(j, "", {"seed", "threads", "scene", "engine", "reward", "train",
                     "fusion"});
  get(j, "seed", c.seed);
  get(j, "threads", c.threads);

  if (auto it = j.find("scene"); it != j.end()) {
    const auto& s = *it;
    check_keys(s, "scene.",
               {"num_patches", "num_cameras", "texture_octaves",
                "occluder_fraction", "width", "height", "num_scenes"});
    get(s, "num_patches", c.scene.num_patches);
    get(s, "num_cameras", c.scene.num_cameras);
    get(s, "texture_octaves", c.scene.texture_octaves);
    get(s, "occluder_fraction", c.scene.occluder_fraction);
    get(s, "width", c.scene.width);
    get(s, "height", c.scene.height);
    get(s, "num_scenes", c.num_scenes);
  }

  if (auto it = j.find("engine"); it != j.end()) {
    const auto& e = *it;
    check_keys(e, "engine.",
               {"denoms", "iters", "window_size", "window_dilation", "groups",
                "n_views", "m_worst", "long_range_coarsest", "smooth_sentinel",
                "baseline_smooth_weight", "rho0", "rho1", "eta0", "eta1"});
    get(e, "denoms", c.engine.denoms);
    get(e, "iters", c.engine.iters);
    get(e, "window_size", c.engine.window.size);
    get(e, "window_dilation", c.engine.window.dilation);
    get(e, "groups", c.groups);
    get(e, "n_views", c.engine.n_views);
    get(e, "m_worst", c.engine.m_worst);
    get(e, "long_range_coarsest", c.engine.long_range_coarsest);
    get(e, "smooth_sentinel", c.engine.smooth_sentinel);
    get(e, "baseline_smooth_weight", c.engine.baseline_smooth_weight);
    get(e, "rho0", c.engine.perturb.rho0);
    get(e, "rho1", c.engine.perturb.rho1);
    get(e, "eta0", c.engine.perturb.eta0);
    get(e, "eta1", c.engine.perturb.eta1);
  }

  if (auto it = j.find("reward"); it != j.end()) {
    const auto& r = *it;
    check_keys(r, "reward.",
               {"sigma_d", "sigma_n", "gamma_s", "gamma_v", "epsilon0",
                "epsilon_decay"});
    get(r, "sigma_d", c.reward.sigma_d);
    get(r, "sigma_n", c.reward.sigma_n);
    get(r, "gamma_s", c.reward.gamma_S);
    get(r, "gamma_v", c.reward.gamma_V);
    get(r, "epsilon0", c.reward.epsilon0);
    get(r, "epsilon_decay", c.reward.epsilon_decay);
  }

  if (auto it = j.find("train"); it != j.end()) {
    const auto& t = *it;
    check_keys(t, "train.",
               {"iters", "n_views", "m_worst", "lr0", "lr_decay", "epochs",
                "num_sources"});
    get(t, "iters", c.train_iters);
    get(t, "n_views", c.train_n_views);
    get(t, "m_worst", c.train_m_worst);
    get(t, "lr0", c.lr0);
    get(t, "lr_decay", c.lr_decay);
    get(t, "epochs", c.epochs);
    get(t, "num_sources", c.num_sources);
  }

  if (auto it = j.find("fusion"); it != j.end()) {
    const auto& f = *it;
    check_keys(f, "fusion.",
               {"max_reproj_px", "max_rel_depth", "max_normal_angle",
                "min_consistent_views", "tau", "dedup_cell"});
    get(f, "max_reproj_px", c.fusion.max_reproj_px);
    get(f, "max_rel_depth", c.fusion.max_rel_depth);
    get(f, "max_normal_angle", c.fusion.max_normal_angle);
    get(f, "min_consistent_views", c.fusion.min_consistent_views);
    get(f, "tau", c.tau);
    get(f, "dedup_cell", c.dedup_cell);
  }

  validate(c);
  return c;
}

json config_to_json(const PipelineConfig& c) {
  return json{
      {"seed", c.seed},
      {"threads", c.threads},
      {"scene",
       {{"num_patches", c.scene.num_patches},
        {"num_cameras", c.scene.num_cameras},
        {"texture_octaves", c.scene.texture_octaves},
        {"occluder_fraction", c.scene.occluder_fraction},
        {"width", c.scene.width},
        {"height", c.scene.height},
        {"num_scenes", c.num_scenes}}},
      {"engine",
       {{"denoms", c.engine.denoms},
        {"iters", c.engine.iters},
        {"window_size", c.engine.window.size},
        {"window_dilation", c.engine.window.dilation},
        {"groups", c.groups},
        {"n_views", c.engine.n_views},
        {"m_worst", c.engine.m_worst},
        {"long_range_coarsest", c.engine.long_range_coarsest},
        {"smooth_sentinel", c.engine.smooth_sentinel},
        {"baseline_smooth_weight", c.engine.baseline_smooth_weight},
        {"rho0", c.engine.perturb.rho0},
        {"rho1", c.engine.perturb.rho1},
        {"eta0", c.engine.perturb.eta0},
        {"eta1", c.engine.perturb.eta1}}},
      {"reward",
       {{"sigma_d", c.reward.sigma_d},
        {"sigma_n", c.reward.sigma_n},
        {"gamma_s", c.reward.gamma_S},
        {"gamma_v", c.reward.gamma_V},
        {"epsilon0", c.reward.epsilon0},
        {"epsilon_decay", c.reward.epsilon_decay}}},
      {"train",
       {{"iters", c.train_iters},
        {"n_views", c.train_n_views},
        {"m_worst", c.train_m_worst},
        {"lr0", c.lr0},
        {"lr_decay", c.lr_decay},
        {"epochs", c.epochs},
        {"num_sources", c.num_sources}}},
      {"fusion",
       {{"max_reproj_px", c.fusion.max_reproj_px},
        {"max_rel_depth", c.fusion.max_rel_depth},
        {"max_normal_angle", c.fusion.max_normal_angle},
        {"min_consistent_views", c.fusion.min_consistent_views},
        {"tau", c.tau},
        {"dedup_cell", c.dedup_cell}}}};
}

void validate(const PipelineConfig& c) {
  if (c.threads < 1) fail("threads must be >= 1");
  if (c.scene.num_patches < 1) fail("scene.num_patches must be >= 1");
  if (c.scene.num_cameras < 2) fail("scene.num_cameras must be >= 2");
  if (c.scene.texture_octaves < 1) fail("scene.texture_octaves must be >= 1");
  if (c.scene.occluder_fraction < 0.0 || c.scene.occluder_fraction > 1.0)
    fail("scene.occluder_fraction must be in [0,1]");
  if (c.scene.width < 8 || c.scene.height < 8)
    fail("scene.width/height must be >= 8");
  if (c.num_scenes < 1) fail("scene.num_scenes must be >= 1");
  if (c.num_sources < 1) fail("train.num_sources must be >= 1");
  if (c.groups < 1) fail("engine.groups must be >= 1");

  if (c.engine.denoms.empty() || c.engine.denoms.size() != c.engine.iters.size())
    fail("engine.denoms and engine.iters must be non-empty and equal length");
  for (std::size_t i = 0; i < c.engine.denoms.size(); ++i) {
    if (c.engine.denoms[i] < 1) fail("engine.denoms entries must be >= 1");
    if (i && c.engine.denoms[i] >= c.engine.denoms[i - 1])
      fail("engine.denoms must be strictly decreasing (coarse to fine)");
    if (c.engine.iters[i] < 1) fail("engine.iters entries must be >= 1");
  }
  if (c.engine.window.size < 1 || c.engine.window.size % 2 == 0)
    fail("engine.window_size must be odd and >= 1");
  if (c.engine.window.dilation < 1) fail("engine.window_dilation must be >= 1");
  if (c.engine.n_views < 1) fail("engine.n_views must be >= 1");
  if (c.engine.m_worst < 0) fail("engine.m_worst must be >= 0");
  if (!(c.engine.perturb.rho0 >= c.engine.perturb.rho1) ||
      !(c.engine.perturb.rho1 > 0.0))
    fail("engine rho0 >= rho1 > 0 required");
  if (!(c.engine.perturb.eta0 >= c.engine.perturb.eta1) ||
      !(c.engine.perturb.eta1 > 0.0))
    fail("engine eta0 >= eta1 > 0 required");

  if (!(c.reward.sigma_d > 0.0)) fail("reward.sigma_d must be > 0");
  if (!(c.reward.sigma_n > 0.0)) fail("reward.sigma_n must be > 0");
  if (c.reward.gamma_S < 0.0 || c.reward.gamma_S > 1.0)
    fail("reward.gamma_s must be in [0,1]");
  if (c.reward.gamma_V < 0.0 || c.reward.gamma_V > 1.0)
    fail("reward.gamma_v must be in [0,1]");
  if (c.reward.epsilon0 < 0.0 || c.reward.epsilon0 > 1.0)
    fail("reward.epsilon0 must be in [0,1]");
  if (!(c.reward.epsilon_decay > 0.0) || c.reward.epsilon_decay > 1.0)
    fail("reward.epsilon_decay must be in (0,1]");

  if (c.train_iters.size() != c.engine.denoms.size())
    fail("train.iters must match engine.denoms in length");
  for (int it : c.train_iters)
    if (it < 1) fail("train.iters entries must be >= 1");
  if (c.train_n_views < 1) fail("train.n_views must be >= 1");
  if (c.train_m_worst < 0) fail("train.m_worst must be >= 0");
  if (!(c.lr0 > 0.0)) fail("train.lr0 must be > 0");
  if (!(c.lr_decay > 0.0) || c.lr_decay > 1.0)
    fail("train.lr_decay must be in (0,1]");
  if (c.epochs < 0) fail("train.epochs must be >= 0");

  if (!(c.fusion.max_reproj_px > 0.0)) fail("fusion.max_reproj_px must be > 0");
  if (!(c.fusion.max_rel_depth > 0.0)) fail("fusion.max_rel_depth must be > 0");
  if (!(c.fusion.max_normal_angle > 0.0))
    fail("fusion.max_normal_angle must be > 0");
  if (c.fusion.min_consistent_views < 1)
    fail("fusion.min_consistent_views must be >= 1");
  if (!(c.tau > 0.0)) fail("fusion.tau must be > 0");
  if (!(c.dedup_cell > 0.0)) fail("fusion.dedup_cell must be > 0");
}

PipelineConfig load_config(const std::string& path) {
  if (path.empty()) {
    PipelineConfig c;
    validate(c);
    return c;
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path + ": " + e.what());
  }
  return config_from_json(j);
}

std::string config_hash(const PipelineConfig& c) {
  const std::string s = config_to_json(c).dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace pmrl::cfg
