#include "pmrl/rl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace pmrl::rl {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

}  // namespace

double reward(const geom::OrientedPoint& omega, const Eigen::Vector2d& p,
              const geom::Camera& cam, double d_star,
              const Eigen::Vector3d& n_star, const RewardConfig& cfg) {
  double d;
  try {
    d = geom::depth_from_plane(omega, p, cam.K);
  } catch (const geom::DegeneratePlaneError&) {
    return 0.0;
  }
  const double range = cam.d_max - cam.d_min;
  const double dd = (d - d_star) / range;
  const double c = std::clamp(omega.n.normalized().dot(n_star.normalized()),
                              -1.0, 1.0);
  const double th = std::acos(c);
  return std::exp(-0.5 * dd * dd / (cfg.sigma_d * cfg.sigma_d)) *
         std::exp(-0.5 * th * th / (cfg.sigma_n * cfg.sigma_n));
}

std::vector<double> returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

double epsilon_at(std::int64_t step, const RewardConfig& cfg) {
  return cfg.epsilon0 * std::pow(cfg.epsilon_decay, static_cast<double>(step));
}

NodePtr candidate_policy_loss(const std::vector<NodePtr>& z,
                              const std::vector<bool>& valid,
                              const std::vector<double>& nk, double g) {
  std::vector<NodePtr> zs;
  std::vector<double> w;
  for (std::size_t k = 0; k < z.size(); ++k)
    if (valid[k] && z[k]) {
      zs.push_back(ad::reshape(z[k], {1}));
      w.push_back(nk[k]);
    }
  if (zs.empty())
    throw std::invalid_argument("candidate_policy_loss: no valid candidate");
  const auto logp = ad::log_(ad::softmax(ad::concat(zs), 0));
  const std::size_t n = w.size();
  return ad::scale(ad::dot(logp, ad::constant(Array({n}, std::move(w)))), -g);
}

NodePtr view_policy_loss(const std::vector<NodePtr>& vhat,
                         const std::vector<int>& views,
                         const std::vector<int>& worst, double g) {
  std::vector<NodePtr> num, den;
  for (int v : views) num.push_back(ad::reshape(vhat[v], {1}));
  den = num;
  for (int m : worst) den.push_back(ad::reshape(vhat[m], {1}));
  const auto bracket = ad::sub(ad::log_(ad::sum(ad::concat(num))),
                               ad::log_(ad::sum(ad::concat(den))));
  return ad::scale(bracket, -g);
}

TrainScene make_train_scene(std::uint64_t scene_seed,
                            const synth::SceneConfig& cfg, int n_sources,
                            std::uint64_t view_seed) {
  TrainScene ts;
  ts.scene = synth::generate_scene(scene_seed, cfg);
  for (const auto& cam : ts.scene.cameras)
    ts.images.push_back(synth::render_view(ts.scene, cam).image);
  std::mt19937_64 rng(view_seed);
  ts.sources = synth::select_source_views(ts.scene, ts.ref, n_sources, rng);
  return ts;
}

namespace {

struct LevelGt {
  geom::Camera cam;
  int denom = 2;
  std::vector<char> has;
  std::vector<double> d;
  std::vector<Eigen::Vector3d> n;  // camera frame, camera-facing
};

LevelGt level_gt(const synth::SyntheticScene& sc, int ref, int denom) {
  LevelGt g;
  g.cam = feat::level_camera(sc.cameras[ref], denom);
  g.denom = denom;
  const int w = g.cam.width, h = g.cam.height;
  g.has.assign(static_cast<std::size_t>(w) * h, 0);
  g.d.assign(static_cast<std::size_t>(w) * h, 0.0);
  g.n.assign(static_cast<std::size_t>(w) * h, Eigen::Vector3d::Zero());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto p = geom::pixel_center(x, y);
      const auto hit = synth::cast_ray(sc, g.cam, p);
      if (!hit) continue;
      Eigen::Vector3d nc = g.cam.R * sc.patches[hit->first].n;
      if (nc.dot(g.cam.ray(p)) > 0) nc = -nc;
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      g.has[i] = 1;
      g.d[i] = hit->second;
      g.n[i] = nc;
    }
  return g;
}

class TrainHooks : public pm::EpisodeHooks {
 public:
  enum class Phase { kRecord, kTrain };

  Phase phase = Phase::kRecord;
  const RewardConfig* rc = nullptr;
  const std::vector<LevelGt>* levels = nullptr;
  std::vector<int> step_level;  // step -> scale index
  std::int64_t step_base = 0;

  // kRecord output: per-step rewards on the finest grid.
  std::vector<std::vector<double>> rewards;

  // kTrain input: per-step returns on the finest grid.
  const std::vector<std::vector<double>>* gs = nullptr;
  const std::vector<std::vector<double>>* gv = nullptr;

  double cand_loss_sum = 0.0, view_loss_sum = 0.0;
  int flushes = 0;
  bool stepped = false;  // any nonzero loss reached backward

  void select_views(int step, int, int, const std::vector<double>& vhat,
                    int n, int m, std::mt19937_64& rng,
                    std::vector<int>& views, std::vector<int>& worst) override {
    const double eps = epsilon_at(step_base + step, *rc);
    // eps == 0 must not touch the rng: the stream feeds the perturbation
    // draws later in the same pixel, and a pure-greedy episode has to be
    // bit-identical to inference.
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const auto mode = eps > 0.0 && u01(rng) < eps
                          ? vsel::SampleMode::kStochastic
                          : vsel::SampleMode::kGreedy;
    views = vsel::sample_views(vhat, n, mode, rng);
    std::vector<int> order(vhat.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (vhat[a] != vhat[b]) return vhat[a] < vhat[b];
      return a < b;
    });
    worst.clear();
    for (int id : order) {
      if (static_cast<int>(worst.size()) >= m) break;
      if (std::find(views.begin(), views.end(), id) == views.end())
        worst.push_back(id);
    }
  }

  int choose(int step, int, int, const std::vector<double>& z,
             const std::vector<bool>& valid, int current_idx,
             std::mt19937_64& rng) override {
    return pm::select_epsilon(z, valid, current_idx,
                              epsilon_at(step_base + step, *rc), rng);
  }

  void on_iteration(int step, int scale_idx, const geom::OrientedPointMap& map,
                    const geom::Camera& lcam) override {
    if (phase != Phase::kRecord) return;
    const LevelGt& lg = (*levels)[scale_idx];
    const LevelGt& fine = levels->back();
    // Level-grid rewards, nearest-neighbor upscaled to the finest grid.
    std::vector<double> r(static_cast<std::size_t>(fine.cam.width) *
                              fine.cam.height,
                          0.0);
    const int factor = lg.denom / fine.denom;
    for (int fy = 0; fy < fine.cam.height; ++fy)
      for (int fx = 0; fx < fine.cam.width; ++fx) {
        const int cx = std::min(fx / factor, lcam.width - 1);
        const int cy = std::min(fy / factor, lcam.height - 1);
        const std::size_t ci = static_cast<std::size_t>(cy) * lcam.width + cx;
        if (!lg.has[ci]) continue;
        r[static_cast<std::size_t>(fy) * fine.cam.width + fx] =
            reward(map.at(cx, cy), geom::pixel_center(cx, cy), lcam, lg.d[ci],
                   lg.n[ci], *rc);
      }
    rewards.push_back(std::move(r));
  }

  void on_sweep_start(int, int, const geom::OrientedPointMap&,
                      const geom::Camera&) override {
    if (phase == Phase::kTrain) flush();
  }

  void on_pixel(int step, int x, int y, const std::vector<NodePtr>& z,
                const std::vector<bool>& valid,
                const std::vector<geom::OrientedPoint>& cand, int,
                int chosen, const std::vector<NodePtr>& vhat,
                const std::vector<int>& views,
                const std::vector<int>& worst) override {
    if (phase != Phase::kTrain) return;
    const LevelGt& lg = (*levels)[step_level[step]];
    const LevelGt& fine = levels->back();
    const std::size_t ci = static_cast<std::size_t>(y) * lg.cam.width + x;
    if (!lg.has[ci]) return;  // no ground truth: masked out
    const int factor = lg.denom / fine.denom;
    const std::size_t fi =
        static_cast<std::size_t>(y * factor) * fine.cam.width + x * factor;

    if (chosen >= 0) {
      std::vector<double> nk(cand.size(), 0.0);
      const auto p = geom::pixel_center(x, y);
      for (std::size_t k = 0; k < cand.size(); ++k)
        if (valid[k])
          nk[k] = reward(cand[k], p, lg.cam, lg.d[ci], lg.n[ci], *rc);
      cand_nodes_.push_back(
          candidate_policy_loss(z, valid, nk, (*gs)[step][fi]));
      where_.push_back({step, x, y});
    }
    double sel_sum = 0.0;
    for (int v : views) sel_sum += vhat[v]->value[0];
    if (!views.empty() && !worst.empty() && sel_sum > 0.0) {
      view_nodes_.push_back(
          view_policy_loss(vhat, views, worst, (*gv)[step][fi]));
      where_.push_back({step, x, y});
    }
  }

  void flush() {
    if (cand_nodes_.empty() && view_nodes_.empty()) return;
    auto reduce = [](std::vector<NodePtr>& nodes) {
      auto r = ad::scale(ad::sum(ad::stack_scalars(nodes)),
                         1.0 / static_cast<double>(nodes.size()));
      return r;
    };
    std::vector<NodePtr> roots;
    if (!cand_nodes_.empty()) {
      roots.push_back(reduce(cand_nodes_));
      cand_loss_sum += roots.back()->value[0];
    }
    if (!view_nodes_.empty()) {
      roots.push_back(reduce(view_nodes_));
      view_loss_sum += roots.back()->value[0];
    }
    NodePtr total = roots.size() == 2 ? ad::add(roots[0], roots[1]) : roots[0];
    if (!std::isfinite(total->value[0])) {
      std::string msg = "training: non-finite loss";
      auto scan = [&](const std::vector<NodePtr>& nodes, std::size_t base) {
        for (std::size_t i = 0; i < nodes.size(); ++i)
          if (!std::isfinite(nodes[i]->value[0])) {
            const auto& wh = where_[base + i];
            msg += " (step " + std::to_string(wh[0]) + ", pixel " +
                   std::to_string(wh[1]) + "," + std::to_string(wh[2]) +
                   ", value " + std::to_string(nodes[i]->value[0]) + ")";
            return;
          }
      };
      scan(cand_nodes_, 0);
      scan(view_nodes_, cand_nodes_.size());
      throw NumericError(msg);
    }
    if (total->value[0] != 0.0 || total->needs_grad) {
      ad::backward(total, true);
      if (total->value[0] != 0.0) stepped = true;
    }
    ++flushes;
    cand_nodes_.clear();
    view_nodes_.clear();
    where_.clear();
  }

 private:
  std::vector<NodePtr> cand_nodes_, view_nodes_;
  std::vector<std::array<int, 3>> where_;  // (step, x, y)
};

std::vector<LevelGt> build_levels(const TrainScene& ts,
                                  const pm::EngineConfig& ec) {
  std::vector<LevelGt> levels;
  for (int denom : ec.denoms)
    levels.push_back(level_gt(ts.scene, ts.ref, denom));
  return levels;
}

std::vector<int> build_step_level(const pm::EngineConfig& ec) {
  std::vector<int> sl;
  for (std::size_t si = 0; si < ec.iters.size(); ++si)
    for (int it = 0; it < ec.iters[si]; ++it)
      sl.push_back(static_cast<int>(si));
  return sl;
}

}  // namespace

EpisodeRollout rollout(const TrainScene& ts, const pm::PipelineWeights& w,
                       const pm::EngineConfig& ec, const RewardConfig& rc,
                       std::int64_t step_base) {
  ad::NoGradGuard guard;
  const auto levels = build_levels(ts, ec);
  TrainHooks h;
  h.phase = TrainHooks::Phase::kRecord;
  h.rc = &rc;
  h.levels = &levels;
  h.step_level = build_step_level(ec);
  h.step_base = step_base;
  pm::Episode ep(ts.images, ts.scene.cameras, ts.ref, ts.sources, w, ec);
  ep.run(&h);
  EpisodeRollout r;
  r.map = ep.map();
  r.cam = ep.level_cam();
  r.rewards = std::move(h.rewards);
  r.has_gt.assign(levels.back().has.begin(), levels.back().has.end());
  return r;
}

EpochStats train_epoch(const std::vector<TrainScene>& scenes,
                       nn::ParamStore& store, const pm::PipelineWeights& w,
                       const TrainConfig& cfg, int epoch) {
  if (scenes.empty()) throw std::invalid_argument("train_epoch: no scenes");
  EpochStats st;
  st.epoch = epoch;
  st.lr = cfg.lr0 * std::pow(cfg.lr_decay, epoch);
  const int steps_per = std::accumulate(cfg.engine.iters.begin(),
                                        cfg.engine.iters.end(), 0);
  st.epsilon = epsilon_at(
      static_cast<std::int64_t>(epoch) * scenes.size() * steps_per,
      cfg.reward);

  double rw_sum = 0.0, mae_sum = 0.0;
  int mae_scenes = 0;
  for (std::size_t si = 0; si < scenes.size(); ++si) {
    const auto& ts = scenes[si];
    pm::EngineConfig ec = cfg.engine;
    ec.seed = mix(cfg.seed, static_cast<std::uint64_t>(epoch), si);
    const std::int64_t base =
        (static_cast<std::int64_t>(epoch) * scenes.size() + si) * steps_per;

    const auto levels = build_levels(ts, ec);
    const auto& fine = levels.back();

    // Pass 1: explore and record rewards (no graph). Pass 2 replays the
    // identical episode (same per-pixel rng streams, unchanged weights)
    // while building the policy-gradient graph, with the returns known.
    TrainHooks rec;
    rec.phase = TrainHooks::Phase::kRecord;
    rec.rc = &cfg.reward;
    rec.levels = &levels;
    rec.step_level = build_step_level(ec);
    rec.step_base = base;
    {
      ad::NoGradGuard guard;
      pm::Episode ep(ts.images, ts.scene.cameras, ts.ref, ts.sources, w, ec);
      ep.run(&rec);
    }

    const std::size_t npix = rec.rewards.empty() ? 0 : rec.rewards[0].size();
    std::vector<std::vector<double>> gs(rec.rewards.size(),
                                        std::vector<double>(npix, 0.0));
    std::vector<std::vector<double>> gv = gs;
    std::vector<double> series(rec.rewards.size());
    for (std::size_t i = 0; i < npix; ++i) {
      for (std::size_t t = 0; t < series.size(); ++t)
        series[t] = rec.rewards[t][i];
      const auto rs = returns(series, cfg.reward.gamma_S);
      const auto rv = returns(series, cfg.reward.gamma_V);
      for (std::size_t t = 0; t < series.size(); ++t) {
        gs[t][i] = rs[t];
        gv[t][i] = rv[t];
      }
    }

    {  // final-iteration reward over ground-truth pixels
      double s = 0.0;
      int n = 0;
      for (std::size_t i = 0; i < npix; ++i)
        if (fine.has[i]) {
          s += rec.rewards.back()[i];
          ++n;
        }
      if (n) rw_sum += s / n;
    }

    TrainHooks tr;
    tr.phase = TrainHooks::Phase::kTrain;
    tr.rc = &cfg.reward;
    tr.levels = &levels;
    tr.step_level = rec.step_level;
    tr.step_base = base;
    tr.gs = &gs;
    tr.gv = &gv;
    store.zero_grads();
    pm::Episode ep(ts.images, ts.scene.cameras, ts.ref, ts.sources, w, ec);
    ep.run(&tr);
    tr.flush();

    if (tr.stepped) {
      store.ensure_grads();
      store.adam_step(st.lr);
    }
    if (tr.flushes) {
      st.cand_loss += tr.cand_loss_sum / tr.flushes;
      st.view_loss += tr.view_loss_sum / tr.flushes;
    }

    double mae = 0.0;
    int n = 0;
    for (int y = 0; y < fine.cam.height; ++y)
      for (int x = 0; x < fine.cam.width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * fine.cam.width + x;
        if (!fine.has[i]) continue;
        try {
          mae += std::abs(
              geom::depth_from_plane(ep.map().at(x, y), geom::pixel_center(x, y),
                                     fine.cam.K) -
              fine.d[i]);
          ++n;
        } catch (const geom::DegeneratePlaneError&) {
        }
      }
    if (n) {
      mae_sum += mae / n;
      ++mae_scenes;
    }
  }
  st.mean_reward = rw_sum / scenes.size();
  st.depth_mae = mae_scenes ? mae_sum / mae_scenes : 0.0;
  st.cand_loss /= scenes.size();
  st.view_loss /= scenes.size();
  return st;
}

std::vector<EpochStats> train(const std::vector<TrainScene>& scenes,
                              nn::ParamStore& store,
                              const pm::PipelineWeights& w,
                              const TrainConfig& cfg, int start_epoch) {
  std::vector<EpochStats> stats;
  if (!cfg.checkpoint_dir.empty())
    std::filesystem::create_directories(cfg.checkpoint_dir);
  for (int e = start_epoch; e < cfg.epochs; ++e) {
    stats.push_back(train_epoch(scenes, store, w, cfg, e));
    const auto& st = stats.back();
    if (!cfg.log_path.empty()) {
      nlohmann::json j{{"epoch", st.epoch},
                       {"lr", st.lr},
                       {"epsilon", st.epsilon},
                       {"mean_reward", st.mean_reward},
                       {"depth_mae", st.depth_mae},
                       {"cand_loss", st.cand_loss},
                       {"view_loss", st.view_loss}};
      std::ofstream out(cfg.log_path, std::ios::app);
      out << j.dump() << "\n";
    }
    if (!cfg.checkpoint_dir.empty()) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", e);
      store.save((std::filesystem::path(cfg.checkpoint_dir) / name).string());
    }
  }
  return stats;
}

}  // namespace pmrl::rl
