#include "pmrl/patchmatch.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace pmrl::pm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                           std::uint64_t c) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return std::mt19937_64(h);
}

}  // namespace

Kernel kernel_a() { return {{{0, -1}, {0, 1}, {-1, 0}, {1, 0}}}; }

Kernel kernel_b() {
  Kernel k = kernel_a();
  for (auto [dx, dy] : std::initializer_list<std::pair<int, int>>{
           {1, 2}, {1, -2}, {-1, 2}, {-1, -2}})
    k.offsets.emplace_back(dx, dy);
  return k;
}

Kernel kernel_c() {
  Kernel k = kernel_b();
  for (int d : {3, 5}) {
    k.offsets.emplace_back(0, d);
    k.offsets.emplace_back(0, -d);
    k.offsets.emplace_back(d, 0);
    k.offsets.emplace_back(-d, 0);
  }
  return k;
}

double PerturbConfig::rho(int it, int iters) const {
  if (iters <= 1) return rho0;
  return rho0 * std::pow(rho1 / rho0,
                         static_cast<double>(it) / (iters - 1));
}

double PerturbConfig::eta(int it, int iters) const {
  if (iters <= 1) return eta0;
  return eta0 * std::pow(eta1 / eta0,
                         static_cast<double>(it) / (iters - 1));
}

GruStack GruStack::create(nn::ParamStore& store, std::mt19937_64& rng, int din,
                          int dh, int n_layers, double stddev) {
  GruStack g;
  g.dh = dh;
  int in = din;
  for (int l = 0; l < n_layers; ++l) {
    const std::string p = "gru." + std::to_string(l) + ".";
    const std::size_t cols = static_cast<std::size_t>(in + dh);
    const std::size_t rows = static_cast<std::size_t>(dh);
    nn::GruWeights w;
    w.wz = store.create(p + "wz", {rows, cols}, rng, stddev);
    w.bz = store.create_zeros(p + "bz", {rows});
    w.wr = store.create(p + "wr", {rows, cols}, rng, stddev);
    w.br = store.create_zeros(p + "br", {rows});
    w.wh = store.create(p + "wh", {rows, cols}, rng, stddev);
    w.bh = store.create_zeros(p + "bh", {rows});
    g.layers.push_back(w);
    in = dh;
  }
  g.head_w = store.create("gru.head.w", {1, static_cast<std::size_t>(dh)},
                          rng, stddev);
  g.head_b = store.create_zeros("gru.head.b", {1});
  return g;
}

GruStack GruStack::from_store(const nn::ParamStore& store) {
  GruStack g;
  for (int l = 0; store.has("gru." + std::to_string(l) + ".wz"); ++l) {
    const std::string p = "gru." + std::to_string(l) + ".";
    nn::GruWeights w;
    w.wz = store.get(p + "wz");
    w.bz = store.get(p + "bz");
    w.wr = store.get(p + "wr");
    w.br = store.get(p + "br");
    w.wh = store.get(p + "wh");
    w.bh = store.get(p + "bh");
    g.layers.push_back(w);
  }
  g.head_w = store.get("gru.head.w");
  g.head_b = store.get("gru.head.b");
  g.dh = static_cast<int>(g.head_w->value.shape()[1]);
  return g;
}

PipelineWeights PipelineWeights::create(nn::ParamStore& store,
                                        std::mt19937_64& rng, int groups) {
  PipelineWeights w;
  w.groups = groups;
  w.fpn = feat::FpnWeights::create(store, rng);
  w.vis = vsel::VisibilityNet::create(store, rng, groups);
  w.gru = GruStack::create(store, rng, groups + 4);
  return w;
}

PipelineWeights PipelineWeights::from_store(const nn::ParamStore& store,
                                            int groups) {
  PipelineWeights w;
  w.groups = groups;
  w.fpn = feat::FpnWeights::from_store(store);
  w.vis = vsel::VisibilityNet::from_store(store);
  w.gru = GruStack::from_store(store);
  return w;
}

PipelineWeights PipelineWeights::make_baseline() {
  PipelineWeights w;
  w.baseline = true;
  w.groups = 1;
  w.vis.mlp.ws = {ad::constant(Array({16, 4})), ad::constant(Array({16, 16})),
                  ad::constant(Array({1, 16}))};
  w.vis.mlp.bs = {ad::constant(Array({16})), ad::constant(Array({16})),
                  ad::constant(Array({1}))};
  w.vis.mlp.sigmoid_out = true;
  return w;
}

geom::OrientedPoint random_point(const Eigen::Vector2d& p,
                                 const geom::Camera& cam,
                                 std::mt19937_64& rng) {
  std::uniform_real_distribution<double> ud(1.0 / cam.d_max, 1.0 / cam.d_min);
  std::normal_distribution<double> nd(0.0, 1.0);
  const Eigen::Vector3d ray = cam.ray(p);
  for (;;) {
    const double d = 1.0 / ud(rng);
    Eigen::Vector3d n(nd(rng), nd(rng), nd(rng));
    if (n.norm() < 1e-9) continue;
    n.normalize();
    if (n.dot(ray) > 0) n = -n;
    if (std::abs(n.dot(ray)) < 1e-6) continue;  // grazing, redraw
    return geom::plane_from_depth_normal(d, n, p, cam.K);
  }
}

geom::OrientedPointMap init_map(std::uint64_t seed, const geom::Camera& cam) {
  if (!(cam.d_min > 0.0 && cam.d_max > cam.d_min))
    throw std::invalid_argument("init_map: bad depth range");
  geom::OrientedPointMap map(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      auto rng = stream_rng(seed, 0x696e6974ULL,
                            static_cast<std::uint64_t>(y) * cam.width + x, 0);
      map.at(x, y) = random_point(geom::pixel_center(x, y), cam, rng);
    }
  return map;
}

Array plane_tensor(const geom::OrientedPointMap& map) {
  Array t({4, static_cast<std::size_t>(map.height),
           static_cast<std::size_t>(map.width)});
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const auto& o = map.at(x, y);
      t.at3(0, y, x) = o.n.x();
      t.at3(1, y, x) = o.n.y();
      t.at3(2, y, x) = o.n.z();
      t.at3(3, y, x) = o.delta;
    }
  return t;
}

std::vector<Array> shift_plane_maps(const Array& planes, const Kernel& k) {
  ad::NoGradGuard guard;
  auto in = ad::constant(planes);
  std::vector<Array> out;
  for (auto [ox, oy] : k.offsets) {
    const int r = std::max(std::abs(ox), std::abs(oy));
    const std::size_t ks = static_cast<std::size_t>(2 * r + 1);
    Array filt({4, 4, ks, ks});
    for (std::size_t c = 0; c < 4; ++c)
      filt.at4(c, c, static_cast<std::size_t>(r + oy),
               static_cast<std::size_t>(r + ox)) = 1.0;
    out.push_back(
        ad::conv2d(in, ad::constant(std::move(filt)), 1, r)->value);
  }
  return out;
}

double smoothness(const geom::OrientedPoint& a, const geom::OrientedPoint& b,
                  const Eigen::Vector2d& p, const Eigen::Vector2d& q,
                  const Eigen::Matrix3d& K, double sentinel) {
  try {
    const double da = geom::depth_from_plane(a, p, K);
    const double db = geom::depth_from_plane(b, q, K);
    const Eigen::Vector3d xa = da * (K.inverse() * geom::homogeneous(p));
    const Eigen::Vector3d xb = db * (K.inverse() * geom::homogeneous(q));
    return std::abs(a.n.dot(xb) + a.delta) + std::abs(b.n.dot(xa) + b.delta);
  } catch (const geom::DegeneratePlaneError&) {
    return sentinel;
  }
}

Regularized regularize_scores(const std::vector<feat::Correlation>& gv,
                              const std::vector<bool>& valid,
                              const std::vector<std::array<double, 4>>& smooth,
                              const HiddenMap& hidden, int x, int y,
                              const GruStack& gru) {
  Regularized out;
  out.z.resize(gv.size());
  out.zeta_next.resize(gv.size());
  std::vector<NodePtr> h0;
  for (std::size_t l = 0; l < gru.layers.size(); ++l) {
    Array h({static_cast<std::size_t>(gru.dh)});
    const double* src = hidden.at(x, y, static_cast<int>(l));
    for (int i = 0; i < gru.dh; ++i) h[i] = src[i];
    h0.push_back(ad::constant(std::move(h)));
  }
  for (std::size_t k = 0; k < gv.size(); ++k) {
    if (!valid[k]) continue;
    Array sm({4});
    for (int i = 0; i < 4; ++i) sm[i] = smooth[k][i];
    NodePtr in = ad::concat({gv[k].g, ad::constant(std::move(sm))});
    for (std::size_t l = 0; l < gru.layers.size(); ++l) {
      in = nn::gru_cell(in, h0[l], gru.layers[l]);
      out.zeta_next[k].push_back(in->value);
    }
    out.z[k] = nn::linear(gru.head_w, in, gru.head_b);
  }
  return out;
}

geom::OrientedPoint perturb_point(const geom::OrientedPoint& cur,
                                  const Eigen::Vector2d& p,
                                  const geom::Camera& cam, double rho,
                                  double eta, std::mt19937_64& rng) {
  const Eigen::Vector3d ray = cam.ray(p);
  double d;
  try {
    d = geom::depth_from_plane(cur, p, cam.K);
  } catch (const geom::DegeneratePlaneError&) {
    d = 0.5 * (cam.d_min + cam.d_max);
  }
  std::uniform_real_distribution<double> uf(1.0 - rho, 1.0 + rho);
  const double d2 = std::clamp(d * uf(rng), cam.d_min, cam.d_max);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> ua(0.0, eta);
  Eigen::Vector3d n = cur.n;
  for (int attempt = 0; attempt < 8; ++attempt) {
    Eigen::Vector3d axis(nd(rng), nd(rng), nd(rng));
    if (axis.norm() < 1e-9) continue;
    axis.normalize();
    const Eigen::Vector3d cand = Eigen::AngleAxisd(ua(rng), axis) * cur.n;
    if (cand.dot(ray) < -1e-6) {
      n = cand;
      break;
    }
  }
  try {
    return geom::plane_from_depth_normal(d2, n, p, cam.K);
  } catch (const std::exception&) {
    return cur;
  }
}

int select_greedy(const std::vector<double>& z, const std::vector<bool>& valid,
                  int current_idx) {
  double best = -kInf;
  for (std::size_t k = 0; k < z.size(); ++k)
    if (valid[k]) best = std::max(best, z[k]);
  if (best == -kInf) return -1;
  if (current_idx >= 0 && valid[current_idx] && z[current_idx] == best)
    return current_idx;
  for (std::size_t k = 0; k < z.size(); ++k)
    if (valid[k] && z[k] == best) return static_cast<int>(k);
  return -1;
}

int select_epsilon(const std::vector<double>& z,
                   const std::vector<bool>& valid, int current_idx,
                   double epsilon, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (u01(rng) >= epsilon) return select_greedy(z, valid, current_idx);
  double mx = -kInf;
  for (std::size_t k = 0; k < z.size(); ++k)
    if (valid[k]) mx = std::max(mx, z[k]);
  if (mx == -kInf) return -1;
  std::vector<double> w(z.size(), 0.0);
  for (std::size_t k = 0; k < z.size(); ++k)
    if (valid[k]) w[k] = std::exp(z[k] - mx);
  std::discrete_distribution<int> dist(w.begin(), w.end());
  return dist(rng);
}

geom::OrientedPointMap upsample_map(const geom::OrientedPointMap& coarse,
                                    const geom::Camera& cam_coarse,
                                    const geom::Camera& cam_fine) {
  geom::OrientedPointMap fine(cam_fine.width, cam_fine.height);
  for (int y = 0; y < cam_fine.height; ++y)
    for (int x = 0; x < cam_fine.width; ++x) {
      const int cx = std::min(x / 2, coarse.width - 1);
      const int cy = std::min(y / 2, coarse.height - 1);
      const auto& o = coarse.at(cx, cy);
      const double d =
          geom::depth_from_plane(o, geom::pixel_center(cx, cy), cam_coarse.K);
      // Re-anchor delta on the fine ray directly; a parent normal can be
      // grazing w.r.t. the fine pixel's ray, which the sweep's admissibility
      // check cleans up on the next propagation.
      const Eigen::Vector3d xf =
          d * (cam_fine.K.inverse() *
               geom::homogeneous(geom::pixel_center(x, y)));
      fine.at(x, y) = {o.n, -o.n.dot(xf)};
    }
  return fine;
}

HiddenMap upsample_hidden(const HiddenMap& coarse, int fine_w, int fine_h) {
  HiddenMap fine(fine_w, fine_h, coarse.layers, coarse.dh);
  for (int y = 0; y < fine_h; ++y)
    for (int x = 0; x < fine_w; ++x) {
      const int cx = std::min(x / 2, coarse.width - 1);
      const int cy = std::min(y / 2, coarse.height - 1);
      for (int l = 0; l < coarse.layers; ++l) {
        const double* src = coarse.at(cx, cy, l);
        std::copy(src, src + coarse.dh, fine.at(x, y, l));
      }
    }
  return fine;
}

void EpisodeHooks::select_views(int, int, int, const std::vector<double>& vhat,
                                int n, int m, std::mt19937_64& rng,
                                std::vector<int>& views,
                                std::vector<int>& worst) {
  views = vsel::sample_views(vhat, n, vsel::SampleMode::kGreedy, rng);
  // m lowest-scoring sources not already selected.
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

int EpisodeHooks::choose(int, int, int, const std::vector<double>& z,
                         const std::vector<bool>& valid, int current_idx,
                         std::mt19937_64&) {
  return select_greedy(z, valid, current_idx);
}

Episode::Episode(const std::vector<io::FloatImage>& images,
                 const std::vector<geom::Camera>& cams, int ref,
                 std::vector<int> sources, const PipelineWeights& weights,
                 const EngineConfig& cfg)
    : images_(images), cams_(cams), ref_(ref), sources_(std::move(sources)),
      w_(weights), cfg_(cfg) {
  if (cams_.size() != images_.size())
    throw std::invalid_argument("episode: image/camera count mismatch");
  if (sources_.empty())
    throw std::invalid_argument("episode: no source views");
  if (cfg_.denoms.size() != cfg_.iters.size())
    throw std::invalid_argument("episode: schedule/scale mismatch");
  pyramids_.push_back(w_.baseline
                          ? feat::extract_pyramid_intensity(images_[ref_])
                          : feat::extract_pyramid(images_[ref_], w_.fpn));
  for (int s : sources_)
    pyramids_.push_back(w_.baseline
                            ? feat::extract_pyramid_intensity(images_[s])
                            : feat::extract_pyramid(images_[s], w_.fpn));
}

int Episode::total_steps() const {
  int t = 0;
  for (int it : cfg_.iters) t += it;
  return t;
}

void Episode::run(EpisodeHooks* hooks) {
  EpisodeHooks fallback;
  if (!hooks) hooks = &fallback;
  int step = 0;
  for (std::size_t si = 0; si < cfg_.denoms.size(); ++si)
    run_scale(static_cast<int>(si), step, hooks);
}

void Episode::run_scale(int si, int& step, EpisodeHooks* hooks) {
  const int denom = cfg_.denoms[si];
  const geom::Camera prev_cam = lcam_ref_;
  lcam_ref_ = feat::level_camera(cams_[ref_], denom);
  lcam_src_.clear();
  for (int s : sources_) lcam_src_.push_back(feat::level_camera(cams_[s], denom));
  fmap_ref_ = pyramids_[0].level_for(denom).fmap;
  fmap_src_.clear();
  for (std::size_t i = 0; i < sources_.size(); ++i)
    fmap_src_.push_back(pyramids_[1 + i].level_for(denom).fmap);
  attn_h_ = w_.baseline ? ad::constant(Array({1})) : w_.fpn.attn_h(denom);
  // Keep the support footprint constant in full-resolution pixels: the
  // configured dilation applies at the finest level and shrinks with it.
  const double fine_denom = static_cast<double>(cfg_.denoms.back());
  window_ = cfg_.window;
  window_.dilation = std::max(
      1, static_cast<int>(std::lround(cfg_.window.dilation * fine_denom /
                                      denom)));

  const int n_layers =
      w_.baseline ? 0 : static_cast<int>(w_.gru.layers.size());
  if (si == 0) {
    map_ = init_map(mix64(cfg_.seed ^ 0x6d6170ULL), lcam_ref_);
    hidden_ = HiddenMap(lcam_ref_.width, lcam_ref_.height, n_layers,
                        w_.baseline ? 0 : w_.gru.dh);
    hooks->on_init(map_, lcam_ref_);
  } else {
    map_ = upsample_map(map_, prev_cam, lcam_ref_);
    hidden_ = upsample_hidden(hidden_, lcam_ref_.width, lcam_ref_.height);
  }

  for (int it = 0; it < cfg_.iters[si]; ++it) {
    sweep(si, it, step, 0, hooks);
    sweep(si, it, step, 1, hooks);
    hooks->on_iteration(step, si, map_, lcam_ref_);
    ++step;
  }
}

void Episode::sweep(int si, int it, int step, int parity,
                    EpisodeHooks* hooks) {
  const Kernel kernel = (si == 0 && cfg_.long_range_coarsest) ? kernel_c()
                                                              : kernel_b();
  hooks->on_sweep_start(step, parity, map_, lcam_ref_);
  const auto shifts = shift_plane_maps(plane_tensor(map_), kernel);
  const double rho = cfg_.perturb.rho(it, cfg_.iters[si]);
  const double eta = cfg_.perturb.eta(it, cfg_.iters[si]);
  const int groups = w_.baseline ? 1 : w_.groups;
  // The intensity path scores photo-consistency; raw inner products of raw
  // intensities would reward any warp landing on a bright region.
  const auto kind =
      w_.baseline ? feat::CorrKind::kNegSsd : feat::CorrKind::kDot;
  const int w = lcam_ref_.width, h = lcam_ref_.height;
  const int n_cand = static_cast<int>(kernel.offsets.size()) + 4;
  const int current_idx = n_cand - 1;
  const int n_sel = std::min<int>(cfg_.n_views, sources_.size());

  for (int y = 0; y < h; ++y)
    for (int x = (y + parity) % 2; x < w; x += 2) {
      auto rng = stream_rng(cfg_.seed, static_cast<std::uint64_t>(step) * 2 +
                                            parity,
                            static_cast<std::uint64_t>(y) * w + x, 1);
      const geom::OrientedPoint cur = map_.at(x, y);
      const Eigen::Vector2d pc = geom::pixel_center(x, y);
      const Eigen::Vector3d ray = lcam_ref_.ray(pc);
      const std::size_t n_src = sources_.size();

      // Per-source visibility from the current plane.
      std::vector<feat::Correlation> cur_corr(n_src);
      std::vector<NodePtr> vhat(n_src);
      std::vector<double> vhat_val(n_src);
      for (std::size_t s = 0; s < n_src; ++s) {
        const auto pri =
            vsel::compute_priors(cur, x, y, lcam_ref_, lcam_src_[s]);
        cur_corr[s] =
            feat::patch_correlation(cur, x, y, fmap_ref_, fmap_src_[s],
                                    lcam_ref_, lcam_src_[s], window_,
                                    attn_h_, groups, kind);
        vhat[s] = vsel::visibility_score(pri, cur_corr[s], w_.vis);
        if (w_.baseline && pri.visible && cur_corr[s].valid) {
          // Handcrafted stand-in for the visibility net: photo-consistency
          // of the current plane, so occluded sources are down-weighted.
          vhat[s] = ad::reshape(
              ad::exp_(ad::scale(ad::mean(cur_corr[s].g), 5.0)), {1});
        }
        vhat_val[s] = vhat[s]->value[0];
      }
      std::vector<int> views, worst;
      hooks->select_views(step, x, y, vhat_val, n_sel, cfg_.m_worst, rng,
                          views, worst);

      // Candidate list: propagated, random-search, perturbed, current.
      std::vector<geom::OrientedPoint> cand(n_cand);
      std::vector<bool> valid(n_cand, false);
      auto admissible = [&](const geom::OrientedPoint& o) {
        if (std::abs(o.n.norm() - 1.0) > 1e-9) return false;
        if (o.n.dot(ray) >= 0.0) return false;
        try {
          const double d = geom::depth_from_plane(o, pc, lcam_ref_.K);
          return d >= lcam_ref_.d_min && d <= lcam_ref_.d_max;
        } catch (const geom::DegeneratePlaneError&) {
          return false;
        }
      };
      for (std::size_t i = 0; i < kernel.offsets.size(); ++i) {
        Eigen::Vector3d n(shifts[i].at3(0, y, x), shifts[i].at3(1, y, x),
                          shifts[i].at3(2, y, x));
        if (n.norm() < 0.5) continue;  // zero padding: off the map
        cand[i] = {n, shifts[i].at3(3, y, x)};
        valid[i] = admissible(cand[i]);
      }
      cand[n_cand - 4] = random_point(pc, lcam_ref_, rng);
      valid[n_cand - 4] = admissible(cand[n_cand - 4]);
      cand[n_cand - 3] = perturb_point(cur, pc, lcam_ref_, rho, eta, rng);
      valid[n_cand - 3] = admissible(cand[n_cand - 3]);
      // A second, tighter draw refines an almost-correct plane quickly.
      cand[n_cand - 2] =
          perturb_point(cur, pc, lcam_ref_, 0.25 * rho, 0.25 * eta, rng);
      valid[n_cand - 2] = admissible(cand[n_cand - 2]);
      cand[current_idx] = cur;
      valid[current_idx] = admissible(cur);

      // Visibility-weighted correlation per candidate.
      std::vector<feat::Correlation> gv(n_cand);
      std::vector<NodePtr> sel_vhat;
      for (int v : views) sel_vhat.push_back(vhat[v]);
      for (int k = 0; k < n_cand; ++k) {
        if (!valid[k]) continue;
        std::vector<feat::Correlation> gs;
        for (int v : views)
          gs.push_back(
              k == current_idx
                  ? cur_corr[v]
                  : feat::patch_correlation(cand[k], x, y, fmap_ref_,
                                            fmap_src_[v], lcam_ref_,
                                            lcam_src_[v], window_,
                                            attn_h_, groups, kind));
        gv[k] = vsel::weighted_correlation(gs, sel_vhat);
        if (!gv[k].valid) valid[k] = false;
      }

      // Smoothness against the 4-connected current planes.
      std::vector<std::array<double, 4>> smooth(n_cand, {0, 0, 0, 0});
      const std::array<std::pair<int, int>, 4> nbr{
          {{0, -1}, {0, 1}, {-1, 0}, {1, 0}}};
      for (int k = 0; k < n_cand; ++k) {
        if (!valid[k]) continue;
        for (int j = 0; j < 4; ++j) {
          const int qx = x + nbr[j].first, qy = y + nbr[j].second;
          if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
          smooth[k][j] = smoothness(cand[k], map_.at(qx, qy), pc,
                                    geom::pixel_center(qx, qy), lcam_ref_.K,
                                    cfg_.smooth_sentinel);
        }
      }

      // Scores.
      std::vector<NodePtr> z_nodes(n_cand);
      Regularized reg;
      if (w_.baseline) {
        // Mean photo-consistency plus a handcrafted version of the learned
        // regularizer: penalize disagreement with the neighboring planes.
        for (int k = 0; k < n_cand; ++k) {
          if (!valid[k]) continue;
          const double m =
              0.25 * (smooth[k][0] + smooth[k][1] + smooth[k][2] +
                      smooth[k][3]);
          // Annealed: photometric only at first, consensus once the field
          // has settled, so early random neighbors cannot freeze in.
          const double anneal =
              cfg_.iters[si] > 1
                  ? static_cast<double>(it) / (cfg_.iters[si] - 1)
                  : 1.0;
          z_nodes[k] = ad::add_scalar(
              ad::mean(gv[k].g),
              -cfg_.baseline_smooth_weight * anneal * m);
        }
      } else {
        reg = regularize_scores(gv, valid, smooth, hidden_, x, y, w_.gru);
        z_nodes = reg.z;
      }
      std::vector<double> z_val(n_cand, -kInf);
      for (int k = 0; k < n_cand; ++k)
        if (valid[k]) z_val[k] = z_nodes[k]->value[0];

      const int chosen =
          hooks->choose(step, x, y, z_val, valid, current_idx, rng);
      hooks->on_pixel(step, x, y, z_nodes, valid, cand, current_idx, chosen,
                      vhat, views, worst);
      if (chosen < 0) continue;  // nothing valid: keep current state
      map_.at(x, y) = cand[chosen];
      if (!w_.baseline)
        for (std::size_t l = 0; l < reg.zeta_next[chosen].size(); ++l) {
          const Array& zn = reg.zeta_next[chosen][l];
          std::copy(zn.data(), zn.data() + w_.gru.dh,
                    hidden_.at(x, y, static_cast<int>(l)));
        }
    }
}

io::FloatImage Episode::depth_image() const {
  io::FloatImage out(map_.width, map_.height, 1);
  for (int y = 0; y < map_.height; ++y)
    for (int x = 0; x < map_.width; ++x) {
      try {
        out.at(x, y) = static_cast<float>(geom::depth_from_plane(
            map_.at(x, y), geom::pixel_center(x, y), lcam_ref_.K));
      } catch (const geom::DegeneratePlaneError&) {
        out.at(x, y) = 0.0f;
      }
    }
  return out;
}

io::FloatImage Episode::normal_image() const {
  io::FloatImage out(map_.width, map_.height, 3);
  for (int y = 0; y < map_.height; ++y)
    for (int x = 0; x < map_.width; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(x, y, c) = static_cast<float>(map_.at(x, y).n[c]);
  return out;
}

ViewResult run_inference(const std::vector<io::FloatImage>& images,
                         const std::vector<geom::Camera>& cams, int ref,
                         const std::vector<int>& sources,
                         const PipelineWeights& weights,
                         const EngineConfig& cfg) {
  ad::NoGradGuard guard;
  Episode e(images, cams, ref, sources, weights, cfg);
  e.run();
  return {e.depth_image(), e.normal_image()};
}

}  // namespace pmrl::pm
