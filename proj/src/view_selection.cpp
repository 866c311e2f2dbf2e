#include "pmrl/view_selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace pmrl::vsel {

namespace {

double angle_between(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  const double c = a.normalized().dot(b.normalized());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

// |det| of the 2x2 Jacobian of the dehomogenized map p -> H p~ at p.
double homography_area_scale(const Eigen::Matrix3d& H,
                             const Eigen::Vector2d& p) {
  const Eigen::Vector3d ph = geom::homogeneous(p);
  const double u = H.row(0).dot(ph);
  const double v = H.row(1).dot(ph);
  const double w = H.row(2).dot(ph);
  Eigen::Matrix2d J;
  for (int j = 0; j < 2; ++j) {
    J(0, j) = (H(0, j) * w - u * H(2, j)) / (w * w);
    J(1, j) = (H(1, j) * w - v * H(2, j)) / (w * w);
  }
  return std::abs(J.determinant());
}

}  // namespace

GeometricPriors compute_priors(const geom::OrientedPoint& omega, int px,
                               int py, const geom::Camera& cam_ref,
                               const geom::Camera& cam_src, double tau0) {
  GeometricPriors out;
  const Eigen::Vector2d p = geom::pixel_center(px, py);
  double d;
  try {
    d = geom::depth_from_plane(omega, p, cam_ref.K);
  } catch (const geom::DegeneratePlaneError&) {
    out.visible = false;
    return out;
  }
  if (!(d > 0.0) || !std::isfinite(d)) {
    out.visible = false;
    return out;
  }
  const Eigen::Vector3d x = geom::unproject(cam_ref, p, d);
  try {
    (void)geom::project(cam_src, x);
  } catch (const geom::BehindCameraError&) {
    out.visible = false;
    return out;
  }

  const Eigen::Matrix3d H = geom::homography(omega, cam_ref, cam_src);
  out.scale_ratio =
      std::clamp(homography_area_scale(H, p), kScaleClampLo, kScaleClampHi);

  const Eigen::Vector3d n_world = cam_ref.R.transpose() * omega.n;
  const Eigen::Vector3d to_src = cam_src.center() - x;
  out.incident_angle = angle_between(n_world, to_src);
  const double tri = angle_between(cam_ref.center() - x, to_src);
  out.tri_angle_diff = std::abs(tri - tau0);
  return out;
}

VisibilityNet VisibilityNet::create(nn::ParamStore& store,
                                    std::mt19937_64& rng, int groups,
                                    double stddev) {
  const std::size_t din = 3 + static_cast<std::size_t>(groups);
  VisibilityNet net;
  net.mlp.ws = {store.create("vis.w0", {16, din}, rng, stddev),
                store.create("vis.w1", {16, 16}, rng, stddev),
                store.create("vis.w2", {1, 16}, rng, stddev)};
  net.mlp.bs = {store.create_zeros("vis.b0", {16}),
                store.create_zeros("vis.b1", {16}),
                store.create_zeros("vis.b2", {1})};
  net.mlp.sigmoid_out = true;
  return net;
}

VisibilityNet VisibilityNet::from_store(const nn::ParamStore& store) {
  VisibilityNet net;
  net.mlp.ws = {store.get("vis.w0"), store.get("vis.w1"), store.get("vis.w2")};
  net.mlp.bs = {store.get("vis.b0"), store.get("vis.b1"), store.get("vis.b2")};
  net.mlp.sigmoid_out = true;
  return net;
}

NodePtr visibility_score(const GeometricPriors& priors,
                         const feat::Correlation& corr,
                         const VisibilityNet& net) {
  if (!priors.visible || !corr.valid) return ad::constant(Array({1}));
  Array p({3});
  p[0] = priors.scale_ratio;
  p[1] = priors.incident_angle;
  p[2] = priors.tri_angle_diff;
  return net.mlp.forward(ad::concat({ad::constant(std::move(p)), corr.g}));
}

std::vector<int> sample_views(const std::vector<double>& vhat, int n,
                              SampleMode mode, std::mt19937_64& rng) {
  const int s = static_cast<int>(vhat.size());
  n = std::min(n, s);
  std::vector<int> order(s);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (vhat[a] != vhat[b]) return vhat[a] > vhat[b];
    return a < b;
  });
  if (mode == SampleMode::kGreedy)
    return {order.begin(), order.begin() + n};

  std::vector<int> out;
  std::vector<double> w = vhat;
  while (static_cast<int>(out.size()) < n) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) break;
    std::discrete_distribution<int> dist(w.begin(), w.end());
    const int pick = dist(rng);
    out.push_back(pick);
    w[pick] = 0.0;
  }
  // Pad with the best remaining regardless of score.
  for (int id : order) {
    if (static_cast<int>(out.size()) >= n) break;
    if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
  }
  return out;
}

feat::Correlation weighted_correlation(
    const std::vector<feat::Correlation>& gs,
    const std::vector<NodePtr>& vhat) {
  if (gs.size() != vhat.size())
    throw std::invalid_argument("weighted_correlation: size mismatch");
  NodePtr num, den;
  std::size_t g_dim = 0;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    g_dim = std::max(g_dim, gs[i].g ? gs[i].g->value.numel() : 0);
    if (!gs[i].valid) continue;
    auto term = ad::scale_node(gs[i].g, vhat[i]);
    num = num ? ad::add(num, term) : term;
    den = den ? ad::add(den, vhat[i]) : vhat[i];
  }
  if (!num) return {ad::constant(Array({std::max<std::size_t>(g_dim, 1)})),
                    false};
  return {ad::scale_node(num, ad::reciprocal(den)), true};
}

}  // namespace pmrl::vsel
