#include "pmrl/features.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace pmrl::feat {

const FeatureLevel& FeaturePyramid::level_for(int denom) const {
  for (const auto& l : levels)
    if (l.denom == denom) return l;
  throw std::invalid_argument("no pyramid level at 1/" + std::to_string(denom));
}

std::vector<std::pair<int, int>> SupportWindow::offsets() const {
  if (size % 2 == 0) throw std::invalid_argument("support window size must be odd");
  std::vector<std::pair<int, int>> out;
  const int r = (size - 1) / 2;
  for (int j = -r; j <= r; ++j)
    for (int i = -r; i <= r; ++i) out.emplace_back(i * dilation, j * dilation);
  return out;
}

FpnWeights FpnWeights::create(nn::ParamStore& store, std::mt19937_64& rng,
                              double stddev) {
  FpnWeights w;
  w.conv1 = store.create("fpn.conv1", {8, 1, 3, 3}, rng, stddev);
  w.conv2 = store.create("fpn.conv2", {16, 8, 3, 3}, rng, stddev);
  w.conv3 = store.create("fpn.conv3", {32, 16, 3, 3}, rng, stddev);
  w.lat1 = store.create("fpn.lat1", {8, 8, 1, 1}, rng, stddev);
  w.lat2 = store.create("fpn.lat2", {16, 16, 1, 1}, rng, stddev);
  w.td1 = store.create("fpn.td1", {8, 16, 1, 1}, rng, stddev);
  w.td2 = store.create("fpn.td2", {16, 32, 1, 1}, rng, stddev);
  w.h8 = store.create("attn.h.8", {32}, rng, stddev);
  w.h4 = store.create("attn.h.4", {16}, rng, stddev);
  w.h2 = store.create("attn.h.2", {8}, rng, stddev);
  return w;
}

FpnWeights FpnWeights::from_store(const nn::ParamStore& store) {
  FpnWeights w;
  w.conv1 = store.get("fpn.conv1");
  w.conv2 = store.get("fpn.conv2");
  w.conv3 = store.get("fpn.conv3");
  w.lat1 = store.get("fpn.lat1");
  w.lat2 = store.get("fpn.lat2");
  w.td1 = store.get("fpn.td1");
  w.td2 = store.get("fpn.td2");
  w.h8 = store.get("attn.h.8");
  w.h4 = store.get("attn.h.4");
  w.h2 = store.get("attn.h.2");
  return w;
}

NodePtr FpnWeights::attn_h(int denom) const {
  switch (denom) {
    case 8: return h8;
    case 4: return h4;
    case 2: return h2;
  }
  throw std::invalid_argument("attn_h: bad denom");
}

namespace {

Array image_tensor(const io::FloatImage& img) {
  // Pad right/bottom by edge replication up to a multiple of 8.
  const int w = (img.width + 7) / 8 * 8;
  const int h = (img.height + 7) / 8 * 8;
  Array a({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      a.at3(0, y, x) = img.at(std::min(x, img.width - 1),
                              std::min(y, img.height - 1));
  return a;
}

}  // namespace

FeaturePyramid extract_pyramid(const io::FloatImage& image,
                               const FpnWeights& w) {
  auto in = ad::constant(image_tensor(image));
  auto c1 = ad::leaky_relu(ad::conv2d(in, w.conv1, 2, 1));
  auto c2 = ad::leaky_relu(ad::conv2d(c1, w.conv2, 2, 1));
  auto c3 = ad::leaky_relu(ad::conv2d(c2, w.conv3, 2, 1));
  auto f8 = c3;
  auto f4 = ad::add(ad::conv2d(c2, w.lat2, 1, 0),
                    ad::upsample2x(ad::conv2d(f8, w.td2, 1, 0)));
  auto f2 = ad::add(ad::conv2d(c1, w.lat1, 1, 0),
                    ad::upsample2x(ad::conv2d(f4, w.td1, 1, 0)));
  return {{{8, f8}, {4, f4}, {2, f2}}};
}

FeaturePyramid extract_pyramid_intensity(const io::FloatImage& image) {
  const Array full = image_tensor(image);
  double mean = 0.0;
  for (std::size_t i = 0; i < full.numel(); ++i) mean += full[i];
  mean /= static_cast<double>(full.numel());
  double var = 0.0;
  for (std::size_t i = 0; i < full.numel(); ++i) {
    const double d = full[i] - mean;
    var += d * d;
  }
  const double inv_std = 1.0 / std::sqrt(var / full.numel() + 1e-12);

  const int w0 = static_cast<int>(full.shape()[2]);
  const int h0 = static_cast<int>(full.shape()[1]);
  FeaturePyramid pyr;
  for (int denom : {8, 4, 2}) {
    const int w = w0 / denom, h = h0 / denom;
    Array a({1, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < denom; ++dy)
          for (int dx = 0; dx < denom; ++dx)
            acc += full.at3(0, y * denom + dy, x * denom + dx);
        a.at3(0, y, x) = (acc / (denom * denom) - mean) * inv_std;
      }
    pyr.levels.push_back({denom, ad::constant(std::move(a))});
  }
  return pyr;
}

std::optional<std::vector<ad::GatherTap>> bilinear_taps(
    int width, int height, const Eigen::Vector2d& q) {
  if (!(q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= width - 1.0 &&
        q.y() <= height - 1.0))
    return std::nullopt;
  int x0 = static_cast<int>(std::floor(q.x()));
  int y0 = static_cast<int>(std::floor(q.y()));
  x0 = std::min(x0, width - 2 >= 0 ? width - 2 : 0);
  y0 = std::min(y0, height - 2 >= 0 ? height - 2 : 0);
  const double fx = q.x() - x0;
  const double fy = q.y() - y0;
  std::vector<ad::GatherTap> taps;
  auto push = [&](int y, int x, double w) {
    if (w != 0.0)
      taps.push_back({static_cast<std::size_t>(y), static_cast<std::size_t>(x), w});
  };
  push(y0, x0, (1 - fx) * (1 - fy));
  if (x0 + 1 < width) push(y0, x0 + 1, fx * (1 - fy));
  if (y0 + 1 < height) push(y0 + 1, x0, (1 - fx) * fy);
  if (x0 + 1 < width && y0 + 1 < height) push(y0 + 1, x0 + 1, fx * fy);
  return taps;
}

std::optional<NodePtr> bilinear_sample(const NodePtr& fmap,
                                       const Eigen::Vector2d& q) {
  const auto& s = fmap->value.shape();
  auto taps = bilinear_taps(static_cast<int>(s[2]), static_cast<int>(s[1]), q);
  if (!taps) return std::nullopt;
  return ad::linear_gather(fmap, *taps);
}

NodePtr group_correlation(const NodePtr& f_ref, const NodePtr& f_src,
                          int groups) {
  const std::size_t c = f_ref->value.numel();
  if (f_src->value.numel() != c)
    throw std::invalid_argument("group_correlation: channel mismatch");
  if (groups <= 0 || c % groups != 0)
    throw std::invalid_argument("group_correlation: C not divisible by G");
  const std::size_t cs = c / groups;
  const double scale = static_cast<double>(groups) / static_cast<double>(c);
  std::vector<NodePtr> entries;
  for (int g = 0; g < groups; ++g)
    entries.push_back(ad::scale(
        ad::dot(ad::slice(f_ref, g * cs, cs), ad::slice(f_src, g * cs, cs)),
        scale));
  return ad::stack_scalars(entries);
}

namespace {

NodePtr group_neg_ssd(const NodePtr& f_ref, const NodePtr& f_src, int groups) {
  const std::size_t c = f_ref->value.numel();
  const std::size_t cs = c / groups;
  const double scale = -static_cast<double>(groups) / static_cast<double>(c);
  std::vector<NodePtr> entries;
  for (int g = 0; g < groups; ++g)
    entries.push_back(ad::scale(
        ad::sum(ad::square(
            ad::sub(ad::slice(f_ref, g * cs, cs), ad::slice(f_src, g * cs, cs)))),
        scale));
  return ad::stack_scalars(entries);
}

}  // namespace

namespace {

NodePtr grid_feature(const NodePtr& fmap, int x, int y) {
  return ad::linear_gather(
      fmap, {{static_cast<std::size_t>(y), static_cast<std::size_t>(x), 1.0}});
}

// Logit of the supporting pixel (clamped to bounds) against h.
NodePtr support_logit(const NodePtr& fmap, int px, int py, int dx, int dy,
                      const NodePtr& h, int& qx, int& qy) {
  const auto& s = fmap->value.shape();
  const int w = static_cast<int>(s[2]), hh = static_cast<int>(s[1]);
  qx = std::clamp(px + dx, 0, w - 1);
  qy = std::clamp(py + dy, 0, hh - 1);
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(s[0]));
  return ad::scale(ad::dot(grid_feature(fmap, qx, qy), h), inv_sqrt_c);
}

}  // namespace

NodePtr attention_weights(const NodePtr& fmap_ref, int px, int py,
                          const SupportWindow& window, const NodePtr& h) {
  std::vector<NodePtr> logits;
  for (auto [dx, dy] : window.offsets()) {
    int qx, qy;
    logits.push_back(support_logit(fmap_ref, px, py, dx, dy, h, qx, qy));
  }
  return ad::softmax(ad::stack_scalars(logits), 0);
}

Correlation patch_correlation(const geom::OrientedPoint& omega, int px, int py,
                              const NodePtr& fmap_ref, const NodePtr& fmap_src,
                              const geom::Camera& cam_ref,
                              const geom::Camera& cam_src,
                              const SupportWindow& window, const NodePtr& h,
                              int groups, CorrKind kind) {
  const int g = groups;
  auto invalid = [&] {
    return Correlation{ad::constant(Array({static_cast<std::size_t>(g)})),
                       false};
  };
  Eigen::Matrix3d H;
  try {
    H = geom::homography(omega, cam_ref, cam_src);
  } catch (const geom::DegeneratePlaneError&) {
    return invalid();
  }

  const auto& ss = fmap_src->value.shape();
  const int sw = static_cast<int>(ss[2]), sh = static_cast<int>(ss[1]);
  const auto offs = window.offsets();
  std::vector<NodePtr> logits, corrs;
  int n_out = 0;
  for (auto [dx, dy] : offs) {
    int qx, qy;
    auto logit = support_logit(fmap_ref, px, py, dx, dy, h, qx, qy);
    if (kind == CorrKind::kNegSsd) {
      // Handcrafted stand-in for the learned attention: bilateral weight on
      // intensity similarity, so supports across an edge drop out.
      auto diff = ad::sub(grid_feature(fmap_ref, qx, qy),
                          grid_feature(fmap_ref, px, py));
      logit = ad::scale(ad::sum(ad::square(diff)), -4.0);
    }
    Eigen::Vector2d warped;
    if (!geom::apply_homography(H, geom::pixel_center(qx, qy), warped)) {
      ++n_out;
      continue;
    }
    // Feature grid coordinates sit half a pixel inside the pixel centers.
    auto taps = bilinear_taps(sw, sh, warped - Eigen::Vector2d(0.5, 0.5));
    if (!taps) {
      ++n_out;
      continue;
    }
    logits.push_back(std::move(logit));
    auto fr = grid_feature(fmap_ref, qx, qy);
    auto fs = ad::linear_gather(fmap_src, *taps);
    corrs.push_back(kind == CorrKind::kDot ? group_correlation(fr, fs, g)
                                           : group_neg_ssd(fr, fs, g));
  }
  if (2 * n_out > static_cast<int>(offs.size())) return invalid();

  auto attn = ad::softmax(ad::stack_scalars(logits), 0);
  NodePtr acc;
  for (std::size_t i = 0; i < corrs.size(); ++i) {
    auto term = ad::scale_node(corrs[i], ad::index(attn, i));
    acc = acc ? ad::add(acc, term) : term;
  }
  return {acc, true};
}

geom::Camera level_camera(const geom::Camera& cam, int denom) {
  geom::Camera out = cam;
  const double s = 1.0 / denom;
  out.K.row(0) *= s;
  out.K.row(1) *= s;
  out.width = cam.width / denom;
  out.height = cam.height / denom;
  return out;
}

}  // namespace pmrl::feat
