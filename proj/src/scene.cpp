#include "pmrl/scene.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace pmrl::synth {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double lattice_value(std::int64_t ix, std::int64_t iy, std::int64_t iz,
                     std::uint64_t seed) {
  std::uint64_t h = seed;
  h = splitmix64(h ^ static_cast<std::uint64_t>(ix) * 0x8da6b343ULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(iy) * 0xd8163841ULL);
  h = splitmix64(h ^ static_cast<std::uint64_t>(iz) * 0xcb1ab31fULL);
  return static_cast<double>(h >> 11) * (1.0 / 9007199254740992.0);
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

double value_noise(const Eigen::Vector3d& x, std::uint64_t seed) {
  const std::int64_t ix = static_cast<std::int64_t>(std::floor(x.x()));
  const std::int64_t iy = static_cast<std::int64_t>(std::floor(x.y()));
  const std::int64_t iz = static_cast<std::int64_t>(std::floor(x.z()));
  const double fx = smoothstep(x.x() - std::floor(x.x()));
  const double fy = smoothstep(x.y() - std::floor(x.y()));
  const double fz = smoothstep(x.z() - std::floor(x.z()));
  double c[2][2][2];
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx)
        c[dz][dy][dx] = lattice_value(ix + dx, iy + dy, iz + dz, seed);
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  double yz[2][2];
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      yz[dz][dy] = lerp(c[dz][dy][0], c[dz][dy][1], fx);
  double z2[2];
  for (int dz = 0; dz < 2; ++dz) z2[dz] = lerp(yz[dz][0], yz[dz][1], fy);
  return lerp(z2[0], z2[1], fz);
}

constexpr double kBaseFrequency = 3.0;
constexpr double kArcRadius = 3.5;
constexpr double kDepthMin = 1.5;
constexpr double kDepthMax = 7.0;

geom::Camera make_lookat_camera(const Eigen::Vector3d& pos, int width,
                                int height) {
  geom::Camera cam;
  const Eigen::Vector3d target = Eigen::Vector3d::Zero();
  const Eigen::Vector3d z = (target - pos).normalized();
  const Eigen::Vector3d up(0, 1, 0);
  const Eigen::Vector3d x = z.cross(up).normalized();
  const Eigen::Vector3d y = z.cross(x);
  cam.R.row(0) = x;
  cam.R.row(1) = y;
  cam.R.row(2) = z;
  cam.t = -cam.R * pos;
  const double f = 1.3 * width;
  cam.K << f, 0, width / 2.0, 0, f, height / 2.0, 0, 0, 1;
  cam.width = width;
  cam.height = height;
  cam.d_min = kDepthMin;
  cam.d_max = kDepthMax;
  return cam;
}

Eigen::Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Vector3d v(g(rng), g(rng), g(rng));
  while (v.norm() < 1e-9) v = {g(rng), g(rng), g(rng)};
  return v.normalized();
}

// Random unit vector within `cone_rad` of `axis`.
Eigen::Vector3d random_in_cone(const Eigen::Vector3d& axis, double cone_rad,
                               std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double cos_max = std::cos(cone_rad);
  const double cz = cos_max + (1.0 - cos_max) * u01(rng);
  const double sz = std::sqrt(std::max(0.0, 1.0 - cz * cz));
  const double phi = 2.0 * M_PI * u01(rng);
  // Orthonormal frame around axis.
  Eigen::Vector3d a = std::abs(axis.x()) < 0.9 ? Eigen::Vector3d(1, 0, 0)
                                               : Eigen::Vector3d(0, 1, 0);
  const Eigen::Vector3d e1 = axis.cross(a).normalized();
  const Eigen::Vector3d e2 = axis.cross(e1);
  return (cz * axis + sz * (std::cos(phi) * e1 + std::sin(phi) * e2))
      .normalized();
}

void finalize_patch_frame(PlanarPatch& p, std::mt19937_64& rng) {
  p.n.normalize();
  p.delta = -p.n.dot(p.center);
  const Eigen::Vector3d ref = random_in_cone(
      std::abs(p.n.x()) < 0.9 ? Eigen::Vector3d(1, 0, 0)
                              : Eigen::Vector3d(0, 1, 0),
      0.0, rng);
  p.u_axis = p.n.cross(ref).normalized();
  p.v_axis = p.n.cross(p.u_axis);
}

SyntheticScene build_layout(std::uint64_t seed, const SceneConfig& cfg,
                            std::mt19937_64& rng) {
  SyntheticScene scene;
  scene.seed = seed;
  scene.config = cfg;
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  // Cameras on an arc around the y axis, all looking at the origin.
  // ~12 degrees between neighbors keeps adjacent pairs near the ideal
  // triangulation angle with plenty of frustum overlap.
  const double half_span = 6.0 * (cfg.num_cameras - 1);
  for (int i = 0; i < cfg.num_cameras; ++i) {
    const double t = cfg.num_cameras == 1
                         ? 0.5
                         : static_cast<double>(i) / (cfg.num_cameras - 1);
    const double ang = (-half_span + 2.0 * half_span * t) * M_PI / 180.0 +
                       0.02 * (u01(rng) - 0.5);
    const double radius = kArcRadius + 0.2 * (u01(rng) - 0.5);
    const double y = 0.5 * (u01(rng) - 0.5);
    const Eigen::Vector3d pos(radius * std::sin(ang), y,
                              -radius * std::cos(ang));
    scene.cameras.push_back(
        make_lookat_camera(pos, cfg.width, cfg.height));
  }

  // Backdrop covering the whole frustum.
  {
    PlanarPatch bd;
    bd.center = {0.1 * (u01(rng) - 0.5), 0.1 * (u01(rng) - 0.5), 1.0};
    bd.n = random_in_cone(Eigen::Vector3d(0, 0, -1), 8.0 * M_PI / 180.0, rng);
    bd.half_u = 3.2;
    bd.half_v = 3.2;
    bd.texture_seed = splitmix64(seed ^ 0x6261636bULL);
    finalize_patch_frame(bd, rng);
    scene.patches.push_back(bd);
  }

  // Foreground patches in a jittered 3x3 grid so they never shadow each
  // other within the camera cone.
  std::vector<int> cells(9);
  for (int i = 0; i < 9; ++i) cells[i] = i;
  std::shuffle(cells.begin(), cells.end(), rng);
  const int n_fg = std::max(0, cfg.num_patches - 1);
  for (int i = 0; i < n_fg && i < 9; ++i) {
    const int cx = cells[i] % 3, cy = cells[i] / 3;
    PlanarPatch p;
    p.center = {(cx - 1) * 0.8 + 0.2 * (u01(rng) - 0.5),
                (cy - 1) * 0.8 + 0.2 * (u01(rng) - 0.5),
                0.5 * (u01(rng) - 0.5)};
    p.n = random_in_cone(Eigen::Vector3d(0, 0, -1), 35.0 * M_PI / 180.0, rng);
    p.half_u = 0.20 + 0.08 * u01(rng);
    p.half_v = 0.20 + 0.08 * u01(rng);
    p.texture_seed = splitmix64(seed ^ (0x70617463ULL + i));
    finalize_patch_frame(p, rng);
    scene.patches.push_back(p);
  }

  // Occluders sit between one camera and the scene.
  const int n_occ = static_cast<int>(
      std::lround(cfg.occluder_fraction * cfg.num_cameras));
  for (int i = 0; i < n_occ; ++i) {
    const int target = i % cfg.num_cameras;
    const Eigen::Vector3d c = scene.cameras[target].center();
    PlanarPatch p;
    p.center = 0.5 * c;
    p.center += Eigen::Vector3d(0.1 * (u01(rng) - 0.5),
                                0.1 * (u01(rng) - 0.5), 0.0);
    p.n = c.normalized();
    p.half_u = 0.35 + 0.1 * u01(rng);
    p.half_v = 0.35 + 0.1 * u01(rng);
    p.texture_seed = splitmix64(seed ^ (0x6f63636cULL + i));
    p.occluder = true;
    finalize_patch_frame(p, rng);
    scene.patches.push_back(p);
  }
  return scene;
}

bool layout_acceptable(const SyntheticScene& scene) {
  const auto& cfg = scene.config;
  bool has_occluders = false;
  for (const auto& p : scene.patches) has_occluders |= p.occluder;

  for (const auto& cam : scene.cameras) {
    // All patch corners must project in front of the camera within range.
    for (const auto& p : scene.patches) {
      for (int su = -1; su <= 1; su += 2)
        for (int sv = -1; sv <= 1; sv += 2) {
          const Eigen::Vector3d corner = p.center +
                                         su * p.half_u * p.u_axis +
                                         sv * p.half_v * p.v_axis;
          try {
            const auto [px, depth] = geom::project(cam, corner);
            if (depth < cam.d_min || depth > cam.d_max) return false;
          } catch (const geom::BehindCameraError&) {
            return false;
          }
        }
    }
    // Coverage.
    int hits = 0;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x)
        if (cast_ray(scene, cam, geom::pixel_center(x, y))) ++hits;
    if (hits < static_cast<int>(0.6 * cfg.width * cfg.height)) return false;
  }

  if (!has_occluders) {
    for (const auto& cam : scene.cameras) {
      const auto mask = visible_patch_mask(scene, cam);
      for (bool v : mask)
        if (!v) return false;
    }
  }
  return true;
}

}  // namespace

double texture_value(const Eigen::Vector3d& x, std::uint64_t seed,
                     int octaves) {
  double acc = 0.0, amp = 1.0, amp_sum = 0.0, freq = kBaseFrequency;
  for (int o = 0; o < octaves; ++o) {
    acc += amp * value_noise(freq * x, splitmix64(seed + o));
    amp_sum += amp;
    amp *= 0.5;
    freq *= 2.0;
  }
  return acc / amp_sum;
}

std::optional<std::pair<int, double>> cast_ray(const SyntheticScene& scene,
                                               const geom::Camera& camera,
                                               const Eigen::Vector2d& pixel) {
  const Eigen::Vector3d origin = camera.center();
  // Unnormalized so the ray parameter equals camera depth.
  const Eigen::Vector3d dir = camera.R.transpose() * camera.ray(pixel);
  int best = -1;
  double best_depth = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scene.patches.size(); ++i) {
    const auto& p = scene.patches[i];
    const double denom = p.n.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    const double s = -(p.n.dot(origin) + p.delta) / denom;
    if (s <= 0.0 || s >= best_depth) continue;
    const Eigen::Vector3d x = origin + s * dir;
    const Eigen::Vector3d rel = x - p.center;
    if (std::abs(rel.dot(p.u_axis)) > p.half_u ||
        std::abs(rel.dot(p.v_axis)) > p.half_v)
      continue;
    best = static_cast<int>(i);
    best_depth = s;
  }
  if (best < 0) return std::nullopt;
  return std::make_pair(best, best_depth);
}

std::vector<bool> visible_patch_mask(const SyntheticScene& scene,
                                     const geom::Camera& camera) {
  std::vector<bool> mask(scene.patches.size(), false);
  for (int y = 0; y < scene.config.height; ++y)
    for (int x = 0; x < scene.config.width; ++x)
      if (auto hit = cast_ray(scene, camera, geom::pixel_center(x, y)))
        mask[hit->first] = true;
  return mask;
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.num_cameras < 2)
    throw std::invalid_argument("generate_scene: need at least 2 cameras");
  if (config.num_patches < 1)
    throw std::invalid_argument("generate_scene: need at least 1 patch");
  constexpr int kMaxAttempts = 16;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    std::mt19937_64 rng(splitmix64(seed ^ (0x7363656eULL + attempt)));
    SyntheticScene scene = build_layout(seed, config, rng);
    if (layout_acceptable(scene)) return scene;
  }
  throw GenerationError("generate_scene: no acceptable layout after " +
                        std::to_string(kMaxAttempts) + " attempts (seed " +
                        std::to_string(seed) + ")");
}

RenderedView render_view(const SyntheticScene& scene,
                         const geom::Camera& camera) {
  const int w = scene.config.width, h = scene.config.height;
  RenderedView view;
  view.camera = camera;
  view.image = io::FloatImage(w, h, 1);
  view.gt_depth = io::FloatImage(w, h, 1);
  view.gt_normal = io::FloatImage(w, h, 3);
  const Eigen::Vector3d origin = camera.center();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Eigen::Vector2d px = geom::pixel_center(x, y);
      const auto hit = cast_ray(scene, camera, px);
      if (!hit) continue;  // depth stays at the 0 sentinel
      const auto& patch = scene.patches[hit->first];
      const Eigen::Vector3d dir = camera.R.transpose() * camera.ray(px);
      const Eigen::Vector3d xw = origin + hit->second * dir;
      view.gt_depth.at(x, y) = static_cast<float>(hit->second);
      Eigen::Vector3d n_cam = camera.R * patch.n;
      if (n_cam.dot(camera.ray(px)) > 0.0) n_cam = -n_cam;
      for (int c = 0; c < 3; ++c)
        view.gt_normal.at(x, y, c) = static_cast<float>(n_cam[c]);
      view.image.at(x, y) = static_cast<float>(
          texture_value(xw, patch.texture_seed, scene.config.texture_octaves));
    }
  return view;
}

namespace {
std::string view_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%02zu.pfm", prefix, i);
  return buf;
}
}  // namespace

void write_views(const std::string& dir,
                 const std::vector<RenderedView>& views) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::vector<geom::Camera> cams;
  for (std::size_t i = 0; i < views.size(); ++i) {
    io::write_pfm(dir + "/" + view_name("view", i), views[i].image);
    io::write_pfm(dir + "/" + view_name("depth", i), views[i].gt_depth);
    io::write_pfm(dir + "/" + view_name("normal", i), views[i].gt_normal);
    cams.push_back(views[i].camera);
  }
  geom::write_cameras(dir + "/cameras.txt", cams);
}

std::vector<RenderedView> read_views(const std::string& dir) {
  const auto cams = geom::read_cameras(dir + "/cameras.txt");
  std::vector<RenderedView> views(cams.size());
  for (std::size_t i = 0; i < cams.size(); ++i) {
    views[i].camera = cams[i];
    views[i].image = io::read_pfm(dir + "/" + view_name("view", i));
    views[i].gt_depth = io::read_pfm(dir + "/" + view_name("depth", i));
    views[i].gt_normal = io::read_pfm(dir + "/" + view_name("normal", i));
  }
  return views;
}

std::vector<int> select_source_views(const SyntheticScene& scene, int ref_view,
                                     int count, std::mt19937_64& rng) {
  const int n_cams = static_cast<int>(scene.cameras.size());
  std::vector<std::pair<double, int>> ranked;  // (-overlap, id)
  const auto ref_mask = visible_patch_mask(scene, scene.cameras[ref_view]);
  for (int i = 0; i < n_cams; ++i) {
    if (i == ref_view) continue;
    const auto m = visible_patch_mask(scene, scene.cameras[i]);
    int both = 0, either = 0;
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (scene.patches[k].occluder) continue;
      both += (m[k] && ref_mask[k]);
      either += (m[k] || ref_mask[k]);
    }
    const double overlap = either ? static_cast<double>(both) / either : 0.0;
    ranked.emplace_back(-overlap, i);
  }
  std::sort(ranked.begin(), ranked.end());
  count = std::min<int>(count, static_cast<int>(ranked.size()));
  // Half well-overlapping, half poorly-overlapping.
  const int n_best = (count + 1) / 2;
  std::vector<int> out;
  for (int i = 0; i < n_best; ++i) out.push_back(ranked[i].second);
  std::vector<int> rest;
  for (std::size_t i = n_best; i < ranked.size(); ++i)
    rest.push_back(ranked[i].second);
  std::shuffle(rest.begin(), rest.end(), rng);
  // Prefer the tail (poor overlap) among the shuffled remainder.
  while (static_cast<int>(out.size()) < count && !rest.empty()) {
    out.push_back(rest.back());
    rest.pop_back();
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace pmrl::synth
