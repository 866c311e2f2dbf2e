#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pmrl/geometry.hpp"
#include "pmrl/pfm.hpp"

namespace pmrl::synth {

// Textured rectangle on a world plane n.X + delta = 0.
struct PlanarPatch {
  Eigen::Vector3d n = Eigen::Vector3d(0, 0, -1);  // unit
  double delta = 0.0;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d u_axis = Eigen::Vector3d(1, 0, 0);
  Eigen::Vector3d v_axis = Eigen::Vector3d(0, 1, 0);
  double half_u = 0.5;
  double half_v = 0.5;
  std::uint64_t texture_seed = 0;
  bool occluder = false;
};

struct SceneConfig {
  int num_patches = 6;   // includes the backdrop
  int num_cameras = 6;
  int texture_octaves = 4;
  double occluder_fraction = 0.0;
  int width = 64;
  int height = 64;
};

struct SyntheticScene {
  std::vector<PlanarPatch> patches;
  std::vector<geom::Camera> cameras;
  std::uint64_t seed = 0;
  SceneConfig config;
};

struct RenderedView {
  io::FloatImage image;      // 1 channel, [0,1]
  io::FloatImage gt_depth;   // 1 channel, 0 = no hit
  io::FloatImage gt_normal;  // 3 channels, camera frame, unit where hit
  geom::Camera camera;
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Smooth multi-octave value noise in [0,1], evaluated at a 3D point.
double texture_value(const Eigen::Vector3d& x, std::uint64_t seed,
                     int octaves);

// Deterministic for a fixed seed; retries layout internally until every
// camera sees >= 60% patch coverage, then throws GenerationError.
SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Nearest ray-patch intersection per pixel; Lambertian analytic texture.
RenderedView render_view(const SyntheticScene& scene,
                         const geom::Camera& camera);

// Ray cast without shading: nearest patch index (or nullopt) and its depth.
std::optional<std::pair<int, double>> cast_ray(const SyntheticScene& scene,
                                               const geom::Camera& camera,
                                               const Eigen::Vector2d& pixel);

// Per-patch "is hit by at least one pixel as nearest surface" mask.
std::vector<bool> visible_patch_mask(const SyntheticScene& scene,
                                     const geom::Camera& camera);

// Source views for a reference: half from the best co-visibility ranking,
// half from the worst, up to `count`.
std::vector<int> select_source_views(const SyntheticScene& scene, int ref_view,
                                     int count, std::mt19937_64& rng);

// view_NN.pfm / depth_NN.pfm / normal_NN.pfm per view + cameras.txt.
void write_views(const std::string& dir,
                 const std::vector<RenderedView>& views);
std::vector<RenderedView> read_views(const std::string& dir);

}  // namespace pmrl::synth
