#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include <CLI11.hpp>
#include <json.hpp>

#include "pmrl/config.hpp"
#include "pmrl/fusion.hpp"
#include "pmrl/rl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmrl;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

struct CliOptions {
  std::string config_path;
  std::string out;
  std::string checkpoint;
  bool baseline = false;
  bool dump_config = false;
  bool has_seed = false;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = keep config value
  int epochs = -1;  // -1 = keep config value
};

cfg::PipelineConfig resolve_config(const CliOptions& opt) {
  auto c = cfg::load_config(opt.config_path);
  if (opt.has_seed) c.seed = opt.seed;
  if (opt.threads > 0) c.threads = opt.threads;
  if (opt.epochs >= 0) c.epochs = opt.epochs;
  cfg::validate(c);
  return c;
}

std::string two_digit(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%02d", prefix, i);
  return buf;
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << j.dump(2) << "\n";
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  return json::parse(in);
}

// ---------------------------------------------------------------- synth ----

int cmd_synth(const CliOptions& opt) {
  const auto c = resolve_config(opt);
  if (opt.out.empty()) throw cfg::ValidationError("synth: --out is required");

  // Generate everything before the first write so a validation or layout
  // failure leaves no partial dataset.
  std::vector<std::vector<synth::RenderedView>> rendered;
  json scenes = json::array();
  for (int i = 0; i < c.num_scenes; ++i) {
    const std::uint64_t scene_seed = c.seed + static_cast<std::uint64_t>(i);
    const auto scene = synth::generate_scene(scene_seed, c.scene);
    std::vector<synth::RenderedView> views;
    for (const auto& cam : scene.cameras)
      views.push_back(synth::render_view(scene, cam));
    rendered.push_back(std::move(views));
    scenes.push_back({{"dir", two_digit("scene", i)},
                      {"seed", scene_seed},
                      {"views", c.scene.num_cameras}});
  }

  fs::create_directories(opt.out);
  for (int i = 0; i < c.num_scenes; ++i)
    synth::write_views((fs::path(opt.out) / two_digit("scene", i)).string(),
                       rendered[static_cast<std::size_t>(i)]);
  json manifest{{"config_hash", cfg::config_hash(c)},
                {"seed", c.seed},
                {"scene", cfg::config_to_json(c)["scene"]},
                {"scenes", scenes}};
  write_json((fs::path(opt.out) / "manifest.json").string(), manifest);
  std::cout << manifest.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- train ----

int parse_start_epoch(const std::string& checkpoint) {
  const std::string stem = fs::path(checkpoint).stem().string();
  if (stem == "initial") return 0;
  if (stem.rfind("epoch_", 0) == 0) {
    try {
      return std::stoi(stem.substr(6)) + 1;
    } catch (const std::exception&) {
    }
  }
  throw cfg::ValidationError(
      "train: cannot derive the resume epoch from checkpoint name '" + stem +
      "' (expected initial.ckpt or epoch_NNN.ckpt)");
}

int cmd_train(const CliOptions& opt, const std::string& dataset) {
  const auto c = resolve_config(opt);
  if (opt.out.empty()) throw cfg::ValidationError("train: --out is required");

  const json manifest = read_json((fs::path(dataset) / "manifest.json").string());
  for (const char* key : {"scene", "scenes", "seed"})
    if (!manifest.contains(key))
      throw cfg::ValidationError("train: manifest missing key '" +
                                 std::string(key) + "'");
  synth::SceneConfig scfg = c.scene;
  const auto& ms = manifest["scene"];
  scfg.num_patches = ms.at("num_patches");
  scfg.num_cameras = ms.at("num_cameras");
  scfg.texture_octaves = ms.at("texture_octaves");
  scfg.occluder_fraction = ms.at("occluder_fraction");
  scfg.width = ms.at("width");
  scfg.height = ms.at("height");

  // Scenes are regenerated from their manifest seeds; generation is
  // deterministic, so they match the PFMs on disk exactly.
  std::vector<rl::TrainScene> scenes;
  for (const auto& entry : manifest["scenes"]) {
    const std::uint64_t s = entry.at("seed");
    scenes.push_back(rl::make_train_scene(s, scfg, c.num_sources, s));
  }

  nn::ParamStore store;
  std::mt19937_64 rng(c.seed);
  const auto weights = pm::PipelineWeights::create(store, rng, c.groups);

  int start_epoch = 0;
  if (!opt.checkpoint.empty()) {
    store.load(opt.checkpoint);
    start_epoch = parse_start_epoch(opt.checkpoint);
  }

  fs::create_directories(opt.out);
  auto tc = c.train_config();
  tc.log_path = (fs::path(opt.out) / "train.log.jsonl").string();
  tc.checkpoint_dir = opt.out;
  if (start_epoch == 0) {
    store.save((fs::path(opt.out) / "initial.ckpt").string());
    std::ofstream log(tc.log_path, std::ios::app);
    log << json{{"config_hash", cfg::config_hash(c)}, {"seed", c.seed}}.dump()
        << "\n";
  }

  const auto stats = rl::train(scenes, store, weights, tc, start_epoch);
  json summary{{"config_hash", cfg::config_hash(c)},
               {"epochs_run", stats.size()},
               {"start_epoch", start_epoch}};
  if (!stats.empty()) {
    summary["final_mean_reward"] = stats.back().mean_reward;
    summary["final_depth_mae"] = stats.back().depth_mae;
  }
  std::cout << summary.dump(2) << "\n";
  return 0;
}

// ---------------------------------------------------------------- infer ----

std::vector<synth::RenderedView> load_scene_dir(const std::string& dir,
                                                int expect_views = -1) {
  std::vector<std::string> missing;
  if (!fs::exists(fs::path(dir) / "cameras.txt"))
    missing.push_back(dir + "/cameras.txt");
  if (!missing.empty())
    throw std::runtime_error("missing files: " + missing.front());
  auto views = synth::read_views(dir);
  if (expect_views >= 0 && static_cast<int>(views.size()) != expect_views)
    throw std::runtime_error(dir + ": expected " +
                             std::to_string(expect_views) + " views, found " +
                             std::to_string(views.size()));
  return views;
}

int cmd_infer(const CliOptions& opt, const std::string& scene_dir) {
  const auto c = resolve_config(opt);
  if (opt.out.empty()) throw cfg::ValidationError("infer: --out is required");
  if (!opt.baseline && opt.checkpoint.empty())
    throw cfg::ValidationError(
        "infer: --checkpoint is required unless --baseline is given");

  const auto views = load_scene_dir(scene_dir);
  std::vector<io::FloatImage> images;
  std::vector<geom::Camera> cams;
  for (const auto& v : views) {
    images.push_back(v.image);
    cams.push_back(v.camera);
  }

  nn::ParamStore store;
  pm::PipelineWeights weights;
  if (opt.baseline) {
    weights = pm::PipelineWeights::make_baseline();
  } else {
    store.load(opt.checkpoint);
    weights = pm::PipelineWeights::from_store(store, c.groups);
  }

  fs::create_directories(opt.out);
  const auto ec = c.inference_engine();
  for (int ref = 0; ref < static_cast<int>(views.size()); ++ref) {
    std::vector<int> sources;
    for (int i = 0; i < static_cast<int>(views.size()); ++i)
      if (i != ref) sources.push_back(i);
    const auto result =
        pm::run_inference(images, cams, ref, sources, weights, ec);
    io::write_pfm(
        (fs::path(opt.out) / (two_digit("depth", ref) + ".pfm")).string(),
        result.depth);
    io::write_pfm(
        (fs::path(opt.out) / (two_digit("normal", ref) + ".pfm")).string(),
        result.normal);
  }
  write_json((fs::path(opt.out) / "infer.json").string(),
             {{"config_hash", cfg::config_hash(c)},
              {"views", views.size()},
              {"baseline", opt.baseline}});
  return 0;
}

// ----------------------------------------------------------- fuse / eval ----

std::vector<fuse::ViewMaps> load_view_maps(const cfg::PipelineConfig& c,
                                           const std::string& scene_dir,
                                           const std::string& maps_dir) {
  const auto views = load_scene_dir(scene_dir);
  const int denom = c.engine.denoms.back();
  std::vector<fuse::ViewMaps> maps;
  for (int i = 0; i < static_cast<int>(views.size()); ++i) {
    fuse::ViewMaps vm;
    vm.cam = feat::level_camera(views[static_cast<std::size_t>(i)].camera,
                                denom);
    const std::string dpath =
        (fs::path(maps_dir) / (two_digit("depth", i) + ".pfm")).string();
    const std::string npath =
        (fs::path(maps_dir) / (two_digit("normal", i) + ".pfm")).string();
    vm.depth = io::read_pfm(dpath);
    vm.normal = io::read_pfm(npath);
    if (vm.depth.width != vm.cam.width || vm.depth.height != vm.cam.height ||
        vm.normal.width != vm.cam.width || vm.normal.height != vm.cam.height)
      throw std::runtime_error("extent mismatch: " + dpath + " / " + npath +
                               " vs camera level " + std::to_string(denom));
    maps.push_back(std::move(vm));
  }
  return maps;
}

int cmd_fuse(const CliOptions& opt, const std::string& scene_dir,
             const std::string& maps_dir) {
  const auto c = resolve_config(opt);
  if (opt.out.empty()) throw cfg::ValidationError("fuse: --out is required");
  const auto maps = load_view_maps(c, scene_dir, maps_dir);
  auto cloud = fuse::fuse(maps, c.fusion);
  cloud = fuse::dedup_grid(cloud, c.dedup_cell);
  fuse::write_ply(opt.out, cloud);
  std::cout << json{{"points", cloud.points.size()}}.dump() << "\n";
  return 0;
}

// Ground-truth cloud: one point per GT-valid pixel per view at the
// evaluation scale (nearest-neighbor downsample), deduplicated on tau/2.
// Restricted to surface points observed by at least two views: a point
// seen by a single camera cannot survive consistency fusion, so scoring
// against it would only measure frustum overlap, not reconstruction.
fuse::PointCloud gt_cloud(const cfg::PipelineConfig& c,
                          const std::vector<synth::RenderedView>& views) {
  const int denom = c.engine.denoms.back();
  const double kVisRelDepth = 0.03;

  struct LevelView {
    geom::Camera cam;
    io::FloatImage depth;
  };
  std::vector<LevelView> lv;
  for (const auto& v : views) {
    LevelView l;
    l.cam = feat::level_camera(v.camera, denom);
    l.depth = io::FloatImage(l.cam.width, l.cam.height, 1);
    for (int y = 0; y < l.cam.height; ++y)
      for (int x = 0; x < l.cam.width; ++x)
        l.depth.at(x, y) =
            v.gt_depth.at(x * denom + denom / 2, y * denom + denom / 2);
    lv.push_back(std::move(l));
  }

  auto observed_elsewhere = [&](std::size_t v, const Eigen::Vector3d& xw) {
    for (std::size_t s = 0; s < lv.size(); ++s) {
      if (s == v) continue;
      Eigen::Vector2d q;
      double z;
      try {
        std::tie(q, z) = geom::project(lv[s].cam, xw);
      } catch (const geom::BehindCameraError&) {
        continue;
      }
      const int sx = static_cast<int>(std::floor(q.x()));
      const int sy = static_cast<int>(std::floor(q.y()));
      if (sx < 0 || sy < 0 || sx >= lv[s].cam.width ||
          sy >= lv[s].cam.height)
        continue;
      const float ds = lv[s].depth.at(sx, sy);
      if (ds > 0.0f && std::abs(z - ds) / ds <= kVisRelDepth) return true;
    }
    return false;
  };

  fuse::PointCloud cloud;
  for (std::size_t v = 0; v < views.size(); ++v) {
    const auto& lcam = lv[v].cam;
    for (int y = 0; y < lcam.height; ++y)
      for (int x = 0; x < lcam.width; ++x) {
        const float d = lv[v].depth.at(x, y);
        if (!(d > 0.0f)) continue;
        fuse::FusedPoint p;
        p.x = geom::unproject(lcam, geom::pixel_center(x, y), d);
        if (!observed_elsewhere(v, p.x)) continue;
        const int fx = x * denom + denom / 2;
        const int fy = y * denom + denom / 2;
        const Eigen::Vector3d nc(views[v].gt_normal.at(fx, fy, 0),
                                 views[v].gt_normal.at(fx, fy, 1),
                                 views[v].gt_normal.at(fx, fy, 2));
        p.n = views[v].camera.R.transpose() * nc;
        p.support = 1;
        cloud.points.push_back(p);
      }
  }
  return fuse::dedup_grid(cloud, c.tau / 2.0);
}

int cmd_eval(const CliOptions& opt, const std::string& scene_dir,
             const std::string& maps_dir) {
  const auto c = resolve_config(opt);
  const auto maps = load_view_maps(c, scene_dir, maps_dir);
  auto pred = fuse::fuse(maps, c.fusion);
  pred = fuse::dedup_grid(pred, c.dedup_cell);
  const auto gt = gt_cloud(c, load_scene_dir(scene_dir));
  const auto m = fuse::cloud_metrics(pred, gt, c.tau);
  json report{{"tau", c.tau},           {"accuracy", m.accuracy},
              {"completeness", m.completeness}, {"f1", m.f1},
              {"accuracy_defined", m.accuracy_defined},
              {"completeness_defined", m.completeness_defined},
              {"n_pred", m.n_pred},     {"n_gt", m.n_gt}};
  std::cout << report.dump(2) << "\n";
  if (!opt.out.empty()) write_json(opt.out, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PatchMatch multi-view stereo with learned scoring"};
  app.require_subcommand(0, 1);

  CliOptions opt;
  app.add_option("--config", opt.config_path, "pipeline config JSON");
  auto* seed_opt = app.add_option("--seed", opt.seed, "seed override");
  app.add_option("--threads", opt.threads, "data-parallel width cap");
  app.add_flag("--dump-config", opt.dump_config,
               "print the resolved config and exit");

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--out", opt.out, "output dataset directory");

  std::string dataset, scene_dir, maps_dir;
  auto* train = app.add_subcommand("train", "train scoring weights");
  train->add_option("dataset", dataset, "dataset directory (manifest.json)")
      ->required();
  train->add_option("--out", opt.out, "run directory (log + checkpoints)");
  train->add_option("--checkpoint", opt.checkpoint, "resume checkpoint");
  train->add_option("--epochs", opt.epochs, "epoch count override");

  auto* infer = app.add_subcommand("infer", "depth/normal maps per view");
  infer->add_option("scene", scene_dir, "scene directory")->required();
  infer->add_option("--out", opt.out, "output map directory");
  infer->add_option("--checkpoint", opt.checkpoint, "trained weights");
  infer->add_flag("--baseline", opt.baseline, "handcrafted scorer, no weights");

  auto* fusec = app.add_subcommand("fuse", "fuse maps into a point cloud");
  fusec->add_option("scene", scene_dir, "scene directory (cameras)")
      ->required();
  fusec->add_option("maps", maps_dir, "depth/normal map directory")->required();
  fusec->add_option("--out", opt.out, "output PLY path");

  auto* evalc = app.add_subcommand("eval", "metrics vs the GT cloud");
  evalc->add_option("scene", scene_dir, "scene directory")->required();
  evalc->add_option("maps", maps_dir, "depth/normal map directory")->required();
  evalc->add_option("--out", opt.out, "metrics JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }
  opt.has_seed = seed_opt->count() > 0;

  try {
    if (opt.dump_config) {
      std::cout << cfg::config_to_json(resolve_config(opt)).dump(2) << "\n";
      return 0;
    }
    if (synth->parsed()) return cmd_synth(opt);
    if (train->parsed()) return cmd_train(opt, dataset);
    if (infer->parsed()) return cmd_infer(opt, scene_dir);
    if (fusec->parsed()) return cmd_fuse(opt, scene_dir, maps_dir);
    if (evalc->parsed()) return cmd_eval(opt, scene_dir, maps_dir);
    std::cout << app.help();
    return 0;
  } catch (const cfg::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const rl::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
}
