#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fsmdet/fusion.hpp"
#include "fsmdet/io.hpp"
#include "fsmdet/loss.hpp"
#include "fsmdet/sdlayer.hpp"
#include "fsmdet/simlidar.hpp"
#include "fsmdet/srlayer.hpp"
#include "fsmdet/voxel.hpp"
#include "fsmdet/vpgt.hpp"

namespace fsmdet {

// End-to-end orchestration: scene → scan → voxels → fusion → classification
// → shape recovery → BEV → self diffusion, plus occupancy-level metrics.

/// A module error annotated with the pipeline stage that raised it.
class PipelineError : public Error {
 public:
  PipelineError(const std::string& stage, const std::string& what)
      : Error("stage '" + stage + "': " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

inline GridSpec default_grid() {
  GridSpec g;
  g.origin = Vec3(0.0, -16.0, -0.3);
  g.voxel_size = Vec3(0.1, 0.1, 0.2);
  g.dims = {320, 320, 16};
  return g;
}

enum class SdMode { kDiffuse, kDilate, kOff };

struct PipelineConfig {
  GridSpec grid = default_grid();
  int feature_dim = kDefaultFeatureDim;
  std::optional<CameraModel> camera;  // default rig when unset

  bool fusion_enabled = true;
  FusionMode fusion_mode = FusionMode::kDeformAttn;
  std::string fusion_params;  // JSON path; random weights when empty
  int heads = 4, samples = 4, value_dim = 16, hidden = 32;
  std::uint64_t weights_seed = 7;

  bool oracle_classifier = true;

  bool sr_enabled = true;
  int sr_stage = 2;  // 1 base, 2 quarter, 3 eighth pre-BEV, 4 post-BEV
  int sr_delta_max = 8;
  int sr_order = 2;
  SrMode sr_mode = SrMode::kOracle;

  SdMode sd_mode = SdMode::kDiffuse;
  SdConfig sd;
  LossConfig loss;

  double delta = 1.15;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  int objects = 3;
  SceneParams scene{.unoccluded = true};
  int beams = 32, azimuth = 360;
  double fs_density = 1000.0;
  unsigned threads = 1;

  void validate() const {
    try {
      grid.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("/grid: ") + e.what());
    }
    if (feature_dim < 1) throw ConfigError("/feature_dim must be >= 1");
    if (!(delta >= 1.0)) throw ConfigError("/delta must be >= 1");
    if (sr_stage < 1 || sr_stage > 4) throw ConfigError("/srlayer/stage must be in 1..4");
    if (sr_delta_max < 1) throw ConfigError("/srlayer/delta_max must be >= 1");
    if (sr_order < 0) throw ConfigError("/srlayer/neighborhood_order must be >= 0");
    if (objects < 0) throw ConfigError("/scene/objects must be >= 0");
    if (beams < 1 || azimuth < 1) throw ConfigError("/scan: beams and azimuth must be >= 1");
    if (heads < 1 || samples < 1 || value_dim < 1 || hidden < 1) throw ConfigError("/fusion: sizes must be >= 1");
    if (!(fs_density > 0.0)) throw ConfigError("/fs_density must be positive");
    for (int a = 0; a < 3; ++a)
      if (grid.dims[a] % 8) throw ConfigError("/grid/dims must be divisible by 8");
    try {
      sd.validate();
      loss.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(e.what());
    }
  }

  CameraModel camera_or_default() const { return camera ? *camera : default_camera(); }
};

/// Parses "a..b" (inclusive) or a single integer.
inline std::vector<std::uint64_t> parse_seed_range(const std::string& text) {
  const auto dots = text.find("..");
  auto parse = [&](const std::string& s) -> std::uint64_t {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw ConfigError("bad seed range '" + text + "'");
    return std::stoull(s);
  };
  if (dots == std::string::npos) return {parse(text)};
  const std::uint64_t lo = parse(text.substr(0, dots)), hi = parse(text.substr(dots + 2));
  if (hi < lo) throw ConfigError("empty seed range '" + text + "'");
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = lo; s <= hi; ++s) out.push_back(s);
  return out;
}

// ---------------------------------------------------------------- config JSON

namespace detail {

inline void check_keys(const io::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(where + "/" + it.key() + ": unknown key");
}

template <typename T>
T get_as(const io::json& j, const std::string& where) {
  try {
    return j.get<T>();
  } catch (const io::json::exception&) {
    throw ConfigError(where + ": wrong type");
  }
}

inline int class_by_name(const std::string& name, const std::string& where) {
  if (name == "vehicle") return kVehicle;
  if (name == "pedestrian") return kPedestrian;
  throw ConfigError(where + ": unknown class '" + name + "'");
}

}  // namespace detail

/// Relative paths resolve against `base`. Unknown keys are rejected.
inline PipelineConfig pipeline_config_from_json(const io::json& j, const std::filesystem::path& base = {}) {
  using detail::check_keys;
  using detail::get_as;
  PipelineConfig c;
  check_keys(j, {"grid", "feature_dim", "camera", "fusion", "weights_seed", "classifier", "srlayer", "sdlayer", "loss",
                 "delta", "seed", "seeds", "scene", "scan", "fs_density", "threads"},
             "");
  try {
    if (j.contains("grid")) c.grid = io::spec_from_json(j["grid"], "/grid");
    if (j.contains("camera"))
      c.camera = j["camera"].is_string() ? io::read_camera(base / j["camera"].get<std::string>())
                                         : io::camera_from_json(j["camera"], "/camera");
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const InvalidCamera& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("feature_dim")) c.feature_dim = get_as<int>(j["feature_dim"], "/feature_dim");
  if (j.contains("weights_seed")) c.weights_seed = get_as<std::uint64_t>(j["weights_seed"], "/weights_seed");
  if (j.contains("delta")) c.delta = get_as<double>(j["delta"], "/delta");
  if (j.contains("seed")) c.seed = get_as<std::uint64_t>(j["seed"], "/seed");
  if (j.contains("seeds")) c.seeds = parse_seed_range(get_as<std::string>(j["seeds"], "/seeds"));
  if (j.contains("fs_density")) c.fs_density = get_as<double>(j["fs_density"], "/fs_density");
  if (j.contains("threads")) c.threads = get_as<unsigned>(j["threads"], "/threads");
  if (j.contains("classifier")) {
    const auto s = get_as<std::string>(j["classifier"], "/classifier");
    if (s != "oracle" && s != "stub") throw ConfigError("/classifier: expected 'oracle' or 'stub'");
    c.oracle_classifier = s == "oracle";
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    check_keys(f, {"mode", "params", "heads", "samples", "value_dim", "hidden"}, "/fusion");
    if (f.contains("mode")) {
      const auto m = get_as<std::string>(f["mode"], "/fusion/mode");
      if (m == "da") c.fusion_mode = FusionMode::kDeformAttn;
      else if (m == "proj") c.fusion_mode = FusionMode::kProjection;
      else if (m == "off") c.fusion_enabled = false;
      else throw ConfigError("/fusion/mode: expected 'da', 'proj' or 'off'");
    }
    if (f.contains("params")) {
      const std::filesystem::path p = get_as<std::string>(f["params"], "/fusion/params");
      c.fusion_params = (p.is_absolute() ? p : base / p).string();
      if (!std::filesystem::exists(c.fusion_params))
        throw ConfigError("/fusion/params: file not found: " + c.fusion_params);
    }
    if (f.contains("heads")) c.heads = get_as<int>(f["heads"], "/fusion/heads");
    if (f.contains("samples")) c.samples = get_as<int>(f["samples"], "/fusion/samples");
    if (f.contains("value_dim")) c.value_dim = get_as<int>(f["value_dim"], "/fusion/value_dim");
    if (f.contains("hidden")) c.hidden = get_as<int>(f["hidden"], "/fusion/hidden");
  }
  if (j.contains("srlayer")) {
    const auto& s = j["srlayer"];
    check_keys(s, {"enabled", "stage", "delta_max", "neighborhood_order", "mode"}, "/srlayer");
    if (s.contains("enabled")) c.sr_enabled = get_as<bool>(s["enabled"], "/srlayer/enabled");
    if (s.contains("stage")) c.sr_stage = get_as<int>(s["stage"], "/srlayer/stage");
    if (s.contains("delta_max")) c.sr_delta_max = get_as<int>(s["delta_max"], "/srlayer/delta_max");
    if (s.contains("neighborhood_order"))
      c.sr_order = get_as<int>(s["neighborhood_order"], "/srlayer/neighborhood_order");
    if (s.contains("mode")) {
      const auto m = get_as<std::string>(s["mode"], "/srlayer/mode");
      if (m != "oracle" && m != "stub") throw ConfigError("/srlayer/mode: expected 'oracle' or 'stub'");
      c.sr_mode = m == "oracle" ? SrMode::kOracle : SrMode::kLearnedStub;
    }
  }
  if (j.contains("sdlayer")) {
    const auto& s = j["sdlayer"];
    check_keys(s, {"mode", "sigma0", "sigma1", "class_scale"}, "/sdlayer");
    if (s.contains("mode")) {
      const auto m = get_as<std::string>(s["mode"], "/sdlayer/mode");
      if (m == "diffuse") c.sd_mode = SdMode::kDiffuse;
      else if (m == "dilate") c.sd_mode = SdMode::kDilate;
      else if (m == "off") c.sd_mode = SdMode::kOff;
      else throw ConfigError("/sdlayer/mode: expected 'diffuse', 'dilate' or 'off'");
    }
    if (s.contains("sigma0")) c.sd.sigma0 = get_as<int>(s["sigma0"], "/sdlayer/sigma0");
    if (s.contains("sigma1")) c.sd.sigma1 = get_as<int>(s["sigma1"], "/sdlayer/sigma1");
    if (s.contains("class_scale")) {
      const auto& cs = s["class_scale"];
      if (!cs.is_object()) throw ConfigError("/sdlayer/class_scale: expected an object");
      for (auto it = cs.begin(); it != cs.end(); ++it)
        c.sd.class_scale[detail::class_by_name(it.key(), "/sdlayer/class_scale/" + it.key())] =
            get_as<double>(it.value(), "/sdlayer/class_scale/" + it.key());
    }
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    check_keys(l, {"alpha", "gamma"}, "/loss");
    if (l.contains("alpha")) {
      const auto a = get_as<std::vector<double>>(l["alpha"], "/loss/alpha");
      if (a.size() != 3) throw ConfigError("/loss/alpha: expected 3 values");
      c.loss.alpha = {a[0], a[1], a[2]};
    }
    if (l.contains("gamma")) c.loss.gamma = get_as<double>(l["gamma"], "/loss/gamma");
  }
  if (j.contains("scene")) {
    const auto& s = j["scene"];
    check_keys(s, {"objects", "unoccluded", "in_frustum", "min_range", "max_range", "pedestrian_fraction",
                   "max_retries", "angular_margin"},
               "/scene");
    if (s.contains("objects")) c.objects = get_as<int>(s["objects"], "/scene/objects");
    if (s.contains("unoccluded")) c.scene.unoccluded = get_as<bool>(s["unoccluded"], "/scene/unoccluded");
    if (s.contains("in_frustum")) c.scene.in_frustum = get_as<bool>(s["in_frustum"], "/scene/in_frustum");
    if (s.contains("min_range")) c.scene.min_range = get_as<double>(s["min_range"], "/scene/min_range");
    if (s.contains("max_range")) c.scene.max_range = get_as<double>(s["max_range"], "/scene/max_range");
    if (s.contains("pedestrian_fraction"))
      c.scene.pedestrian_fraction = get_as<double>(s["pedestrian_fraction"], "/scene/pedestrian_fraction");
    if (s.contains("max_retries")) c.scene.max_retries = get_as<int>(s["max_retries"], "/scene/max_retries");
    if (s.contains("angular_margin"))
      c.scene.angular_margin = get_as<double>(s["angular_margin"], "/scene/angular_margin");
  }
  if (j.contains("scan")) {
    const auto& s = j["scan"];
    check_keys(s, {"beams", "azimuth"}, "/scan");
    if (s.contains("beams")) c.beams = get_as<int>(s["beams"], "/scan/beams");
    if (s.contains("azimuth")) c.azimuth = get_as<int>(s["azimuth"], "/scan/azimuth");
  }
  c.validate();
  return c;
}

inline PipelineConfig read_pipeline_config(const std::filesystem::path& path) {
  io::json j;
  try {
    j = io::read_json(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return pipeline_config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------- reports

struct SceneReport {
  std::uint64_t seed = 0;
  std::string scene_hash;
  int objects = 0;
  int sr_stage = 0;
  std::size_t vp_missed_pixels = 0;
  std::size_t vp_region_pixels = 0;
  std::optional<double> vp_depth_rmse;
  std::optional<double> boundary_recall;
  std::optional<double> raw_boundary_recall;
  std::optional<double> center_coverage;
  std::optional<double> raw_center_coverage;
  std::optional<double> occupancy_growth_ratio;
  std::optional<double> focal_loss;
  std::size_t sr_candidates = 0;
  std::size_t sr_literal_candidates = 0;
  std::size_t sr_new_voxels = 0;
  std::size_t bev_cells_pre = 0;
  std::size_t bev_cells_post = 0;
  /// Wall-clock seconds per stage; kept out of the deterministic report.
  std::map<std::string, double> timings;
};

struct EvalReport {
  std::string label;
  std::vector<SceneReport> scenes;
};

struct PipelineArtifacts {
  SparseVoxelGrid stage_grid;  // pre-SR, at the SR resolution
  SparseVoxelGrid recovered;   // post-SR
  BevMap bev;                  // pre-SD
  BevMap diffused;             // post-SD
  std::vector<ExpansionRecord> trace;
};

namespace detail {

class StageClock {
 public:
  explicit StageClock(std::map<std::string, double>& sink) : sink_(sink) {}

  template <typename Fn>
  auto run(const std::string& stage, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    auto done = [&] {
      sink_[stage] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };
    try {
      if constexpr (std::is_void_v<decltype(fn())>) {
        fn();
        done();
      } else {
        auto r = fn();
        done();
        return r;
      }
    } catch (const PipelineError&) {
      throw;
    } catch (const std::exception& e) {
      throw PipelineError(stage, e.what());
    }
  }

 private:
  std::map<std::string, double>& sink_;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline int stage_factor(int stage) { return stage == 1 ? 1 : (stage == 2 ? 4 : 8); }

inline std::set<Index2> bev_of(const SparseVoxelGrid& g) {
  std::set<Index2> s;
  for (const auto& [i, v] : g.voxels) s.insert({i.x, i.y});
  return s;
}

inline std::optional<double> recall(const std::set<Index2>& got, const std::set<Index2>& gt) {
  if (gt.empty()) return std::nullopt;
  std::size_t hit = 0;
  for (const auto& c : gt) hit += got.count(c);
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

inline std::optional<double> center_coverage(const BevMap& bev, const std::vector<Box3D>& boxes) {
  if (boxes.empty()) return std::nullopt;
  std::size_t covered = 0;
  for (const auto& b : boxes) {
    const auto idx = bev.spec.index_of(Vec3(b.center.x(), b.center.y(), bev.spec.origin.z()));
    if (!idx) continue;
    auto it = bev.cells.find({idx->x, idx->y});
    if (it != bev.cells.end() && it->second.class_id) ++covered;
  }
  return static_cast<double>(covered) / static_cast<double>(boxes.size());
}

/// Single-layer voxel grid over a BEV map, for post-BEV shape recovery.
inline SparseVoxelGrid lift_bev(const BevMap& bev) {
  SparseVoxelGrid g;
  g.spec = bev.spec;
  g.spec.voxel_size.z() *= bev.spec.dims[2];
  g.spec.dims[2] = 1;
  g.feature_dim = bev.feature_dim;
  for (const auto& [i, c] : bev.cells) {
    Voxel v;
    v.index = {i.x, i.y, 0};
    v.feature = c.feature;
    v.centroid = g.spec.center(v.index);
    v.point_count = 1;
    v.class_id = c.class_id;
    v.synthetic = c.synthetic;
    g.voxels.emplace(v.index, std::move(v));
  }
  return g;
}

inline ForegroundMask mask_from_classes(const SparseVoxelGrid& g) {
  ForegroundMask m;
  for (const auto& [i, v] : g.voxels) {
    m.scores[i] = smoothed_one_hot(v.class_id.value_or(kBackground));
    if (v.class_id) m.indices.insert(i);
  }
  return m;
}

struct VpTruth {
  std::vector<std::set<Index2>> per_object;
  std::set<Index2> all;
  std::size_t missed = 0, region = 0;
  std::optional<double> depth_rmse;
  std::vector<VpSurface> surfaces;
};

inline VpTruth vp_truth(const Scene& scene, double delta, const GridSpec& spec, bool keep_surfaces = false) {
  VpTruth t;
  double se = 0.0;
  std::size_t n = 0;
  for (const auto& mesh : scene.meshes) {
    VpSurface vp;
    try {
      const auto region = instance_region(scene.camera, mesh);
      vp = generate_vp(scene.camera, mesh, region, delta);
      t.region += region.pixels.size();
    } catch (const NotVisible&) {
    }
    t.missed += vp.missed;
    for (std::size_t k = 0; k < vp.points.size(); ++k) {
      const Pixel2D px = pixel_center(vp.source_pixels[k]);
      if (const auto hit = intersect(mesh, pixel_ray(scene.camera, px))) {
        const double d = hit->travel * ray_slope_scale(scene.camera, px) - vp.depths[k];
        se += d * d;
        ++n;
      }
    }
    t.per_object.push_back(vp_occupancy_gt(vp, spec));
    t.all.insert(t.per_object.back().begin(), t.per_object.back().end());
    if (keep_surfaces) t.surfaces.push_back(std::move(vp));
  }
  if (n) t.depth_rmse = std::sqrt(se / static_cast<double>(n));
  return t;
}

/// Focal loss of the recovered cells against VP truth at the SR resolution.
inline double recovery_loss(const std::vector<ExpansionRecord>& trace, const SparseVoxelGrid& recovered,
                            const VpTruth& truth, const Scene& scene, const LossConfig& config) {
  std::map<Index2, int> predicted;
  for (const auto& rec : trace)
    for (const auto& c : rec.new_cells)
      predicted.try_emplace({c.x, c.y}, recovered.voxels.at(c).class_id.value_or(kBackground));
  RecoveryPrediction pred;
  std::vector<int> targets;
  std::set<Index2> box_bev;
  for (const auto& [cell, cls] : predicted) {
    pred.cells.push_back(cell);
    pred.scores.push_back(smoothed_one_hot(cls));
    const auto xy = recovered.spec.center(cell);
    int target = kBackground;
    for (std::size_t o = 0; o < scene.boxes.size() && target == kBackground; ++o)
      if (truth.per_object[o].count(cell)) target = scene.boxes[o].class_id;
    for (std::size_t o = 0; o < scene.boxes.size(); ++o)
      if (scene.boxes[o].contains_bev(xy[0], xy[1])) {
        box_bev.insert(cell);
        if (target == kBackground) target = scene.boxes[o].class_id;
        break;
      }
    targets.push_back(target);
  }
  pred.category = categorize(pred.cells, truth.all, box_bev);
  return focal_loss(pred, targets, config);
}

}  // namespace detail

/// Shared per-config state: fusion weights, SR weights, classifier, encoder.
struct PipelineModel {
  DeformAttnParams fusion;
  SrConfig sr;
  ClassifierStub classifier;
  FeatureEncoder encoder;

  static PipelineModel build(const PipelineConfig& c) {
    PipelineModel m;
    m.fusion = c.fusion_params.empty() ? random_deform_attn(c.heads, c.samples, c.feature_dim, kImageChannels,
                                                            c.value_dim, c.hidden, c.weights_seed)
                                       : io::read_fusion_params(c.fusion_params);
    if (m.fusion.feature_dim != c.feature_dim || m.fusion.channels != kImageChannels)
      throw ConfigError("/fusion/params: expected feature_dim " + std::to_string(c.feature_dim) + " and channels " +
                        std::to_string(kImageChannels));
    m.sr = SrConfig::random(c.feature_dim, kImageChannels, c.weights_seed + 1, c.sr_order, c.hidden);
    m.sr.delta_max = c.sr_delta_max;
    m.sr.mode = c.sr_mode;
    m.classifier = ClassifierStub::random(c.feature_dim, c.hidden, c.weights_seed + 2);
    m.encoder = FeatureEncoder::random(c.feature_dim, c.weights_seed + 3);
    return m;
  }
};

/// Runs every stage after scene generation and scanning.
inline SceneReport run_scene(const PipelineConfig& config, const PipelineModel& model, const Scene& scene,
                             const Scan& scan, PipelineArtifacts* artifacts = nullptr, unsigned threads = 1) {
  SceneReport r;
  detail::StageClock clock(r.timings);
  r.scene_hash = detail::hex64(scene.fingerprint());
  r.objects = static_cast<int>(scene.boxes.size());
  r.sr_stage = config.sr_stage;
  const CameraModel& cam = scene.camera;
  const int factor = detail::stage_factor(config.sr_stage);
  const GridSpec bev_spec = config.grid.coarsened(8);

  SparseVoxelGrid work = clock.run("voxelize", [&] {
    return model.encoder(voxelize(scan.points, nullptr, config.grid, config.feature_dim));
  });
  if (factor > 1) work = clock.run("downsample", [&] { return downsample(work, factor); });
  const ImageFeatureMap map = clock.run("image_features", [&] { return render_feature_map(scene, threads); });
  if (config.sr_stage != 4) work = clock.run("carve_visibility", [&] { return carve_visibility(work, cam, threads); });
  if (config.fusion_enabled)
    work = clock.run("fuse_grid", [&] { return fuse_grid(work, map, cam, model.fusion, config.fusion_mode, threads); });
  ForegroundMask mask = clock.run("classify_foreground", [&] {
    return config.oracle_classifier ? classify_foreground(work, scan, scene) : classify_foreground(work, model.classifier);
  });
  work = apply_mask(work, mask);
  const BevMap raw_bev = flatten_bev(factor == 8 ? work : downsample(work, 8 / factor));

  if (config.sr_stage == 4) {
    work = clock.run("carve_visibility", [&] { return carve_visibility(detail::lift_bev(raw_bev), cam, threads); });
    mask = detail::mask_from_classes(work);
  }
  const detail::VpTruth truth = clock.run("vp_gt", [&] { return detail::vp_truth(scene, config.delta, work.spec); });
  r.vp_missed_pixels = truth.missed;
  r.vp_region_pixels = truth.region;
  r.vp_depth_rmse = truth.depth_rmse;

  std::vector<ExpansionRecord> trace;
  ShapeRecoverStats stats;
  SparseVoxelGrid recovered = config.sr_enabled ? clock.run("shape_recover", [&] {
    return shape_recover(work, mask, map, cam, model.sr, &truth.all, &trace, &stats);
  })
                                                : work;
  r.sr_candidates = stats.candidates;
  r.sr_literal_candidates = stats.literal_candidates;
  r.sr_new_voxels = stats.new_voxels;
  r.raw_boundary_recall = detail::recall(detail::bev_of(work), truth.all);
  r.boundary_recall = detail::recall(detail::bev_of(recovered), truth.all);
  if (config.sr_enabled)
    r.focal_loss = clock.run("focal_loss", [&] { return detail::recovery_loss(trace, recovered, truth, scene, config.loss); });

  BevMap bev = clock.run("flatten_bev", [&] {
    if (config.sr_stage == 4) {
      BevMap b = flatten_bev(recovered);
      b.spec = bev_spec;
      return b;
    }
    return flatten_bev(factor == 8 ? recovered : downsample(recovered, 8 / factor));
  });
  BevMap diffused = clock.run("self_diffuse", [&] {
    const ClassMap classes = bev_classes(bev);
    switch (config.sd_mode) {
      case SdMode::kDiffuse: return self_diffuse(bev, classes, scene.sensor_origin, config.sd);
      case SdMode::kDilate: return dilate_foreground(bev, classes);
      case SdMode::kOff: break;
    }
    return bev;
  });

  r.bev_cells_pre = raw_bev.cells.size();
  r.bev_cells_post = diffused.cells.size();
  if (r.bev_cells_pre)
    r.occupancy_growth_ratio = static_cast<double>(r.bev_cells_post) / static_cast<double>(r.bev_cells_pre);
  r.raw_center_coverage = detail::center_coverage(raw_bev, scene.boxes);
  r.center_coverage = detail::center_coverage(diffused, scene.boxes);

  if (artifacts) {
    artifacts->stage_grid = std::move(work);
    artifacts->recovered = std::move(recovered);
    artifacts->bev = std::move(bev);
    artifacts->diffused = std::move(diffused);
    artifacts->trace = std::move(trace);
  }
  return r;
}

inline Scene make_scene(const PipelineConfig& c, std::uint64_t seed) {
  try {
    return generate_scene(seed, c.objects, c.scene, c.camera_or_default(), default_sensor_origin());
  } catch (const std::exception& e) {
    throw PipelineError("generate_scene", e.what());
  }
}

inline Scan make_scan(const PipelineConfig& c, const Scene& scene) {
  try {
    return scan(scene, c.beams, c.azimuth);
  } catch (const std::exception& e) {
    throw PipelineError("scan", e.what());
  }
}

inline SceneReport run_seed(const PipelineConfig& c, const PipelineModel& model, std::uint64_t seed,
                            unsigned threads = 1) {
  const auto t0 = std::chrono::steady_clock::now();
  const Scene scene = make_scene(c, seed);
  const Scan s = make_scan(c, scene);
  const double t_scan = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  SceneReport r = run_scene(c, model, scene, s, nullptr, threads);
  r.seed = seed;
  r.timings["scene_and_scan"] = t_scan;
  return r;
}

/// Evaluates seeds in parallel (one scene per task); order follows `seeds`.
inline EvalReport eval(const PipelineConfig& c, const std::vector<std::uint64_t>& seeds, unsigned threads = 1,
                       const std::string& label = "eval") {
  c.validate();
  const PipelineModel model = PipelineModel::build(c);
  EvalReport rep{label, std::vector<SceneReport>(seeds.size())};
  parallel_for(seeds.size(), threads, [&](std::size_t i) { rep.scenes[i] = run_seed(c, model, seeds[i]); });
  return rep;
}

inline EvalReport run_pipeline(const PipelineConfig& c) {
  c.validate();
  const PipelineModel model = PipelineModel::build(c);
  return {"pipeline", {run_seed(c, model, c.seed, c.threads)}};
}

enum class CompletionMode { kFullShape, kVisiblePart };

/// Idealized completion without shape recovery. Full-shape mode replaces each
/// object's scan points with dense samples of its δ-expanded hull; visible-part
/// mode adds the VP surface to the object's scan points.
inline EvalReport ideal_completion_study(const PipelineConfig& config, CompletionMode mode,
                                         const std::vector<std::uint64_t>& seeds, unsigned threads = 1) {
  PipelineConfig c = config;
  c.validate();
  c.sr_enabled = false;
  const PipelineModel model = PipelineModel::build(c);
  const GridSpec stage_spec = c.grid.coarsened(detail::stage_factor(c.sr_stage == 4 ? 3 : c.sr_stage));
  EvalReport rep{mode == CompletionMode::kFullShape ? "full_shape" : "visible_part",
                 std::vector<SceneReport>(seeds.size())};
  parallel_for(seeds.size(), threads, [&](std::size_t n) {
    const Scene scene = make_scene(c, seeds[n]);
    Scan raw = make_scan(c, scene);
    Scan s;
    if (mode == CompletionMode::kFullShape) {
      for (std::size_t i = 0; i < raw.points.size(); ++i)
        if (!raw.point_object[i]) s.points.push_back(raw.points[i]), s.point_object.push_back(std::nullopt);
      for (std::size_t o = 0; o < scene.meshes.size(); ++o)
        for (const auto& p : sample_surface(expand(scene.meshes[o], c.delta), c.fs_density, seeds[n] * 131 + o)) {
          s.points.push_back(p);
          s.point_object.push_back(static_cast<int>(o));
        }
    } else {
      s = raw;
      const auto truth = detail::vp_truth(scene, c.delta, stage_spec, true);
      for (std::size_t o = 0; o < truth.surfaces.size(); ++o)
        for (const auto& p : truth.surfaces[o].points) {
          s.points.push_back(p);
          s.point_object.push_back(static_cast<int>(o));
        }
    }
    rep.scenes[n] = run_scene(c, model, scene, s);
    rep.scenes[n].seed = seeds[n];
  });
  return rep;
}

inline const std::set<std::string>& known_toggles() {
  static const std::set<std::string> t{"fusion_da", "fusion_proj", "srlayer", "sdlayer"};
  return t;
}

inline std::set<std::string> default_toggles() { return {"fusion_da", "srlayer", "sdlayer"}; }

/// Config with exactly the listed stages enabled. A disabled SDLayer falls
/// back to one-ring foreground dilation.
inline PipelineConfig apply_toggles(const PipelineConfig& config, const std::set<std::string>& toggles) {
  for (const auto& t : toggles)
    if (!known_toggles().count(t)) throw ConfigError("unknown toggle '" + t + "'");
  if (toggles.count("fusion_da") && toggles.count("fusion_proj"))
    throw ConflictingToggles("fusion_da and fusion_proj are mutually exclusive");
  PipelineConfig c = config;
  c.fusion_enabled = toggles.count("fusion_da") || toggles.count("fusion_proj");
  c.fusion_mode = toggles.count("fusion_proj") ? FusionMode::kProjection : FusionMode::kDeformAttn;
  c.sr_enabled = toggles.count("srlayer") != 0;
  c.sd_mode = toggles.count("sdlayer") ? SdMode::kDiffuse : SdMode::kDilate;
  return c;
}

inline EvalReport ablate(const PipelineConfig& config, const std::set<std::string>& toggles,
                         const std::vector<std::uint64_t>& seeds, unsigned threads = 1) {
  std::string label;
  for (const auto& t : toggles) label += (label.empty() ? "" : "+") + t;
  return eval(apply_toggles(config, toggles), seeds, threads, label.empty() ? "none" : label);
}

inline std::vector<EvalReport> srlayer_stage_sweep(const PipelineConfig& config, const std::vector<int>& stages,
                                                   const std::vector<std::uint64_t>& seeds, unsigned threads = 1) {
  std::vector<EvalReport> out;
  for (int s : stages) {
    if (s < 1 || s > 4) throw ConfigError("stage " + std::to_string(s) + " outside 1..4");
    PipelineConfig c = config;
    c.sr_stage = s;
    out.push_back(eval(c, seeds, threads, "stage-" + std::to_string(s)));
  }
  return out;
}

// ---------------------------------------------------------------- statistics

struct SignTest {
  std::size_t positive = 0, negative = 0, ties = 0;
  double p_value = 1.0;  // two-sided exact binomial
};

inline SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DimensionMismatch("sign test needs paired samples");
  SignTest t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++t.positive;
    else if (a[i] < b[i]) ++t.negative;
    else ++t.ties;
  }
  const std::size_t n = t.positive + t.negative;
  if (n == 0) return t;
  const std::size_t k = std::min(t.positive, t.negative);
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i)
    tail += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  t.p_value = std::min(1.0, 2.0 * tail);
  return t;
}

/// Paired per-scene values of a metric; scenes where either side is absent are skipped.
inline std::pair<std::vector<double>, std::vector<double>> paired(const EvalReport& a, const EvalReport& b,
                                                                  std::optional<double> SceneReport::*metric) {
  std::pair<std::vector<double>, std::vector<double>> out;
  for (std::size_t i = 0; i < std::min(a.scenes.size(), b.scenes.size()); ++i) {
    const auto& x = a.scenes[i].*metric;
    const auto& y = b.scenes[i].*metric;
    if (x && y) out.first.push_back(*x), out.second.push_back(*y);
  }
  return out;
}

inline std::optional<double> mean_of(const EvalReport& r, std::optional<double> SceneReport::*metric) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : r.scenes)
    if (s.*metric) sum += *(s.*metric), ++n;
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

/// Objects whose center cell is covered, over all objects.
inline std::optional<double> pooled_coverage(const EvalReport& r, std::optional<double> SceneReport::*metric) {
  double covered = 0.0;
  std::size_t objects = 0;
  for (const auto& s : r.scenes)
    if (s.*metric) covered += *(s.*metric) * s.objects, objects += s.objects;
  if (!objects) return std::nullopt;
  return covered / static_cast<double>(objects);
}

// ---------------------------------------------------------------- serialization

inline constexpr const char* kReportSchema = "fsm-eval/1";

namespace detail {
inline io::json opt(const std::optional<double>& v) { return v ? io::json(*v) : io::json(nullptr); }
}  // namespace detail

inline io::json scene_to_json(const SceneReport& s) {
  using detail::opt;
  return {{"seed", s.seed},
          {"scene_hash", s.scene_hash},
          {"objects", s.objects},
          {"sr_stage", s.sr_stage},
          {"vp_missed_pixels", s.vp_missed_pixels},
          {"vp_region_pixels", s.vp_region_pixels},
          {"vp_depth_rmse", opt(s.vp_depth_rmse)},
          {"boundary_recall", opt(s.boundary_recall)},
          {"raw_boundary_recall", opt(s.raw_boundary_recall)},
          {"center_coverage", opt(s.center_coverage)},
          {"raw_center_coverage", opt(s.raw_center_coverage)},
          {"occupancy_growth_ratio", opt(s.occupancy_growth_ratio)},
          {"focal_loss", opt(s.focal_loss)},
          {"sr_candidates", s.sr_candidates},
          {"sr_literal_candidates", s.sr_literal_candidates},
          {"sr_new_voxels", s.sr_new_voxels},
          {"bev_cells_pre", s.bev_cells_pre},
          {"bev_cells_post", s.bev_cells_post}};
}

inline io::json aggregate_json(const EvalReport& r) {
  using detail::opt;
  std::size_t missed = 0, region = 0, objects = 0;
  for (const auto& s : r.scenes) missed += s.vp_missed_pixels, region += s.vp_region_pixels, objects += s.objects;
  return {{"scenes", r.scenes.size()},
          {"objects", objects},
          {"vp_missed_pixels", missed},
          {"vp_region_pixels", region},
          {"vp_depth_rmse", opt(mean_of(r, &SceneReport::vp_depth_rmse))},
          {"boundary_recall", opt(mean_of(r, &SceneReport::boundary_recall))},
          {"raw_boundary_recall", opt(mean_of(r, &SceneReport::raw_boundary_recall))},
          {"center_coverage", opt(pooled_coverage(r, &SceneReport::center_coverage))},
          {"raw_center_coverage", opt(pooled_coverage(r, &SceneReport::raw_center_coverage))},
          {"occupancy_growth_ratio", opt(mean_of(r, &SceneReport::occupancy_growth_ratio))},
          {"focal_loss", opt(mean_of(r, &SceneReport::focal_loss))}};
}

inline io::json report_to_json(const EvalReport& r) {
  io::json scenes = io::json::array();
  for (const auto& s : r.scenes) scenes.push_back(scene_to_json(s));
  return {{"schema", kReportSchema}, {"label", r.label}, {"aggregate", aggregate_json(r)}, {"scenes", scenes}};
}

inline io::json sign_test_json(const SignTest& t) {
  return {{"positive", t.positive}, {"negative", t.negative}, {"ties", t.ties}, {"p_value", t.p_value}};
}

inline io::json timings_json(const EvalReport& r) {
  io::json out = io::json::array();
  for (const auto& s : r.scenes) out.push_back({{"seed", s.seed}, {"seconds", s.timings}});
  return {{"label", r.label}, {"scenes", out}};
}

inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream out;
  out.precision(17);
  const char* cols[] = {"seed", "scene_hash", "objects", "sr_stage", "vp_missed_pixels", "vp_region_pixels",
                        "vp_depth_rmse", "boundary_recall", "raw_boundary_recall", "center_coverage",
                        "raw_center_coverage", "occupancy_growth_ratio", "focal_loss", "sr_candidates",
                        "sr_literal_candidates", "sr_new_voxels", "bev_cells_pre", "bev_cells_post"};
  for (std::size_t i = 0; i < std::size(cols); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  auto o = [&](const std::optional<double>& v) {
    if (v) out << *v;
  };
  for (const auto& s : r.scenes) {
    out << s.seed << "," << s.scene_hash << "," << s.objects << "," << s.sr_stage << "," << s.vp_missed_pixels << ","
        << s.vp_region_pixels << ",";
    o(s.vp_depth_rmse), out << ",";
    o(s.boundary_recall), out << ",";
    o(s.raw_boundary_recall), out << ",";
    o(s.center_coverage), out << ",";
    o(s.raw_center_coverage), out << ",";
    o(s.occupancy_growth_ratio), out << ",";
    o(s.focal_loss), out << ",";
    out << s.sr_candidates << "," << s.sr_literal_candidates << "," << s.sr_new_voxels << "," << s.bev_cells_pre
        << "," << s.bev_cells_post << "\n";
  }
  return out.str();
}

}  // namespace fsmdet
