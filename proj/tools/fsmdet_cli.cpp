#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "fsmdet/fsmdet.hpp"

namespace fs = std::filesystem;
using namespace fsmdet;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPipeline = 3;

struct ExitCode {
  int code;
  std::string message;
};

// Inputs that fail to load or validate are configuration errors.
template <typename Fn>
auto load(Fn&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    throw ExitCode{kExitConfig, e.what()};
  }
}

std::vector<std::uint64_t> seeds_or_default(const std::string& flag, const PipelineConfig& c) {
  if (!flag.empty()) return load([&] { return parse_seed_range(flag); });
  return c.seeds.empty() ? std::vector<std::uint64_t>{c.seed} : c.seeds;
}

io::json trace_record(const ExpansionRecord& r) {
  io::json cells = io::json::array();
  for (const auto& c : r.new_cells) cells.push_back({c.x, c.y, c.z});
  return {{"source", {r.source.x, r.source.y, r.source.z}},
          {"direction", direction_name(r.direction)},
          {"distance", r.distance},
          {"new_cells", cells}};
}

io::json comparison(const EvalReport& on, const EvalReport& off, std::optional<double> SceneReport::*metric) {
  const auto [a, b] = paired(on, off, metric);
  const auto mean = [](const std::vector<double>& v) -> io::json {
    if (v.empty()) return nullptr;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  return {{"mean_baseline", mean(a)}, {"mean_ablated", mean(b)}, {"sign_test", sign_test_json(sign_test(a, b))}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vision-guided feature diffusion for sparse 3D detection: scene tools and evaluation"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int objects = 3;
  bool unoccluded = false;
  std::string out, scene_path, scan_path, config_path, csv_path, seeds_flag, timings_path;
  int beams = 32, azimuth = 360;
  double delta = 1.15;
  bool trace = false;
  unsigned threads = 1;
  std::vector<std::string> off, on;
  std::vector<int> stages{1, 2, 3, 4};

  auto* gen = app.add_subcommand("gen-scene", "Generate a random scene with object meshes");
  gen->add_option("--seed", seed, "Scene seed")->required();
  gen->add_option("--objects", objects, "Number of objects")->required()->check(CLI::NonNegativeNumber);
  gen->add_flag("--unoccluded", unoccluded, "Keep objects in disjoint azimuth intervals");
  gen->add_option("--out", out, "Scene JSON path")->required();

  auto* scn = app.add_subcommand("scan", "Simulate a LiDAR sweep of a scene");
  scn->add_option("--scene", scene_path, "Scene JSON")->required();
  scn->add_option("--beams", beams, "Elevation channels")->required()->check(CLI::PositiveNumber);
  scn->add_option("--azimuth", azimuth, "Azimuth steps")->required()->check(CLI::PositiveNumber);
  scn->add_option("--out", out, "Scan PLY path")->required();

  auto* vp = app.add_subcommand("vp-gt", "Visible-part ground truth per object");
  vp->add_option("--scene", scene_path, "Scene JSON")->required();
  vp->add_option("--delta", delta, "Volume expansion coefficient")->required();
  vp->add_option("--out", out, "Output directory")->required();

  auto* dif = app.add_subcommand("diffuse", "Run the diffusion pipeline on a scene and scan");
  dif->add_option("--scene", scene_path, "Scene JSON")->required();
  dif->add_option("--scan", scan_path, "Scan PLY")->required();
  dif->add_option("--config", config_path, "Pipeline config JSON")->required();
  dif->add_option("--out", out, "Output directory")->required();
  dif->add_flag("--trace", trace, "Write the shape-recovery expansion trace");
  dif->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Evaluate the pipeline over a seed range");
  ev->add_option("--config", config_path, "Pipeline config JSON")->required();
  ev->add_option("--seeds", seeds_flag, "Seed range a..b");
  ev->add_option("--out", out, "Report JSON path")->required();
  ev->add_option("--csv", csv_path, "Per-scene CSV path");
  ev->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  ev->add_option("--timings", timings_path, "Per-stage wall-clock JSON path");

  auto* abl = app.add_subcommand("ablate", "Compare the default pipeline with stages toggled");
  abl->add_option("--config", config_path, "Pipeline config JSON")->required();
  abl->add_option("--off", off, "Stage to disable (fusion_da, fusion_proj, srlayer, sdlayer)");
  abl->add_option("--on", on, "Stage to enable");
  abl->add_option("--seeds", seeds_flag, "Seed range a..b");
  abl->add_option("--out", out, "Ablation JSON path")->required();
  abl->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  auto* sw = app.add_subcommand("sweep-stage", "Shape-recovery insertion depth sweep");
  sw->add_option("--config", config_path, "Pipeline config JSON")->required();
  sw->add_option("--stages", stages, "Insertion depths in 1..4")->delimiter(',');
  sw->add_option("--seeds", seeds_flag, "Seed range a..b");
  sw->add_option("--out", out, "Sweep JSON path")->required();
  sw->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    try {
      if (*gen) {
        SceneParams params;
        params.unoccluded = unoccluded;
        io::write_scene(out, generate_scene(seed, objects, params));
      } else if (*scn) {
        const Scene scene = load([&] { return io::read_scene(scene_path); });
        io::write_scan_ply(out, fsmdet::scan(scene, beams, azimuth));
      } else if (*vp) {
        if (!(delta >= 1.0)) throw ExitCode{kExitConfig, "--delta must be >= 1"};
        const Scene scene = load([&] { return io::read_scene(scene_path); });
        io::json summary = io::json::array();
        for (std::size_t o = 0; o < scene.meshes.size(); ++o) {
          const std::string stem = "obj_" + std::to_string(o);
          io::json s;
          try {
            const auto region = instance_region(scene.camera, scene.meshes[o]);
            const auto surface = generate_vp(scene.camera, scene.meshes[o], region, delta);
            io::write_text(fs::path(out) / (stem + ".ply"), io::vp_to_ply(surface));
            s = io::vp_summary(surface, region.pixels.size(), delta);
            s["visible"] = true;
          } catch (const NotVisible&) {
            s = io::vp_summary(VpSurface{}, 0, delta);
            s["visible"] = false;
          }
          s["object"] = o;
          io::write_json(fs::path(out) / (stem + ".json"), s);
          summary.push_back(s);
        }
        io::write_json(fs::path(out) / "summary.json", summary);
      } else if (*dif) {
        const PipelineConfig c = load([&] { return read_pipeline_config(config_path); });
        const Scene scene = load([&] { return io::read_scene(scene_path); });
        const Scan s = load([&] {
          Scan sc = io::read_scan_ply(scan_path);
          for (const auto& o : sc.point_object)
            if (o && *o >= static_cast<int>(scene.boxes.size())) throw FormatError("scan object_id out of range");
          return sc;
        });
        const PipelineModel model = load([&] { return PipelineModel::build(c); });
        PipelineArtifacts art;
        SceneReport r = run_scene(c, model, scene, s, &art, threads);
        const fs::path dir(out);
        io::write_grid(dir / "stage_grid", art.stage_grid);
        io::write_grid(dir / "recovered", art.recovered);
        io::write_json(dir / "bev.json", io::bev_to_json(art.bev));
        io::write_json(dir / "diffused.json", io::bev_to_json(art.diffused));
        io::write_json(dir / "report.json", report_to_json({"diffuse", {r}}));
        if (trace) {
          std::string lines;
          for (const auto& rec : art.trace) lines += trace_record(rec).dump() + "\n";
          io::write_text(dir / "trace.jsonl", lines);
        }
      } else if (*ev) {
        const PipelineConfig c = load([&] { return read_pipeline_config(config_path); });
        const auto seeds = seeds_or_default(seeds_flag, c);
        const EvalReport rep = eval(c, seeds, threads);
        io::write_json(out, report_to_json(rep));
        if (!csv_path.empty()) io::write_text(csv_path, report_to_csv(rep));
        if (!timings_path.empty()) io::write_json(timings_path, timings_json(rep));
      } else if (*abl) {
        const PipelineConfig c = load([&] { return read_pipeline_config(config_path); });
        const auto seeds = seeds_or_default(seeds_flag, c);
        std::set<std::string> toggles = default_toggles();
        const PipelineConfig ablated_cfg = load([&] {
          for (const auto& t : on) toggles.insert(t);
          for (const auto& t : off) {
            if (!known_toggles().count(t)) throw ConfigError("unknown toggle '" + t + "'");
            toggles.erase(t);
          }
          return apply_toggles(c, toggles);
        });
        (void)ablated_cfg;
        const EvalReport base = ablate(c, default_toggles(), seeds, threads);
        const EvalReport abl_rep = ablate(c, toggles, seeds, threads);
        io::json j{{"schema", kReportSchema},
                   {"kind", "ablation"},
                   {"enabled", toggles},
                   {"sdlayer_fallback", toggles.count("sdlayer") ? "none" : "one-ring dilation"},
                   {"comparisons",
                    {{"boundary_recall", comparison(base, abl_rep, &SceneReport::boundary_recall)},
                     {"center_coverage", comparison(base, abl_rep, &SceneReport::center_coverage)}}},
                   {"baseline", report_to_json(base)},
                   {"ablated", report_to_json(abl_rep)}};
        io::write_json(out, j);
      } else if (*sw) {
        const PipelineConfig c = load([&] { return read_pipeline_config(config_path); });
        const auto seeds = seeds_or_default(seeds_flag, c);
        for (int s : stages)
          if (s < 1 || s > 4) throw ExitCode{kExitConfig, "--stages values must lie in 1..4"};
        io::json reports = io::json::array();
        for (const auto& r : srlayer_stage_sweep(c, stages, seeds, threads)) reports.push_back(report_to_json(r));
        io::write_json(out, {{"schema", kReportSchema}, {"kind", "stage_sweep"}, {"reports", reports}});
      }
    } catch (const ExitCode&) {
      throw;
    } catch (const std::exception& e) {
      throw ExitCode{kExitPipeline, e.what()};
    }
  } catch (const ExitCode& e) {
    std::cerr << "error: " << e.message << "\n";
    return e.code;
  }
  return 0;
}
