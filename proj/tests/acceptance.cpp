// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails.

#include <chrono>
#include <cstring>
#include <cstdio>
#include <functional>
#include <string>

#include "support.hpp"

using namespace fsmdet;
using namespace fsmdet::testing;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

PipelineConfig scene_config() {
  PipelineConfig c;
  c.objects = 3;
  c.scene.unoccluded = true;
  return c;
}

const std::vector<std::uint64_t>& seeds200() {
  static const auto s = parse_seed_range("0..199");
  return s;
}

// Closed-form slab intersection of a camera ray with an axis-aligned box. The
// ray is parameterized so the parameter equals camera-plane depth.
std::optional<double> slab_depth(const CameraModel& cam, const Pixel2D& px, const Vec3& lo, const Vec3& hi) {
  const Vec3 dc((px.u - cam.cx()) / cam.fx(), (px.v - cam.cy()) / cam.fy(), 1.0);
  const Vec3 d = cam.extrinsic().rotation.transpose() * dc;
  const Vec3 o = cam.center();
  double t0 = 0.0, t1 = 1e300;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a], tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1) return std::nullopt;
  return t0;
}

// A point at the given depth on the ray through a random pixel.
Vec3 point_ahead(const CameraModel& cam, Rng& rng, double depth) {
  const Vec3 dc((rng.uniform(0, cam.width()) - cam.cx()) / cam.fx(), (rng.uniform(0, cam.height()) - cam.cy()) / cam.fy(),
                1.0);
  return cam.center() + depth * (cam.extrinsic().rotation.transpose() * dc);
}

Outcome ac1() {
  Rng rng(101);
  std::size_t checked = 0, disagreements = 0;
  double worst = 0.0, seconds = 0.0;
  while (checked < 20000) {
    const auto cam = random_camera(rng);
    const Vec3 c = point_ahead(cam, rng, rng.uniform(4, 12));
    const Vec3 half(rng.uniform(0.3, 2.0), rng.uniform(0.3, 2.0), rng.uniform(0.3, 1.5));
    const Vec3 lo = c - half, hi = c + half;
    bool in_front = true;
    for (int i = 0; i < 8; ++i) {
      const Vec3 v(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
      in_front = in_front && cam.to_camera(v).z() > 0.5;
    }
    if (!in_front) continue;
    const auto box = box_mesh(lo, hi);
    for (int k = 0; k < 2000; ++k) {
      const Pixel2D px{rng.uniform(0, cam.width()), rng.uniform(0, cam.height())};
      const auto want = slab_depth(cam, px, lo, hi);
      const auto t = std::chrono::steady_clock::now();
      const auto got = cast_depth(cam, box, 1.0, px);
      seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
      if (!want) continue;
      ++checked;
      if (!got) {
        ++disagreements;
        continue;
      }
      worst = std::max(worst, std::abs(*got - *want));
    }
  }
  const bool pass = disagreements == 0 && worst <= 1e-6 && seconds < 2.0;
  return {pass, fmt("%zu pixels, max |err| %.3g m, %zu missed hits, %.3f s", checked, worst, disagreements, seconds)};
}

Outcome ac2() {
  Rng rng(202);
  int objects = 0, missed_at_one = 0;
  std::size_t missed_at_delta = 0, pixels = 0;
  while (objects < 100) {
    const auto cam = random_camera(rng);
    const double depth = rng.uniform(3, 10);
    const auto hull = random_hull(rng, 8 + static_cast<int>(rng.below(30)), rng.uniform(0.3, 1.2), point_ahead(cam, rng, depth));
    bool in_front = true;
    for (const auto& v : expand(hull, 1.15).vertices()) in_front = in_front && cam.to_camera(v).z() > 0.2;
    if (!in_front) continue;
    InstanceRegion2D region;
    try {
      region = instance_region(cam, hull);
    } catch (const NotVisible&) {
      continue;
    }
    if (region.pixels.empty()) continue;
    ++objects;
    pixels += region.pixels.size();
    missed_at_delta += generate_vp(cam, hull, region, 1.15).missed;
    missed_at_one += generate_vp(cam, hull, region, 1.0).missed > 0;
  }
  const bool pass = missed_at_delta == 0 && missed_at_one >= 1;
  return {pass, fmt("%d objects, %zu silhouette pixels, missed %zu at 1.15, %d objects missing at 1.0", objects, pixels,
                    missed_at_delta, missed_at_one)};
}

Outcome ac3(const EvalReport& on) {
  auto raw_cfg = scene_config();
  raw_cfg.sr_enabled = false;
  raw_cfg.sd_mode = SdMode::kOff;
  const auto raw = eval(raw_cfg, seeds200());
  const double a = pooled_coverage(on, &SceneReport::center_coverage).value_or(0.0);
  const double b = pooled_coverage(raw, &SceneReport::center_coverage).value_or(1.0);
  return {a >= 0.95 && b < a, fmt("center_coverage %.4f with recovery, %.4f raw, 200 seeds", a, b)};
}

ForegroundMask mask_from_classes(const SparseVoxelGrid& g) {
  ForegroundMask m;
  for (const auto& [i, v] : g.voxels)
    if (v.class_id) {
      m.indices.insert(i);
      m.scores[i] = smoothed_one_hot(*v.class_id);
    }
  return m;
}

bool bitwise_equal(const VecX& a, const VecX& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

Outcome ac4() {
  Rng rng(404);
  const auto cam = forward_camera(40, 40, 32, 32, 64, 64, Vec3(-8, 6, 2));
  const auto map = ImageFeatureMap::constant(64, 64, VecX::Ones(3));
  std::size_t violations = 0, added_sr = 0, added_sd = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto spec = small_spec(8 + static_cast<int>(rng.below(16)), 8 + static_cast<int>(rng.below(16)),
                                 1 + static_cast<int>(rng.below(4)));
    const auto g = random_grid(rng, spec, rng.uniform(0.01, 0.2), rng.uniform(0, 0.4), 4);
    auto cfg = SrConfig::random(4, 3, 1000 + trial);
    cfg.delta_max = 1 + static_cast<int>(rng.below(8));
    if (trial % 2) cfg.mode = SrMode::kLearnedStub;
    std::set<Index2> gt;
    for (int k = 0; k < 40; ++k)
      gt.insert({static_cast<int>(rng.below(spec.dims[0])), static_cast<int>(rng.below(spec.dims[1]))});
    const auto out = shape_recover(g, mask_from_classes(g), map, cam, cfg, &gt);
    for (const auto& [i, v] : g.voxels) {
      const auto it = out.voxels.find(i);
      if (it == out.voxels.end() || !bitwise_equal(it->second.feature, v.feature) || it->second.class_id != v.class_id ||
          it->second.point_count != v.point_count)
        ++violations;
    }
    added_sr += out.voxels.size() - g.voxels.size();

    const auto bev = flatten_bev(out);
    const Vec3 sensor(rng.uniform(-20, -1), rng.uniform(0, spec.dims[1]), 1.8);
    const auto diffused = self_diffuse(bev, bev_classes(bev), sensor, SdConfig{});
    for (const auto& [i, c] : bev.cells) {
      const auto it = diffused.cells.find(i);
      if (it == diffused.cells.end() || !bitwise_equal(it->second.feature, c.feature) || it->second.class_id != c.class_id)
        ++violations;
    }
    added_sd += diffused.cells.size() - bev.cells.size();
  }
  return {violations == 0,
          fmt("1000 grids, %zu violations, %zu voxels added by recovery, %zu cells added by diffusion", violations,
              added_sr, added_sd)};
}

ImageFeatureMap random_map(Rng& rng, int w, int h, int c) {
  ImageFeatureMap m(w, h, c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < c; ++k) m.texel(x, y)[k] = rng.normal();
  return m;
}

VecX random_vec(Rng& rng, int n) {
  VecX v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

Outcome ac5() {
  Rng rng(505);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int F = 4 + static_cast<int>(rng.below(8)), C = 2 + static_cast<int>(rng.below(6));
    const auto p = random_deform_attn(1 + static_cast<int>(rng.below(4)), 1 + static_cast<int>(rng.below(6)), F, C,
                                      2 + static_cast<int>(rng.below(6)), 4 + static_cast<int>(rng.below(16)),
                                      5000 + trial);
    const auto m = random_map(rng, 20 + static_cast<int>(rng.below(30)), 15 + static_cast<int>(rng.below(30)), C);
    const VecX q = random_vec(rng, F);
    const Pixel2D px{rng.uniform(-2, m.width() + 1), rng.uniform(-2, m.height() + 1)};
    const VecX got = deform_attn(p, m, q, px);
    const auto want = naive_deform_attn(p, m, q, px.u, px.v);
    for (int f = 0; f < F; ++f) worst = std::max(worst, std::abs(got[f] - want[f]));
  }

  const auto p = random_deform_attn(4, 4, 8, 6, 5, 16, 77);
  const auto m = random_map(rng, 40, 40, 6);
  double worst_rel = 0.0;
  int points = 0;
  while (points < 100) {
    const Pixel2D px{rng.uniform(5, 35), rng.uniform(5, 35)};
    if (std::abs(px.u - std::round(px.u)) < 1e-3 || std::abs(px.v - std::round(px.v)) < 1e-3) continue;
    const VecX q = random_vec(rng, 8);
    const auto offsets = deform_attn_sampling(p, m, q, px).offsets;
    const VecX g = deform_attn_norm_grad_query(p, m, q, px, offsets);
    const auto f = [&](const VecX& x) {
      return deform_attn_apply(p, m, px, DeformAttnSampling{offsets, attention_weights(p, x)}).norm();
    };
    for (int i = 0; i < 8; ++i) {
      VecX hi = q, lo = q;
      hi[i] += 1e-5, lo[i] -= 1e-5;
      const double fd = (f(hi) - f(lo)) / 2e-5;
      worst_rel = std::max(worst_rel, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    ++points;
  }
  return {worst <= 1e-9 && worst_rel <= 1e-4,
          fmt("oracle max |err| %.3g over 100 parameterizations, gradient max rel err %.3g over %d points", worst,
              worst_rel, points)};
}

Outcome ac6() {
  Rng rng(606);
  const double alpha[3] = {0.5, 0.5, 1.0};
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    RecoveryPrediction pred;
    std::vector<int> targets;
    const int n = 1 + static_cast<int>(rng.below(300));
    for (int i = 0; i < n; ++i) {
      pred.cells.push_back({i, 0});
      pred.scores.push_back(softmax(2.0 * random_vec(rng, 3)));
      pred.category.push_back(static_cast<int>(rng.below(3)));
      targets.push_back(static_cast<int>(rng.below(3)));
    }
    double naive = 0.0;
    for (int i = 0; i < n; ++i) {
      double pt = pred.scores[i][targets[i]];
      pt = std::min(std::max(pt, 1e-7), 1 - 1e-7);
      naive += alpha[pred.category[i]] * -(1 - pt) * (1 - pt) * std::log(pt);
    }
    worst = std::max(worst, std::abs(focal_loss(pred, targets, LossConfig{}) - naive));
  }

  RecoveryPrediction one{{{0, 0}}, {(VecX(3) << 0.5, 0.25, 0.25).finished()}, {kOther}};
  LossConfig unit;
  unit.alpha = {1, 1, 1};
  const double closed = std::abs(focal_loss(one, {0}, unit) - 0.25 * std::log(2.0));

  double worst_grad = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const VecX z = random_vec(rng, 3);
    const int t = static_cast<int>(rng.below(3));
    RecoveryPrediction pr{{{0, 0}}, {softmax(z)}, {static_cast<int>(rng.below(3))}};
    const VecX g = focal_loss_grad(pr, {t}, LossConfig{})[0];
    for (int j = 0; j < 3; ++j) {
      VecX zp = z, zm = z;
      zp[j] += 1e-6, zm[j] -= 1e-6;
      RecoveryPrediction a = pr, b = pr;
      a.scores[0] = softmax(zp), b.scores[0] = softmax(zm);
      const double fd = (focal_loss(a, {t}, LossConfig{}) - focal_loss(b, {t}, LossConfig{})) / 2e-6;
      worst_grad = std::max(worst_grad, std::abs(g[j] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  return {worst <= 1e-9 && closed <= 1e-12 && worst_grad <= 1e-5,
          fmt("oracle max |err| %.3g, closed form err %.3g, gradient max rel err %.3g", worst, closed, worst_grad)};
}

Outcome ac7() {
  Rng rng(707);
  std::size_t voxels = 0, mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto spec = small_spec(4 + static_cast<int>(rng.below(12)), 4 + static_cast<int>(rng.below(12)),
                                 1 + static_cast<int>(rng.below(3)));
    const auto g = random_grid(rng, spec, rng.uniform(0.02, 0.5), rng.uniform(0, 0.6), 2);
    for (const auto& [i, v] : g.voxels) {
      ++voxels;
      mismatches += candidate_directions(g, i) != predicate_oracle(g, i);
    }
  }

  SparseVoxelGrid g;
  g.spec = small_spec(12, 12, 4);
  g.feature_dim = 3;
  g.invisible = VoxelMask(g.spec);
  for (const Index3 i : {Index3{5, 5, 1}, Index3{5, 6, 1}}) g.voxels[i] = Voxel{i, VecX::Ones(3), g.spec.center(i), 1};
  g.invisible.set({4, 5, 1});
  const auto fig = candidate_directions(g, {5, 5, 1});
  return {mismatches == 0 && fig.size() == 2,
          fmt("%zu voxels on 1000 grids, %zu mismatches, worked configuration gives %zu directions", voxels, mismatches,
              fig.size())};
}

Outcome ac8() {
  const auto c = scene_config();
  const auto all = ablate(c, {"fusion_da", "srlayer", "sdlayer"}, seeds200());
  const auto no_sr = ablate(c, {"fusion_da", "sdlayer"}, seeds200());
  const auto dilate = ablate(c, {"fusion_da", "srlayer"}, seeds200());
  const auto [br_on, br_off] = paired(all, no_sr, &SceneReport::boundary_recall);
  const auto [cc_on, cc_off] = paired(all, dilate, &SceneReport::center_coverage);
  const auto sr = sign_test(br_on, br_off), sd = sign_test(cc_on, cc_off);
  const double m1 = *mean_of(all, &SceneReport::boundary_recall), m0 = *mean_of(no_sr, &SceneReport::boundary_recall);
  const double c1 = *mean_of(all, &SceneReport::center_coverage), c0 = *mean_of(dilate, &SceneReport::center_coverage);
  const bool pass = m1 > m0 && sr.p_value < 0.01 && c1 > c0 && sd.p_value < 0.01;
  return {pass, fmt("boundary_recall %.4f vs %.4f (p=%.3g, +%zu/-%zu); center_coverage %.4f vs %.4f (p=%.3g, +%zu/-%zu)",
                    m1, m0, sr.p_value, sr.positive, sr.negative, c1, c0, sd.p_value, sd.positive, sd.negative)};
}

Outcome ac9(const EvalReport& first) {
  const auto c = scene_config();
  const std::string a = report_to_json(first).dump(2);
  const std::string b = report_to_json(eval(c, seeds200(), 1)).dump(2);
  const std::string t = report_to_json(eval(c, seeds200(), 4)).dump(2);
  return {a == b && a == t, fmt("%zu bytes; rerun %s, 4 threads %s", a.size(), a == b ? "identical" : "differs",
                                a == t ? "identical" : "differs")};
}

}  // namespace

int main() {
  const EvalReport base = eval(scene_config(), seeds200(), 1);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
      {"AC1", ac1}, {"AC2", ac2}, {"AC3", [&] { return ac3(base); }}, {"AC4", ac4}, {"AC5", ac5},
      {"AC6", ac6}, {"AC7", ac7}, {"AC8", ac8}, {"AC9", [&] { return ac9(base); }}};
  int failed = 0;
  for (const auto& [name, fn] : checks) {
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %s: %s\n", name, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
