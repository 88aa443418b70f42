#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "fsmdet/geometry.hpp"
#include "fsmdet/nn.hpp"
#include "fsmdet/simlidar.hpp"
#include "fsmdet/voxel.hpp"

namespace fsmdet {

/// Dense H×W×C feature image R, row-major, channels innermost. Texel (x, y)
/// sits at continuous texel coordinate (x, y).
class ImageFeatureMap {
 public:
  ImageFeatureMap() = default;
  ImageFeatureMap(int width, int height, int channels)
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, 0.0) {
    if (width < 1 || height < 1 || channels < 1) throw InvalidArgument("feature map dims must be >= 1");
  }

  static ImageFeatureMap constant(int width, int height, const VecX& value) {
    ImageFeatureMap m(width, height, static_cast<int>(value.size()));
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) m.texel(x, y) = value;
    return m;
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }

  Eigen::Map<VecX> texel(int x, int y) {
    return Eigen::Map<VecX>(data_.data() + offset(x, y), channels_);
  }
  Eigen::Map<const VecX> texel(int x, int y) const {
    return Eigen::Map<const VecX>(data_.data() + offset(x, y), channels_);
  }

 private:
  std::size_t offset(int x, int y) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_;
  }
  int width_ = 0, height_ = 0, channels_ = 0;
  std::vector<double> data_;
};

/// Image pixel centers sit at (i + 0.5, j + 0.5); texels at integers.
inline Pixel2D to_texel(const Pixel2D& image_px) { return {image_px.u - 0.5, image_px.v - 0.5}; }

namespace detail {
struct BilinearCell {
  int x0, y0, x1, y1;
  double fx, fy;
  bool clamped_u, clamped_v;
};

inline BilinearCell bilinear_cell(const ImageFeatureMap& map, const Pixel2D& px) {
  const double umax = map.width() - 1, vmax = map.height() - 1;
  BilinearCell c{};
  c.clamped_u = !(px.u > 0.0 && px.u < umax);
  c.clamped_v = !(px.v > 0.0 && px.v < vmax);
  const double u = std::clamp(px.u, 0.0, umax);
  const double v = std::clamp(px.v, 0.0, vmax);
  c.x0 = std::min(static_cast<int>(std::floor(u)), std::max(map.width() - 2, 0));
  c.y0 = std::min(static_cast<int>(std::floor(v)), std::max(map.height() - 2, 0));
  c.x1 = std::min(c.x0 + 1, map.width() - 1);
  c.y1 = std::min(c.y0 + 1, map.height() - 1);
  c.fx = u - c.x0;
  c.fy = v - c.y0;
  return c;
}
}  // namespace detail

/// 𝒢(R, p): bilinear interpolation with coordinates clamped to the map.
inline VecX bilinear_sample(const ImageFeatureMap& map, const Pixel2D& px) {
  const auto c = detail::bilinear_cell(map, px);
  return (1 - c.fy) * ((1 - c.fx) * map.texel(c.x0, c.y0) + c.fx * map.texel(c.x1, c.y0)) +
         c.fy * ((1 - c.fx) * map.texel(c.x0, c.y1) + c.fx * map.texel(c.x1, c.y1));
}

/// Jacobian of bilinear_sample w.r.t. (u, v): C×2. Zero along clamped axes.
inline MatX bilinear_sample_jacobian(const ImageFeatureMap& map, const Pixel2D& px) {
  const auto c = detail::bilinear_cell(map, px);
  MatX j = MatX::Zero(map.channels(), 2);
  if (!c.clamped_u)
    j.col(0) = (1 - c.fy) * (map.texel(c.x1, c.y0) - map.texel(c.x0, c.y0)) +
               c.fy * (map.texel(c.x1, c.y1) - map.texel(c.x0, c.y1));
  if (!c.clamped_v)
    j.col(1) = (1 - c.fx) * (map.texel(c.x0, c.y1) - map.texel(c.x0, c.y0)) +
               c.fx * (map.texel(c.x1, c.y1) - map.texel(c.x1, c.y0));
  return j;
}

/// Deformable attention weights. Offsets come from an MLP over the
/// concatenation of the projected (2r+1)² neighborhood mean and the query.
struct DeformAttnParams {
  int heads = 1;          // M
  int samples = 1;        // K
  int feature_dim = kDefaultFeatureDim;  // F
  int channels = 1;       // C
  int value_dim = 1;
  double max_offset = 8.0;
  int neighborhood_order = 3;
  Dense neighborhood_proj;         // C → F
  Mlp offset_mlp;                  // 2F → … → 2MK
  Dense attention;                 // F → MK logits
  std::vector<MatX> value_proj;    // per head: value_dim × C   (W′_m)
  std::vector<MatX> output_proj;   // per head: F × value_dim   (W_m)

  void validate() const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw DimensionMismatch(msg);
    };
    need(heads >= 1 && samples >= 1 && feature_dim >= 1 && channels >= 1 && value_dim >= 1,
         "deformable attention sizes must be >= 1");
    need(neighborhood_order >= 0, "/neighborhood_order must be >= 0");
    neighborhood_proj.validate("/neighborhood_proj");
    need(neighborhood_proj.in_dim() == channels && neighborhood_proj.out_dim() == feature_dim,
         "/neighborhood_proj: expected shape [F, C]");
    offset_mlp.validate("/offset_mlp");
    need(offset_mlp.in_dim() == 2 * feature_dim, "/offset_mlp/0: input must be 2F");
    need(offset_mlp.out_dim() == 2 * heads * samples, "/offset_mlp: output must be 2MK");
    attention.validate("/attention");
    need(attention.in_dim() == feature_dim && attention.out_dim() == heads * samples,
         "/attention: expected shape [MK, F]");
    need(static_cast<int>(value_proj.size()) == heads, "/value_proj: expected one matrix per head");
    need(static_cast<int>(output_proj.size()) == heads, "/output_proj: expected one matrix per head");
    for (int m = 0; m < heads; ++m) {
      need(value_proj[m].rows() == value_dim && value_proj[m].cols() == channels,
           "/value_proj/" + std::to_string(m) + ": expected shape [value_dim, C]");
      need(output_proj[m].rows() == feature_dim && output_proj[m].cols() == value_dim,
           "/output_proj/" + std::to_string(m) + ": expected shape [F, value_dim]");
    }
  }
};

/// Randomly initialized parameters; deterministic for a seed.
inline DeformAttnParams random_deform_attn(int heads, int samples, int feature_dim, int channels,
                                           int value_dim, int hidden, std::uint64_t seed) {
  Rng rng(seed);
  DeformAttnParams p;
  p.heads = heads;
  p.samples = samples;
  p.feature_dim = feature_dim;
  p.channels = channels;
  p.value_dim = value_dim;
  p.neighborhood_proj = random_dense(feature_dim, channels, rng);
  p.offset_mlp = random_mlp({2 * feature_dim, hidden, 2 * heads * samples}, rng, 2.0);
  p.attention = random_dense(heads * samples, feature_dim, rng);
  for (int m = 0; m < heads; ++m) {
    p.value_proj.push_back(random_dense(value_dim, channels, rng).weight);
    p.output_proj.push_back(random_dense(feature_dim, value_dim, rng).weight);
  }
  return p;
}

/// Sampling locations and weights for one query, separable from the value
/// path so either can be frozen.
struct DeformAttnSampling {
  std::vector<std::array<double, 2>> offsets;  // index m*K + k
  VecX weights;                                // softmax over k per head
};

/// Mean of the (2r+1)² texel window around round(px), indices clamped.
inline VecX neighborhood_mean(const ImageFeatureMap& map, const Pixel2D& px, int order) {
  const int cu = static_cast<int>(std::lround(px.u));
  const int cv = static_cast<int>(std::lround(px.v));
  VecX acc = VecX::Zero(map.channels());
  for (int dv = -order; dv <= order; ++dv)
    for (int du = -order; du <= order; ++du)
      acc += map.texel(std::clamp(cu + du, 0, map.width() - 1), std::clamp(cv + dv, 0, map.height() - 1));
  return acc / static_cast<double>((2 * order + 1) * (2 * order + 1));
}

inline VecX attention_weights(const DeformAttnParams& p, const VecX& query) {
  const VecX logits = p.attention(query);
  VecX w(p.heads * p.samples);
  for (int m = 0; m < p.heads; ++m) w.segment(m * p.samples, p.samples) = softmax(logits.segment(m * p.samples, p.samples));
  return w;
}

inline std::vector<std::array<double, 2>> sampling_offsets(const DeformAttnParams& p, const ImageFeatureMap& map,
                                                           const VecX& query, const Pixel2D& px) {
  VecX input(2 * p.feature_dim);
  input << p.neighborhood_proj(neighborhood_mean(map, px, p.neighborhood_order)), query;
  const VecX raw = p.offset_mlp(input);
  std::vector<std::array<double, 2>> out(p.heads * p.samples);
  for (int i = 0; i < p.heads * p.samples; ++i)
    out[i] = {std::clamp(raw[2 * i], -p.max_offset, p.max_offset),
              std::clamp(raw[2 * i + 1], -p.max_offset, p.max_offset)};
  return out;
}

inline DeformAttnSampling deform_attn_sampling(const DeformAttnParams& p, const ImageFeatureMap& map,
                                               const VecX& query, const Pixel2D& px) {
  if (query.size() != p.feature_dim) throw DimensionMismatch("query dimension != F");
  if (map.channels() != p.channels) throw DimensionMismatch("feature map channels != C");
  return {sampling_offsets(p, map, query, px), attention_weights(p, query)};
}

/// Σ_m W_m [Σ_k A_mk · (W′_m 𝒢(R, p + Δp_mk))] for given sampling.
inline VecX deform_attn_apply(const DeformAttnParams& p, const ImageFeatureMap& map, const Pixel2D& px,
                              const DeformAttnSampling& s) {
  VecX out = VecX::Zero(p.feature_dim);
  for (int m = 0; m < p.heads; ++m) {
    VecX pooled = VecX::Zero(p.channels);
    for (int k = 0; k < p.samples; ++k) {
      const int i = m * p.samples + k;
      pooled += s.weights[i] * bilinear_sample(map, {px.u + s.offsets[i][0], px.v + s.offsets[i][1]});
    }
    out += p.output_proj[m] * (p.value_proj[m] * pooled);
  }
  return out;
}

/// Deformable attention for one query at texel-space reference point px.
inline VecX deform_attn(const DeformAttnParams& p, const ImageFeatureMap& map, const VecX& query,
                        const Pixel2D& px) {
  return deform_attn_apply(p, map, px, deform_attn_sampling(p, map, query, px));
}

/// Attention-free projection path: Σ_m W_m W′_m 𝒢(R, p).
inline VecX project_features(const DeformAttnParams& p, const ImageFeatureMap& map, const Pixel2D& px) {
  if (map.channels() != p.channels) throw DimensionMismatch("feature map channels != C");
  const VecX r = bilinear_sample(map, px);
  VecX out = VecX::Zero(p.feature_dim);
  for (int m = 0; m < p.heads; ++m) out += p.output_proj[m] * (p.value_proj[m] * r);
  return out;
}

/// ∂‖y‖/∂p with sampling frozen.
inline std::array<double, 2> deform_attn_norm_grad_pixel(const DeformAttnParams& p, const ImageFeatureMap& map,
                                                         const Pixel2D& px, const DeformAttnSampling& s) {
  const VecX y = deform_attn_apply(p, map, px, s);
  MatX jac = MatX::Zero(p.feature_dim, 2);
  for (int m = 0; m < p.heads; ++m) {
    MatX pooled = MatX::Zero(p.channels, 2);
    for (int k = 0; k < p.samples; ++k) {
      const int i = m * p.samples + k;
      pooled += s.weights[i] * bilinear_sample_jacobian(map, {px.u + s.offsets[i][0], px.v + s.offsets[i][1]});
    }
    jac += p.output_proj[m] * (p.value_proj[m] * pooled);
  }
  const VecX g = jac.transpose() * (y / y.norm());
  return {g[0], g[1]};
}

/// ∂‖y‖/∂query with offsets frozen; attention weights stay live.
inline VecX deform_attn_norm_grad_query(const DeformAttnParams& p, const ImageFeatureMap& map, const VecX& query,
                                        const Pixel2D& px, const std::vector<std::array<double, 2>>& offsets) {
  const DeformAttnSampling s{offsets, attention_weights(p, query)};
  const VecX y = deform_attn_apply(p, map, px, s);
  const VecX unit = y / y.norm();
  VecX g_logits(p.heads * p.samples);
  for (int m = 0; m < p.heads; ++m) {
    std::vector<VecX> values(p.samples);
    VecX mean = VecX::Zero(p.value_dim);
    for (int k = 0; k < p.samples; ++k) {
      const int i = m * p.samples + k;
      values[k] = p.value_proj[m] * bilinear_sample(map, {px.u + offsets[i][0], px.v + offsets[i][1]});
      mean += s.weights[i] * values[k];
    }
    const VecX back = p.output_proj[m].transpose() * unit;
    for (int k = 0; k < p.samples; ++k) {
      const int i = m * p.samples + k;
      g_logits[i] = s.weights[i] * back.dot(values[k] - mean);
    }
  }
  return p.attention.weight.transpose() * g_logits;
}

enum class FusionMode { kDeformAttn, kProjection };

/// Replaces each in-image voxel's feature with the fused image feature at
/// its centroid's projection. Voxels behind or off-image keep their feature
/// and are flagged off_image. Occupancy, centroids and counts are untouched.
inline SparseVoxelGrid fuse_grid(const SparseVoxelGrid& grid, const ImageFeatureMap& map, const CameraModel& cam,
                                 const DeformAttnParams& params, FusionMode mode = FusionMode::kDeformAttn,
                                 unsigned threads = 1) {
  if (params.feature_dim != grid.feature_dim) throw DimensionMismatch("fusion F != grid feature dimension");
  SparseVoxelGrid out = grid;
  std::vector<Voxel*> slots;
  slots.reserve(out.voxels.size());
  for (auto& [i, v] : out.voxels) slots.push_back(&v);
  parallel_for(slots.size(), threads, [&](std::size_t n) {
    Voxel& v = *slots[n];
    const auto px = project(cam, v.centroid);
    if (!px || !cam.in_bounds(*px)) {
      v.off_image = true;
      return;
    }
    const Pixel2D t = to_texel(*px);
    v.feature = mode == FusionMode::kDeformAttn ? deform_attn(params, map, v.feature, t)
                                                : project_features(params, map, t);
    v.off_image = false;
  });
  return out;
}

/// Foreground voxels ℳ with per-voxel class distributions over the class table.
struct ForegroundMask {
  std::set<Index3> indices;
  std::map<Index3, VecX> scores;

  int class_of(const Index3& i) const {
    Eigen::Index arg;
    scores.at(i).maxCoeff(&arg);
    return static_cast<int>(arg);
  }
};

inline VecX smoothed_one_hot(int cls, int classes = kNumClasses, double confidence = 0.9) {
  VecX s = VecX::Constant(classes, (1.0 - confidence) / (classes - 1));
  s[cls] = confidence;
  return s;
}

/// Ground-truth classification: a voxel is foreground when it holds at
/// least one object-labeled scan point; its class is the majority object
/// class among those points (ties to the lowest class id).
inline ForegroundMask classify_foreground(const SparseVoxelGrid& grid, const Scan& scan, const Scene& scene) {
  if (scan.points.size() != scan.point_object.size()) throw InvalidArgument("scan labels misaligned");
  std::map<Index3, std::map<int, int>> votes;
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    if (!scan.point_object[i]) continue;
    const int obj = *scan.point_object[i];
    if (obj < 0 || obj >= static_cast<int>(scene.boxes.size())) throw InvalidArgument("scan label out of range");
    const auto idx = grid.spec.index_of(scan.points[i]);
    if (idx && grid.occupied(*idx)) ++votes[*idx][scene.boxes[obj].class_id];
  }
  ForegroundMask mask;
  for (const auto& [i, v] : grid.voxels) {
    auto it = votes.find(i);
    if (it == votes.end()) {
      mask.scores[i] = smoothed_one_hot(kBackground);
      continue;
    }
    int best_cls = 0, best = -1;
    for (const auto& [cls, n] : it->second)
      if (n > best) best = n, best_cls = cls;
    mask.indices.insert(i);
    mask.scores[i] = smoothed_one_hot(best_cls);
  }
  return mask;
}

/// Untrained two-layer perceptron classifier over voxel features.
struct ClassifierStub {
  Mlp mlp;

  static ClassifierStub random(int feature_dim, int hidden, std::uint64_t seed) {
    Rng rng(seed);
    return {random_mlp({feature_dim, hidden, kNumClasses}, rng)};
  }
};

inline ForegroundMask classify_foreground(const SparseVoxelGrid& grid, const ClassifierStub& stub) {
  ForegroundMask mask;
  for (const auto& [i, v] : grid.voxels) {
    mask.scores[i] = softmax(stub.mlp(v.feature));
    if (mask.class_of(i) != kBackground) mask.indices.insert(i);
  }
  return mask;
}

/// Writes mask classes into the grid (class_id set for ℳ, cleared elsewhere).
inline SparseVoxelGrid apply_mask(const SparseVoxelGrid& grid, const ForegroundMask& mask) {
  SparseVoxelGrid out = grid;
  for (auto& [i, v] : out.voxels) {
    if (mask.indices.count(i))
      v.class_id = mask.class_of(i);
    else
      v.class_id.reset();
  }
  return out;
}

/// Stand-in for the sparse-convolution backbone: a fixed random projection
/// of simple per-voxel statistics followed by tanh.
struct FeatureEncoder {
  Dense proj;  // F × 6

  static FeatureEncoder random(int feature_dim, std::uint64_t seed) {
    Rng rng(seed);
    return {random_dense(feature_dim, 6, rng, 1.5)};
  }

  SparseVoxelGrid operator()(const SparseVoxelGrid& grid) const {
    SparseVoxelGrid out = grid;
    out.feature_dim = proj.out_dim();
    for (auto& [i, v] : out.voxels) {
      const Vec3 rel = (v.centroid - grid.spec.lower_corner(i)).cwiseQuotient(grid.spec.voxel_size);
      VecX x(6);
      x << rel.x() - 0.5, rel.y() - 0.5, rel.z() - 0.5, v.centroid.z() / 2.0,
          std::log1p(static_cast<double>(v.point_count)), 1.0;
      v.feature = proj(x).array().tanh().matrix();
    }
    return out;
  }
};

inline constexpr int kImageChannels = 8;

/// Procedural stand-in for CNN image features: per pixel, the class of the
/// first surface hit, a depth band encoding, image position and an instance code.
inline ImageFeatureMap render_feature_map(const Scene& scene, unsigned threads = 1) {
  const CameraModel& cam = scene.camera;
  ImageFeatureMap map(cam.width(), cam.height(), kImageChannels);
  parallel_for(static_cast<std::size_t>(cam.height()), threads, [&](std::size_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < cam.width(); ++x) {
      const Pixel2D px{x + 0.5, y + 0.5};
      const Ray ray = pixel_ray(cam, px);
      const double slope = ray_slope_scale(cam, px);
      VecX f = VecX::Zero(kImageChannels);
      double depth = 0.0;
      if (const auto hit = cast_scene(scene, ray)) {
        f[scene.boxes[hit->first].class_id] = 1.0;
        depth = hit->second.travel * slope;
        f[7] = std::fmod((hit->first + 1) * 0.6180339887498949, 1.0);
      } else {
        f[kBackground] = 1.0;
        if (ray.direction().z() < 0.0) depth = -ray.origin().z() / ray.direction().z() * slope;
      }
      if (depth > 0.0) {
        f[3] = std::sin(depth / 4.0);
        f[4] = std::cos(depth / 4.0);
      }
      f[5] = px.u / cam.width();
      f[6] = px.v / cam.height();
      map.texel(x, y) = f;
    }
  });
  return map;
}

}  // namespace fsmdet
