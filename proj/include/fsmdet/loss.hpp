#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <vector>

#include "fsmdet/nn.hpp"

namespace fsmdet {

// Shape-recovery supervision: multi-class focal loss over BEV cells, each
// weighted by the α of its prediction category.

enum Category : int { kBoundary = 0, kInBox = 1, kOther = 2 };

struct LossConfig {
  std::array<double, 3> alpha{0.5, 0.5, 1.0};
  double gamma = 2.0;
  int classes = 3;

  void validate() const {
    for (double a : alpha)
      if (!(a > 0.0)) throw InvalidArgument("alpha weights must be positive");
    if (!(gamma >= 0.0)) throw InvalidArgument("gamma must be >= 0");
    if (classes < 1) throw InvalidArgument("class count must be >= 1");
  }
};

struct RecoveryPrediction {
  std::vector<Index2> cells;
  std::vector<VecX> scores;     // per-cell class probabilities
  std::vector<int> category;    // Category per cell
};

inline constexpr double kProbClamp = 1e-7;

/// 0 for cells in V_gt, 1 for other cells inside a box footprint, else 2.
inline std::vector<int> categorize(const std::vector<Index2>& pred_cells, const std::set<Index2>& vp_gt,
                                   const std::set<Index2>& box_bev) {
  std::vector<int> out;
  out.reserve(pred_cells.size());
  for (const auto& c : pred_cells)
    out.push_back(vp_gt.count(c) ? kBoundary : (box_bev.count(c) ? kInBox : kOther));
  return out;
}

namespace detail {
inline void check_prediction(const RecoveryPrediction& pred, const std::vector<int>& targets, const LossConfig& config) {
  config.validate();
  const std::size_t n = pred.cells.size();
  if (pred.scores.size() != n || pred.category.size() != n || targets.size() != n)
    throw DimensionMismatch("prediction, category and target lengths differ");
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] < 0 || targets[i] >= config.classes)
      throw LabelOutOfRange("target " + std::to_string(targets[i]) + " at cell " + std::to_string(i));
    if (pred.scores[i].size() != config.classes) throw DimensionMismatch("score vector length != class count");
    if (std::abs(pred.scores[i].sum() - 1.0) > 1e-6)
      throw InvalidArgument("scores at cell " + std::to_string(i) + " do not sum to 1");
    if (pred.category[i] < 0 || pred.category[i] > 2) throw LabelOutOfRange("category must be 0, 1 or 2");
  }
}
}  // namespace detail

/// ℒ = Σ_cells α_category · (−(1 − p_t)^γ · ln p_t), p_t clamped to [1e-7, 1 − 1e-7].
inline double focal_loss(const RecoveryPrediction& pred, const std::vector<int>& targets, const LossConfig& config) {
  detail::check_prediction(pred, targets, config);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    const double p = std::clamp(pred.scores[i][targets[i]], kProbClamp, 1.0 - kProbClamp);
    total += config.alpha[pred.category[i]] * -std::pow(1.0 - p, config.gamma) * std::log(p);
  }
  return total;
}

/// ∂ℒ/∂V̂: nonzero only at the true class. Zero on the clamp.
inline std::vector<VecX> focal_loss_grad_scores(const RecoveryPrediction& pred, const std::vector<int>& targets,
                                                const LossConfig& config) {
  detail::check_prediction(pred, targets, config);
  std::vector<VecX> grads;
  grads.reserve(pred.cells.size());
  const double g = config.gamma;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    VecX grad = VecX::Zero(pred.scores[i].size());
    const double p = pred.scores[i][targets[i]], q = 1.0 - p;
    if (p > kProbClamp && p < 1.0 - kProbClamp) {
      const double focal_term = g > 0.0 ? g * std::pow(q, g - 1.0) * std::log(p) : 0.0;
      grad[targets[i]] = config.alpha[pred.category[i]] * (focal_term - std::pow(q, g) / p);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

/// ∂ℒ/∂z where the scores are softmax(z) (z = ln scores). With γ = 0 this is
/// α · (p − onehot). Zero for cells whose p_t sits on the clamp.
inline std::vector<VecX> focal_loss_grad(const RecoveryPrediction& pred, const std::vector<int>& targets,
                                         const LossConfig& config) {
  detail::check_prediction(pred, targets, config);
  std::vector<VecX> grads;
  grads.reserve(pred.cells.size());
  const double g = config.gamma;
  for (std::size_t i = 0; i < pred.cells.size(); ++i) {
    const VecX& s = pred.scores[i];
    const int t = targets[i];
    const double raw = s[t];
    VecX grad = VecX::Zero(s.size());
    if (raw > kProbClamp && raw < 1.0 - kProbClamp) {
      const double p = raw, q = 1.0 - raw;
      const double focal_term = g > 0.0 ? g * std::pow(q, g - 1.0) * std::log(p) : 0.0;
      const double dl_dp = config.alpha[pred.category[i]] * (focal_term - std::pow(q, g) / p);
      for (int j = 0; j < s.size(); ++j) grad[j] = dl_dp * p * ((j == t ? 1.0 : 0.0) - s[j]);
    }
    grads.push_back(std::move(grad));
  }
  return grads;
}

}  // namespace fsmdet
