#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fsmdet/common.hpp"

namespace fsmdet {

using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// Affine layer y = W x + b.
struct Dense {
  MatX weight;
  VecX bias;

  int in_dim() const { return static_cast<int>(weight.cols()); }
  int out_dim() const { return static_cast<int>(weight.rows()); }

  VecX operator()(const VecX& x) const {
    if (x.size() != weight.cols())
      throw DimensionMismatch("dense layer expects " + std::to_string(weight.cols()) + " inputs, got " +
                              std::to_string(x.size()));
    return weight * x + bias;
  }

  void validate(const std::string& where) const {
    if (bias.size() != weight.rows())
      throw DimensionMismatch(where + ": bias length " + std::to_string(bias.size()) + " != rows " +
                              std::to_string(weight.rows()));
  }
};

/// Feed-forward stack with ReLU between layers (none after the last).
struct Mlp {
  std::vector<Dense> layers;

  int in_dim() const { return layers.empty() ? 0 : layers.front().in_dim(); }
  int out_dim() const { return layers.empty() ? 0 : layers.back().out_dim(); }

  VecX operator()(const VecX& x) const {
    VecX h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](h);
      if (i + 1 < layers.size()) h = h.cwiseMax(0.0);
    }
    return h;
  }

  void validate(const std::string& where) const {
    if (layers.empty()) throw DimensionMismatch(where + ": empty perceptron");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].validate(where + "/" + std::to_string(i));
      if (i > 0 && layers[i].in_dim() != layers[i - 1].out_dim())
        throw DimensionMismatch(where + "/" + std::to_string(i) + ": input " +
                                std::to_string(layers[i].in_dim()) + " != previous output " +
                                std::to_string(layers[i - 1].out_dim()));
    }
  }
};

/// Gaussian weights with std = gain / sqrt(fan_in), small uniform bias.
inline Dense random_dense(int out, int in, Rng& rng, double gain = 1.0) {
  Dense d{MatX(out, in), VecX(out)};
  const double scale = gain / std::sqrt(static_cast<double>(std::max(in, 1)));
  for (int r = 0; r < out; ++r)
    for (int c = 0; c < in; ++c) d.weight(r, c) = scale * rng.normal();
  for (int r = 0; r < out; ++r) d.bias[r] = rng.uniform(-0.1, 0.1);
  return d;
}

inline Mlp random_mlp(const std::vector<int>& dims, Rng& rng, double gain = 1.0) {
  Mlp m;
  for (std::size_t i = 1; i < dims.size(); ++i) m.layers.push_back(random_dense(dims[i], dims[i - 1], rng, gain));
  return m;
}

inline VecX softmax(const VecX& logits) {
  const double mx = logits.maxCoeff();
  VecX e = (logits.array() - mx).exp();
  return e / e.sum();
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace fsmdet
