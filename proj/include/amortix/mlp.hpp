#pragma once

#include "amortix/rng.hpp"
#include "amortix/tensor.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace amortix {

/// Output head applied on top of the last affine layer.
enum class Head : std::uint8_t {
  Linear = 0,   // raw logits (L2X selector scores)
  Softmax = 1,  // K-class distribution
  Sigmoid = 2,  // elementwise Bernoulli probabilities (selection probabilities)
};

inline const char* head_name(Head h) {
  switch (h) {
    case Head::Linear: return "linear";
    case Head::Softmax: return "softmax";
    case Head::Sigmoid: return "sigmoid";
  }
  return "?";
}

struct DenseLayer {
  Matrix weight;  // fan_in x fan_out
  RowVector bias;
};

/// Parameters and gradients share this layout.
using ParamSet = std::vector<DenseLayer>;

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

inline Matrix sigmoid_elementwise(const Matrix& logits) {
  return logits.unaryExpr([](double a) { return sigmoid(a); });
}

/// Fully connected network with rectifier hidden units.
class Mlp {
 public:
  struct Cache {
    std::vector<Matrix> inputs;  // input to each affine layer
    Matrix logits;
  };

  Mlp() = default;

  /// All-zero parameters.
  Mlp(std::vector<int> widths, Head head) : widths_(std::move(widths)), head_(head) {
    require_dims(widths_.size() >= 2, "mlp needs at least input and output widths");
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      require_dims(widths_[l] >= 0 && widths_[l + 1] > 0, "mlp widths must be positive");
      layers_.push_back({Matrix::Zero(widths_[l], widths_[l + 1]), RowVector::Zero(widths_[l + 1])});
    }
  }

  /// He-style fan-in uniform init: W ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)), b = 0.
  static Mlp he_uniform(std::vector<int> widths, Head head, RngStream& rng) {
    Mlp m(std::move(widths), head);
    for (auto& layer : m.layers_) {
      const auto fan_in = layer.weight.rows();
      if (fan_in == 0) continue;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (Eigen::Index i = 0; i < layer.weight.size(); ++i)
        layer.weight.data()[i] = (2.0 * rng.uniform() - 1.0) * bound;
    }
    return m;
  }

  int input_width() const { return widths_.front(); }
  int output_width() const { return widths_.back(); }
  const std::vector<int>& widths() const { return widths_; }
  Head head() const { return head_; }
  ParamSet& layers() { return layers_; }
  const ParamSet& layers() const { return layers_; }
  bool empty() const { return layers_.empty(); }

  Matrix logits(const Matrix& x, Cache* cache = nullptr) const {
    require_dims(x.cols() == input_width(),
                 "mlp input width " + std::to_string(x.cols()) + " != " + std::to_string(input_width()));
    if (cache) cache->inputs.clear();
    Matrix h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix next(h.rows(), layers_[l].weight.cols());
      next.noalias() = h * layers_[l].weight;
      next.rowwise() += layers_[l].bias;
      if (l + 1 < layers_.size()) next = next.cwiseMax(0.0);
      if (cache) cache->inputs.push_back(std::move(h));
      h = std::move(next);
    }
    if (cache) cache->logits = h;
    return h;
  }

  Matrix apply_head(const Matrix& z) const {
    switch (head_) {
      case Head::Softmax: return softmax_rows(z);
      case Head::Sigmoid: return sigmoid_elementwise(z);
      case Head::Linear: return z;
    }
    return z;
  }

  Matrix forward(const Matrix& x) const { return apply_head(logits(x)); }

  /// Backpropagates dL/dlogits. Parameter gradients are added into `grads`
  /// (when given); returns dL/dinput when `want_input_grad` is set.
  Matrix backward(const Cache& cache, const Matrix& dlogits, ParamSet* grads,
                  bool want_input_grad = false) const {
    require_dims(cache.inputs.size() == layers_.size(), "stale forward cache");
    Matrix delta = dlogits;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Matrix& in = cache.inputs[l];
      if (grads) {
        (*grads)[l].weight.noalias() += in.transpose() * delta;
        (*grads)[l].bias += delta.colwise().sum();
      }
      if (l == 0 && !want_input_grad) break;
      Matrix prev(delta.rows(), layers_[l].weight.rows());
      prev.noalias() = delta * layers_[l].weight.transpose();
      if (l > 0) prev = (in.array() > 0.0).select(prev, 0.0);
      delta = std::move(prev);
    }
    if (!want_input_grad) return {};
    return delta;
  }

  ParamSet zeros_like() const {
    ParamSet g;
    g.reserve(layers_.size());
    for (const auto& l : layers_)
      g.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

 private:
  std::vector<int> widths_;
  Head head_ = Head::Softmax;
  ParamSet layers_;
};

/// Visits every parameter array as (path, data, size).
template <typename Params, typename F>
void for_each_param(Params& params, F&& fn) {
  for (std::size_t l = 0; l < params.size(); ++l) {
    fn("layer" + std::to_string(l) + ".weight", params[l].weight.data(),
       static_cast<std::size_t>(params[l].weight.size()));
    fn("layer" + std::to_string(l) + ".bias", params[l].bias.data(), static_cast<std::size_t>(params[l].bias.size()));
  }
}

inline void scale(ParamSet& g, double factor) {
  for (auto& l : g) {
    l.weight *= factor;
    l.bias *= factor;
  }
}

inline void axpy(ParamSet& y, double a, const ParamSet& x) {
  for (std::size_t l = 0; l < y.size(); ++l) {
    y[l].weight += a * x[l].weight;
    y[l].bias += a * x[l].bias;
  }
}

inline double squared_norm(const ParamSet& g) {
  double s = 0;
  for (const auto& l : g) s += l.weight.squaredNorm() + l.bias.squaredNorm();
  return s;
}

inline bool params_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t l = 0; l < a.size(); ++l)
    if (a[l].weight != b[l].weight || a[l].bias != b[l].bias) return false;
  return true;
}

}  // namespace amortix
