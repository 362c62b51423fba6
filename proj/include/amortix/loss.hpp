#pragma once

#include "amortix/tensor.hpp"

#include <algorithm>
#include <span>

namespace amortix {

inline constexpr double kProbFloor = 1e-12;

struct CrossEntropy {
  double loss = 0.0;
  Matrix dlogits;        // (probs - onehot) / batch
  bool clamped = false;  // some true-class probability hit the floor
};

/// Mean negative log-likelihood of `labels` under row distributions `probs`,
/// with the gradient taken w.r.t. the pre-softmax logits.
inline CrossEntropy cross_entropy(const Matrix& probs, std::span<const int> labels) {
  require_dims(static_cast<std::size_t>(probs.rows()) == labels.size(), "cross_entropy: rows != labels");
  CrossEntropy out;
  const auto n = probs.rows();
  out.dlogits = probs;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    require_dims(y >= 0 && y < probs.cols(), "cross_entropy: label out of range");
    double p = probs(i, y);
    if (p < kProbFloor) {
      p = kProbFloor;
      out.clamped = true;
    }
    out.loss -= std::log(p);
    out.dlogits(i, y) -= 1.0;
  }
  if (n > 0) {
    out.loss /= static_cast<double>(n);
    out.dlogits /= static_cast<double>(n);
  }
  return out;
}

/// Per-row log q(y_i | row i), floored like cross_entropy.
inline Vector log_likelihood_rows(const Matrix& probs, std::span<const int> labels) {
  Vector ll(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    ll(i) = std::log(std::max(probs(i, labels[static_cast<std::size_t>(i)]), kProbFloor));
  return ll;
}

}  // namespace amortix
