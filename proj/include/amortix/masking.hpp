#pragma once

#include "amortix/tensor.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace amortix {

/// How hidden features are presented to a consumer model.
///
/// HardToken realizes the out-of-space mask token as the concatenation
/// [x * s, s]: the indicator channel tells a revealed zero apart from a hidden
/// entry. Multiplicative is plain x * s with no indicator.
enum class MaskScheme : std::uint8_t { HardToken = 0, Multiplicative = 1 };

inline const char* scheme_name(MaskScheme m) {
  return m == MaskScheme::HardToken ? "hard-token" : "multiplicative";
}

/// Network input width for a D-feature problem.
inline int encoded_width(MaskScheme m, int d) { return m == MaskScheme::HardToken ? 2 * d : d; }

using SelectionVector = std::vector<std::uint8_t>;

struct MaskedInput {
  std::vector<double> values;
  SelectionVector indicator;  // empty under Multiplicative
  MaskScheme scheme = MaskScheme::HardToken;

  /// The row a consumer network actually sees.
  std::vector<double> network_row() const {
    std::vector<double> row = values;
    for (auto b : indicator) row.push_back(static_cast<double>(b));
    return row;
  }
  bool operator==(const MaskedInput&) const = default;
};

inline MaskedInput hard_mask(std::span<const double> x, const SelectionVector& s) {
  require_dims(x.size() == s.size(), "hard_mask: len(x) != len(s)");
  MaskedInput out{std::vector<double>(x.size(), 0.0), s, MaskScheme::HardToken};
  for (std::size_t j = 0; j < x.size(); ++j) {
    require_dims(s[j] <= 1, "hard_mask: selection entries must be 0/1");
    if (s[j]) out.values[j] = x[j];
  }
  return out;
}

/// Relaxed selections in [0, 1] are accepted.
inline MaskedInput mult_mask(std::span<const double> x, std::span<const double> s) {
  require_dims(x.size() == s.size(), "mult_mask: len(x) != len(s)");
  MaskedInput out{std::vector<double>(x.size()), {}, MaskScheme::Multiplicative};
  for (std::size_t j = 0; j < x.size(); ++j) out.values[j] = x[j] * s[j];
  return out;
}

// Batched forms used by the trainers. S may hold relaxed values in [0, 1].

inline Matrix encode_masked(MaskScheme scheme, const Matrix& x, const Matrix& s) {
  require_dims(x.rows() == s.rows() && x.cols() == s.cols(), "encode_masked: shape mismatch");
  if (scheme == MaskScheme::Multiplicative) return x.cwiseProduct(s);
  Matrix out(x.rows(), 2 * x.cols());
  out.leftCols(x.cols()) = x.cwiseProduct(s);
  out.rightCols(x.cols()) = s;
  return out;
}

/// Chain rule through encode_masked: dL/dS from dL/d(encoded input).
inline Matrix encode_masked_grad(MaskScheme scheme, const Matrix& x, const Matrix& dencoded) {
  if (scheme == MaskScheme::Multiplicative) return dencoded.cwiseProduct(x);
  return dencoded.leftCols(x.cols()).cwiseProduct(x) + dencoded.rightCols(x.cols());
}

inline Matrix to_matrix(const std::vector<SelectionVector>& masks, int d) {
  Matrix m(static_cast<Eigen::Index>(masks.size()), d);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    require_dims(static_cast<int>(masks[i].size()) == d, "mask width mismatch");
    for (int j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = masks[i][static_cast<std::size_t>(j)];
  }
  return m;
}

inline std::vector<SelectionVector> to_selections(const Matrix& m) {
  std::vector<SelectionVector> out(static_cast<std::size_t>(m.rows()), SelectionVector(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j) > 0.5 ? 1 : 0;
  return out;
}

}  // namespace amortix
