#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qprompt/error.hpp"

namespace qprompt {

/// Flat tensor of real-valued weights with shape metadata. Values are held in
/// double precision; files store them as 32-bit floats.
struct WeightTensor {
  std::vector<double> values;
  std::vector<std::size_t> shape;

  WeightTensor() = default;

  /// 1-D tensor whose shape is {values.size()}.
  explicit WeightTensor(std::vector<double> v)
      : values(std::move(v)), shape{values.size()} {}

  WeightTensor(std::vector<double> v, std::vector<std::size_t> s)
      : values(std::move(v)), shape(std::move(s)) {
    if (std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                        std::multiplies<>()) != values.size()) {
      fail(ErrorCode::LengthMismatch, "shape does not match value count");
    }
  }

  std::size_t size() const noexcept { return values.size(); }
  std::span<const double> view() const noexcept { return values; }

  bool operator==(const WeightTensor&) const = default;
};

inline void require_finite(std::span<const double> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      fail(ErrorCode::NonFinite,
           "non-finite value at position " + std::to_string(i));
    }
  }
}

inline void require_nonempty(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::EmptyTensor, "tensor has no values");
}

inline void require_same_length(std::size_t a, std::size_t b) {
  if (a != b) {
    fail(ErrorCode::LengthMismatch, "length mismatch: " + std::to_string(a) +
                                        " vs " + std::to_string(b));
  }
}

}  // namespace qprompt
