#pragma once

#include <string>

#include "samplernn/init.hpp"
#include "samplernn/ops.hpp"

namespace samplernn {

/// Linear map with effective weight computed once per forward pass.
template <typename T>
struct BoundLinear {
  Tensor<T> weight;  // [out x in]
  Tensor<T> bias;    // [out] or undefined

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

/// Linear layer with weight normalisation: row i of the effective weight is
/// g_i * v_i / |v_i|. Direction, scale and bias are all trainable.
template <typename T>
class WeightNormLinear {
 public:
  WeightNormLinear() = default;
  /// `init` fills the direction; the scale starts at the row norms so the
  /// effective weight equals the initial direction.
  WeightNormLinear(std::size_t in_dim, std::size_t out_dim, bool with_bias, const InitSpec& init, Rng& rng);
  /// Adopts a prepared [out x in] direction (e.g. block-orthogonal).
  WeightNormLinear(Tensor<T> direction, bool with_bias);

  std::size_t in_dim() const { return v_.dim(1); }
  std::size_t out_dim() const { return v_.dim(0); }
  bool has_bias() const { return b_.defined(); }

  Tensor<T>& direction() { return v_; }
  Tensor<T>& scale() { return g_; }
  Tensor<T>& bias() { return b_; }
  const Tensor<T>& direction() const { return v_; }
  const Tensor<T>& scale() const { return g_; }
  const Tensor<T>& bias() const { return b_; }

  /// Resets g to the current row norms of v (raises on a zero-norm row).
  void reset_scale();

  Tensor<T> weight() const { return ops::weight_norm(v_, g_); }
  BoundLinear<T> bind() const { return {weight(), b_}; }
  Tensor<T> forward(const Tensor<T>& x) const { return ops::linear(x, weight(), b_); }

  void collect(ParameterList<T>& out, const std::string& prefix) const;

 private:
  Tensor<T> v_, g_, b_;
};

template <typename T>
Tensor<T> weight_norm_apply(const WeightNormLinear<T>& layer, const Tensor<T>& x) {
  return layer.forward(x);
}

}  // namespace samplernn
