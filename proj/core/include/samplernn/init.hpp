#pragma once

#include "samplernn/rng.hpp"
#include "samplernn/tensor.hpp"

namespace samplernn {

enum class InitKind { kOrthogonal, kHeFanIn, kStandardNormal, kConstant };

struct InitSpec {
  InitKind kind = InitKind::kHeFanIn;
  double value = 0.0;  // kConstant only

  static InitSpec orthogonal() { return {InitKind::kOrthogonal, 0.0}; }
  static InitSpec he_fan_in() { return {InitKind::kHeFanIn, 0.0}; }
  static InitSpec standard_normal() { return {InitKind::kStandardNormal, 0.0}; }
  static InitSpec constant(double c) { return {InitKind::kConstant, c}; }
};

/// Fresh leaf tensor (requires_grad off) filled per `spec`.
///
/// Orthogonal needs a 2-D shape: the QR factor of a standard-normal matrix with
/// R's diagonal signs folded in, so WᵀW = I for tall or square shapes (WWᵀ = I
/// for wide ones). He uses fan_in = last dimension and variance 2 / fan_in.
template <typename T>
Tensor<T> init_tensor(const InitSpec& spec, const Shape& shape, Rng& rng);

/// Clamps every gradient element of `params` into [lo, hi].
template <typename T>
void clip_gradients(ParameterList<T>& params, T lo = T{-1}, T hi = T{1});

}  // namespace samplernn
