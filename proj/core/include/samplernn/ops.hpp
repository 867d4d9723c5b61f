#pragma once

#include <span>
#include <vector>

#include "samplernn/tensor.hpp"

// Differentiable operations. Every function records itself on the thread's
// active Tape when at least one input requires a gradient. Shapes are checked
// eagerly and reported through DimensionError; any non-finite result raises
// NumericError naming the operation.
//
// Broadcasting: a binary op accepts operands of identical shape, a scalar
// (one element) on either side, or an operand whose shape equals the trailing
// dimensions of the other.

namespace samplernn::ops {

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// x[N x in] * w[out x in]^T + bias[out]. `bias` may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> tanh(const Tensor<T>& a);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a);
/// relu'(0) is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a);
template <typename T>
Tensor<T> exp(const Tensor<T>& a);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Columns [start, start + count) of a 2-D tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count);

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

/// Rows of `table` selected by `rows`; gradients scatter back into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> rows);

/// parts[j] is [N x D]; output row i*R + j is parts[j] row i.
template <typename T>
Tensor<T> interleave_rows(const std::vector<Tensor<T>>& parts);

/// Rows {b*steps + step} of a [B*steps x D] tensor.
template <typename T>
Tensor<T> time_step(const Tensor<T>& sequence, std::size_t steps, std::size_t step);

/// Inverse of time_step over all steps: output row b*S + s is frames[s] row b.
template <typename T>
Tensor<T> stack_time(const std::vector<Tensor<T>>& frames);

/// [B x H] rows: `init` (a learnable [H] vector) where fresh[b], else the
/// constant row carried[b*H .. b*H+H).
template <typename T>
Tensor<T> blend_rows(const Tensor<T>& init, std::span<const T> carried, const std::vector<bool>& fresh);

/// Weighted mean over rows of -log softmax(logits)[target] in nats. Empty
/// `weights` means all ones. A zero total weight yields a zero loss with zero
/// gradient. `per_row` (optional) receives the unweighted per-row NLL.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets,
                                std::span<const T> weights = {}, std::vector<double>* per_row = nullptr);

/// Per-row mixture NLL (nats) of real targets. `params` rows hold C mixture
/// logits, C means and C log standard deviations (clamped to [-7, 7]).
template <typename T>
Tensor<T> gmm_nll(const Tensor<T>& params, std::span<const T> targets, std::span<const T> weights = {},
                  std::vector<double>* per_row = nullptr);

inline constexpr double kGmmLogSigmaMin = -7.0;
inline constexpr double kGmmLogSigmaMax = 7.0;

/// Row-wise weight normalisation: w_i = g_i * v_i / |v_i|.
template <typename T>
Tensor<T> weight_norm(const Tensor<T>& v, const Tensor<T>& g);

/// Fused GRU update. `gx` [B x 3H] holds the input projection (with bias) in
/// gate order r, z, n; `w_hh` is [3H x H]. Computes
///   r = sig(gx_r + h W_r^T), z = sig(gx_z + h W_z^T),
///   n = tanh(gx_n + r * (h W_n^T)), h' = (1 - z) * h + z * n.
template <typename T>
Tensor<T> gru_cell(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& w_hh);

/// Fused LSTM update, gate order i, f, g, o. Returns [B x 2H] = [h' | c'].
template <typename T>
Tensor<T> lstm_cell(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& c, const Tensor<T>& w_hh);

}  // namespace samplernn::ops

namespace samplernn::detail {

/// Fault injection for the gradient checker's self-test: scales every tanh
/// derivative on this thread by 1.5 while enabled.
void set_tanh_gradient_fault(bool enabled);
bool tanh_gradient_fault();

}  // namespace samplernn::detail
