#include "samplernn/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "samplernn/errors.hpp"

namespace samplernn {
namespace detail {
namespace {
thread_local bool g_tanh_fault = false;
}  // namespace

void set_tanh_gradient_fault(bool enabled) { g_tanh_fault = enabled; }
bool tanh_gradient_fault() { return g_tanh_fault; }

}  // namespace detail

namespace ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;
template <typename T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <typename T>
CMap<T> cmap(const T* p, std::size_t rows, std::size_t cols) {
  return CMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MMap<T> mmap(T* p, std::size_t rows, std::size_t cols) {
  return MMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename T>
inline T tanh_derivative(T y) {
  T d = T{1} - y * y;
  return detail::g_tanh_fault ? d * T(1.5) : d;
}

template <typename T>
inline T sigmoid_value(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
void check_finite(const Buffer<T>& values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value in result");
  }
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op, const char* what) {
  if (!t.defined()) throw ContractError(std::string(op) + ": " + what + " is undefined");
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must be " + std::to_string(rank) + "-D, got " +
                         shape_string(t.shape()));
  }
}

/// Creates the output tensor and, when any input is tracked, hooks `fn` onto
/// the active tape.
template <typename T, typename Fn>
Tensor<T> finish(Shape shape, Buffer<T> values, std::initializer_list<const Tensor<T>*> inputs, const char* op,
                 Fn&& make_backward) {
  check_finite(values, op);
  Tensor<T> out(std::move(shape), std::move(values));
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr) return out;
  bool tracked = false;
  for (const Tensor<T>* in : inputs) tracked = tracked || (in != nullptr && in->requires_grad());
  if (!tracked) return out;
  tape->record(out.shared_node(), make_backward());
  return out;
}

template <typename T>
bool tracked_any(const std::vector<Tensor<T>>& inputs) {
  if (Tape<T>::current() == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>& t) { return t.requires_grad(); });
}

template <typename T>
T* grad_of(const NodePtr<T>& n) {
  return (n && n->requires_grad) ? n->grad_buffer() : nullptr;
}

// ---- broadcasting ----------------------------------------------------------

struct Broadcast {
  Shape out_shape;
  bool a_small = false;  // a is repeated over b
  bool b_small = false;
  std::size_t small_n = 0;
};

template <typename T>
Broadcast plan_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out_shape = a.shape();
  } else if (b.size() == 1 || is_suffix(b.shape(), a.shape())) {
    bc.out_shape = a.shape();
    bc.b_small = true;
    bc.small_n = b.size();
  } else if (a.size() == 1 || is_suffix(a.shape(), b.shape())) {
    bc.out_shape = b.shape();
    bc.a_small = true;
    bc.small_n = a.size();
  } else {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                         shape_string(b.shape()));
  }
  return bc;
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryKind kind, const char* op) {
  Broadcast bc = plan_broadcast(a, b, op);
  const std::size_t n = shape_numel(bc.out_shape);
  const std::size_t na = a.size(), nb = b.size();
  const T* pa = a.data();
  const T* pb = b.data();
  Buffer<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    T x = pa[bc.a_small ? i % na : i];
    T y = pb[bc.b_small ? i % nb : i];
    switch (kind) {
      case BinaryKind::kAdd: out[i] = x + y; break;
      case BinaryKind::kSub: out[i] = x - y; break;
      case BinaryKind::kMul: out[i] = x * y; break;
    }
  }
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return finish<T>(bc.out_shape, std::move(out), {&a, &b}, op, [=]() {
    return [=](detail::Node<T>& o) {
      const T* g = o.grad.data();
      T* ga = grad_of(an);
      T* gb = grad_of(bn);
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t ia = bc.a_small ? i % na : i;
        std::size_t ib = bc.b_small ? i % nb : i;
        switch (kind) {
          case BinaryKind::kAdd:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] += g[i];
            break;
          case BinaryKind::kSub:
            if (ga) ga[ia] += g[i];
            if (gb) gb[ib] -= g[i];
            break;
          case BinaryKind::kMul:
            if (ga) ga[ia] += g[i] * bn->value[ib];
            if (gb) gb[ib] += g[i] * an->value[ia];
            break;
        }
      }
    };
  });
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Buffer<T> out(m * n);
  mmap(out.data(), m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  auto an = a.shared_node();
  auto bn = b.shared_node();
  return finish<T>({m, n}, std::move(out), {&a, &b}, "matmul", [=]() {
    return [=](detail::Node<T>& o) {
      auto g = cmap(o.grad.data(), m, n);
      if (T* ga = grad_of(an)) mmap(ga, m, k).noalias() += g * cmap(bn->value.data(), k, n).transpose();
      if (T* gb = grad_of(bn)) mmap(gb, k, n).noalias() += cmap(an->value.data(), m, k).transpose() * g;
    };
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != out_dim) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " does not match weight " +
                         shape_string(w.shape()));
  }
  Buffer<T> out(rows * out_dim);
  auto y = mmap(out.data(), rows, out_dim);
  if (rows == 1) {
    using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
    Eigen::Map<RowVec> yv(out.data(), static_cast<Eigen::Index>(out_dim));
    Eigen::Map<const RowVec> xv(x.data(), static_cast<Eigen::Index>(in));
    yv.noalias() = xv * cmap(w.data(), out_dim, in).transpose();
  } else {
    y.noalias() = cmap(x.data(), rows, in) * cmap(w.data(), out_dim, in).transpose();
  }
  if (has_bias) {
    using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
    Eigen::Map<const RowVec> bv(bias.data(), static_cast<Eigen::Index>(out_dim));
    y.rowwise() += bv;
  }
  auto xn = x.shared_node();
  auto wn = w.shared_node();
  auto bn = bias.shared_node();
  return finish<T>({rows, out_dim}, std::move(out), {&x, &w, has_bias ? &bias : nullptr}, "linear", [=]() {
    return [=](detail::Node<T>& o) {
      auto g = cmap(o.grad.data(), rows, out_dim);
      if (T* gx = grad_of(xn)) mmap(gx, rows, in).noalias() += g * cmap(wn->value.data(), out_dim, in);
      if (T* gw = grad_of(wn)) mmap(gw, out_dim, in).noalias() += g.transpose() * cmap(xn->value.data(), rows, in);
      if (T* gb = grad_of(bn)) {
        using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
        Eigen::Map<RowVec>(gb, static_cast<Eigen::Index>(out_dim)) += g.colwise().sum();
      }
    };
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= factor;
  auto an = a.shared_node();
  return finish<T>(a.shape(), std::move(out), {&a}, "scale", [=]() {
    return [=](detail::Node<T>& o) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i] * factor;
    };
  });
}

namespace {

enum class UnaryKind { kTanh, kSigmoid, kRelu, kExp };

template <typename T>
Tensor<T> unary(const Tensor<T>& a, UnaryKind kind, const char* op) {
  const std::size_t n = a.size();
  Buffer<T> out(n);
  const T* x = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case UnaryKind::kTanh: out[i] = std::tanh(x[i]); break;
      case UnaryKind::kSigmoid: out[i] = sigmoid_value(x[i]); break;
      case UnaryKind::kRelu: out[i] = x[i] > T{0} ? x[i] : T{0}; break;
      case UnaryKind::kExp: out[i] = std::exp(x[i]); break;
    }
  }
  auto an = a.shared_node();
  Tensor<T> result = finish<T>(a.shape(), std::move(out), {&a}, op, [=]() {
    return [=](detail::Node<T>& o) {
      T* ga = an->grad_buffer();
      const T* y = o.value.data();
      const T* g = o.grad.data();
      for (std::size_t i = 0; i < n; ++i) {
        switch (kind) {
          case UnaryKind::kTanh: ga[i] += g[i] * tanh_derivative(y[i]); break;
          case UnaryKind::kSigmoid: ga[i] += g[i] * y[i] * (T{1} - y[i]); break;
          case UnaryKind::kRelu: ga[i] += an->value[i] > T{0} ? g[i] : T{0}; break;
          case UnaryKind::kExp: ga[i] += g[i] * y[i]; break;
        }
      }
    };
  });
  return result;
}

}  // namespace

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(a, UnaryKind::kTanh, "tanh");
}
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(a, UnaryKind::kSigmoid, "sigmoid");
}
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(a, UnaryKind::kRelu, "relu");
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(a, UnaryKind::kExp, "exp");
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T{0};
  for (T v : a.values()) total += v;
  auto an = a.shared_node();
  return finish<T>({1}, Buffer<T>{total}, {&a}, "sum", [=]() {
    return [=](detail::Node<T>& o) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < an->value.size(); ++i) ga[i] += o.grad[0];
    };
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
  }
  Buffer<T> out(a.values().begin(), a.values().end());
  auto an = a.shared_node();
  return finish<T>(std::move(shape), std::move(out), {&a}, "reshape", [=]() {
    return [=](detail::Node<T>& o) {
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
    };
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t start, std::size_t count) {
  require_rank(a, 2, "slice_cols", "input");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  if (start + count > cols) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") out of " + shape_string(a.shape()));
  }
  Buffer<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data() + r * cols + start, count, out.data() + r * count);
  }
  auto an = a.shared_node();
  return finish<T>({rows, count}, std::move(out), {&a}, "slice_cols", [=]() {
    return [=](detail::Node<T>& o) {
      T* ga = an->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) ga[r * cols + start + c] += o.grad[r * count + c];
      }
    };
  });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols", "part");
    if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Buffer<T> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  Tensor<T> result(Shape{rows, total}, std::move(out));
  check_finite(result.shared_node()->value, "concat_cols");
  if (!tracked_any(parts)) return result;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.shared_node());
  Tape<T>::current()->record(result.shared_node(), [=](detail::Node<T>& o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (T* g = grad_of(nodes[k])) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[k]; ++c) g[r * widths[k] + c] += o.grad[r * total + off + c];
        }
      }
      off += widths[k];
    }
  });
  return result;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> rows) {
  require_rank(table, 2, "gather_rows", "table");
  const std::size_t q = table.dim(0), width = table.dim(1);
  std::vector<int> idx(rows.begin(), rows.end());
  Buffer<T> out(idx.size() * width);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= q) {
      throw IndexError("gather_rows: row " + std::to_string(idx[i]) + " outside [0, " + std::to_string(q) + ")");
    }
    std::copy_n(table.data() + static_cast<std::size_t>(idx[i]) * width, width, out.data() + i * width);
  }
  auto tn = table.shared_node();
  Shape shape{idx.size(), width};
  return finish<T>(std::move(shape), std::move(out), {&table}, "gather_rows", [=, idx = std::move(idx)]() {
    return [=](detail::Node<T>& o) {
      T* gt = tn->grad_buffer();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        T* dst = gt + static_cast<std::size_t>(idx[i]) * width;
        const T* src = o.grad.data() + i * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
      }
    };
  });
}

template <typename T>
Tensor<T> interleave_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("interleave_rows: no inputs");
  const std::size_t ratio = parts.size();
  const std::size_t n = parts[0].dim(0), width = parts[0].dim(1);
  for (const auto& p : parts) {
    require_rank(p, 2, "interleave_rows", "part");
    if (p.dim(0) != n || p.dim(1) != width) throw DimensionError("interleave_rows: parts differ in shape");
  }
  Buffer<T> out(n * ratio * width);
  for (std::size_t j = 0; j < ratio; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(parts[j].data() + i * width, width, out.data() + (i * ratio + j) * width);
    }
  }
  Tensor<T> result(Shape{n * ratio, width}, std::move(out));
  if (!tracked_any(parts)) return result;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) nodes.push_back(p.shared_node());
  Tape<T>::current()->record(result.shared_node(), [=](detail::Node<T>& o) {
    for (std::size_t j = 0; j < ratio; ++j) {
      T* g = grad_of(nodes[j]);
      if (!g) continue;
      for (std::size_t i = 0; i < n; ++i) {
        const T* src = o.grad.data() + (i * ratio + j) * width;
        for (std::size_t c = 0; c < width; ++c) g[i * width + c] += src[c];
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> time_step(const Tensor<T>& sequence, std::size_t steps, std::size_t step) {
  require_rank(sequence, 2, "time_step", "sequence");
  if (steps == 0 || sequence.dim(0) % steps != 0 || step >= steps) {
    throw DimensionError("time_step: step " + std::to_string(step) + " of " + std::to_string(steps) +
                         " does not index " + shape_string(sequence.shape()));
  }
  const std::size_t batch = sequence.dim(0) / steps, width = sequence.dim(1);
  Buffer<T> out(batch * width);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(sequence.data() + (b * steps + step) * width, width, out.data() + b * width);
  }
  auto sn = sequence.shared_node();
  return finish<T>({batch, width}, std::move(out), {&sequence}, "time_step", [=]() {
    return [=](detail::Node<T>& o) {
      T* g = sn->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        T* dst = g + (b * steps + step) * width;
        const T* src = o.grad.data() + b * width;
        for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
      }
    };
  });
}

template <typename T>
Tensor<T> stack_time(const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw ContractError("stack_time: no frames");
  const std::size_t steps = frames.size();
  const std::size_t batch = frames[0].dim(0), width = frames[0].dim(1);
  for (const auto& f : frames) {
    require_rank(f, 2, "stack_time", "frame");
    if (f.dim(0) != batch || f.dim(1) != width) throw DimensionError("stack_time: frames differ in shape");
  }
  Buffer<T> out(batch * steps * width);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(frames[s].data() + b * width, width, out.data() + (b * steps + s) * width);
    }
  }
  Tensor<T> result(Shape{batch * steps, width}, std::move(out));
  if (!tracked_any(frames)) return result;
  std::vector<NodePtr<T>> nodes;
  for (const auto& f : frames) nodes.push_back(f.shared_node());
  Tape<T>::current()->record(result.shared_node(), [=](detail::Node<T>& o) {
    for (std::size_t s = 0; s < steps; ++s) {
      T* g = grad_of(nodes[s]);
      if (!g) continue;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* src = o.grad.data() + (b * steps + s) * width;
        for (std::size_t c = 0; c < width; ++c) g[b * width + c] += src[c];
      }
    }
  });
  return result;
}

template <typename T>
Tensor<T> blend_rows(const Tensor<T>& init, std::span<const T> carried, const std::vector<bool>& fresh) {
  const std::size_t width = init.size();
  const std::size_t batch = fresh.size();
  if (carried.size() != batch * width) {
    throw DimensionError("blend_rows: carried state has " + std::to_string(carried.size()) + " values, expected " +
                         std::to_string(batch * width));
  }
  Buffer<T> out(batch * width);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = fresh[b] ? init.data() : carried.data() + b * width;
    std::copy_n(src, width, out.data() + b * width);
  }
  auto in = init.shared_node();
  return finish<T>({batch, width}, std::move(out), {&init}, "blend_rows", [=]() {
    return [=](detail::Node<T>& o) {
      T* g = in->grad_buffer();
      for (std::size_t b = 0; b < batch; ++b) {
        if (!fresh[b]) continue;
        for (std::size_t c = 0; c < width; ++c) g[c] += o.grad[b * width + c];
      }
    };
  });
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const T> weights,
                                std::vector<double>* per_row) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t rows = logits.dim(0), q = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  if (!weights.empty() && weights.size() != rows) throw DimensionError("softmax_cross_entropy: weight count");
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= q) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(q) +
                       ")");
    }
  }
  Buffer<T> probs(rows * q);
  std::vector<double> nll(rows);
  double weighted = 0.0, total_weight = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.data() + r * q;
    T mx = *std::max_element(z, z + q);
    double denom = 0.0;
    for (std::size_t c = 0; c < q; ++c) denom += std::exp(static_cast<double>(z[c] - mx));
    double log_denom = std::log(denom);
    for (std::size_t c = 0; c < q; ++c) {
      probs[r * q + c] = static_cast<T>(std::exp(static_cast<double>(z[c] - mx) - log_denom));
    }
    nll[r] = log_denom - static_cast<double>(z[targets[r]] - mx);
    double w = weights.empty() ? 1.0 : static_cast<double>(weights[r]);
    weighted += w * nll[r];
    total_weight += w;
  }
  const double loss = total_weight > 0.0 ? weighted / total_weight : 0.0;
  if (per_row) *per_row = nll;
  auto ln = logits.shared_node();
  std::vector<int> tgt(targets.begin(), targets.end());
  Buffer<T> wts(weights.begin(), weights.end());
  return finish<T>({1}, Buffer<T>{static_cast<T>(loss)}, {&logits}, "softmax_cross_entropy",
                   [=, probs = std::move(probs), tgt = std::move(tgt), wts = std::move(wts)]() {
                     return [=](detail::Node<T>& o) {
                       if (total_weight <= 0.0) return;
                       T* g = ln->grad_buffer();
                       const double upstream = static_cast<double>(o.grad[0]) / total_weight;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double w = wts.empty() ? 1.0 : static_cast<double>(wts[r]);
                         if (w == 0.0) continue;
                         const T s = static_cast<T>(upstream * w);
                         for (std::size_t c = 0; c < q; ++c) g[r * q + c] += s * probs[r * q + c];
                         g[r * q + static_cast<std::size_t>(tgt[r])] -= s;
                       }
                     };
                   });
}

template <typename T>
Tensor<T> gmm_nll(const Tensor<T>& params, std::span<const T> targets, std::span<const T> weights,
                  std::vector<double>* per_row) {
  require_rank(params, 2, "gmm_nll", "params");
  const std::size_t rows = params.dim(0), width = params.dim(1);
  if (width == 0 || width % 3 != 0) throw DimensionError("gmm_nll: params width must be 3*C");
  const std::size_t comps = width / 3;
  if (targets.size() != rows) throw DimensionError("gmm_nll: target count does not match rows");
  if (!weights.empty() && weights.size() != rows) throw DimensionError("gmm_nll: weight count");
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  // Saved per row/component: prior pi, posterior gamma, standardized residual z, sigma, clamp flag.
  std::vector<double> pi(rows * comps), gamma(rows * comps), zres(rows * comps), sigma(rows * comps);
  std::vector<char> clamped(rows * comps);
  std::vector<double> nll(rows);
  double weighted = 0.0, total_weight = 0.0;
  std::vector<double> a(comps);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = params.data() + r * width;
    const double x = static_cast<double>(targets[r]);
    double lmax = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < comps; ++c) lmax = std::max(lmax, static_cast<double>(p[c]));
    double lden = 0.0;
    for (std::size_t c = 0; c < comps; ++c) lden += std::exp(static_cast<double>(p[c]) - lmax);
    const double log_norm = lmax + std::log(lden);
    double amax = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < comps; ++c) {
      const std::size_t k = r * comps + c;
      const double log_pi = static_cast<double>(p[c]) - log_norm;
      pi[k] = std::exp(log_pi);
      double ls = static_cast<double>(p[2 * comps + c]);
      clamped[k] = ls < kGmmLogSigmaMin || ls > kGmmLogSigmaMax;
      ls = std::clamp(ls, kGmmLogSigmaMin, kGmmLogSigmaMax);
      sigma[k] = std::exp(ls);
      zres[k] = (x - static_cast<double>(p[comps + c])) / sigma[k];
      a[c] = log_pi - kHalfLog2Pi - ls - 0.5 * zres[k] * zres[k];
      amax = std::max(amax, a[c]);
    }
    double s = 0.0;
    for (std::size_t c = 0; c < comps; ++c) s += std::exp(a[c] - amax);
    const double lse = amax + std::log(s);
    for (std::size_t c = 0; c < comps; ++c) gamma[r * comps + c] = std::exp(a[c] - lse);
    nll[r] = -lse;
    if (!std::isfinite(nll[r])) throw NumericError("gmm_nll: non-finite likelihood");
    const double w = weights.empty() ? 1.0 : static_cast<double>(weights[r]);
    weighted += w * nll[r];
    total_weight += w;
  }
  const double loss = total_weight > 0.0 ? weighted / total_weight : 0.0;
  if (per_row) *per_row = nll;
  auto pn = params.shared_node();
  Buffer<T> wts(weights.begin(), weights.end());
  return finish<T>({1}, Buffer<T>{static_cast<T>(loss)}, {&params}, "gmm_nll", [=]() {
    return [=](detail::Node<T>& o) {
      if (total_weight <= 0.0) return;
      T* g = pn->grad_buffer();
      const double upstream = static_cast<double>(o.grad[0]) / total_weight;
      for (std::size_t r = 0; r < rows; ++r) {
        const double w = wts.empty() ? 1.0 : static_cast<double>(wts[r]);
        if (w == 0.0) continue;
        const double s = upstream * w;
        T* gr = g + r * width;
        for (std::size_t c = 0; c < comps; ++c) {
          const std::size_t k = r * comps + c;
          gr[c] += static_cast<T>(s * (pi[k] - gamma[k]));
          gr[comps + c] += static_cast<T>(s * (-gamma[k] * zres[k] / sigma[k]));
          if (!clamped[k]) gr[2 * comps + c] += static_cast<T>(s * gamma[k] * (1.0 - zres[k] * zres[k]));
        }
      }
    };
  });
}

template <typename T>
Tensor<T> weight_norm(const Tensor<T>& v, const Tensor<T>& g) {
  require_rank(v, 2, "weight_norm", "direction");
  const std::size_t rows = v.dim(0), cols = v.dim(1);
  if (g.size() != rows) {
    throw DimensionError("weight_norm: scale " + shape_string(g.shape()) + " does not match direction " +
                         shape_string(v.shape()));
  }
  Buffer<T> norms(rows);
  Buffer<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* vr = v.data() + r * cols;
    T sq = T{0};
    for (std::size_t c = 0; c < cols; ++c) sq += vr[c] * vr[c];
    T n = std::sqrt(sq);
    if (!(n > T{0})) throw NumericError("weight_norm: row " + std::to_string(r) + " of the direction has zero norm");
    norms[r] = n;
    const T f = g[r] / n;
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = f * vr[c];
  }
  auto vn = v.shared_node();
  auto gn = g.shared_node();
  return finish<T>({rows, cols}, std::move(out), {&v, &g}, "weight_norm", [=, norms = std::move(norms)]() {
    return [=](detail::Node<T>& o) {
      T* gv = grad_of(vn);
      T* gg = grad_of(gn);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* vr = vn->value.data() + r * cols;
        const T* dw = o.grad.data() + r * cols;
        T dot = T{0};
        for (std::size_t c = 0; c < cols; ++c) dot += dw[c] * vr[c];
        const T n = norms[r];
        if (gg) gg[r] += dot / n;
        if (gv) {
          const T f = gn->value[r] / n;
          const T proj = dot / (n * n);
          for (std::size_t c = 0; c < cols; ++c) gv[r * cols + c] += f * (dw[c] - proj * vr[c]);
        }
      }
    };
  });
}

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& w_hh) {
  require_rank(gx, 2, "gru_cell", "input gates");
  require_rank(h, 2, "gru_cell", "hidden");
  require_rank(w_hh, 2, "gru_cell", "recurrent weight");
  const std::size_t batch = h.dim(0), hidden = h.dim(1);
  if (gx.dim(0) != batch || gx.dim(1) != 3 * hidden || w_hh.dim(0) != 3 * hidden || w_hh.dim(1) != hidden) {
    throw DimensionError("gru_cell: gates " + shape_string(gx.shape()) + ", hidden " + shape_string(h.shape()) +
                         ", recurrent weight " + shape_string(w_hh.shape()) + " are inconsistent");
  }
  const std::size_t g3 = 3 * hidden;
  Buffer<T> gh(batch * g3);
  mmap(gh.data(), batch, g3).noalias() = cmap(h.data(), batch, hidden) * cmap(w_hh.data(), g3, hidden).transpose();
  // saved activations: r, z, n per unit
  Buffer<T> r(batch * hidden), z(batch * hidden), n(batch * hidden), out(batch * hidden);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* x = gx.data() + b * g3;
    const T* u = gh.data() + b * g3;
    const T* hp = h.data() + b * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      const std::size_t k = b * hidden + j;
      r[k] = sigmoid_value(x[j] + u[j]);
      z[k] = sigmoid_value(x[hidden + j] + u[hidden + j]);
      n[k] = std::tanh(x[2 * hidden + j] + r[k] * u[2 * hidden + j]);
      out[k] = (T{1} - z[k]) * hp[j] + z[k] * n[k];
    }
  }
  auto gxn = gx.shared_node();
  auto hn = h.shared_node();
  auto wn = w_hh.shared_node();
  return finish<T>({batch, hidden}, std::move(out), {&gx, &h, &w_hh}, "gru_cell",
                   [=, gh = std::move(gh), r = std::move(r), z = std::move(z), n = std::move(n)]() {
                     return [=](detail::Node<T>& o) {
                       Buffer<T> dpre(batch * g3);  // d(gx) per gate
                       Buffer<T> dgh(batch * g3);
                       T* gh_prev = grad_of(hn);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const T* hp = hn->value.data() + b * hidden;
                         const T* u = gh.data() + b * g3;
                         for (std::size_t j = 0; j < hidden; ++j) {
                           const std::size_t k = b * hidden + j;
                           const T dh = o.grad[k];
                           const T dz = dh * (n[k] - hp[j]);
                           const T dn_pre = dh * z[k] * tanh_derivative(n[k]);
                           const T dr = dn_pre * u[2 * hidden + j];
                           const T dr_pre = dr * r[k] * (T{1} - r[k]);
                           const T dz_pre = dz * z[k] * (T{1} - z[k]);
                           T* dp = dpre.data() + b * g3;
                           T* dg = dgh.data() + b * g3;
                           dp[j] = dr_pre;
                           dp[hidden + j] = dz_pre;
                           dp[2 * hidden + j] = dn_pre;
                           dg[j] = dr_pre;
                           dg[hidden + j] = dz_pre;
                           dg[2 * hidden + j] = dn_pre * r[k];
                           if (gh_prev) gh_prev[k] += dh * (T{1} - z[k]);
                         }
                       }
                       if (T* ggx = grad_of(gxn)) {
                         for (std::size_t i = 0; i < dpre.size(); ++i) ggx[i] += dpre[i];
                       }
                       auto dG = cmap(dgh.data(), batch, g3);
                       if (gh_prev) mmap(gh_prev, batch, hidden).noalias() += dG * cmap(wn->value.data(), g3, hidden);
                       if (T* gw = grad_of(wn)) {
                         mmap(gw, g3, hidden).noalias() += dG.transpose() * cmap(hn->value.data(), batch, hidden);
                       }
                     };
                   });
}

template <typename T>
Tensor<T> lstm_cell(const Tensor<T>& gx, const Tensor<T>& h, const Tensor<T>& c, const Tensor<T>& w_hh) {
  require_rank(gx, 2, "lstm_cell", "input gates");
  require_rank(h, 2, "lstm_cell", "hidden");
  require_rank(c, 2, "lstm_cell", "cell");
  require_rank(w_hh, 2, "lstm_cell", "recurrent weight");
  const std::size_t batch = h.dim(0), hidden = h.dim(1);
  const std::size_t g4 = 4 * hidden;
  if (gx.dim(0) != batch || gx.dim(1) != g4 || c.shape() != h.shape() || w_hh.dim(0) != g4 ||
      w_hh.dim(1) != hidden) {
    throw DimensionError("lstm_cell: gates " + shape_string(gx.shape()) + ", hidden " + shape_string(h.shape()) +
                         ", cell " + shape_string(c.shape()) + ", recurrent weight " + shape_string(w_hh.shape()) +
                         " are inconsistent");
  }
  Buffer<T> act(batch * g4);
  mmap(act.data(), batch, g4).noalias() = cmap(h.data(), batch, hidden) * cmap(w_hh.data(), g4, hidden).transpose();
  Buffer<T> tc(batch * hidden);
  Buffer<T> out(batch * 2 * hidden);
  for (std::size_t b = 0; b < batch; ++b) {
    T* a = act.data() + b * g4;
    const T* x = gx.data() + b * g4;
    const T* cp = c.data() + b * hidden;
    for (std::size_t j = 0; j < hidden; ++j) {
      const T i = sigmoid_value(x[j] + a[j]);
      const T f = sigmoid_value(x[hidden + j] + a[hidden + j]);
      const T g = std::tanh(x[2 * hidden + j] + a[2 * hidden + j]);
      const T og = sigmoid_value(x[3 * hidden + j] + a[3 * hidden + j]);
      a[j] = i;
      a[hidden + j] = f;
      a[2 * hidden + j] = g;
      a[3 * hidden + j] = og;
      const T cn = f * cp[j] + i * g;
      const T t = std::tanh(cn);
      tc[b * hidden + j] = t;
      out[b * 2 * hidden + j] = og * t;
      out[b * 2 * hidden + hidden + j] = cn;
    }
  }
  auto gxn = gx.shared_node();
  auto hn = h.shared_node();
  auto cn_node = c.shared_node();
  auto wn = w_hh.shared_node();
  return finish<T>({batch, 2 * hidden}, std::move(out), {&gx, &h, &c, &w_hh}, "lstm_cell",
                   [=, act = std::move(act), tc = std::move(tc)]() {
                     return [=](detail::Node<T>& o) {
                       Buffer<T> dpre(batch * g4);
                       T* gc = grad_of(cn_node);
                       for (std::size_t b = 0; b < batch; ++b) {
                         const T* a = act.data() + b * g4;
                         const T* cp = cn_node->value.data() + b * hidden;
                         const T* go = o.grad.data() + b * 2 * hidden;
                         T* dp = dpre.data() + b * g4;
                         for (std::size_t j = 0; j < hidden; ++j) {
                           const T i = a[j], f = a[hidden + j], g = a[2 * hidden + j], og = a[3 * hidden + j];
                           const T t = tc[b * hidden + j];
                           const T dh = go[j];
                           const T dc = go[hidden + j] + dh * og * tanh_derivative(t);
                           dp[j] = dc * g * i * (T{1} - i);
                           dp[hidden + j] = dc * cp[j] * f * (T{1} - f);
                           dp[2 * hidden + j] = dc * i * tanh_derivative(g);
                           dp[3 * hidden + j] = dh * t * og * (T{1} - og);
                           if (gc) gc[b * hidden + j] += dc * f;
                         }
                       }
                       if (T* ggx = grad_of(gxn)) {
                         for (std::size_t i = 0; i < dpre.size(); ++i) ggx[i] += dpre[i];
                       }
                       auto dP = cmap(dpre.data(), batch, g4);
                       if (T* ghp = grad_of(hn)) mmap(ghp, batch, hidden).noalias() += dP * cmap(wn->value.data(), g4, hidden);
                       if (T* gw = grad_of(wn)) {
                         mmap(gw, g4, hidden).noalias() += dP.transpose() * cmap(hn->value.data(), batch, hidden);
                       }
                     };
                   });
}

#define SAMPLERNN_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                \
  template Tensor<T> scale(const Tensor<T>&, T);                                                             \
  template Tensor<T> tanh(const Tensor<T>&);                                                                 \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                              \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> exp(const Tensor<T>&);                                                                  \
  template Tensor<T> sum(const Tensor<T>&);                                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                       \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                             \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                                    \
  template Tensor<T> interleave_rows(const std::vector<Tensor<T>>&);                                         \
  template Tensor<T> time_step(const Tensor<T>&, std::size_t, std::size_t);                                  \
  template Tensor<T> stack_time(const std::vector<Tensor<T>>&);                                              \
  template Tensor<T> blend_rows(const Tensor<T>&, std::span<const T>, const std::vector<bool>&);             \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>, std::span<const T>,       \
                                           std::vector<double>*);                                            \
  template Tensor<T> gmm_nll(const Tensor<T>&, std::span<const T>, std::span<const T>, std::vector<double>*); \
  template Tensor<T> weight_norm(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> gru_cell(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> lstm_cell(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

SAMPLERNN_INSTANTIATE_OPS(float)
SAMPLERNN_INSTANTIATE_OPS(double)

}  // namespace ops
}  // namespace samplernn
