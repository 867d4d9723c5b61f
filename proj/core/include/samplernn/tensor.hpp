#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace samplernn {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1 };

template <typename T>
inline constexpr DType kDTypeOf = sizeof(T) == 4 ? DType::kFloat32 : DType::kFloat64;

/// Cache-line aligned allocator. Vectorized kernels split loops at alignment
/// boundaries, so a fixed base alignment keeps results independent of where
/// the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlignment}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  bool leaf = true;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T{0});
    return grad.data();
  }
};

}  // namespace detail

/// Dense row-major array. Copies share storage; use clone() or detach() for a
/// fresh buffer. Results of taped operations are never mutated afterwards.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0});
  Tensor(Shape shape, Buffer<T> values);
  Tensor(Shape shape, const std::vector<T>& values) : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end())) {}
  Tensor(Shape shape, std::initializer_list<T> values) : Tensor(std::move(shape), Buffer<T>(values)) {}

  static Tensor scalar(T value) { return Tensor(Shape{1}, Buffer<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T item() const;
  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->leaf; }

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Accumulated gradient; allocates a zero buffer on first access.
  std::span<T> grad();
  void zero_grad();

  /// Same values in a new buffer, cut off from any tape.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::Node<T>>& shared_node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node<T>> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

/// Ordered record of the differentiable operations executed while the tape is
/// active on the current thread. Operations whose inputs all lack
/// requires_grad are not recorded.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(detail::Node<T>& output)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() = default;

  void record(std::shared_ptr<detail::Node<T>> output, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Propagates d(loss)/d(x) into every requires_grad tensor reachable from
  /// `loss`, then clears the tape.
  void backward(const Tensor<T>& loss);

  static Tape* current() { return current_; }

  /// Activates a tape for the enclosing scope on this thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : Scope(&tape) {}
    explicit Scope(Tape* tape) : previous_(current_) { current_ = tape; }
    ~Scope() { current_ = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

 private:
  struct Entry {
    std::shared_ptr<detail::Node<T>> output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  static inline thread_local Tape* current_ = nullptr;
};

template <typename T>
void backward(const Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

/// Temporarily disables recording on this thread (inference paths).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : scope_(nullptr) {}

 private:
  typename Tape<T>::Scope scope_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedTensor<T>>;

/// Total number of trainable scalars.
template <typename T>
std::size_t count_params(const ParameterList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

}  // namespace samplernn
