#include "samplernn/layers.hpp"

#include <cmath>

#include "samplernn/errors.hpp"

namespace samplernn {

template <typename T>
WeightNormLinear<T>::WeightNormLinear(std::size_t in_dim, std::size_t out_dim, bool with_bias, const InitSpec& init,
                                      Rng& rng)
    : v_(init_tensor<T>(init, {out_dim, in_dim}, rng)), g_(Shape{out_dim}) {
  reset_scale();
  v_.set_requires_grad(true);
  g_.set_requires_grad(true);
  if (with_bias) {
    b_ = Tensor<T>(Shape{out_dim});
    b_.set_requires_grad(true);
  }
}

template <typename T>
WeightNormLinear<T>::WeightNormLinear(Tensor<T> direction, bool with_bias)
    : v_(std::move(direction)), g_(Shape{v_.dim(0)}) {
  if (v_.rank() != 2) throw DimensionError("WeightNormLinear: direction must be 2-D");
  reset_scale();
  v_.set_requires_grad(true);
  g_.set_requires_grad(true);
  if (with_bias) {
    b_ = Tensor<T>(Shape{v_.dim(0)});
    b_.set_requires_grad(true);
  }
}

template <typename T>
void WeightNormLinear<T>::reset_scale() {
  const std::size_t rows = v_.dim(0), cols = v_.dim(1);
  auto g = g_.mutable_values();
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double x = v_[r * cols + c];
      sq += x * x;
    }
    if (!(sq > 0.0)) throw NumericError("WeightNormLinear: row " + std::to_string(r) + " has zero norm");
    g[r] = static_cast<T>(std::sqrt(sq));
  }
}

template <typename T>
void WeightNormLinear<T>::collect(ParameterList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".v", v_});
  out.push_back({prefix + ".g", g_});
  if (b_.defined()) out.push_back({prefix + ".b", b_});
}

template class WeightNormLinear<float>;
template class WeightNormLinear<double>;

}  // namespace samplernn
