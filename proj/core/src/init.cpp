#include "samplernn/init.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "samplernn/errors.hpp"

namespace samplernn {

template <typename T>
Tensor<T> init_tensor(const InitSpec& spec, const Shape& shape, Rng& rng) {
  Tensor<T> out(shape);
  auto values = out.mutable_values();
  switch (spec.kind) {
    case InitKind::kConstant:
      std::fill(values.begin(), values.end(), static_cast<T>(spec.value));
      break;
    case InitKind::kStandardNormal:
      for (auto& v : values) v = static_cast<T>(rng.normal());
      break;
    case InitKind::kHeFanIn: {
      if (shape.empty()) throw ContractError("init: he_fan_in needs at least one dimension");
      const double stddev = std::sqrt(2.0 / static_cast<double>(shape.back()));
      for (auto& v : values) v = static_cast<T>(stddev * rng.normal());
      break;
    }
    case InitKind::kOrthogonal: {
      if (shape.size() != 2) throw ContractError("init: orthogonal needs a 2-D shape, got " + shape_string(shape));
      const auto rows = static_cast<Eigen::Index>(shape[0]);
      const auto cols = static_cast<Eigen::Index>(shape[1]);
      const bool tall = rows >= cols;
      const Eigen::Index m = tall ? rows : cols;
      const Eigen::Index n = tall ? cols : rows;
      Eigen::MatrixXd a(m, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < m; ++i) a(i, j) = rng.normal();
      }
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
      Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(m, n);
      const Eigen::MatrixXd& r = qr.matrixQR();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (r(j, j) < 0) q.col(j) *= -1.0;
      }
      for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index j = 0; j < cols; ++j) {
          values[static_cast<std::size_t>(i * cols + j)] = static_cast<T>(tall ? q(i, j) : q(j, i));
        }
      }
      break;
    }
  }
  return out;
}

template <typename T>
void clip_gradients(ParameterList<T>& params, T lo, T hi) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    for (auto& g : p.tensor.grad()) g = std::clamp(g, lo, hi);
  }
}

template Tensor<float> init_tensor<float>(const InitSpec&, const Shape&, Rng&);
template Tensor<double> init_tensor<double>(const InitSpec&, const Shape&, Rng&);
template void clip_gradients<float>(ParameterList<float>&, float, float);
template void clip_gradients<double>(ParameterList<double>&, double, double);

}  // namespace samplernn
