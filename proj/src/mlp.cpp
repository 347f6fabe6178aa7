// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#include "triedit/mlp.hpp"

#include <cmath>

namespace triedit {

std::string_view activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kLeakyRelu: return "leaky_relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

namespace kernels {

template <typename T>
void rows_times(const T* __restrict x, int n, int k, const T* __restrict b, int m, T* __restrict y) {
  for (int i = 0; i < n; ++i) {
    T* __restrict out = y + static_cast<size_t>(i) * m;
    const T* xi = x + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const T xv = xi[kk];
      if (xv == T(0)) continue;
      const T* __restrict brow = b + static_cast<size_t>(kk) * m;
      for (int j = 0; j < m; ++j) out[j] += xv * brow[j];
    }
  }
}

template <typename T>
void accumulate_outer(const T* __restrict d, const T* __restrict x, int n, int m, int k, T* __restrict g) {
  for (int i = 0; i < n; ++i) {
    const T* di = d + static_cast<size_t>(i) * m;
    const T* __restrict xi = x + static_cast<size_t>(i) * k;
    for (int o = 0; o < m; ++o) {
      const T dv = di[o];
      if (dv == T(0)) continue;
      T* __restrict grow = g + static_cast<size_t>(o) * k;
      for (int j = 0; j < k; ++j) grow[j] += dv * xi[j];
    }
  }
}

template void rows_times<float>(const float*, int, int, const float*, int, float*);
template void rows_times<double>(const double*, int, int, const double*, int, double*);
template void accumulate_outer<float>(const float*, const float*, int, int, int, float*);
template void accumulate_outer<double>(const double*, const double*, int, int, int, double*);

}  // namespace kernels

namespace {

template <typename T>
inline T activate(Activation a, T z) {
  switch (a) {
    case Activation::kRelu: return z > T(0) ? z : T(0);
    case Activation::kLeakyRelu: return z > T(0) ? z : T(kLeakySlope) * z;
    case Activation::kSigmoid: return T(1) / (T(1) + std::exp(-z));
    case Activation::kIdentity: return z;
  }
  return z;
}

template <typename T>
inline T activate_grad(Activation a, T z) {
  switch (a) {
    case Activation::kRelu: return z > T(0) ? T(1) : T(0);
    case Activation::kLeakyRelu: return z > T(0) ? T(1) : T(kLeakySlope);
    case Activation::kSigmoid: {
      T s = T(1) / (T(1) + std::exp(-z));
      return s * (T(1) - s);
    }
    case Activation::kIdentity: return T(1);
  }
  return T(1);
}

template <typename T>
void dense_forward(const DenseLayer<T>& layer, const RowMatrix<T>& x, RowMatrix<T>* z) {
  const int n = static_cast<int>(x.rows());
  const int in = layer.in_dim();
  const int out = layer.out_dim();
  z->resize(n, out);
  for (int i = 0; i < n; ++i) z->row(i) = layer.bias.transpose();
  RowMatrix<T> wt = layer.weight.transpose();
  kernels::rows_times(x.data(), n, in, wt.data(), out, z->data());
}

}  // namespace

template <typename T>
Mlp<T> Mlp<T>::zeros(const std::vector<int>& dims, const std::vector<Activation>& activations) {
  if (dims.size() != activations.size() + 1) fail(ErrorCode::kUsage, "mlp: dims/activations mismatch");
  Mlp<T> mlp;
  for (size_t l = 0; l < activations.size(); ++l) {
    mlp.layers.push_back({RowMatrix<T>::Zero(dims[l + 1], dims[l]), Vector<T>::Zero(dims[l + 1]), activations[l]});
  }
  return mlp;
}

template <typename T>
void Mlp<T>::init_kaiming(Rng& rng) {
  for (auto& layer : layers) {
    const double bound = std::sqrt(6.0 / std::max(1, layer.in_dim()));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) {
      layer.weight.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
    layer.bias.setZero();
  }
}

template <typename T>
size_t Mlp<T>::parameter_count() const {
  size_t n = 0;
  for (const auto& layer : layers) n += layer.weight.size() + layer.bias.size();
  return n;
}

template <typename T>
bool Mlp<T>::same_shape(const Mlp& other) const {
  if (layers.size() != other.layers.size()) return false;
  for (size_t l = 0; l < layers.size(); ++l) {
    if (layers[l].in_dim() != other.layers[l].in_dim() || layers[l].out_dim() != other.layers[l].out_dim()) {
      return false;
    }
  }
  return true;
}

template <typename T>
bool Mlp<T>::all_finite() const {
  for (const auto& layer : layers) {
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
  }
  return true;
}

template <typename T>
void Mlp<T>::set_zero() {
  for (auto& layer : layers) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
}

template <typename T>
void Mlp<T>::add(const Mlp& other) {
  for (size_t l = 0; l < layers.size(); ++l) {
    layers[l].weight += other.layers[l].weight;
    layers[l].bias += other.layers[l].bias;
  }
}

template <typename T>
void Mlp<T>::forward(std::span<const T> input, std::span<T> output) const {
  RowMatrix<T> x(1, static_cast<Eigen::Index>(input.size()));
  for (size_t i = 0; i < input.size(); ++i) x(0, i) = input[i];
  RowMatrix<T> y;
  mlp_forward(*this, x, &y, static_cast<MlpTape<T>*>(nullptr));
  for (size_t i = 0; i < output.size(); ++i) output[i] = y(0, i);
}

template <typename T>
void mlp_forward(const Mlp<T>& mlp, const RowMatrix<T>& x, RowMatrix<T>* y, MlpTape<T>* tape) {
  if (x.cols() != mlp.in_dim()) fail(ErrorCode::kUsage, "mlp_forward: input width mismatch");
  if (tape) {
    tape->inputs.resize(mlp.layers.size());
    tape->preacts.resize(mlp.layers.size());
  }
  RowMatrix<T> current = x;
  for (size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    RowMatrix<T> z;
    dense_forward(layer, current, &z);
    if (tape) {
      tape->inputs[l] = std::move(current);
      tape->preacts[l] = z;
    }
    T* p = z.data();
    for (Eigen::Index i = 0; i < z.size(); ++i) p[i] = activate(layer.activation, p[i]);
    current = std::move(z);
  }
  *y = std::move(current);
}

template <typename T>
void mlp_backward(const Mlp<T>& mlp, const MlpTape<T>& tape, RowMatrix<T> dy, Mlp<T>* grad, RowMatrix<T>* dx) {
  for (size_t li = mlp.layers.size(); li-- > 0;) {
    const auto& layer = mlp.layers[li];
    const RowMatrix<T>& z = tape.preacts[li];
    const RowMatrix<T>& input = tape.inputs[li];
    const int n = static_cast<int>(z.rows());
    const int out = layer.out_dim();
    const int in = layer.in_dim();
    T* d = dy.data();
    const T* zp = z.data();
    for (Eigen::Index i = 0; i < dy.size(); ++i) d[i] *= activate_grad(layer.activation, zp[i]);
    if (grad) {
      auto& g = grad->layers[li];
      kernels::accumulate_outer(dy.data(), input.data(), n, out, in, g.weight.data());
      for (int i = 0; i < n; ++i) g.bias += dy.row(i).transpose();
    }
    if (li == 0 && !dx) break;
    RowMatrix<T> din = RowMatrix<T>::Zero(n, in);
    kernels::rows_times(dy.data(), n, out, layer.weight.data(), in, din.data());
    dy = std::move(din);
  }
  if (dx) *dx = std::move(dy);
}

template struct Mlp<float>;
template struct Mlp<double>;
template void mlp_forward<float>(const Mlp<float>&, const RowMatrix<float>&, RowMatrix<float>*, MlpTape<float>*);
template void mlp_forward<double>(const Mlp<double>&, const RowMatrix<double>&, RowMatrix<double>*, MlpTape<double>*);
template void mlp_backward<float>(const Mlp<float>&, const MlpTape<float>&, RowMatrix<float>, Mlp<float>*,
                                  RowMatrix<float>*);
template void mlp_backward<double>(const Mlp<double>&, const MlpTape<double>&, RowMatrix<double>, Mlp<double>*,
                                   RowMatrix<double>*);

}  // namespace triedit
