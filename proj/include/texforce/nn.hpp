// SPDX-License-Identifier: Apache-2.0
#pragma once

// Layer primitives with hand-written backward passes. Activations are laid out
// as (features x columns); for images a column is one pixel of one sample,
// ordered sample-major then row-major: col = (b * H + y) * W + x.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "texforce/lora.hpp"
#include "texforce/tensor.hpp"

namespace texforce::nn {

struct GridShape {
  int batch = 1;
  int height = 1;
  int width = 1;
  int pixels() const { return height * width; }
  Eigen::Index columns() const { return static_cast<Eigen::Index>(batch) * pixels(); }
  GridShape half() const { return {batch, height / 2, width / 2}; }
  GridShape twice() const { return {batch, height * 2, width * 2}; }
};

template <typename Scalar>
Matrix<Scalar> silu(const Matrix<Scalar>& x) {
  return (x.array() / (Scalar(1) + (-x.array()).exp())).matrix();
}

template <typename Scalar>
Matrix<Scalar> silu_backward(const Matrix<Scalar>& x, const Matrix<Scalar>& dy) {
  const auto s = (Scalar(1) + (-x.array()).exp()).inverse();
  return (dy.array() * s * (Scalar(1) + x.array() * (Scalar(1) - s))).matrix();
}

// ---------------------------------------------------------------- linear

template <typename Scalar>
struct LinearCache {
  Matrix<Scalar> input;
  Matrix<Scalar> low_rank;  // A * input, empty when no adapter
};

/// y = W x + b (+ alpha * B * A x when the layer carries an adapter).
template <typename Scalar>
Matrix<Scalar> linear(const ParameterMap<Scalar>& params, const AdapterSet<Scalar>* adapters,
                      const std::string& name, const Matrix<Scalar>& x,
                      LinearCache<Scalar>* cache = nullptr) {
  const auto& w = params.at(name + ".weight");
  const auto& b = params.at(name + ".bias");
  Matrix<Scalar> y = stable_product(w, x);
  y.colwise() += b.col(0);
  const LoraAdapter<Scalar>* a = adapters ? adapters->find(name) : nullptr;
  Matrix<Scalar> u;
  if (a) {
    u = stable_product(a->A, x);
    y += a->alpha * stable_product(a->B, u);
  }
  if (cache) {
    cache->input = x;
    cache->low_rank = std::move(u);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> linear_backward(const ParameterMap<Scalar>& params,
                               const AdapterSet<Scalar>* adapters, const std::string& name,
                               const LinearCache<Scalar>& cache, const Matrix<Scalar>& dy,
                               Gradients<Scalar>* grads, bool need_input_grad = true) {
  const auto& w = params.at(name + ".weight");
  const LoraAdapter<Scalar>* a = adapters ? adapters->find(name) : nullptr;
  if (grads && grads->want_base) {
    grads->add_base(name + ".weight", dy * cache.input.transpose());
    grads->add_base(name + ".bias", dy.rowwise().sum());
  }
  Matrix<Scalar> bt_dy;
  if (a) bt_dy = a->B.transpose() * dy;
  if (a && grads && grads->want_adapters) {
    grads->add_adapter(name + ".B", a->alpha * dy * cache.low_rank.transpose());
    grads->add_adapter(name + ".A", a->alpha * bt_dy * cache.input.transpose());
  }
  if (!need_input_grad) return {};
  Matrix<Scalar> dx = w.transpose() * dy;
  if (a) dx += a->alpha * (a->A.transpose() * bt_dy);
  return dx;
}

template <typename Scalar>
void init_linear(ParameterMap<Scalar>& params, const std::string& name, int in, int out, Rng& rng,
                 double gain = 1.0) {
  params[name + ".weight"] = gaussian_matrix<Scalar>(out, in, gain / std::sqrt(double(in)), rng);
  params[name + ".bias"] = Matrix<Scalar>::Zero(out, 1);
}

// ---------------------------------------------------------------- 3x3 conv

/// Patch matrix for a 3x3, stride 1, zero-padded convolution. Row block k
/// (k = ky * 3 + kx) holds the input channels shifted by (ky - 1, kx - 1).
template <typename Scalar>
Matrix<Scalar> im2col(const Matrix<Scalar>& x, GridShape s) {
  const Eigen::Index c = x.rows();
  Matrix<Scalar> cols(9 * c, s.columns());
  const Scalar* src = x.data();
  Scalar* dst = cols.data();
  for (int b = 0; b < s.batch; ++b)
    for (int y = 0; y < s.height; ++y)
      for (int xx = 0; xx < s.width; ++xx) {
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx, dst += c) {
            const int sx = xx + kx - 1;
            if (sy < 0 || sy >= s.height || sx < 0 || sx >= s.width) {
              std::fill(dst, dst + c, Scalar(0));
              continue;
            }
            const Eigen::Index at = (static_cast<Eigen::Index>(b) * s.height + sy) * s.width + sx;
            std::memcpy(dst, src + at * c, sizeof(Scalar) * static_cast<std::size_t>(c));
          }
        }
      }
  return cols;
}

template <typename Scalar>
Matrix<Scalar> col2im(const Matrix<Scalar>& cols, Eigen::Index channels, GridShape s) {
  Matrix<Scalar> x = Matrix<Scalar>::Zero(channels, s.columns());
  const Eigen::Index c = channels;
  const Scalar* src = cols.data();
  Scalar* dst = x.data();
  for (int b = 0; b < s.batch; ++b)
    for (int y = 0; y < s.height; ++y)
      for (int xx = 0; xx < s.width; ++xx) {
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          for (int kx = 0; kx < 3; ++kx, src += c) {
            const int sx = xx + kx - 1;
            if (sy < 0 || sy >= s.height || sx < 0 || sx >= s.width) continue;
            Scalar* out = dst + ((static_cast<Eigen::Index>(b) * s.height + sy) * s.width + sx) * c;
            for (Eigen::Index i = 0; i < c; ++i) out[i] += src[i];
          }
        }
      }
  return x;
}

template <typename Scalar>
struct ConvCache {
  Matrix<Scalar> patches;
};

template <typename Scalar>
Matrix<Scalar> conv3x3(const ParameterMap<Scalar>& params, const std::string& name,
                       const Matrix<Scalar>& x, GridShape s, ConvCache<Scalar>* cache) {
  Matrix<Scalar> patches = im2col(x, s);
  Matrix<Scalar> y = stable_product(params.at(name + ".weight"), patches);
  y.colwise() += params.at(name + ".bias").col(0);
  if (cache) cache->patches = std::move(patches);
  return y;
}

template <typename Scalar>
Matrix<Scalar> conv3x3_backward(const ParameterMap<Scalar>& params, const std::string& name,
                                const ConvCache<Scalar>& cache, const Matrix<Scalar>& dy,
                                GridShape s, Gradients<Scalar>* grads,
                                bool need_input_grad = true) {
  const auto& w = params.at(name + ".weight");
  if (grads && grads->want_base) {
    grads->add_base(name + ".weight", dy * cache.patches.transpose());
    grads->add_base(name + ".bias", dy.rowwise().sum());
  }
  if (!need_input_grad) return {};
  Matrix<Scalar> dpatches = w.transpose() * dy;
  return col2im(dpatches, w.cols() / 9, s);
}

template <typename Scalar>
void init_conv3x3(ParameterMap<Scalar>& params, const std::string& name, int in, int out, Rng& rng,
                  double gain = 1.0) {
  params[name + ".weight"] =
      gaussian_matrix<Scalar>(out, 9 * in, gain * std::sqrt(2.0 / (9.0 * in)), rng);
  params[name + ".bias"] = Matrix<Scalar>::Zero(out, 1);
}

// ---------------------------------------------------------------- resampling

template <typename Scalar>
Matrix<Scalar> avg_pool2(const Matrix<Scalar>& x, GridShape s) {
  const GridShape h = s.half();
  Matrix<Scalar> y(x.rows(), h.columns());
  for (int b = 0; b < s.batch; ++b)
    for (int y0 = 0; y0 < h.height; ++y0)
      for (int x0 = 0; x0 < h.width; ++x0) {
        const Eigen::Index base = (static_cast<Eigen::Index>(b) * s.height + 2 * y0) * s.width + 2 * x0;
        y.col((static_cast<Eigen::Index>(b) * h.height + y0) * h.width + x0) =
            Scalar(0.25) * (x.col(base) + x.col(base + 1) + x.col(base + s.width) +
                            x.col(base + s.width + 1));
      }
  return y;
}

template <typename Scalar>
Matrix<Scalar> avg_pool2_backward(const Matrix<Scalar>& dy, GridShape s) {
  const GridShape h = s.half();
  Matrix<Scalar> dx(dy.rows(), s.columns());
  for (int b = 0; b < s.batch; ++b)
    for (int y0 = 0; y0 < h.height; ++y0)
      for (int x0 = 0; x0 < h.width; ++x0) {
        const Eigen::Index base = (static_cast<Eigen::Index>(b) * s.height + 2 * y0) * s.width + 2 * x0;
        const auto g = Scalar(0.25) * dy.col((static_cast<Eigen::Index>(b) * h.height + y0) * h.width + x0);
        dx.col(base) = g;
        dx.col(base + 1) = g;
        dx.col(base + s.width) = g;
        dx.col(base + s.width + 1) = g;
      }
  return dx;
}

/// Nearest-neighbour 2x upsampling of a grid of shape `s`.
template <typename Scalar>
Matrix<Scalar> upsample2(const Matrix<Scalar>& x, GridShape s) {
  const GridShape u = s.twice();
  Matrix<Scalar> y(x.rows(), u.columns());
  for (int b = 0; b < u.batch; ++b)
    for (int yy = 0; yy < u.height; ++yy)
      for (int xx = 0; xx < u.width; ++xx)
        y.col((static_cast<Eigen::Index>(b) * u.height + yy) * u.width + xx) =
            x.col((static_cast<Eigen::Index>(b) * s.height + yy / 2) * s.width + xx / 2);
  return y;
}

template <typename Scalar>
Matrix<Scalar> upsample2_backward(const Matrix<Scalar>& dy, GridShape s) {
  const GridShape u = s.twice();
  Matrix<Scalar> dx = Matrix<Scalar>::Zero(dy.rows(), s.columns());
  for (int b = 0; b < u.batch; ++b)
    for (int yy = 0; yy < u.height; ++yy)
      for (int xx = 0; xx < u.width; ++xx)
        dx.col((static_cast<Eigen::Index>(b) * s.height + yy / 2) * s.width + xx / 2) +=
            dy.col((static_cast<Eigen::Index>(b) * u.height + yy) * u.width + xx);
  return dx;
}

/// Adds per-sample channel offsets (channels x batch) to every pixel of that sample.
template <typename Scalar>
void add_per_sample(Matrix<Scalar>& x, const Matrix<Scalar>& offsets, GridShape s) {
  for (int b = 0; b < s.batch; ++b)
    x.middleCols(static_cast<Eigen::Index>(b) * s.pixels(), s.pixels()).colwise() += offsets.col(b);
}

template <typename Scalar>
Matrix<Scalar> sum_per_sample(const Matrix<Scalar>& dx, GridShape s) {
  Matrix<Scalar> out(dx.rows(), s.batch);
  for (int b = 0; b < s.batch; ++b)
    out.col(b) = dx.middleCols(static_cast<Eigen::Index>(b) * s.pixels(), s.pixels()).rowwise().sum();
  return out;
}

// ---------------------------------------------------------------- layer norm

template <typename Scalar>
struct LayerNormCache {
  Matrix<Scalar> normalized;
  Vector<Scalar> inv_std;
};

/// Normalizes each column over its rows, then applies per-row gain and bias.
template <typename Scalar>
Matrix<Scalar> layer_norm(const ParameterMap<Scalar>& params, const std::string& name,
                          const Matrix<Scalar>& x, LayerNormCache<Scalar>* cache) {
  constexpr double eps = 1e-5;
  const Eigen::Index d = x.rows();
  Matrix<Scalar> n(d, x.cols());
  Vector<Scalar> inv(x.cols());
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    const Scalar mean = x.col(j).mean();
    const Scalar var = (x.col(j).array() - mean).square().sum() / Scalar(d);
    inv(j) = Scalar(1) / std::sqrt(var + Scalar(eps));
    n.col(j) = (x.col(j).array() - mean) * inv(j);
  }
  Matrix<Scalar> y = (n.array().colwise() * params.at(name + ".gain").col(0).array()).matrix();
  y.colwise() += params.at(name + ".bias").col(0);
  if (cache) {
    cache->normalized = std::move(n);
    cache->inv_std = std::move(inv);
  }
  return y;
}

template <typename Scalar>
Matrix<Scalar> layer_norm_backward(const ParameterMap<Scalar>& params, const std::string& name,
                                   const LayerNormCache<Scalar>& cache, const Matrix<Scalar>& dy,
                                   Gradients<Scalar>* grads) {
  const auto& gain = params.at(name + ".gain");
  if (grads && grads->want_base) {
    grads->add_base(name + ".gain", (dy.array() * cache.normalized.array()).rowwise().sum().matrix());
    grads->add_base(name + ".bias", dy.rowwise().sum());
  }
  const Scalar d = static_cast<Scalar>(dy.rows());
  Matrix<Scalar> dn = (dy.array().colwise() * gain.col(0).array()).matrix();
  Matrix<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index j = 0; j < dy.cols(); ++j) {
    const auto n = cache.normalized.col(j).array();
    const auto g = dn.col(j).array();
    dx.col(j) = (cache.inv_std(j) / d) * (d * g - g.sum() - n * (g * n).sum());
  }
  return dx;
}

template <typename Scalar>
void init_layer_norm(ParameterMap<Scalar>& params, const std::string& name, int dim) {
  params[name + ".gain"] = Matrix<Scalar>::Ones(dim, 1);
  params[name + ".bias"] = Matrix<Scalar>::Zero(dim, 1);
}

// ---------------------------------------------------------------- embeddings

/// Sinusoidal timestep features, one column per entry of `steps`.
template <typename Scalar>
Matrix<Scalar> timestep_embedding(const std::vector<int>& steps, int dim) {
  Matrix<Scalar> e(dim, static_cast<Eigen::Index>(steps.size()));
  const int half = dim / 2;
  for (std::size_t j = 0; j < steps.size(); ++j)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / std::max(1, half));
      e(i, j) = static_cast<Scalar>(std::sin(steps[j] * freq));
      e(half + i, j) = static_cast<Scalar>(std::cos(steps[j] * freq));
    }
  return e;
}

}  // namespace texforce::nn
