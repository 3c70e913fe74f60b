// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <string>

namespace texforce {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Named dense tensors. Ordered so that iteration (checkpoints, optimizers,
/// checksums) is stable across runs.
template <typename Scalar>
using ParameterMap = std::map<std::string, Matrix<Scalar>>;

using Rng = std::mt19937_64;

/// Matrix product whose per-column result does not depend on how many other
/// columns are in the batch. Eigen routes trailing columns (n mod 4) through a
/// different kernel, so the right-hand side is padded to whole 4-column panels.
template <typename Lhs, typename Rhs>
Matrix<typename Lhs::Scalar> stable_product(const Eigen::MatrixBase<Lhs>& lhs,
                                            const Eigen::MatrixBase<Rhs>& rhs) {
  using Scalar = typename Lhs::Scalar;
  const Eigen::Index cols = rhs.cols();
  const Eigen::Index padded = (cols + 3) / 4 * 4;
  if (padded == cols) {
    Matrix<Scalar> out(lhs.rows(), cols);
    out.noalias() = lhs * rhs;
    return out;
  }
  Matrix<Scalar> wide = Matrix<Scalar>::Zero(rhs.rows(), padded);
  wide.leftCols(cols) = rhs;
  Matrix<Scalar> out(lhs.rows(), padded);
  out.noalias() = lhs * wide;
  return out.leftCols(cols);
}

template <typename To, typename From>
ParameterMap<To> cast_parameters(const ParameterMap<From>& in) {
  ParameterMap<To> out;
  for (const auto& [name, value] : in) out.emplace(name, value.template cast<To>());
  return out;
}

template <typename Scalar>
Matrix<Scalar> gaussian_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(normal(rng));
  return m;
}

/// FNV-1a over raw bytes; used for manifests and parameter checksums.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t hash = 1469598103934665603ull) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    hash ^= bytes[i];
    hash *= 1099511628211ull;
  }
  return hash;
}

template <typename Scalar>
std::uint64_t checksum(const ParameterMap<Scalar>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, value] : params) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(value.data(), sizeof(Scalar) * static_cast<std::size_t>(value.size()), h);
  }
  return h;
}

/// Seed derivation so that every stochastic sub-stream is addressable by
/// (run seed, stream tag, index) independent of execution order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1) + 0xBF58476D1CE4E5B9ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace texforce
