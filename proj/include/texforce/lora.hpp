// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "texforce/tensor.hpp"

namespace texforce {

/// Low-rank delta for one linear layer: W' = W + alpha * B * A.
template <typename Scalar>
struct LoraAdapter {
  Matrix<Scalar> A;  // rank x in
  Matrix<Scalar> B;  // out x rank
  Scalar alpha = Scalar(1);

  int rank() const { return static_cast<int>(A.rows()); }
  Eigen::Index in_dim() const { return A.cols(); }
  Eigen::Index out_dim() const { return B.rows(); }
  Matrix<Scalar> delta() const { return alpha * (B * A); }

  template <typename To>
  LoraAdapter<To> cast() const {
    return {A.template cast<To>(), B.template cast<To>(), static_cast<To>(alpha)};
  }
};

/// Adapters keyed by the full layer name they target ("encoder.block0.attn.q",
/// "denoiser.cond.proj", ...). One set may span both networks.
template <typename Scalar>
struct AdapterSet {
  std::map<std::string, LoraAdapter<Scalar>> layers;
  std::map<std::string, std::string> metadata;

  const LoraAdapter<Scalar>* find(const std::string& layer) const {
    auto it = layers.find(layer);
    return it == layers.end() ? nullptr : &it->second;
  }
  bool empty() const { return layers.empty(); }

  template <typename To>
  AdapterSet<To> cast() const {
    AdapterSet<To> out;
    out.metadata = metadata;
    for (const auto& [name, a] : layers) out.layers.emplace(name, a.template cast<To>());
    return out;
  }

  /// Flat parameter view: "<layer>.A" / "<layer>.B".
  ParameterMap<Scalar> parameters() const {
    ParameterMap<Scalar> out;
    for (const auto& [name, a] : layers) {
      out.emplace(name + ".A", a.A);
      out.emplace(name + ".B", a.B);
    }
    return out;
  }
};

/// Gradient sink shared by every backward pass. Base-weight and adapter
/// gradients are collected independently so frozen parts cost nothing.
template <typename Scalar>
struct Gradients {
  bool want_base = true;
  bool want_adapters = true;
  ParameterMap<Scalar> base;
  ParameterMap<Scalar> adapters;

  template <typename Derived>
  void add_base(const std::string& name, const Eigen::MatrixBase<Derived>& g) {
    accumulate(base, name, g);
  }
  template <typename Derived>
  void add_adapter(const std::string& name, const Eigen::MatrixBase<Derived>& g) {
    accumulate(adapters, name, g);
  }

 private:
  template <typename Derived>
  static void accumulate(ParameterMap<Scalar>& into, const std::string& name,
                         const Eigen::MatrixBase<Derived>& g) {
    auto it = into.find(name);
    if (it == into.end())
      into.emplace(name, g);
    else
      it->second += g;
  }
};

/// Fresh adapter with B = 0 so the adapted layer starts identical to the base.
template <typename Scalar>
LoraAdapter<Scalar> make_adapter(Eigen::Index in_dim, Eigen::Index out_dim, int rank, double alpha,
                                 Rng& rng, double init_std = 0.0) {
  if (rank < 1) throw Error("lora rank must be >= 1");
  if (init_std <= 0.0) init_std = 1.0 / static_cast<double>(in_dim);
  LoraAdapter<Scalar> a;
  a.A = gaussian_matrix<Scalar>(rank, in_dim, init_std, rng);
  a.B = Matrix<Scalar>::Zero(out_dim, rank);
  a.alpha = static_cast<Scalar>(alpha);
  return a;
}

/// Creates one adapter per listed layer. Layer dims are read from
/// "<layer>.weight" in `params`.
template <typename Scalar>
AdapterSet<Scalar> make_adapter_set(const ParameterMap<Scalar>& params,
                                    const std::vector<std::string>& layers, int rank, double alpha,
                                    Rng& rng) {
  AdapterSet<Scalar> set;
  for (const auto& layer : layers) {
    auto it = params.find(layer + ".weight");
    if (it == params.end()) throw Error("unknown layer for lora: " + layer);
    set.layers.emplace(layer,
                       make_adapter<Scalar>(it->second.cols(), it->second.rows(), rank, alpha, rng));
  }
  return set;
}

/// Validates that every adapter targets an existing linear layer of matching
/// shape. This is the "inject" contract; forward passes then take the set by
/// pointer and apply it on the fly.
template <typename Scalar>
void check_compatible(const ParameterMap<Scalar>& params, const AdapterSet<Scalar>& set) {
  for (const auto& [layer, a] : set.layers) {
    auto it = params.find(layer + ".weight");
    if (it == params.end()) throw Error("adapter targets unknown layer: " + layer);
    if (a.A.rows() != a.B.cols())
      throw Error("adapter " + layer + ": A rows and B cols disagree on rank");
    if (a.in_dim() != it->second.cols() || a.out_dim() != it->second.rows())
      throw Error("adapter " + layer + ": shape does not match layer weight");
  }
}

/// Non-owning pairing of a model's parameters with an adapter set.
template <typename Scalar>
struct AdaptedView {
  const ParameterMap<Scalar>* params;
  const AdapterSet<Scalar>* adapters;
};

/// Only the adapters whose layer name matches `params` are validated; the
/// rest of a mixed encoder+denoiser set belongs to the other network.
template <typename Scalar>
AdaptedView<Scalar> inject(const ParameterMap<Scalar>& params, const AdapterSet<Scalar>& set) {
  AdapterSet<Scalar> own;
  for (const auto& [layer, a] : set.layers)
    if (params.count(layer + ".weight")) own.layers.emplace(layer, a);
  if (own.layers.size() != set.layers.size()) {
    for (const auto& [layer, a] : set.layers)
      if (!params.count(layer + ".weight")) throw Error("adapter targets unknown layer: " + layer);
  }
  check_compatible(params, own);
  return {&params, &set};
}

/// Returns a copy of `params` with every targeted weight replaced by W + alpha*B*A.
template <typename Scalar>
ParameterMap<Scalar> merge(const ParameterMap<Scalar>& params, const AdapterSet<Scalar>& set) {
  check_compatible(params, set);
  ParameterMap<Scalar> out = params;
  for (const auto& [layer, a] : set.layers) out.at(layer + ".weight") += a.delta();
  return out;
}

/// Weighted fusion by stacking: the fused adapter for a layer has
/// rank = sum of ranks, A rows concatenated, B columns concatenated with each
/// w_i * alpha_i folded in, and alpha = 1. Layers present in only some sets
/// are carried with their own weight.
template <typename Scalar>
AdapterSet<Scalar> fuse(const std::vector<AdapterSet<Scalar>>& sets,
                        const std::vector<double>& weights) {
  if (sets.size() != weights.size())
    throw Error("fuse: " + std::to_string(sets.size()) + " adapter sets but " +
                std::to_string(weights.size()) + " weights");
  if (sets.empty()) throw Error("fuse: no adapter sets");

  std::map<std::string, std::vector<std::pair<const LoraAdapter<Scalar>*, double>>> by_layer;
  for (std::size_t i = 0; i < sets.size(); ++i)
    for (const auto& [layer, a] : sets[i].layers) by_layer[layer].emplace_back(&a, weights[i]);

  AdapterSet<Scalar> fused;
  for (const auto& [layer, parts] : by_layer) {
    const Eigen::Index in = parts.front().first->in_dim();
    const Eigen::Index out = parts.front().first->out_dim();
    Eigen::Index rank = 0;
    for (const auto& [a, w] : parts) {
      if (a->in_dim() != in || a->out_dim() != out)
        throw Error("fuse: incompatible shapes on shared layer " + layer);
      rank += a->rank();
    }
    LoraAdapter<Scalar> f;
    f.A.resize(rank, in);
    f.B.resize(out, rank);
    f.alpha = Scalar(1);
    Eigen::Index row = 0;
    for (const auto& [a, w] : parts) {
      f.A.middleRows(row, a->rank()) = a->A;
      f.B.middleCols(row, a->rank()) = static_cast<Scalar>(w) * a->alpha * a->B;
      row += a->rank();
    }
    fused.layers.emplace(layer, std::move(f));
  }

  std::string sources;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    auto task = sets[i].metadata.find("task");
    if (!sources.empty()) sources += ",";
    sources += (task == sets[i].metadata.end() ? std::string("?") : task->second) + "*" +
               std::to_string(weights[i]);
  }
  fused.metadata["fused_from"] = sources;
  auto target = sets.front().metadata.find("target");
  if (target != sets.front().metadata.end()) fused.metadata["target"] = target->second;
  return fused;
}

/// Union of adapter sets targeting disjoint layers (e.g. an encoder set and a
/// denoiser set attached together).
template <typename Scalar>
AdapterSet<Scalar> combine(const std::vector<AdapterSet<Scalar>>& sets) {
  AdapterSet<Scalar> out;
  for (const auto& s : sets)
    for (const auto& [layer, a] : s.layers)
      if (!out.layers.emplace(layer, a).second)
        throw Error("combine: layer " + layer + " is targeted by more than one adapter set");
  return out;
}

/// "TFLORA01" container, float32 little-endian.
void save_adapters(const AdapterSet<float>& set, const std::filesystem::path& path);
AdapterSet<float> load_adapters(const std::filesystem::path& path);

}  // namespace texforce
