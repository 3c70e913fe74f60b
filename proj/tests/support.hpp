// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>

#include "texforce/checkpoint.hpp"
#include "texforce/rl.hpp"

namespace texforce::testing {

/// Tiny model for gradient checks: 4x4 images, narrow layers.
template <typename S>
DiffusionModel<S> tiny_model(Rng& rng, int steps = 2, int image_size = 4) {
  DiffusionModel<S> m;
  EncoderConfig ec;
  ec.vocab_size = m.vocab.size();
  ec.max_tokens = 8;
  ec.embed_dim = 8;
  ec.heads = 2;
  ec.blocks = 1;
  ec.ff_dim = 12;
  m.encoder = init_encoder<S>(ec, rng);
  DenoiserConfig dc;
  dc.image_size = image_size;
  dc.width1 = 4;
  dc.width2 = 4;
  dc.width3 = 6;
  dc.cond_dim = 8;
  dc.time_dim = 4;
  dc.hidden_dim = 6;
  m.denoiser = init_denoiser<S>(dc, rng);
  // Non-trivial output layer so gradients are not dominated by the small init.
  m.denoiser.params["denoiser.out.conv.weight"] *= S(10);
  m.schedule = build_schedule(steps, 0.1, 0.3);
  return m;
}

/// Adapters on every supported layer with random (non-zero) B.
template <typename S>
AdapterSet<S> random_adapters(const DiffusionModel<S>& model, PolicyTarget target, int rank, Rng& rng) {
  ParameterMap<S> all = model.encoder.params;
  for (const auto& [k, v] : model.denoiser.params) all.emplace(k, v);
  std::vector<std::string> layers;
  if (targets_encoder(target)) layers = encoder_linear_layers(model.encoder.config);
  if (targets_denoiser(target))
    for (const auto& l : denoiser_lora_layers()) layers.push_back(l);
  auto set = make_adapter_set(all, layers, rank, 1.0, rng);
  for (auto& [name, a] : set.layers) a.B = gaussian_matrix<S>(a.B.rows(), a.B.cols(), 0.3, rng);
  return set;
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

/// (name, row, col) picks spread over a parameter map.
template <typename S>
std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> pick_entries(const ParameterMap<S>& params, int n,
                                                                              Rng& rng) {
  std::vector<std::string> names;
  for (const auto& [k, v] : params) names.push_back(k);
  std::vector<std::tuple<std::string, Eigen::Index, Eigen::Index>> out;
  for (int i = 0; i < n; ++i) {
    const auto& name = names[std::uniform_int_distribution<std::size_t>(0, names.size() - 1)(rng)];
    const auto& m = params.at(name);
    out.emplace_back(name, std::uniform_int_distribution<Eigen::Index>(0, m.rows() - 1)(rng),
                     std::uniform_int_distribution<Eigen::Index>(0, m.cols() - 1)(rng));
  }
  return out;
}

}  // namespace texforce::testing
