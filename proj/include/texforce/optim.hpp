// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "texforce/lora.hpp"
#include "texforce/tensor.hpp"

namespace texforce {

template <typename Scalar>
double global_norm(const ParameterMap<Scalar>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) s += g.template cast<double>().squaredNorm();
  return std::sqrt(s);
}

/// Rescales so the global norm is at most max_norm; returns the norm before clipping.
template <typename Scalar>
double clip_global_norm(ParameterMap<Scalar>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const Scalar scale = static_cast<Scalar>(max_norm / norm);
    for (auto& [name, g] : grads) g *= scale;
  }
  return norm;
}

/// Trainable view of an adapter set: "<layer>.A" / "<layer>.B" -> matrix.
template <typename Scalar>
std::map<std::string, Matrix<Scalar>*> adapter_parameters(AdapterSet<Scalar>& set,
                                                          const std::string& prefix = "") {
  std::map<std::string, Matrix<Scalar>*> out;
  for (auto& [layer, a] : set.layers) {
    if (layer.rfind(prefix, 0) != 0) continue;
    out[layer + ".A"] = &a.A;
    out[layer + ".B"] = &a.B;
  }
  return out;
}

template <typename Scalar>
std::map<std::string, Matrix<Scalar>*> parameter_pointers(ParameterMap<Scalar>& params) {
  std::map<std::string, Matrix<Scalar>*> out;
  for (auto& [name, m] : params) out[name] = &m;
  return out;
}

/// Adam with bias correction. Parameters without a gradient entry are left
/// untouched for that step.
template <typename Scalar>
class Adam {
 public:
  struct Options {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
  };

  explicit Adam(Options options) : options_(options) {}

  void step(const std::map<std::string, Matrix<Scalar>*>& params, const ParameterMap<Scalar>& grads) {
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const Scalar b1 = static_cast<Scalar>(options_.beta1), b2 = static_cast<Scalar>(options_.beta2);
    const Scalar lr = static_cast<Scalar>(options_.learning_rate / c1);
    const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
    const Scalar eps = static_cast<Scalar>(options_.epsilon);
    for (const auto& [name, g] : grads) {
      auto it = params.find(name);
      if (it == params.end()) continue;
      Matrix<Scalar>& p = *it->second;
      auto& m = first_[name];
      auto& v = second_[name];
      if (m.size() == 0) {
        m = Matrix<Scalar>::Zero(p.rows(), p.cols());
        v = Matrix<Scalar>::Zero(p.rows(), p.cols());
      }
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
      p.array() -= lr * m.array() / ((v.array() * inv_c2).sqrt() + eps);
    }
  }

  long long steps() const { return steps_; }
  const Options& options() const { return options_; }
  void set_learning_rate(double lr) { options_.learning_rate = lr; }

  /// Moments and step counter as tensors ("adam.m.<name>", "adam.v.<name>", "adam.steps").
  ParameterMap<float> state() const {
    ParameterMap<float> out;
    for (const auto& [k, m] : first_) out["adam.m." + k] = m.template cast<float>();
    for (const auto& [k, v] : second_) out["adam.v." + k] = v.template cast<float>();
    Matrix<float> s(1, 1);
    s(0, 0) = static_cast<float>(steps_);
    out["adam.steps"] = s;
    return out;
  }

  void load_state(const ParameterMap<float>& tensors) {
    first_.clear();
    second_.clear();
    for (const auto& [k, m] : tensors) {
      if (k.rfind("adam.m.", 0) == 0) first_[k.substr(7)] = m.template cast<Scalar>();
      else if (k.rfind("adam.v.", 0) == 0) second_[k.substr(7)] = m.template cast<Scalar>();
    }
    auto s = tensors.find("adam.steps");
    steps_ = s == tensors.end() ? 0 : static_cast<long long>(s->second(0, 0));
  }

 private:
  Options options_;
  long long steps_ = 0;
  ParameterMap<Scalar> first_;
  ParameterMap<Scalar> second_;
};

}  // namespace texforce
