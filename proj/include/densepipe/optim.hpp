#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>

#include "densepipe/error.hpp"
#include "densepipe/tensor.hpp"

namespace densepipe {

enum class OptimizerKind { sgd, rmsprop, adam };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::rmsprop: return "rmsprop";
    case OptimizerKind::adam: return "adam";
  }
  return "adam";
}

inline OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "rmsprop") return OptimizerKind::rmsprop;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + std::string(s) + "' (expected adam, sgd or rmsprop)");
}

/// Per-parameter auxiliary buffers. Adam keeps first/second moments
/// (beta1 0.9, beta2 0.999, eps 1e-8); RMSProp keeps the squared average
/// (rho 0.9, eps 1e-8); SGD keeps nothing.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  std::uint64_t step = 0;
  std::map<std::string, Tensor> first_moment;
  std::map<std::string, Tensor> second_moment;

  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.999;
  static constexpr double rho = 0.9;
  static constexpr double epsilon = 1e-8;
};

/// One update over every parameter that has a gradient and is not frozen.
/// Parameters missing from `grads` are left alone; the step counter advances
/// by exactly one per call.
inline void optimizer_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
                           OptimizerState& state, double lr, const std::set<std::string>& frozen = {}) {
  if (!(lr > 0.0)) throw ParameterError("learning rate must be positive");
  for (const auto& [name, g] : grads) {
    const auto it = params.find(name);
    if (it == params.end()) throw ConfigError("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError(name, "gradient " + shape_string(g.shape()) + " does not match parameter " +
                                 shape_string(it->second.shape()));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(OptimizerState::beta1, t);
  const double c2 = 1.0 - std::pow(OptimizerState::beta2, t);
  for (const auto& [name, g] : grads) {
    if (frozen.contains(name)) continue;
    Tensor& p = params.at(name);
    switch (state.kind) {
      case OptimizerKind::sgd:
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
        break;
      case OptimizerKind::rmsprop: {
        auto [vit, fresh] = state.second_moment.try_emplace(name, p.shape());
        Tensor& v = vit->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = OptimizerState::rho * v[i] + (1.0 - OptimizerState::rho) * g[i] * g[i];
          p[i] -= lr * g[i] / std::sqrt(v[i] + OptimizerState::epsilon);
        }
        break;
      }
      case OptimizerKind::adam: {
        Tensor& m = state.first_moment.try_emplace(name, p.shape()).first->second;
        Tensor& v = state.second_moment.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = OptimizerState::beta1 * m[i] + (1.0 - OptimizerState::beta1) * g[i];
          v[i] = OptimizerState::beta2 * v[i] + (1.0 - OptimizerState::beta2) * g[i] * g[i];
          const double m_hat = m[i] / c1;
          const double v_hat = v[i] / c2;
          p[i] -= lr * m_hat / (std::sqrt(v_hat) + OptimizerState::epsilon);
        }
        break;
      }
    }
  }
}

}  // namespace densepipe
