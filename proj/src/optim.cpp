#include "mcrm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mcrm {

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "rmsprop") return OptimizerKind::Rmsprop;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd|rmsprop|adam)");
}

std::string optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Rmsprop: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
  }
  throw std::invalid_argument("unknown optimizer id");
}

OptState init_opt_state(OptimizerKind kind, const Model& model) {
  OptState state;
  state.kind = kind;
  if (kind == OptimizerKind::Rmsprop || kind == OptimizerKind::Adam) {
    state.v = TensorSet(model);
  }
  if (kind == OptimizerKind::Adam) {
    state.m = TensorSet(model);
  }
  return state;
}

Real clip_global_norm(TensorSet& grads, Real max_norm) {
  if (!(max_norm > 0.0)) {
    throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  }
  const Real pre_norm = std::sqrt(grads.squared_norm());
  if (pre_norm > max_norm) {
    grads.scale(max_norm / pre_norm);
  }
  return pre_norm;
}

namespace {

void check_aligned(const Model& params, const TensorSet& grads) {
  const auto views = tensor_views(params);
  if (static_cast<Index>(views.size()) != grads.count()) {
    throw std::invalid_argument("optimizer: gradient set does not match parameter walk");
  }
}

}  // namespace

void sgd_step(Model& params, const TensorSet& grads, Real lr) {
  check_aligned(params, grads);
  auto refs = tensor_refs(params);
  for (Index i = 0; i < grads.count(); ++i) {
    refs[static_cast<std::size_t>(i)].map() -= lr * grads[i];
  }
}

void rmsprop_step(Model& params, const TensorSet& grads, OptState& state, Real lr, Real decay,
                  Real eps) {
  check_aligned(params, grads);
  ++state.step;
  auto refs = tensor_refs(params);
  for (Index i = 0; i < grads.count(); ++i) {
    Matrix& v = state.v[i];
    v = decay * v + (1.0 - decay) * grads[i].cwiseProduct(grads[i]);
    refs[static_cast<std::size_t>(i)].map() -=
        lr * (grads[i].array() / (v.array().sqrt() + eps)).matrix();
  }
}

void adam_step(Model& params, const TensorSet& grads, OptState& state, Real lr, Real beta1,
               Real beta2, Real eps) {
  check_aligned(params, grads);
  ++state.step;
  const Real t = static_cast<Real>(state.step);
  const Real m_correction = 1.0 - std::pow(beta1, t);
  const Real v_correction = 1.0 - std::pow(beta2, t);
  auto refs = tensor_refs(params);
  for (Index i = 0; i < grads.count(); ++i) {
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    m = beta1 * m + (1.0 - beta1) * grads[i];
    v = beta2 * v + (1.0 - beta2) * grads[i].cwiseProduct(grads[i]);
    refs[static_cast<std::size_t>(i)].map() -=
        lr * ((m.array() / m_correction) / ((v.array() / v_correction).sqrt() + eps)).matrix();
  }
}

void apply_update(Model& params, const TensorSet& grads, OptState& state, Real lr) {
  switch (state.kind) {
    case OptimizerKind::Sgd:
      ++state.step;
      sgd_step(params, grads, lr);
      break;
    case OptimizerKind::Rmsprop:
      rmsprop_step(params, grads, state, lr);
      break;
    case OptimizerKind::Adam:
      adam_step(params, grads, state, lr);
      break;
  }
}

}  // namespace mcrm
