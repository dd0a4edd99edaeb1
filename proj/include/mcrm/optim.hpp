#pragma once

// SGD, RMSprop and Adam, each applied tensor-by-tensor over the model's
// fixed parameter walk, plus global-norm gradient clipping. Clipping is
// applied after batch-gradient aggregation and before the step.

#include "mcrm/model.hpp"

#include <cstdint>
#include <string>

namespace mcrm {

enum class OptimizerKind { Sgd, Rmsprop, Adam };

OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind kind);

struct OptState {
  OptimizerKind kind = OptimizerKind::Sgd;
  TensorSet m;  // first moments (Adam)
  TensorSet v;  // second moments (RMSprop, Adam)
  std::int64_t step = 0;
};

OptState init_opt_state(OptimizerKind kind, const Model& model);

// Scales every gradient by max_norm / pre_norm when the global L2 norm over
// all tensors exceeds max_norm. Returns the pre-clip norm.
Real clip_global_norm(TensorSet& grads, Real max_norm);

void sgd_step(Model& params, const TensorSet& grads, Real lr);
void rmsprop_step(Model& params, const TensorSet& grads, OptState& state, Real lr,
                  Real decay = 0.99, Real eps = 1e-8);
void adam_step(Model& params, const TensorSet& grads, OptState& state, Real lr,
               Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8);

// Dispatch on state.kind with the defaults above.
void apply_update(Model& params, const TensorSet& grads, OptState& state, Real lr);

}  // namespace mcrm
