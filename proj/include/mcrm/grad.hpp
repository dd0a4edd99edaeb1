#pragma once

// Exact reverse-mode gradients through unrolled sequences for every
// architecture, with hand-derived per-cell backward passes, plus the
// independent central-difference oracle used to verify them.

#include "mcrm/model.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mcrm {

// Raised when a forward pass produces a non-finite loss or state.
struct NumericalDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class LossKind {
  MseLast,  // regression readout at the final step, mean over output dims
  CeLast,   // cross-entropy on the final-step logits
  CeAll     // cross-entropy at every step, mean over steps
};

// One unrolled batch. Exactly one of `dense` (T entries of m x B) or
// `tokens` (T entries of B vocabulary ids, fed through the embedding) is
// populated.
struct BatchInputs {
  std::vector<Matrix> dense;
  std::vector<std::vector<std::int32_t>> tokens;

  Index steps() const {
    return static_cast<Index>(dense.empty() ? tokens.size() : dense.size());
  }
  Index batch() const {
    if (!dense.empty()) return dense.front().cols();
    return static_cast<Index>(tokens.front().size());
  }
};

struct BatchTargets {
  Matrix regression;                                 // out x B   (MseLast)
  std::vector<std::int32_t> labels;                  // B         (CeLast)
  std::vector<std::vector<std::int32_t>> step_labels;  // T x B   (CeAll)
};

// Everything one backward pass needs: states[t] is the carry entering step
// t (states[0] is the initial state), traces[t] the intermediates of step
// t, x[t] the dense cell input (tokens already embedded), and logits at
// every step the loss head reads.
struct Tape {
  std::vector<CellState> states;  // T + 1
  std::vector<StepTrace> traces;  // T
  std::vector<Matrix> x;          // T entries of m x B
  std::vector<Matrix> logits;     // T entries for CeAll, else only the last step
};

Tape run_forward(const Model& model, const BatchInputs& inputs, LossKind kind,
                 const CellState* initial = nullptr);

// Loss summed over batch lanes (callers divide by B to report a mean).
Real loss_from_tape(const Tape& tape, const BatchTargets& targets, LossKind kind,
                    Index output_dim);

// Forward-only loss through the identical arithmetic as backprop_sequence.
Real sequence_loss(const Model& model, const BatchInputs& inputs, const BatchTargets& targets,
                   LossKind kind, const CellState* initial = nullptr);

struct BackpropResult {
  Real loss = 0.0;     // summed over batch lanes
  TensorSet grads;     // aligned with tensor_refs(model)
  CellState final_state;
};

BackpropResult backprop_sequence(const Model& model, const BatchInputs& inputs,
                                 const BatchTargets& targets, LossKind kind,
                                 const CellState* initial = nullptr);

// Central difference (L(theta+eps) - L(theta-eps)) / 2eps per scalar
// parameter. eps must lie in [1e-7, 1e-3].
TensorSet finite_diff_grad(const Model& model, const BatchInputs& inputs,
                           const BatchTargets& targets, LossKind kind, Real eps);

// max over scalars of |a - b| / (|b| + 1e-8).
Real max_relative_error(const TensorSet& a, const TensorSet& b);

}  // namespace mcrm
