#pragma once

// A trainable model: one recurrent cell, an affine readout on h_t, and an
// optional token-embedding table for language-model inputs. Exposes a flat,
// fixed-order view over every parameter tensor so optimizers, clipping,
// serialization and finite differences all walk the same list.

#include "mcrm/cells.hpp"

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace mcrm {

using CellParams = std::variant<RnnParams, GruParams, LstmParams, NlstmParams, McrmParams>;

// Mutable window onto one parameter tensor (contiguous storage; biases are
// viewed as n x 1).
struct TensorRef {
  std::string name;
  Real* data = nullptr;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  Eigen::Map<Matrix> map() const { return Eigen::Map<Matrix>(data, rows, cols); }
};

struct TensorView {
  std::string name;
  const Real* data = nullptr;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
  Eigen::Map<const Matrix> map() const { return Eigen::Map<const Matrix>(data, rows, cols); }
};

struct Model {
  Arch arch = Arch::Rnn;
  Index input_dim = 0;   // m seen by the cell (embedding width for token input)
  Index hidden = 0;      // p
  Index output_dim = 0;  // readout width
  Index vocab = 0;       // 0 when the model takes dense inputs

  CellParams cell;
  Matrix embedding;  // vocab x input_dim (empty when vocab == 0)
  Matrix w_out;      // output_dim x hidden
  Vector b_out;      // output_dim

  std::int64_t param_count() const;  // every tensor, embedding included

  CellState initial_state(Index batch) const { return zero_state(arch, hidden, batch); }

  StepResult step(const Matrix& x, const CellState& s) const;
  Matrix readout(const Matrix& h) const;  // w_out * h + b_out per column
};

// Fixed-order tensor walk; both overloads enumerate identically.
std::vector<TensorRef> tensor_refs(Model& model);
std::vector<TensorView> tensor_views(const Model& model);

// Cell, readout, and embedding (when vocab > 0) all uniform(-1/sqrt(p), 1/sqrt(p)),
// drawn in tensor-walk order.
Model init_model(Arch arch, Index input_dim, Index hidden, Index output_dim, Index vocab,
                 Rng& rng);

// Same shapes, every tensor zero.
Model zero_model(Arch arch, Index input_dim, Index hidden, Index output_dim, Index vocab = 0);

// Shape-matched accumulators for a model: gradients, optimizer moments.
class TensorSet {
 public:
  TensorSet() = default;
  explicit TensorSet(const Model& shape_like);

  void set_zero();
  void add(const TensorSet& other);  // this += other, tensor by tensor
  void scale(Real factor);
  Real squared_norm() const;
  bool all_finite() const;
  std::int64_t size() const;

  Index count() const { return static_cast<Index>(items_.size()); }
  Matrix& operator[](Index i) { return items_[static_cast<std::size_t>(i)]; }
  const Matrix& operator[](Index i) const { return items_[static_cast<std::size_t>(i)]; }

  std::vector<Matrix>& items() { return items_; }
  const std::vector<Matrix>& items() const { return items_; }

 private:
  std::vector<Matrix> items_;
};

}  // namespace mcrm
