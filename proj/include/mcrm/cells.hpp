#pragma once

// The five recurrent cells: vanilla RNN, GRU, LSTM, NLSTM (LSTM nested in
// an LSTM) and MCRM (GRU nested in an LSTM as its cell state). Parameter
// records, seeded initialization, exact parameter counting, and the forward
// step for each.
//
// Conventions:
//  - Input weights are stored output-major (p x m), recurrent weights p x p,
//    so every pre-activation is W * v with column vectors.
//  - All step functions operate on column-stacked batches: an input is an
//    m x B matrix, a state component is p x B, column b is batch lane b.
//    B = 1 recovers the single-vector form.
//  - The LSTM keeps one bias per gate; the GRU keeps the dual input/hidden
//    biases. The two conventions are deliberately not normalized.

#include "mcrm/numkit.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mcrm {

enum class Arch { Rnn, Gru, Lstm, Nlstm, Mcrm };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch arch);
const std::vector<Arch>& all_archs();

struct LstmParams {
  Matrix w_xi, w_xf, w_xc, w_xo;  // p x m
  Matrix w_hi, w_hf, w_hc, w_ho;  // p x p
  Vector b_i, b_f, b_c, b_o;      // p

  Index input_dim() const { return w_xi.cols(); }
  Index width() const { return w_xi.rows(); }
};

struct GruParams {
  Matrix w_ir, w_iz, w_in;            // p x m
  Matrix w_hr, w_hz, w_hn;            // p x p
  Vector b_ir, b_iz, b_in;            // p
  Vector b_hr, b_hz, b_hn;            // p

  Index input_dim() const { return w_ir.cols(); }
  Index width() const { return w_ir.rows(); }
};

struct RnnParams {
  Matrix w_xh;  // p x m
  Matrix w_hh;  // p x p
  Vector b_h;   // p

  Index input_dim() const { return w_xh.cols(); }
  Index width() const { return w_xh.rows(); }
};

// Outer LSTM gates (i, f, o) plus candidate over (m, p); inner GRU fed the
// 2p concatenation of the forget and input interactions.
struct McrmParams {
  LstmParams outer;
  GruParams inner;

  Index input_dim() const { return outer.input_dim(); }
  Index width() const { return outer.width(); }
};

// Outer LSTM gates as in MCRM; the inner LSTM consumes the same 2p
// concatenated input and carries its own (h, c) recurrence.
struct NlstmParams {
  LstmParams outer;
  LstmParams inner;

  Index input_dim() const { return outer.input_dim(); }
  Index width() const { return outer.width(); }
};

// Recurrent carry. Each present component is p x B. `c` is empty for
// RNN/GRU; `inner_h` is used by the nested cells (for MCRM and NLSTM it
// holds the same values as `c`); `inner_c` is NLSTM-only.
struct CellState {
  Matrix h;
  Matrix c;
  Matrix inner_h;
  Matrix inner_c;
};

CellState zero_state(Arch arch, Index width, Index batch);

// Per-timestep intermediates kept for BPTT and state visualization:
// pre-activation sums, gate activations, candidates, the concatenated
// nested-cell input, and the resulting state.
struct LstmTrace {
  Matrix a_i, a_f, a_c, a_o;  // pre-activation sums
  Matrix i, f, g, o;          // sigma gates and tanh candidate
  Matrix c_new;               // post-update cell state
  Matrix tanh_c;              // tanh of the state the output gate reads
};

struct GruTrace {
  Matrix a_r, a_z, a_n;  // pre-activation sums
  Matrix r, z, n;        // gates and node state
  Matrix hn_pre;         // w_hn * h_prev + b_hn, before the reset gating
  Matrix h_new;
};

struct RnnTrace {
  Matrix a_h;
};

struct StepTrace {
  RnnTrace rnn;     // vanilla RNN only
  LstmTrace outer;  // lstm / nlstm / mcrm
  GruTrace gru;     // gru, and the MCRM inner cell
  LstmTrace inner;  // nlstm inner cell
  Matrix x_inner;   // 2p x B input handed to the nested cell
  CellState state;
};

struct StepResult {
  CellState state;
  StepTrace trace;
};

StepResult rnn_step(const RnnParams& p, const Matrix& x, const CellState& s);
StepResult gru_step(const GruParams& p, const Matrix& x, const CellState& s);
StepResult lstm_step(const LstmParams& p, const Matrix& x, const CellState& s);
StepResult nlstm_step(const NlstmParams& p, const Matrix& x, const CellState& s);
StepResult mcrm_step(const McrmParams& p, const Matrix& x, const CellState& s);

// Cell parameter count plus the width-`out` affine readout on h_t.
std::int64_t count_params(Arch arch, Index m, Index p, Index out);

// All tensors uniform(-1/sqrt(p), 1/sqrt(p)), drawn in a fixed order.
RnnParams init_rnn(Index m, Index p, Rng& rng);
GruParams init_gru(Index m, Index p, Rng& rng);
LstmParams init_lstm(Index m, Index p, Rng& rng);
NlstmParams init_nlstm(Index m, Index p, Rng& rng);
McrmParams init_mcrm(Index m, Index p, Rng& rng);

RnnParams zero_rnn(Index m, Index p);
GruParams zero_gru(Index m, Index p);
LstmParams zero_lstm(Index m, Index p);
NlstmParams zero_nlstm(Index m, Index p);
McrmParams zero_mcrm(Index m, Index p);

}  // namespace mcrm
