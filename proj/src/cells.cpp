#include "mcrm/cells.hpp"

#include <stdexcept>

namespace mcrm {

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": shape mismatch: " + detail);
}

void check_step_shapes(const std::string& op, Index m, Index p, const Matrix& x,
                       const CellState& s, bool needs_c, bool needs_inner_h,
                       bool needs_inner_c) {
  if (x.rows() != m) {
    shape_error(op, "input has " + std::to_string(x.rows()) + " rows, cell expects " +
                        std::to_string(m));
  }
  const Index batch = x.cols();
  auto check = [&](const char* name, const Matrix& mat) {
    if (mat.rows() != p || mat.cols() != batch) {
      shape_error(op, std::string(name) + " is " + std::to_string(mat.rows()) + "x" +
                          std::to_string(mat.cols()) + ", expected " + std::to_string(p) +
                          "x" + std::to_string(batch));
    }
  };
  check("state h", s.h);
  if (needs_c) check("state c", s.c);
  if (needs_inner_h) check("state inner_h", s.inner_h);
  if (needs_inner_c) check("state inner_c", s.inner_c);
}

// Pre-activation and gate block shared by LSTM, NLSTM and MCRM outers.
// Equation order: a = W_x*x + W_h*h_prev, then + b.
struct LstmGates {
  Matrix a_i, a_f, a_c, a_o;
  Matrix i, f, g, o;
};

Matrix affine(const Matrix& w_x, const Matrix& x, const Matrix& w_h, const Matrix& h,
              const Vector& b) {
  Matrix a = w_x * x + w_h * h;
  a.colwise() += b;
  return a;
}

LstmGates lstm_gates(const LstmParams& p, const Matrix& x, const Matrix& h_prev) {
  LstmGates g;
  g.a_i = affine(p.w_xi, x, p.w_hi, h_prev, p.b_i);
  g.a_f = affine(p.w_xf, x, p.w_hf, h_prev, p.b_f);
  g.a_c = affine(p.w_xc, x, p.w_hc, h_prev, p.b_c);
  g.a_o = affine(p.w_xo, x, p.w_ho, h_prev, p.b_o);
  g.i = sigmoid(g.a_i);
  g.f = sigmoid(g.a_f);
  g.g = tanh(g.a_c);
  g.o = sigmoid(g.a_o);
  return g;
}

// Full GRU update with the dual-bias sums in the order the equations list
// them: W_i*x + b_i + W_h*h + b_h.
GruTrace gru_core(const GruParams& p, const Matrix& x, const Matrix& h_prev) {
  GruTrace t;
  t.a_r = p.w_ir * x;
  t.a_r.colwise() += p.b_ir;
  t.a_r += p.w_hr * h_prev;
  t.a_r.colwise() += p.b_hr;

  t.a_z = p.w_iz * x;
  t.a_z.colwise() += p.b_iz;
  t.a_z += p.w_hz * h_prev;
  t.a_z.colwise() += p.b_hz;

  t.r = sigmoid(t.a_r);
  t.z = sigmoid(t.a_z);

  t.hn_pre = p.w_hn * h_prev;
  t.hn_pre.colwise() += p.b_hn;
  t.a_n = p.w_in * x;
  t.a_n.colwise() += p.b_in;
  t.a_n += t.r.cwiseProduct(t.hn_pre);
  t.n = tanh(t.a_n);

  t.h_new = (1.0 - t.z.array()).matrix().cwiseProduct(h_prev) + t.z.cwiseProduct(t.n);
  return t;
}

Matrix concat_rows(const Matrix& top, const Matrix& bottom) {
  Matrix out(top.rows() + bottom.rows(), top.cols());
  out.topRows(top.rows()) = top;
  out.bottomRows(bottom.rows()) = bottom;
  return out;
}

}  // namespace

Arch parse_arch(const std::string& name) {
  if (name == "rnn") return Arch::Rnn;
  if (name == "gru") return Arch::Gru;
  if (name == "lstm") return Arch::Lstm;
  if (name == "nlstm") return Arch::Nlstm;
  if (name == "mcrm") return Arch::Mcrm;
  throw std::invalid_argument("unknown architecture '" + name +
                              "' (expected rnn|gru|lstm|nlstm|mcrm)");
}

std::string arch_name(Arch arch) {
  switch (arch) {
    case Arch::Rnn: return "rnn";
    case Arch::Gru: return "gru";
    case Arch::Lstm: return "lstm";
    case Arch::Nlstm: return "nlstm";
    case Arch::Mcrm: return "mcrm";
  }
  throw std::invalid_argument("unknown architecture id");
}

const std::vector<Arch>& all_archs() {
  static const std::vector<Arch> archs = {Arch::Rnn, Arch::Gru, Arch::Lstm, Arch::Nlstm,
                                          Arch::Mcrm};
  return archs;
}

CellState zero_state(Arch arch, Index width, Index batch) {
  CellState s;
  s.h = Matrix::Zero(width, batch);
  if (arch == Arch::Lstm || arch == Arch::Nlstm || arch == Arch::Mcrm) {
    s.c = Matrix::Zero(width, batch);
  }
  if (arch == Arch::Nlstm || arch == Arch::Mcrm) {
    s.inner_h = Matrix::Zero(width, batch);
  }
  if (arch == Arch::Nlstm) {
    s.inner_c = Matrix::Zero(width, batch);
  }
  return s;
}

StepResult rnn_step(const RnnParams& p, const Matrix& x, const CellState& s) {
  check_step_shapes("rnn_step", p.input_dim(), p.width(), x, s, false, false, false);
  StepResult r;
  r.trace.rnn.a_h = affine(p.w_xh, x, p.w_hh, s.h, p.b_h);
  r.state.h = tanh(r.trace.rnn.a_h);
  r.trace.state = r.state;
  return r;
}

StepResult gru_step(const GruParams& p, const Matrix& x, const CellState& s) {
  check_step_shapes("gru_step", p.input_dim(), p.width(), x, s, false, false, false);
  StepResult r;
  r.trace.gru = gru_core(p, x, s.h);
  r.state.h = r.trace.gru.h_new;
  r.trace.state = r.state;
  return r;
}

StepResult lstm_step(const LstmParams& p, const Matrix& x, const CellState& s) {
  check_step_shapes("lstm_step", p.input_dim(), p.width(), x, s, true, false, false);
  StepResult r;
  LstmGates g = lstm_gates(p, x, s.h);
  LstmTrace& t = r.trace.outer;
  t.a_i = std::move(g.a_i);
  t.a_f = std::move(g.a_f);
  t.a_c = std::move(g.a_c);
  t.a_o = std::move(g.a_o);
  t.i = std::move(g.i);
  t.f = std::move(g.f);
  t.g = std::move(g.g);
  t.o = std::move(g.o);
  t.c_new = t.f.cwiseProduct(s.c) + t.i.cwiseProduct(t.g);
  t.tanh_c = tanh(t.c_new);
  r.state.c = t.c_new;
  r.state.h = t.o.cwiseProduct(t.tanh_c);
  r.trace.state = r.state;
  return r;
}

StepResult nlstm_step(const NlstmParams& p, const Matrix& x, const CellState& s) {
  check_step_shapes("nlstm_step", p.input_dim(), p.width(), x, s, true, true, true);
  StepResult r;
  LstmGates g = lstm_gates(p.outer, x, s.h);
  LstmTrace& t = r.trace.outer;
  t.a_i = std::move(g.a_i);
  t.a_f = std::move(g.a_f);
  t.a_c = std::move(g.a_c);
  t.a_o = std::move(g.a_o);
  t.i = std::move(g.i);
  t.f = std::move(g.f);
  t.g = std::move(g.g);
  t.o = std::move(g.o);

  // The forget interaction block first, then the input interaction block.
  r.trace.x_inner = concat_rows(t.f.cwiseProduct(s.c), t.i.cwiseProduct(t.g));

  // Inner LSTM over its own recurrence; the outer cell state becomes the
  // inner hidden state.
  LstmGates ig = lstm_gates(p.inner, r.trace.x_inner, s.inner_h);
  LstmTrace& it = r.trace.inner;
  it.a_i = std::move(ig.a_i);
  it.a_f = std::move(ig.a_f);
  it.a_c = std::move(ig.a_c);
  it.a_o = std::move(ig.a_o);
  it.i = std::move(ig.i);
  it.f = std::move(ig.f);
  it.g = std::move(ig.g);
  it.o = std::move(ig.o);
  it.c_new = it.f.cwiseProduct(s.inner_c) + it.i.cwiseProduct(it.g);
  it.tanh_c = tanh(it.c_new);

  r.state.inner_c = it.c_new;
  r.state.inner_h = it.o.cwiseProduct(it.tanh_c);
  r.state.c = r.state.inner_h;
  t.c_new = r.state.c;
  t.tanh_c = tanh(t.c_new);
  r.state.h = t.o.cwiseProduct(t.tanh_c);
  r.trace.state = r.state;
  return r;
}

StepResult mcrm_step(const McrmParams& p, const Matrix& x, const CellState& s) {
  check_step_shapes("mcrm_step", p.input_dim(), p.width(), x, s, true, true, false);
  StepResult r;
  LstmGates g = lstm_gates(p.outer, x, s.h);
  LstmTrace& t = r.trace.outer;
  t.a_i = std::move(g.a_i);
  t.a_f = std::move(g.a_f);
  t.a_c = std::move(g.a_c);
  t.a_o = std::move(g.a_o);
  t.i = std::move(g.i);
  t.f = std::move(g.f);
  t.g = std::move(g.g);
  t.o = std::move(g.o);

  // What the cell should forget, then what it should remember.
  r.trace.x_inner = concat_rows(t.f.cwiseProduct(s.c), t.i.cwiseProduct(t.g));

  // The GRU hidden state is the cell state.
  r.trace.gru = gru_core(p.inner, r.trace.x_inner, s.inner_h);
  r.state.inner_h = r.trace.gru.h_new;
  r.state.c = r.state.inner_h;
  t.c_new = r.state.c;
  t.tanh_c = tanh(t.c_new);
  r.state.h = t.o.cwiseProduct(t.tanh_c);
  r.trace.state = r.state;
  return r;
}

std::int64_t count_params(Arch arch, Index m, Index p, Index out) {
  const std::int64_t mi = m, pi = p, oi = out;
  std::int64_t cell = 0;
  switch (arch) {
    case Arch::Rnn:
      cell = mi * pi + pi * pi + pi;
      break;
    case Arch::Lstm:
      cell = 4 * (mi * pi + pi * pi + pi);
      break;
    case Arch::Gru:
      cell = 3 * (mi * pi + pi * pi + 2 * pi);
      break;
    case Arch::Mcrm:
      cell = 4 * (mi * pi + pi * pi + pi) + 3 * (2 * pi * pi + pi * pi + 2 * pi);
      break;
    case Arch::Nlstm:
      cell = 4 * (mi * pi + pi * pi + pi) + 4 * (2 * pi * pi + pi * pi + pi);
      break;
  }
  return cell + pi * oi + oi;
}

namespace {

Real init_bound(Index p) { return 1.0 / std::sqrt(static_cast<Real>(p)); }

Matrix draw(Rng& rng, Real bound, Index rows, Index cols) {
  return rand_uniform_matrix(rng, -bound, bound, rows, cols);
}

Vector draw_vec(Rng& rng, Real bound, Index n) {
  return rand_uniform(rng, -bound, bound, n);
}

LstmParams init_lstm_impl(Index m, Index p, Real bound, Rng& rng) {
  LstmParams out;
  out.w_xi = draw(rng, bound, p, m);
  out.w_hi = draw(rng, bound, p, p);
  out.b_i = draw_vec(rng, bound, p);
  out.w_xf = draw(rng, bound, p, m);
  out.w_hf = draw(rng, bound, p, p);
  out.b_f = draw_vec(rng, bound, p);
  out.w_xc = draw(rng, bound, p, m);
  out.w_hc = draw(rng, bound, p, p);
  out.b_c = draw_vec(rng, bound, p);
  out.w_xo = draw(rng, bound, p, m);
  out.w_ho = draw(rng, bound, p, p);
  out.b_o = draw_vec(rng, bound, p);
  return out;
}

GruParams init_gru_impl(Index m, Index p, Real bound, Rng& rng) {
  GruParams out;
  out.w_ir = draw(rng, bound, p, m);
  out.w_hr = draw(rng, bound, p, p);
  out.b_ir = draw_vec(rng, bound, p);
  out.b_hr = draw_vec(rng, bound, p);
  out.w_iz = draw(rng, bound, p, m);
  out.w_hz = draw(rng, bound, p, p);
  out.b_iz = draw_vec(rng, bound, p);
  out.b_hz = draw_vec(rng, bound, p);
  out.w_in = draw(rng, bound, p, m);
  out.w_hn = draw(rng, bound, p, p);
  out.b_in = draw_vec(rng, bound, p);
  out.b_hn = draw_vec(rng, bound, p);
  return out;
}

}  // namespace

RnnParams init_rnn(Index m, Index p, Rng& rng) {
  const Real bound = init_bound(p);
  RnnParams out;
  out.w_xh = draw(rng, bound, p, m);
  out.w_hh = draw(rng, bound, p, p);
  out.b_h = draw_vec(rng, bound, p);
  return out;
}

GruParams init_gru(Index m, Index p, Rng& rng) { return init_gru_impl(m, p, init_bound(p), rng); }

LstmParams init_lstm(Index m, Index p, Rng& rng) {
  return init_lstm_impl(m, p, init_bound(p), rng);
}

NlstmParams init_nlstm(Index m, Index p, Rng& rng) {
  const Real bound = init_bound(p);
  NlstmParams out;
  out.outer = init_lstm_impl(m, p, bound, rng);
  out.inner = init_lstm_impl(2 * p, p, bound, rng);
  return out;
}

McrmParams init_mcrm(Index m, Index p, Rng& rng) {
  const Real bound = init_bound(p);
  McrmParams out;
  out.outer = init_lstm_impl(m, p, bound, rng);
  out.inner = init_gru_impl(2 * p, p, bound, rng);
  return out;
}

RnnParams zero_rnn(Index m, Index p) {
  RnnParams out;
  out.w_xh = Matrix::Zero(p, m);
  out.w_hh = Matrix::Zero(p, p);
  out.b_h = Vector::Zero(p);
  return out;
}

GruParams zero_gru(Index m, Index p) {
  GruParams out;
  out.w_ir = Matrix::Zero(p, m);
  out.w_iz = Matrix::Zero(p, m);
  out.w_in = Matrix::Zero(p, m);
  out.w_hr = Matrix::Zero(p, p);
  out.w_hz = Matrix::Zero(p, p);
  out.w_hn = Matrix::Zero(p, p);
  out.b_ir = Vector::Zero(p);
  out.b_iz = Vector::Zero(p);
  out.b_in = Vector::Zero(p);
  out.b_hr = Vector::Zero(p);
  out.b_hz = Vector::Zero(p);
  out.b_hn = Vector::Zero(p);
  return out;
}

LstmParams zero_lstm(Index m, Index p) {
  LstmParams out;
  out.w_xi = Matrix::Zero(p, m);
  out.w_xf = Matrix::Zero(p, m);
  out.w_xc = Matrix::Zero(p, m);
  out.w_xo = Matrix::Zero(p, m);
  out.w_hi = Matrix::Zero(p, p);
  out.w_hf = Matrix::Zero(p, p);
  out.w_hc = Matrix::Zero(p, p);
  out.w_ho = Matrix::Zero(p, p);
  out.b_i = Vector::Zero(p);
  out.b_f = Vector::Zero(p);
  out.b_c = Vector::Zero(p);
  out.b_o = Vector::Zero(p);
  return out;
}

NlstmParams zero_nlstm(Index m, Index p) {
  NlstmParams out;
  out.outer = zero_lstm(m, p);
  out.inner = zero_lstm(2 * p, p);
  return out;
}

McrmParams zero_mcrm(Index m, Index p) {
  McrmParams out;
  out.outer = zero_lstm(m, p);
  out.inner = zero_gru(2 * p, p);
  return out;
}

}  // namespace mcrm
