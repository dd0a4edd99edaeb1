#include "mcrm/grad.hpp"

#include "mcrm/metrics.hpp"

#include <stdexcept>

namespace mcrm {

namespace {

Model zeros_like(const Model& src) {
  Model z = src;
  for (auto& t : tensor_refs(z)) t.map().setZero();
  return z;
}

Matrix embed_step(const Model& model, const BatchInputs& inputs, Index t) {
  if (!inputs.dense.empty()) {
    return inputs.dense[static_cast<std::size_t>(t)];
  }
  const auto& toks = inputs.tokens[static_cast<std::size_t>(t)];
  Matrix x(model.input_dim, static_cast<Index>(toks.size()));
  for (Index b = 0; b < x.cols(); ++b) {
    const std::int32_t id = toks[static_cast<std::size_t>(b)];
    if (id < 0 || id >= model.vocab) {
      throw std::invalid_argument("token id " + std::to_string(id) +
                                  " out of range for vocabulary of " +
                                  std::to_string(model.vocab));
    }
    x.col(b) = model.embedding.row(id).transpose();
  }
  return x;
}

void check_batch(const Model& model, const BatchInputs& inputs, const BatchTargets& targets,
                 LossKind kind) {
  const bool has_dense = !inputs.dense.empty();
  const bool has_tokens = !inputs.tokens.empty();
  if (has_dense == has_tokens) {
    throw std::invalid_argument("batch must carry exactly one of dense inputs or token ids");
  }
  if (has_tokens && model.vocab == 0) {
    throw std::invalid_argument("token inputs require a model with an embedding table");
  }
  const Index t = inputs.steps();
  const Index b = inputs.batch();
  switch (kind) {
    case LossKind::MseLast:
      if (targets.regression.rows() != model.output_dim || targets.regression.cols() != b) {
        throw std::invalid_argument("regression targets are " +
                                    std::to_string(targets.regression.rows()) + "x" +
                                    std::to_string(targets.regression.cols()) +
                                    ", expected " + std::to_string(model.output_dim) + "x" +
                                    std::to_string(b));
      }
      break;
    case LossKind::CeLast:
      if (static_cast<Index>(targets.labels.size()) != b) {
        throw std::invalid_argument("expected one label per batch lane");
      }
      break;
    case LossKind::CeAll:
      if (static_cast<Index>(targets.step_labels.size()) != t) {
        throw std::invalid_argument("expected one label row per timestep");
      }
      for (const auto& row : targets.step_labels) {
        if (static_cast<Index>(row.size()) != b) {
          throw std::invalid_argument("expected one label per batch lane at every timestep");
        }
      }
      break;
  }
}

const Matrix& logits_at(const Tape& tape, LossKind kind, Index t) {
  if (kind == LossKind::CeAll) return tape.logits[static_cast<std::size_t>(t)];
  return tape.logits.back();
}

// ---------------------------------------------------------------------------
// Per-cell backward steps. Derivative identities used throughout:
// sigma'(a) = s(1-s) expressed through the stored gate s, tanh'(a) = 1 - y^2
// through the stored activation y.

void gru_backward_core(const GruParams& p, GruParams& g, const GruTrace& t, const Matrix& x,
                       const Matrix& h_prev, const Matrix& dh_in, Matrix& dh_prev_out,
                       Matrix& dx_out) {
  const Matrix da_n = (dh_in.array() * t.z.array() * (1.0 - t.n.array().square())).matrix();
  const Matrix da_z =
      (dh_in.array() * (t.n - h_prev).array() * t.z.array() * (1.0 - t.z.array())).matrix();
  const Matrix da_r =
      (da_n.array() * t.hn_pre.array() * t.r.array() * (1.0 - t.r.array())).matrix();
  const Matrix du = (da_n.array() * t.r.array()).matrix();

  g.w_in.noalias() += da_n * x.transpose();
  g.b_in += da_n.rowwise().sum();
  g.w_hn.noalias() += du * h_prev.transpose();
  g.b_hn += du.rowwise().sum();
  g.w_ir.noalias() += da_r * x.transpose();
  g.b_ir += da_r.rowwise().sum();
  g.w_hr.noalias() += da_r * h_prev.transpose();
  g.b_hr += da_r.rowwise().sum();
  g.w_iz.noalias() += da_z * x.transpose();
  g.b_iz += da_z.rowwise().sum();
  g.w_hz.noalias() += da_z * h_prev.transpose();
  g.b_hz += da_z.rowwise().sum();

  dx_out.noalias() = p.w_ir.transpose() * da_r;
  dx_out.noalias() += p.w_iz.transpose() * da_z;
  dx_out.noalias() += p.w_in.transpose() * da_n;

  dh_prev_out = (dh_in.array() * (1.0 - t.z.array())).matrix();
  dh_prev_out.noalias() += p.w_hr.transpose() * da_r;
  dh_prev_out.noalias() += p.w_hz.transpose() * da_z;
  dh_prev_out.noalias() += p.w_hn.transpose() * du;
}

void lstm_backward_core(const LstmParams& p, LstmParams& g, const LstmTrace& t, const Matrix& x,
                        const Matrix& h_prev, const Matrix& c_prev, const Matrix& dh_in,
                        const Matrix& dc_future, Matrix& dh_prev_out, Matrix& dc_prev_out,
                        Matrix& dx_out) {
  const Matrix da_o =
      (dh_in.array() * t.tanh_c.array() * t.o.array() * (1.0 - t.o.array())).matrix();
  const Matrix dc =
      dc_future +
      (dh_in.array() * t.o.array() * (1.0 - t.tanh_c.array().square())).matrix();
  const Matrix da_f =
      (dc.array() * c_prev.array() * t.f.array() * (1.0 - t.f.array())).matrix();
  const Matrix da_i = (dc.array() * t.g.array() * t.i.array() * (1.0 - t.i.array())).matrix();
  const Matrix da_g = (dc.array() * t.i.array() * (1.0 - t.g.array().square())).matrix();
  dc_prev_out = (dc.array() * t.f.array()).matrix();

  g.w_xi.noalias() += da_i * x.transpose();
  g.w_hi.noalias() += da_i * h_prev.transpose();
  g.b_i += da_i.rowwise().sum();
  g.w_xf.noalias() += da_f * x.transpose();
  g.w_hf.noalias() += da_f * h_prev.transpose();
  g.b_f += da_f.rowwise().sum();
  g.w_xc.noalias() += da_g * x.transpose();
  g.w_hc.noalias() += da_g * h_prev.transpose();
  g.b_c += da_g.rowwise().sum();
  g.w_xo.noalias() += da_o * x.transpose();
  g.w_ho.noalias() += da_o * h_prev.transpose();
  g.b_o += da_o.rowwise().sum();

  dx_out.noalias() = p.w_xi.transpose() * da_i;
  dx_out.noalias() += p.w_xf.transpose() * da_f;
  dx_out.noalias() += p.w_xc.transpose() * da_g;
  dx_out.noalias() += p.w_xo.transpose() * da_o;

  dh_prev_out.noalias() = p.w_hi.transpose() * da_i;
  dh_prev_out.noalias() += p.w_hf.transpose() * da_f;
  dh_prev_out.noalias() += p.w_hc.transpose() * da_g;
  dh_prev_out.noalias() += p.w_ho.transpose() * da_o;
}

// Outer gates of the nested cells. dx_inner carries the gradient of the
// concatenated nested input; its top half reaches f_t and c_{t-1}, its
// bottom half reaches i_t and the candidate.
void outer_gates_backward(const LstmParams& p, LstmParams& g, const LstmTrace& t,
                          const Matrix& x, const Matrix& h_prev, const Matrix& c_prev,
                          const Matrix& dh_in, const Matrix& dx_inner, Matrix& dh_prev_out,
                          Matrix& dc_prev_partial, Matrix& dx_out) {
  const Index width = p.width();
  const auto d_forget_half = dx_inner.topRows(width);
  const auto d_input_half = dx_inner.bottomRows(width);

  const Matrix da_o =
      (dh_in.array() * t.tanh_c.array() * t.o.array() * (1.0 - t.o.array())).matrix();
  const Matrix da_f =
      (d_forget_half.array() * c_prev.array() * t.f.array() * (1.0 - t.f.array())).matrix();
  const Matrix da_i =
      (d_input_half.array() * t.g.array() * t.i.array() * (1.0 - t.i.array())).matrix();
  const Matrix da_g =
      (d_input_half.array() * t.i.array() * (1.0 - t.g.array().square())).matrix();
  dc_prev_partial = (d_forget_half.array() * t.f.array()).matrix();

  g.w_xi.noalias() += da_i * x.transpose();
  g.w_hi.noalias() += da_i * h_prev.transpose();
  g.b_i += da_i.rowwise().sum();
  g.w_xf.noalias() += da_f * x.transpose();
  g.w_hf.noalias() += da_f * h_prev.transpose();
  g.b_f += da_f.rowwise().sum();
  g.w_xc.noalias() += da_g * x.transpose();
  g.w_hc.noalias() += da_g * h_prev.transpose();
  g.b_c += da_g.rowwise().sum();
  g.w_xo.noalias() += da_o * x.transpose();
  g.w_ho.noalias() += da_o * h_prev.transpose();
  g.b_o += da_o.rowwise().sum();

  dx_out.noalias() = p.w_xi.transpose() * da_i;
  dx_out.noalias() += p.w_xf.transpose() * da_f;
  dx_out.noalias() += p.w_xc.transpose() * da_g;
  dx_out.noalias() += p.w_xo.transpose() * da_o;

  dh_prev_out.noalias() = p.w_hi.transpose() * da_i;
  dh_prev_out.noalias() += p.w_hf.transpose() * da_f;
  dh_prev_out.noalias() += p.w_hc.transpose() * da_g;
  dh_prev_out.noalias() += p.w_ho.transpose() * da_o;
}

}  // namespace

Tape run_forward(const Model& model, const BatchInputs& inputs, LossKind kind,
                 const CellState* initial) {
  const Index steps = inputs.steps();
  if (steps == 0) throw std::invalid_argument("run_forward: empty sequence");
  const Index batch = inputs.batch();

  Tape tape;
  tape.states.reserve(static_cast<std::size_t>(steps) + 1);
  tape.traces.reserve(static_cast<std::size_t>(steps));
  tape.x.reserve(static_cast<std::size_t>(steps));

  CellState state = initial != nullptr ? *initial : model.initial_state(batch);
  tape.states.push_back(state);
  for (Index t = 0; t < steps; ++t) {
    Matrix x = embed_step(model, inputs, t);
    StepResult r = model.step(x, state);
    state = r.state;
    if (!state.h.allFinite()) {
      throw NumericalDivergence("non-finite hidden state at timestep " + std::to_string(t));
    }
    if (kind == LossKind::CeAll || t == steps - 1) {
      tape.logits.push_back(model.readout(state.h));
    }
    tape.x.push_back(std::move(x));
    tape.traces.push_back(std::move(r.trace));
    tape.states.push_back(state);
  }
  return tape;
}

Real loss_from_tape(const Tape& tape, const BatchTargets& targets, LossKind kind,
                    Index output_dim) {
  const Index steps = static_cast<Index>(tape.traces.size());
  const Index batch = tape.states.front().h.cols();
  Real loss = 0.0;
  switch (kind) {
    case LossKind::MseLast: {
      const Matrix& y = tape.logits.back();
      loss = (y - targets.regression).squaredNorm() / static_cast<Real>(output_dim);
      break;
    }
    case LossKind::CeLast: {
      loss = softmax_ce_sum(tape.logits.back(), targets.labels.data(), batch, nullptr, 0.0);
      break;
    }
    case LossKind::CeAll: {
      for (Index t = 0; t < steps; ++t) {
        const Real step_loss =
            softmax_ce_sum(tape.logits[static_cast<std::size_t>(t)],
                           targets.step_labels[static_cast<std::size_t>(t)].data(), batch,
                           nullptr, 0.0);
        if (!std::isfinite(step_loss)) {
          throw NumericalDivergence("non-finite loss at timestep " + std::to_string(t));
        }
        loss += step_loss;
      }
      loss /= static_cast<Real>(steps);
      break;
    }
  }
  if (!std::isfinite(loss)) {
    throw NumericalDivergence("non-finite loss at timestep " + std::to_string(steps - 1));
  }
  return loss;
}

Real sequence_loss(const Model& model, const BatchInputs& inputs, const BatchTargets& targets,
                   LossKind kind, const CellState* initial) {
  check_batch(model, inputs, targets, kind);
  const Tape tape = run_forward(model, inputs, kind, initial);
  return loss_from_tape(tape, targets, kind, model.output_dim);
}

BackpropResult backprop_sequence(const Model& model, const BatchInputs& inputs,
                                 const BatchTargets& targets, LossKind kind,
                                 const CellState* initial) {
  check_batch(model, inputs, targets, kind);
  const Tape tape = run_forward(model, inputs, kind, initial);
  const Real loss = loss_from_tape(tape, targets, kind, model.output_dim);

  const Index steps = inputs.steps();
  const Index batch = inputs.batch();
  const Index width = model.hidden;
  const bool tokens = !inputs.tokens.empty();

  Model acc = zeros_like(model);
  Matrix dh = Matrix::Zero(width, batch);
  Matrix dc = Matrix::Zero(width, batch);
  Matrix dic = Matrix::Zero(width, batch);
  Matrix dx(model.input_dim, batch);

  for (Index t = steps - 1; t >= 0; --t) {
    const StepTrace& tr = tape.traces[static_cast<std::size_t>(t)];
    const CellState& prev = tape.states[static_cast<std::size_t>(t)];
    const Matrix& x = tape.x[static_cast<std::size_t>(t)];

    if (kind == LossKind::CeAll || t == steps - 1) {
      const Matrix& y = logits_at(tape, kind, t);
      Matrix dy = Matrix::Zero(model.output_dim, batch);
      if (kind == LossKind::MseLast) {
        dy = (2.0 / static_cast<Real>(model.output_dim)) * (y - targets.regression);
      } else if (kind == LossKind::CeLast) {
        softmax_ce_sum(y, targets.labels.data(), batch, &dy, 1.0);
      } else {
        softmax_ce_sum(y, targets.step_labels[static_cast<std::size_t>(t)].data(), batch, &dy,
                       1.0 / static_cast<Real>(steps));
      }
      acc.b_out += dy.rowwise().sum();
      acc.w_out.noalias() += dy * tr.state.h.transpose();
      dh.noalias() += model.w_out.transpose() * dy;
    }

    switch (model.arch) {
      case Arch::Rnn: {
        const auto& p = std::get<RnnParams>(model.cell);
        auto& g = std::get<RnnParams>(acc.cell);
        const Matrix& h = tr.state.h;
        const Matrix da = (dh.array() * (1.0 - h.array().square())).matrix();
        g.w_xh.noalias() += da * x.transpose();
        g.w_hh.noalias() += da * prev.h.transpose();
        g.b_h += da.rowwise().sum();
        dx.noalias() = p.w_xh.transpose() * da;
        dh = p.w_hh.transpose() * da;
        break;
      }
      case Arch::Gru: {
        const auto& p = std::get<GruParams>(model.cell);
        auto& g = std::get<GruParams>(acc.cell);
        Matrix dh_prev(width, batch);
        gru_backward_core(p, g, tr.gru, x, prev.h, dh, dh_prev, dx);
        dh = std::move(dh_prev);
        break;
      }
      case Arch::Lstm: {
        const auto& p = std::get<LstmParams>(model.cell);
        auto& g = std::get<LstmParams>(acc.cell);
        Matrix dh_prev(width, batch), dc_prev(width, batch);
        lstm_backward_core(p, g, tr.outer, x, prev.h, prev.c, dh, dc, dh_prev, dc_prev, dx);
        dh = std::move(dh_prev);
        dc = std::move(dc_prev);
        break;
      }
      case Arch::Mcrm: {
        const auto& p = std::get<McrmParams>(model.cell);
        auto& g = std::get<McrmParams>(acc.cell);
        // Total gradient on the inner GRU hidden state: the carried cell
        // gradient plus the output-gate path of this step.
        const Matrix d_hg =
            dc +
            (dh.array() * tr.outer.o.array() * (1.0 - tr.outer.tanh_c.array().square()))
                .matrix();
        Matrix dhg_prev_rec(width, batch);
        Matrix dx_inner(2 * width, batch);
        gru_backward_core(p.inner, g.inner, tr.gru, tr.x_inner, prev.inner_h, d_hg,
                          dhg_prev_rec, dx_inner);
        Matrix dh_prev(width, batch), dc_partial(width, batch);
        outer_gates_backward(p.outer, g.outer, tr.outer, x, prev.h, prev.c, dh, dx_inner,
                             dh_prev, dc_partial, dx);
        // c_{t-1} and the inner recurrent state are the same vector.
        dc = dc_partial + dhg_prev_rec;
        dh = std::move(dh_prev);
        break;
      }
      case Arch::Nlstm: {
        const auto& p = std::get<NlstmParams>(model.cell);
        auto& g = std::get<NlstmParams>(acc.cell);
        const Matrix d_ih =
            dc +
            (dh.array() * tr.outer.o.array() * (1.0 - tr.outer.tanh_c.array().square()))
                .matrix();
        Matrix dih_prev_rec(width, batch), dic_prev(width, batch);
        Matrix dx_inner(2 * width, batch);
        lstm_backward_core(p.inner, g.inner, tr.inner, tr.x_inner, prev.inner_h, prev.inner_c,
                           d_ih, dic, dih_prev_rec, dic_prev, dx_inner);
        Matrix dh_prev(width, batch), dc_partial(width, batch);
        outer_gates_backward(p.outer, g.outer, tr.outer, x, prev.h, prev.c, dh, dx_inner,
                             dh_prev, dc_partial, dx);
        dc = dc_partial + dih_prev_rec;
        dic = std::move(dic_prev);
        dh = std::move(dh_prev);
        break;
      }
    }

    if (tokens) {
      const auto& ids = inputs.tokens[static_cast<std::size_t>(t)];
      for (Index b = 0; b < batch; ++b) {
        acc.embedding.row(ids[static_cast<std::size_t>(b)]) += dx.col(b).transpose();
      }
    }
  }

  BackpropResult result;
  result.loss = loss;
  result.final_state = tape.states.back();
  result.grads = TensorSet(model);
  const auto refs = tensor_refs(acc);
  for (Index i = 0; i < result.grads.count(); ++i) {
    result.grads[i] = refs[static_cast<std::size_t>(i)].map();
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite differences. The forward pass behind the quotient is a separate
// scalar-loop transcription of every cell evaluated in extended precision:
// the quotient's roundoff then stays far below the comparison tolerances
// even on gradient entries near 1e-8, and the oracle shares no code with
// the Eigen forward it is used to check.

namespace {

using Wide = long double;

Wide wide_sigmoid(Wide x) {
  if (x >= 0.0L) return 1.0L / (1.0L + std::exp(-x));
  const Wide e = std::exp(x);
  return e / (1.0L + e);
}

void wide_affine(const Matrix& wx, const std::vector<Wide>& x, const Matrix& wh,
                 const std::vector<Wide>& h, const Vector& bias, std::vector<Wide>& out) {
  const Index rows = wx.rows();
  for (Index r = 0; r < rows; ++r) {
    Wide a = 0.0L;
    for (Index c = 0; c < wx.cols(); ++c) a += static_cast<Wide>(wx(r, c)) * x[static_cast<std::size_t>(c)];
    for (Index c = 0; c < wh.cols(); ++c) a += static_cast<Wide>(wh(r, c)) * h[static_cast<std::size_t>(c)];
    a += static_cast<Wide>(bias[r]);
    out[static_cast<std::size_t>(r)] = a;
  }
}

struct WideLstmOut {
  std::vector<Wide> i, f, g, o;
};

WideLstmOut wide_lstm_gates(const LstmParams& p, const std::vector<Wide>& x,
                            const std::vector<Wide>& h) {
  const std::size_t width = static_cast<std::size_t>(p.width());
  WideLstmOut out{std::vector<Wide>(width), std::vector<Wide>(width), std::vector<Wide>(width),
                  std::vector<Wide>(width)};
  std::vector<Wide> a(width);
  wide_affine(p.w_xi, x, p.w_hi, h, p.b_i, a);
  for (std::size_t k = 0; k < width; ++k) out.i[k] = wide_sigmoid(a[k]);
  wide_affine(p.w_xf, x, p.w_hf, h, p.b_f, a);
  for (std::size_t k = 0; k < width; ++k) out.f[k] = wide_sigmoid(a[k]);
  wide_affine(p.w_xc, x, p.w_hc, h, p.b_c, a);
  for (std::size_t k = 0; k < width; ++k) out.g[k] = std::tanh(a[k]);
  wide_affine(p.w_xo, x, p.w_ho, h, p.b_o, a);
  for (std::size_t k = 0; k < width; ++k) out.o[k] = wide_sigmoid(a[k]);
  return out;
}

void wide_gru(const GruParams& p, const std::vector<Wide>& x, std::vector<Wide>& h) {
  const std::size_t width = static_cast<std::size_t>(p.width());
  std::vector<Wide> r(width), z(width), n(width), a(width);
  auto dual_affine = [&](const Matrix& wi, const Vector& bi, const Matrix& wh, const Vector& bh) {
    for (Index row = 0; row < p.width(); ++row) {
      Wide acc = 0.0L;
      for (Index c = 0; c < wi.cols(); ++c) {
        acc += static_cast<Wide>(wi(row, c)) * x[static_cast<std::size_t>(c)];
      }
      acc += static_cast<Wide>(bi[row]);
      for (Index c = 0; c < wh.cols(); ++c) {
        acc += static_cast<Wide>(wh(row, c)) * h[static_cast<std::size_t>(c)];
      }
      acc += static_cast<Wide>(bh[row]);
      a[static_cast<std::size_t>(row)] = acc;
    }
  };
  dual_affine(p.w_ir, p.b_ir, p.w_hr, p.b_hr);
  for (std::size_t k = 0; k < width; ++k) r[k] = wide_sigmoid(a[k]);
  dual_affine(p.w_iz, p.b_iz, p.w_hz, p.b_hz);
  for (std::size_t k = 0; k < width; ++k) z[k] = wide_sigmoid(a[k]);
  for (Index row = 0; row < p.width(); ++row) {
    Wide hn = 0.0L;
    for (Index c = 0; c < p.w_hn.cols(); ++c) {
      hn += static_cast<Wide>(p.w_hn(row, c)) * h[static_cast<std::size_t>(c)];
    }
    hn += static_cast<Wide>(p.b_hn[row]);
    Wide acc = 0.0L;
    for (Index c = 0; c < p.w_in.cols(); ++c) {
      acc += static_cast<Wide>(p.w_in(row, c)) * x[static_cast<std::size_t>(c)];
    }
    acc += static_cast<Wide>(p.b_in[row]);
    acc += r[static_cast<std::size_t>(row)] * hn;
    n[static_cast<std::size_t>(row)] = std::tanh(acc);
  }
  for (std::size_t k = 0; k < width; ++k) h[k] = (1.0L - z[k]) * h[k] + z[k] * n[k];
}

Wide wide_ce(const std::vector<Wide>& logits, std::int32_t label) {
  Wide peak = logits[0];
  for (const Wide v : logits) peak = std::max(peak, v);
  Wide denom = 0.0L;
  for (const Wide v : logits) denom += std::exp(v - peak);
  return -(logits[static_cast<std::size_t>(label)] - peak - std::log(denom));
}

// Loss with the same reductions as the production path, per batch lane.
Wide wide_sequence_loss(const Model& model, const BatchInputs& inputs,
                        const BatchTargets& targets, LossKind kind) {
  const Index steps = inputs.steps();
  const Index batch = inputs.batch();
  const std::size_t width = static_cast<std::size_t>(model.hidden);
  const std::size_t m = static_cast<std::size_t>(model.input_dim);
  const std::size_t out_dim = static_cast<std::size_t>(model.output_dim);

  Wide total = 0.0L;
  for (Index b = 0; b < batch; ++b) {
    std::vector<Wide> h(width, 0.0L), c(width, 0.0L), ih(width, 0.0L), ic(width, 0.0L);
    std::vector<Wide> x(m), y(out_dim);
    Wide seq_ce = 0.0L;
    for (Index t = 0; t < steps; ++t) {
      if (!inputs.dense.empty()) {
        const Matrix& xt = inputs.dense[static_cast<std::size_t>(t)];
        for (std::size_t r = 0; r < m; ++r) x[r] = static_cast<Wide>(xt(static_cast<Index>(r), b));
      } else {
        const std::int32_t id = inputs.tokens[static_cast<std::size_t>(t)][static_cast<std::size_t>(b)];
        for (std::size_t r = 0; r < m; ++r) {
          x[r] = static_cast<Wide>(model.embedding(id, static_cast<Index>(r)));
        }
      }

      switch (model.arch) {
        case Arch::Rnn: {
          const auto& p = std::get<RnnParams>(model.cell);
          std::vector<Wide> a(width);
          wide_affine(p.w_xh, x, p.w_hh, h, p.b_h, a);
          for (std::size_t k = 0; k < width; ++k) h[k] = std::tanh(a[k]);
          break;
        }
        case Arch::Gru: {
          wide_gru(std::get<GruParams>(model.cell), x, h);
          break;
        }
        case Arch::Lstm: {
          const auto& p = std::get<LstmParams>(model.cell);
          const WideLstmOut g = wide_lstm_gates(p, x, h);
          for (std::size_t k = 0; k < width; ++k) {
            c[k] = g.f[k] * c[k] + g.i[k] * g.g[k];
            h[k] = g.o[k] * std::tanh(c[k]);
          }
          break;
        }
        case Arch::Mcrm: {
          const auto& p = std::get<McrmParams>(model.cell);
          const WideLstmOut g = wide_lstm_gates(p.outer, x, h);
          std::vector<Wide> xg(2 * width);
          for (std::size_t k = 0; k < width; ++k) {
            xg[k] = g.f[k] * c[k];
            xg[width + k] = g.i[k] * g.g[k];
          }
          wide_gru(p.inner, xg, ih);
          for (std::size_t k = 0; k < width; ++k) {
            c[k] = ih[k];
            h[k] = g.o[k] * std::tanh(c[k]);
          }
          break;
        }
        case Arch::Nlstm: {
          const auto& p = std::get<NlstmParams>(model.cell);
          const WideLstmOut g = wide_lstm_gates(p.outer, x, h);
          std::vector<Wide> xg(2 * width);
          for (std::size_t k = 0; k < width; ++k) {
            xg[k] = g.f[k] * c[k];
            xg[width + k] = g.i[k] * g.g[k];
          }
          const WideLstmOut ig = wide_lstm_gates(p.inner, xg, ih);
          for (std::size_t k = 0; k < width; ++k) {
            ic[k] = ig.f[k] * ic[k] + ig.i[k] * ig.g[k];
            ih[k] = ig.o[k] * std::tanh(ic[k]);
            c[k] = ih[k];
            h[k] = g.o[k] * std::tanh(c[k]);
          }
          break;
        }
      }

      const bool head_here = kind == LossKind::CeAll || t == steps - 1;
      if (head_here) {
        for (std::size_t r = 0; r < out_dim; ++r) {
          Wide acc = 0.0L;
          for (std::size_t k = 0; k < width; ++k) {
            acc += static_cast<Wide>(model.w_out(static_cast<Index>(r), static_cast<Index>(k))) *
                   h[k];
          }
          acc += static_cast<Wide>(model.b_out[static_cast<Index>(r)]);
          y[r] = acc;
        }
        if (kind == LossKind::CeAll) {
          seq_ce += wide_ce(y, targets.step_labels[static_cast<std::size_t>(t)]
                                                  [static_cast<std::size_t>(b)]);
        }
      }
    }
    switch (kind) {
      case LossKind::MseLast: {
        Wide acc = 0.0L;
        for (std::size_t r = 0; r < out_dim; ++r) {
          const Wide d = y[r] - static_cast<Wide>(targets.regression(static_cast<Index>(r), b));
          acc += d * d;
        }
        total += acc / static_cast<Wide>(out_dim);
        break;
      }
      case LossKind::CeLast:
        total += wide_ce(y, targets.labels[static_cast<std::size_t>(b)]);
        break;
      case LossKind::CeAll:
        total += seq_ce / static_cast<Wide>(steps);
        break;
    }
  }
  return total;
}

}  // namespace

TensorSet finite_diff_grad(const Model& model, const BatchInputs& inputs,
                           const BatchTargets& targets, LossKind kind, Real eps) {
  if (eps < 1e-7 || eps > 1e-3) {
    throw std::invalid_argument("finite_diff_grad: eps must lie in [1e-7, 1e-3]");
  }
  check_batch(model, inputs, targets, kind);
  Model work = model;
  auto refs = tensor_refs(work);
  TensorSet out(model);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    Real* data = refs[i].data;
    Real* grad = out[static_cast<Index>(i)].data();
    for (Index k = 0; k < refs[i].size(); ++k) {
      const Real original = data[k];
      const Real plus_point = original + eps;
      const Real minus_point = original - eps;
      data[k] = plus_point;
      const Wide plus = wide_sequence_loss(work, inputs, targets, kind);
      data[k] = minus_point;
      const Wide minus = wide_sequence_loss(work, inputs, targets, kind);
      data[k] = original;
      // divide by the realized spacing of the two evaluation points
      grad[k] = static_cast<Real>((plus - minus) /
                                  (static_cast<Wide>(plus_point) - static_cast<Wide>(minus_point)));
    }
  }
  return out;
}

Real max_relative_error(const TensorSet& a, const TensorSet& b) {
  if (a.count() != b.count()) {
    throw std::invalid_argument("max_relative_error: mismatched tensor counts");
  }
  Real worst = 0.0;
  for (Index i = 0; i < a.count(); ++i) {
    const auto& lhs = a[i];
    const auto& rhs = b[i];
    for (Index k = 0; k < lhs.size(); ++k) {
      const Real err =
          std::abs(lhs.data()[k] - rhs.data()[k]) / (std::abs(rhs.data()[k]) + 1e-8);
      if (err > worst) worst = err;
    }
  }
  return worst;
}

}  // namespace mcrm
