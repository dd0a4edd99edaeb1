#include "mcrm/cells.hpp"
#include "mcrm/model.hpp"

#include <doctest.h>

#include <cmath>

using namespace mcrm;

namespace {

Real sig(Real x) { return 1.0 / (1.0 + std::exp(-x)); }

Matrix rand_mat(Rng& rng, Index r, Index c, Real bound = 0.8) {
  return rand_uniform_matrix(rng, -bound, bound, r, c);
}

CellState random_state(Arch arch, Index p, Index batch, Rng& rng) {
  CellState s = zero_state(arch, p, batch);
  s.h = rand_mat(rng, p, batch);
  if (s.c.size() > 0) s.c = rand_mat(rng, p, batch);
  if (arch == Arch::Mcrm) s.inner_h = s.c;  // the invariant carried between steps
  if (arch == Arch::Nlstm) {
    s.inner_h = s.c;
    s.inner_c = rand_mat(rng, p, batch);
  }
  return s;
}

}  // namespace

TEST_CASE("zero-weight fixed point for every architecture") {
  Rng rng(3);
  const Index m = 3, p = 4;
  const Matrix x = rand_mat(rng, m, 2);
  {
    const auto r = rnn_step(zero_rnn(m, p), x, zero_state(Arch::Rnn, p, 2));
    CHECK(r.state.h.isZero(0.0));
  }
  {
    const auto r = gru_step(zero_gru(m, p), x, zero_state(Arch::Gru, p, 2));
    CHECK(r.state.h.isZero(0.0));
    CHECK(r.trace.gru.r.isApproxToConstant(0.5));
    CHECK(r.trace.gru.z.isApproxToConstant(0.5));
    CHECK(r.trace.gru.n.isZero(0.0));
  }
  {
    const auto r = lstm_step(zero_lstm(m, p), x, zero_state(Arch::Lstm, p, 2));
    CHECK(r.state.h.isZero(0.0));
    CHECK(r.state.c.isZero(0.0));
    CHECK(r.trace.outer.i.isApproxToConstant(0.5));
    CHECK(r.trace.outer.g.isZero(0.0));
  }
  {
    const auto r = mcrm_step(zero_mcrm(m, p), x, zero_state(Arch::Mcrm, p, 2));
    CHECK(r.state.h.isZero(0.0));
    CHECK(r.state.c.isZero(0.0));
    CHECK(r.trace.x_inner.isZero(0.0));
  }
  {
    const auto r = nlstm_step(zero_nlstm(m, p), x, zero_state(Arch::Nlstm, p, 2));
    CHECK(r.state.h.isZero(0.0));
    CHECK(r.state.c.isZero(0.0));
    CHECK(r.state.inner_c.isZero(0.0));
  }
}

TEST_CASE("lstm saturated forget gate preserves the cell state") {
  const Index p = 5;
  LstmParams params = zero_lstm(1, p);
  params.b_f = Vector::Constant(p, 20.0);
  CellState s = zero_state(Arch::Lstm, p, 1);
  Rng rng(17);
  s.c = rand_uniform_matrix(rng, -1.0, 1.0, p, 1);
  const Matrix x = Matrix::Zero(1, 1);
  const auto r = lstm_step(params, x, s);
  CHECK((r.state.c - s.c).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("gru saturated-closed update gate preserves the hidden state") {
  const Index p = 5;
  GruParams params = zero_gru(1, p);
  params.b_iz = Vector::Constant(p, -20.0);
  params.b_hz = Vector::Constant(p, -20.0);
  CellState s = zero_state(Arch::Gru, p, 1);
  Rng rng(19);
  s.h = rand_uniform_matrix(rng, -1.0, 1.0, p, 1);
  const auto r = gru_step(params, Matrix::Zero(1, 1), s);
  CHECK((r.state.h - s.h).cwiseAbs().maxCoeff() <= 1e-8);
}

TEST_CASE("lstm scalar case matches a scalar transcription") {
  LstmParams params = zero_lstm(1, 1);
  for (auto* w : {&params.w_xi, &params.w_xf, &params.w_xc, &params.w_xo, &params.w_hi,
                  &params.w_hf, &params.w_hc, &params.w_ho}) {
    (*w)(0, 0) = 0.5;
  }
  for (auto* b : {&params.b_i, &params.b_f, &params.b_c, &params.b_o}) (*b)[0] = 0.1;
  CellState s = zero_state(Arch::Lstm, 1, 1);
  Matrix x(1, 1);
  x << 1.0;
  const auto r = lstm_step(params, x, s);

  const Real pre = 0.5 * 1.0 + 0.5 * 0.0 + 0.1;
  const Real i = sig(pre), f = sig(pre), g = std::tanh(pre), o = sig(pre);
  const Real c = f * 0.0 + i * g;
  const Real h = o * std::tanh(c);
  CHECK(r.state.c(0, 0) == doctest::Approx(c).epsilon(1e-12));
  CHECK(r.state.h(0, 0) == doctest::Approx(h).epsilon(1e-12));
}

TEST_CASE("gru scalar case matches a scalar transcription") {
  GruParams params = zero_gru(1, 1);
  for (auto* w : {&params.w_ir, &params.w_iz, &params.w_in, &params.w_hr, &params.w_hz,
                  &params.w_hn}) {
    (*w)(0, 0) = 0.5;
  }
  for (auto* b : {&params.b_ir, &params.b_iz, &params.b_in, &params.b_hr, &params.b_hz,
                  &params.b_hn}) {
    (*b)[0] = 0.1;
  }
  CellState s = zero_state(Arch::Gru, 1, 1);
  s.h(0, 0) = 0.2;
  Matrix x(1, 1);
  x << 1.0;
  const auto result = gru_step(params, x, s);

  const Real r = sig(0.5 * 1.0 + 0.1 + 0.5 * 0.2 + 0.1);
  const Real z = sig(0.5 * 1.0 + 0.1 + 0.5 * 0.2 + 0.1);
  const Real hn = 0.5 * 0.2 + 0.1;
  const Real n = std::tanh(0.5 * 1.0 + 0.1 + r * hn);
  const Real h = (1.0 - z) * 0.2 + z * n;
  CHECK(result.state.h(0, 0) == doctest::Approx(h).epsilon(1e-12));
  CHECK(result.trace.gru.r(0, 0) == doctest::Approx(r).epsilon(1e-12));
  CHECK(result.trace.gru.n(0, 0) == doctest::Approx(n).epsilon(1e-12));
}

TEST_CASE("rnn step") {
  Rng rng(23);
  const Index p = 3;
  {
    const auto r = rnn_step(zero_rnn(2, p), rand_mat(rng, 2, 1), zero_state(Arch::Rnn, p, 1));
    CHECK(r.state.h.isZero(0.0));
  }
  {
    RnnParams params = zero_rnn(p, p);
    params.w_xh = Matrix::Identity(p, p);
    const Matrix x = rand_mat(rng, p, 1, 0.3);
    const auto r = rnn_step(params, x, zero_state(Arch::Rnn, p, 1));
    CHECK((r.state.h - tanh(x)).cwiseAbs().maxCoeff() <= 1e-15);
  }
  {
    RnnParams params = zero_rnn(1, 1);
    params.w_xh(0, 0) = 0.5;
    params.w_hh(0, 0) = -0.25;
    params.b_h[0] = 0.1;
    CellState s = zero_state(Arch::Rnn, 1, 1);
    s.h(0, 0) = 0.4;
    Matrix x(1, 1);
    x << 0.7;
    const auto r = rnn_step(params, x, s);
    CHECK(r.state.h(0, 0) ==
          doctest::Approx(std::tanh(0.5 * 0.7 + (-0.25) * 0.4 + 0.1)).epsilon(1e-12));
  }
}

TEST_CASE("mcrm equals the explicit composition, bit for bit") {
  Rng rng(31);
  const Index m = 3, p = 4;
  Rng init(77);
  const McrmParams params = init_mcrm(m, p, init);
  CellState s = random_state(Arch::Mcrm, p, 1, rng);
  const Matrix x = rand_mat(rng, m, 1);

  const auto fused = mcrm_step(params, x, s);

  // Non-fused oracle path from the public primitives.
  const Vector xv = x.col(0);
  const Vector hv = s.h.col(0);
  const Vector cv = s.c.col(0);
  Vector a_i = matvec(params.outer.w_xi, xv) + matvec(params.outer.w_hi, hv);
  a_i += params.outer.b_i;
  Vector a_f = matvec(params.outer.w_xf, xv) + matvec(params.outer.w_hf, hv);
  a_f += params.outer.b_f;
  Vector a_c = matvec(params.outer.w_xc, xv) + matvec(params.outer.w_hc, hv);
  a_c += params.outer.b_c;
  Vector a_o = matvec(params.outer.w_xo, xv) + matvec(params.outer.w_ho, hv);
  a_o += params.outer.b_o;
  const Vector i = sigmoid(a_i), f = sigmoid(a_f), g = tanh(a_c), o = sigmoid(a_o);

  const Vector x_gru = concat(hadamard(f, cv), hadamard(i, g));
  CellState inner;
  inner.h = s.inner_h;
  const auto inner_step = gru_step(params.inner, Matrix(x_gru), inner);
  const Vector c_new = inner_step.state.h.col(0);
  const Vector h_new = hadamard(o, tanh(c_new));

  CHECK(fused.state.c.col(0) == c_new);
  CHECK(fused.state.h.col(0) == h_new);
  CHECK(fused.state.inner_h == fused.state.c);
}

TEST_CASE("mcrm scalar case matches the equation chain") {
  McrmParams params = zero_mcrm(1, 1);
  for (auto* w : {&params.outer.w_xi, &params.outer.w_xf, &params.outer.w_xc,
                  &params.outer.w_xo, &params.outer.w_hi, &params.outer.w_hf,
                  &params.outer.w_hc, &params.outer.w_ho}) {
    (*w)(0, 0) = 0.4;
  }
  for (auto* b : {&params.outer.b_i, &params.outer.b_f, &params.outer.b_c, &params.outer.b_o}) {
    (*b)[0] = 0.05;
  }
  // inner GRU over the 2-long concatenated input
  params.inner.w_ir << 0.2, -0.3;
  params.inner.w_iz << 0.1, 0.25;
  params.inner.w_in << -0.15, 0.35;
  params.inner.w_hr << 0.3;
  params.inner.w_hz << -0.2;
  params.inner.w_hn << 0.15;
  for (auto* b : {&params.inner.b_ir, &params.inner.b_iz, &params.inner.b_in,
                  &params.inner.b_hr, &params.inner.b_hz, &params.inner.b_hn}) {
    (*b)[0] = 0.02;
  }

  CellState s = zero_state(Arch::Mcrm, 1, 1);
  s.h(0, 0) = 0.3;
  s.c(0, 0) = -0.2;
  s.inner_h(0, 0) = -0.2;
  Matrix x(1, 1);
  x << 0.9;

  const auto r = mcrm_step(params, x, s);

  const Real i = sig(0.4 * 0.9 + 0.4 * 0.3 + 0.05);
  const Real f = sig(0.4 * 0.9 + 0.4 * 0.3 + 0.05);
  const Real g = std::tanh(0.4 * 0.9 + 0.4 * 0.3 + 0.05);
  const Real o = sig(0.4 * 0.9 + 0.4 * 0.3 + 0.05);
  const Real xg0 = f * -0.2;  // forget interaction first
  const Real xg1 = i * g;
  const Real hg_prev = -0.2;
  const Real rg = sig(0.2 * xg0 + -0.3 * xg1 + 0.02 + 0.3 * hg_prev + 0.02);
  const Real zg = sig(0.1 * xg0 + 0.25 * xg1 + 0.02 + -0.2 * hg_prev + 0.02);
  const Real ng = std::tanh(-0.15 * xg0 + 0.35 * xg1 + 0.02 + rg * (0.15 * hg_prev + 0.02));
  const Real hg = (1.0 - zg) * hg_prev + zg * ng;
  const Real h = o * std::tanh(hg);

  CHECK(r.state.c(0, 0) == doctest::Approx(hg).epsilon(1e-12));
  CHECK(r.state.h(0, 0) == doctest::Approx(h).epsilon(1e-12));
  CHECK(r.trace.x_inner(0, 0) == doctest::Approx(xg0).epsilon(1e-12));
  CHECK(r.trace.x_inner(1, 0) == doctest::Approx(xg1).epsilon(1e-12));
}

TEST_CASE("nlstm equals the explicit composition, bit for bit") {
  Rng rng(37);
  const Index m = 2, p = 3;
  Rng init(99);
  const NlstmParams params = init_nlstm(m, p, init);
  CellState s = random_state(Arch::Nlstm, p, 1, rng);
  const Matrix x = rand_mat(rng, m, 1);

  const auto fused = nlstm_step(params, x, s);

  const Vector xv = x.col(0);
  const Vector hv = s.h.col(0);
  const Vector cv = s.c.col(0);
  Vector a_i = matvec(params.outer.w_xi, xv) + matvec(params.outer.w_hi, hv);
  a_i += params.outer.b_i;
  Vector a_f = matvec(params.outer.w_xf, xv) + matvec(params.outer.w_hf, hv);
  a_f += params.outer.b_f;
  Vector a_c = matvec(params.outer.w_xc, xv) + matvec(params.outer.w_hc, hv);
  a_c += params.outer.b_c;
  Vector a_o = matvec(params.outer.w_xo, xv) + matvec(params.outer.w_ho, hv);
  a_o += params.outer.b_o;
  const Vector i = sigmoid(a_i), f = sigmoid(a_f), g = tanh(a_c), o = sigmoid(a_o);

  const Vector x_in = concat(hadamard(f, cv), hadamard(i, g));
  CellState inner;
  inner.h = s.inner_h;
  inner.c = s.inner_c;
  const auto inner_step = lstm_step(params.inner, Matrix(x_in), inner);
  const Vector c_new = inner_step.state.h.col(0);
  const Vector h_new = hadamard(o, tanh(c_new));

  CHECK(fused.state.c.col(0) == c_new);
  CHECK(fused.state.inner_c.col(0) == inner_step.state.c.col(0));
  CHECK(fused.state.h.col(0) == h_new);
}

TEST_CASE("gate ranges and gru convexity on random instances") {
  Rng rng(41);
  for (int round = 0; round < 20; ++round) {
    const Index m = 1 + static_cast<Index>(rng.next_below(8));
    const Index p = 1 + static_cast<Index>(rng.next_below(8));
    Rng init(rng.next_u64());
    const Matrix x = rand_mat(rng, m, 2, 2.0);

    const GruParams gru = init_gru(m, p, init);
    CellState gs = random_state(Arch::Gru, p, 2, rng);
    const auto gr = gru_step(gru, x, gs);
    CHECK(((gr.trace.gru.r.array() > 0.0) && (gr.trace.gru.r.array() < 1.0)).all());
    CHECK(((gr.trace.gru.z.array() > 0.0) && (gr.trace.gru.z.array() < 1.0)).all());
    CHECK(((gr.trace.gru.n.array() > -1.0) && (gr.trace.gru.n.array() < 1.0)).all());
    // h_t is an elementwise convex combination of h_{t-1} and n_t
    const Matrix lo = gs.h.cwiseMin(gr.trace.gru.n);
    const Matrix hi = gs.h.cwiseMax(gr.trace.gru.n);
    CHECK(((gr.state.h - lo).array() >= -1e-12).all());
    CHECK(((hi - gr.state.h).array() >= -1e-12).all());

    const LstmParams lstm = init_lstm(m, p, init);
    const auto lr = lstm_step(lstm, x, random_state(Arch::Lstm, p, 2, rng));
    for (const Matrix* gate : {&lr.trace.outer.i, &lr.trace.outer.f, &lr.trace.outer.o}) {
      CHECK(((gate->array() > 0.0) && (gate->array() < 1.0)).all());
    }
    CHECK(((lr.trace.outer.g.array() > -1.0) && (lr.trace.outer.g.array() < 1.0)).all());

    const McrmParams mcrm = init_mcrm(m, p, init);
    CellState ms = random_state(Arch::Mcrm, p, 2, rng);
    const auto mr = mcrm_step(mcrm, x, ms);
    CHECK(mr.state.c == mr.state.inner_h);
    // the inner state inherits the convexity property
    const Matrix mlo = ms.inner_h.cwiseMin(mr.trace.gru.n);
    const Matrix mhi = ms.inner_h.cwiseMax(mr.trace.gru.n);
    CHECK(((mr.state.inner_h - mlo).array() >= -1e-12).all());
    CHECK(((mhi - mr.state.inner_h).array() >= -1e-12).all());
  }
}

TEST_CASE("step rejects mismatched shapes") {
  const LstmParams params = zero_lstm(3, 4);
  CellState s = zero_state(Arch::Lstm, 4, 1);
  CHECK_THROWS_AS(lstm_step(params, Matrix::Zero(2, 1), s), std::invalid_argument);
  CellState bad = zero_state(Arch::Lstm, 5, 1);
  CHECK_THROWS_AS(lstm_step(params, Matrix::Zero(3, 1), bad), std::invalid_argument);
}

TEST_CASE("init is seed-deterministic and bounded") {
  Rng a(5), b(5);
  const LstmParams pa = init_lstm(4, 6, a);
  const LstmParams pb = init_lstm(4, 6, b);
  CHECK(pa.w_xi == pb.w_xi);
  CHECK(pa.w_ho == pb.w_ho);
  CHECK(pa.b_c == pb.b_c);

  const Real bound = 1.0 / std::sqrt(6.0);
  for (const Matrix* w : {&pa.w_xi, &pa.w_hi, &pa.w_xf, &pa.w_hf}) {
    CHECK(w->minCoeff() >= -bound);
    CHECK(w->maxCoeff() < bound);
  }

  // large-sample mean of uniform(-1/sqrt(p), 1/sqrt(p)) entries
  Rng big(12);
  const Real mean = rand_uniform(big, -1.0 / 100.0, 1.0 / 100.0, 10000).mean();
  CHECK(std::abs(mean) <= 1e-3);
}

TEST_CASE("count_params formulas and table anchors") {
  CHECK(count_params(Arch::Rnn, 2, 308, 1) == 95788 + 308 + 1);
  CHECK(count_params(Arch::Gru, 2, 177, 1) == 96111 + 177 + 1);
  CHECK(count_params(Arch::Lstm, 2, 153, 1) == 95472 + 153 + 1);
  CHECK(count_params(Arch::Mcrm, 2, 85, 1) == 95541);
  const auto nlstm = count_params(Arch::Nlstm, 2, 77, 1);
  CHECK(std::abs(static_cast<Real>(nlstm) - 95000.0) / 95000.0 <= 0.02);

  for (const auto arch : all_archs()) {
    const Real count = static_cast<Real>(
        count_params(arch, 2, arch == Arch::Rnn    ? 308
                              : arch == Arch::Gru  ? 177
                              : arch == Arch::Lstm ? 153
                              : arch == Arch::Nlstm ? 77
                                                    : 85,
                     1));
    CHECK(std::abs(count - 95000.0) / 95000.0 <= 0.03);
  }
}

TEST_CASE("count_params equals the flattened record length") {
  for (const auto arch : all_archs()) {
    for (const Index m : {1, 2, 5}) {
      for (const Index p : {1, 3, 8}) {
        for (const Index out : {1, 4}) {
          const Model model = zero_model(arch, m, p, out);
          CHECK(count_params(arch, m, p, out) == model.param_count());
        }
      }
    }
  }
}

TEST_CASE("count_params rejects unknown architectures") {
  CHECK_THROWS_AS(parse_arch("transformer"), std::invalid_argument);
}

TEST_CASE("published widths track the reported model sizes") {
  struct Row {
    Index m, out;
    Real size;
    Real tolerance;
    Index widths[5];  // rnn, gru, lstm, nlstm, mcrm
  };
  // adding and copy rows as published; the sequential-image row with the
  // nested-cell widths paired to the size target (97 <-> 108).
  const Row rows[] = {
      {2, 1, 95000.0, 0.03, {308, 177, 153, 77, 85}},
      {10, 10, 3300000.0, 0.03, {1800, 1050, 900, 448, 500}},
      {1, 10, 152000.0, 0.05, {384, 222, 192, 97, 108}},
  };
  const Arch order[] = {Arch::Rnn, Arch::Gru, Arch::Lstm, Arch::Nlstm, Arch::Mcrm};
  for (const auto& row : rows) {
    for (int k = 0; k < 5; ++k) {
      const Real count = static_cast<Real>(count_params(order[k], row.m, row.widths[k], row.out));
      CHECK(std::abs(count - row.size) / row.size <= row.tolerance);
    }
  }
}
