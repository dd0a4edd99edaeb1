#include "mcrm/grad.hpp"

#include <doctest.h>

#include <cmath>

using namespace mcrm;

namespace {

BatchInputs random_dense(Rng& rng, Index steps, Index m, Index batch) {
  BatchInputs in;
  for (Index t = 0; t < steps; ++t) {
    in.dense.push_back(rand_uniform_matrix(rng, -1.0, 1.0, m, batch));
  }
  return in;
}

BatchTargets random_targets(Rng& rng, LossKind kind, Index steps, Index out, Index batch) {
  BatchTargets tg;
  switch (kind) {
    case LossKind::MseLast:
      tg.regression = rand_uniform_matrix(rng, -1.0, 1.0, out, batch);
      break;
    case LossKind::CeLast:
      for (Index b = 0; b < batch; ++b) {
        tg.labels.push_back(static_cast<std::int32_t>(rng.next_below(out)));
      }
      break;
    case LossKind::CeAll:
      for (Index t = 0; t < steps; ++t) {
        std::vector<std::int32_t> row;
        for (Index b = 0; b < batch; ++b) {
          row.push_back(static_cast<std::int32_t>(rng.next_below(out)));
        }
        tg.step_labels.push_back(std::move(row));
      }
      break;
  }
  return tg;
}

BatchInputs slice(const BatchInputs& in, Index from, Index to) {
  BatchInputs out;
  for (const auto& x : in.dense) {
    out.dense.push_back(x.middleCols(from, to - from));
  }
  return out;
}

BatchTargets slice(const BatchTargets& tg, LossKind kind, Index from, Index to) {
  BatchTargets out;
  if (kind == LossKind::MseLast) {
    out.regression = tg.regression.middleCols(from, to - from);
  } else if (kind == LossKind::CeLast) {
    out.labels.assign(tg.labels.begin() + from, tg.labels.begin() + to);
  } else {
    for (const auto& row : tg.step_labels) {
      out.step_labels.emplace_back(row.begin() + from, row.begin() + to);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("central difference recovers an analytic derivative") {
  // Readout bias at 3 with zero weights and zero target: the loss is b^2,
  // so the derivative is exactly 6.
  Model model = zero_model(Arch::Rnn, 1, 1, 1);
  model.b_out[0] = 3.0;
  BatchInputs in;
  in.dense.push_back(Matrix::Zero(1, 1));
  BatchTargets tg;
  tg.regression = Matrix::Zero(1, 1);
  const TensorSet fd = finite_diff_grad(model, in, tg, LossKind::MseLast, 1e-5);
  const auto views = tensor_views(model);
  bool checked = false;
  for (Index i = 0; i < fd.count(); ++i) {
    if (views[static_cast<std::size_t>(i)].name == "b_out") {
      CHECK(std::abs(fd[i](0, 0) - 6.0) <= 1e-8);
      checked = true;
    }
  }
  CHECK(checked);
}

TEST_CASE("finite differences reject eps outside the stated window") {
  Model model = zero_model(Arch::Rnn, 1, 1, 1);
  BatchInputs in;
  in.dense.push_back(Matrix::Zero(1, 1));
  BatchTargets tg;
  tg.regression = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(finite_diff_grad(model, in, tg, LossKind::MseLast, 1e-8),
                  std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_grad(model, in, tg, LossKind::MseLast, 1e-2),
                  std::invalid_argument);
}

TEST_CASE("truncation error shrinks with eps") {
  Rng rng(404);
  Rng init(405);
  const Model model = init_model(Arch::Gru, 2, 3, 2, 0, init);
  const BatchInputs in = random_dense(rng, 3, 2, 1);
  const BatchTargets tg = random_targets(rng, LossKind::CeLast, 3, 2, 1);
  const TensorSet exact = backprop_sequence(model, in, tg, LossKind::CeLast).grads;
  const TensorSet coarse = finite_diff_grad(model, in, tg, LossKind::CeLast, 1e-3);
  const TensorSet fine = finite_diff_grad(model, in, tg, LossKind::CeLast, 1e-5);
  CHECK(max_relative_error(coarse, exact) > max_relative_error(fine, exact));
}

TEST_CASE("backprop matches finite differences everywhere") {
  const Index m = 3, p = 4, steps = 5, batch = 2, out = 3;
  const LossKind kinds[] = {LossKind::MseLast, LossKind::CeLast, LossKind::CeAll};
  for (const auto arch : all_archs()) {
    for (const auto kind : kinds) {
      for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        CAPTURE(arch_name(arch));
        CAPTURE(static_cast<int>(kind));
        CAPTURE(seed);
        Rng init(seed * 1315423911ull + 7);
        const Model model = init_model(arch, m, p, out, 0, init);
        Rng rng(seed);
        const BatchInputs in = random_dense(rng, steps, m, batch);
        const BatchTargets tg = random_targets(rng, kind, steps, out, batch);
        const BackpropResult bp = backprop_sequence(model, in, tg, kind);
        const TensorSet fd = finite_diff_grad(model, in, tg, kind, 1e-5);
        CHECK(max_relative_error(bp.grads, fd) <= 1e-5);
        CHECK(bp.loss == sequence_loss(model, in, tg, kind));
      }
    }
  }
}

TEST_CASE("backprop matches finite differences through the embedding") {
  const Index vocab = 6, emb = 3, p = 4, steps = 4, batch = 2;
  for (const auto arch : {Arch::Gru, Arch::Mcrm}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      Rng init(seed + 17);
      const Model model = init_model(arch, emb, p, vocab, vocab, init);
      Rng rng(seed * 31);
      BatchInputs in;
      BatchTargets tg;
      for (Index t = 0; t < steps; ++t) {
        std::vector<std::int32_t> ids, labels;
        for (Index b = 0; b < batch; ++b) {
          ids.push_back(static_cast<std::int32_t>(rng.next_below(vocab)));
          labels.push_back(static_cast<std::int32_t>(rng.next_below(vocab)));
        }
        in.tokens.push_back(std::move(ids));
        tg.step_labels.push_back(std::move(labels));
      }
      const BackpropResult bp = backprop_sequence(model, in, tg, LossKind::CeAll);
      const TensorSet fd = finite_diff_grad(model, in, tg, LossKind::CeAll, 1e-5);
      CHECK(max_relative_error(bp.grads, fd) <= 1e-5);
    }
  }
}

TEST_CASE("recurrent weight gradients vanish exactly at T=1 from a zero state") {
  Rng rng(88);
  for (const auto arch : all_archs()) {
    Rng init(rng.next_u64());
    const Model model = init_model(arch, 3, 4, 2, 0, init);
    const BatchInputs in = random_dense(rng, 1, 3, 2);
    const BatchTargets tg = random_targets(rng, LossKind::CeLast, 1, 2, 2);
    const BackpropResult bp = backprop_sequence(model, in, tg, LossKind::CeLast);
    const auto views = tensor_views(model);
    for (Index i = 0; i < bp.grads.count(); ++i) {
      const auto& name = views[static_cast<std::size_t>(i)].name;
      if (name.find("w_h") != std::string::npos) {
        CAPTURE(arch_name(arch));
        CAPTURE(name);
        CHECK(bp.grads[i].isZero(0.0));
      }
    }
  }
}

TEST_CASE("a duplicated sequence doubles every gradient exactly") {
  Rng rng(99);
  for (const auto arch : all_archs()) {
    Rng init(rng.next_u64());
    const Model model = init_model(arch, 3, 4, 2, 0, init);
    const BatchInputs single = random_dense(rng, 4, 3, 1);
    BatchInputs doubled;
    for (const auto& x : single.dense) {
      Matrix both(3, 2);
      both.col(0) = x.col(0);
      both.col(1) = x.col(0);
      doubled.dense.push_back(both);
    }
    BatchTargets tg_single = random_targets(rng, LossKind::MseLast, 4, 2, 1);
    BatchTargets tg_double;
    tg_double.regression = Matrix(2, 2);
    tg_double.regression.col(0) = tg_single.regression.col(0);
    tg_double.regression.col(1) = tg_single.regression.col(0);

    const auto one = backprop_sequence(model, single, tg_single, LossKind::MseLast);
    const auto two = backprop_sequence(model, doubled, tg_double, LossKind::MseLast);
    CHECK(two.loss == 2.0 * one.loss);
    for (Index i = 0; i < one.grads.count(); ++i) {
      CHECK(two.grads[i] == 2.0 * one.grads[i]);
    }
  }
}

TEST_CASE("batch splitting sums to the whole-batch gradient") {
  Rng rng(123);
  Rng init(124);
  const Model model = init_model(Arch::Mcrm, 3, 4, 2, 0, init);
  const Index batch = 4;
  const BatchInputs in = random_dense(rng, 5, 3, batch);
  const BatchTargets tg = random_targets(rng, LossKind::CeAll, 5, 2, batch);

  const auto whole = backprop_sequence(model, in, tg, LossKind::CeAll);
  TensorSet summed(model);
  Real loss = 0.0;
  for (Index b = 0; b < batch; ++b) {
    const auto part = backprop_sequence(model, slice(in, b, b + 1),
                                        slice(tg, LossKind::CeAll, b, b + 1), LossKind::CeAll);
    summed.add(part.grads);
    loss += part.loss;
  }
  CHECK(std::abs(loss - whole.loss) <= 1e-12 * std::abs(whole.loss));
  CHECK(max_relative_error(summed, whole.grads) <= 1e-12);
}

TEST_CASE("backward never mutates parameters or inputs") {
  Rng rng(321);
  Rng init(322);
  const Model model = init_model(Arch::Nlstm, 3, 4, 2, 0, init);
  const Model before = model;
  const BatchInputs in = random_dense(rng, 4, 3, 2);
  const BatchInputs in_before = in;
  const BatchTargets tg = random_targets(rng, LossKind::CeAll, 4, 2, 2);
  (void)backprop_sequence(model, in, tg, LossKind::CeAll);
  const auto a = tensor_views(model);
  const auto b = tensor_views(before);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].map() == b[i].map());
  }
  for (std::size_t t = 0; t < in.dense.size(); ++t) {
    CHECK(in.dense[t] == in_before.dense[t]);
  }
}

TEST_CASE("a non-finite loss names the offending timestep") {
  Model model = zero_model(Arch::Lstm, 2, 3, 1);
  model.b_out[0] = 1e200;  // squaring overflows the regression loss
  BatchInputs in;
  in.dense.push_back(Matrix::Zero(2, 1));
  BatchTargets tg;
  tg.regression = Matrix::Zero(1, 1);
  CHECK_THROWS_WITH_AS(backprop_sequence(model, in, tg, LossKind::MseLast),
                       "non-finite loss at timestep 0", NumericalDivergence);
}

TEST_CASE("tape replay reproduces every stored activation") {
  Rng rng(555);
  Rng init(556);
  const Model model = init_model(Arch::Mcrm, 3, 4, 2, 0, init);
  const BatchInputs in = random_dense(rng, 6, 3, 2);
  const Tape first = run_forward(model, in, LossKind::CeAll);
  const Tape second = run_forward(model, in, LossKind::CeAll);
  REQUIRE(first.traces.size() == second.traces.size());
  for (std::size_t t = 0; t < first.traces.size(); ++t) {
    CHECK(first.traces[t].outer.i == second.traces[t].outer.i);
    CHECK(first.traces[t].gru.n == second.traces[t].gru.n);
    CHECK(first.traces[t].x_inner == second.traces[t].x_inner);
    CHECK(first.states[t + 1].h == second.states[t + 1].h);
    CHECK(first.logits[t] == second.logits[t]);
  }
}
