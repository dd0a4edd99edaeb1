#include "mcrm/model.hpp"

#include <stdexcept>

namespace mcrm {

namespace {

// Single enumeration routine so mutable refs, const views, and the init
// draw order can never drift apart.
template <typename ModelT, typename Fn>
void walk_tensors(ModelT& model, Fn&& visit) {
  auto mat = [&](const char* name, auto& m) { visit(name, m.data(), m.rows(), m.cols()); };
  auto vec = [&](const char* name, auto& v) { visit(name, v.data(), v.size(), Index{1}); };

  auto lstm = [&](const char* prefix, auto& p) {
    const std::string s(prefix);
    visit(s + "w_xi", p.w_xi.data(), p.w_xi.rows(), p.w_xi.cols());
    visit(s + "w_hi", p.w_hi.data(), p.w_hi.rows(), p.w_hi.cols());
    visit(s + "b_i", p.b_i.data(), p.b_i.size(), Index{1});
    visit(s + "w_xf", p.w_xf.data(), p.w_xf.rows(), p.w_xf.cols());
    visit(s + "w_hf", p.w_hf.data(), p.w_hf.rows(), p.w_hf.cols());
    visit(s + "b_f", p.b_f.data(), p.b_f.size(), Index{1});
    visit(s + "w_xc", p.w_xc.data(), p.w_xc.rows(), p.w_xc.cols());
    visit(s + "w_hc", p.w_hc.data(), p.w_hc.rows(), p.w_hc.cols());
    visit(s + "b_c", p.b_c.data(), p.b_c.size(), Index{1});
    visit(s + "w_xo", p.w_xo.data(), p.w_xo.rows(), p.w_xo.cols());
    visit(s + "w_ho", p.w_ho.data(), p.w_ho.rows(), p.w_ho.cols());
    visit(s + "b_o", p.b_o.data(), p.b_o.size(), Index{1});
  };
  auto gru = [&](const char* prefix, auto& p) {
    const std::string s(prefix);
    visit(s + "w_ir", p.w_ir.data(), p.w_ir.rows(), p.w_ir.cols());
    visit(s + "w_hr", p.w_hr.data(), p.w_hr.rows(), p.w_hr.cols());
    visit(s + "b_ir", p.b_ir.data(), p.b_ir.size(), Index{1});
    visit(s + "b_hr", p.b_hr.data(), p.b_hr.size(), Index{1});
    visit(s + "w_iz", p.w_iz.data(), p.w_iz.rows(), p.w_iz.cols());
    visit(s + "w_hz", p.w_hz.data(), p.w_hz.rows(), p.w_hz.cols());
    visit(s + "b_iz", p.b_iz.data(), p.b_iz.size(), Index{1});
    visit(s + "b_hz", p.b_hz.data(), p.b_hz.size(), Index{1});
    visit(s + "w_in", p.w_in.data(), p.w_in.rows(), p.w_in.cols());
    visit(s + "w_hn", p.w_hn.data(), p.w_hn.rows(), p.w_hn.cols());
    visit(s + "b_in", p.b_in.data(), p.b_in.size(), Index{1});
    visit(s + "b_hn", p.b_hn.data(), p.b_hn.size(), Index{1});
  };

  std::visit(
      [&](auto& cell) {
        using T = std::decay_t<decltype(cell)>;
        if constexpr (std::is_same_v<T, RnnParams>) {
          mat("w_xh", cell.w_xh);
          mat("w_hh", cell.w_hh);
          vec("b_h", cell.b_h);
        } else if constexpr (std::is_same_v<T, GruParams>) {
          gru("", cell);
        } else if constexpr (std::is_same_v<T, LstmParams>) {
          lstm("", cell);
        } else if constexpr (std::is_same_v<T, NlstmParams>) {
          lstm("outer.", cell.outer);
          lstm("inner.", cell.inner);
        } else {
          lstm("outer.", cell.outer);
          gru("inner.", cell.inner);
        }
      },
      model.cell);

  if (model.vocab > 0) {
    mat("embedding", model.embedding);
  }
  mat("w_out", model.w_out);
  vec("b_out", model.b_out);
}

}  // namespace

std::vector<TensorRef> tensor_refs(Model& model) {
  std::vector<TensorRef> out;
  walk_tensors(model, [&](std::string name, Real* data, Index rows, Index cols) {
    out.push_back(TensorRef{std::move(name), data, rows, cols});
  });
  return out;
}

std::vector<TensorView> tensor_views(const Model& model) {
  std::vector<TensorView> out;
  walk_tensors(model, [&](std::string name, const Real* data, Index rows, Index cols) {
    out.push_back(TensorView{std::move(name), data, rows, cols});
  });
  return out;
}

std::int64_t Model::param_count() const {
  std::int64_t total = 0;
  for (const auto& t : tensor_views(*this)) total += t.size();
  return total;
}

StepResult Model::step(const Matrix& x, const CellState& s) const {
  return std::visit([&](const auto& cell_params) -> StepResult {
    using T = std::decay_t<decltype(cell_params)>;
    if constexpr (std::is_same_v<T, RnnParams>) return rnn_step(cell_params, x, s);
    else if constexpr (std::is_same_v<T, GruParams>) return gru_step(cell_params, x, s);
    else if constexpr (std::is_same_v<T, LstmParams>) return lstm_step(cell_params, x, s);
    else if constexpr (std::is_same_v<T, NlstmParams>) return nlstm_step(cell_params, x, s);
    else return mcrm_step(cell_params, x, s);
  }, cell);
}

Matrix Model::readout(const Matrix& h) const {
  Matrix y = w_out * h;
  y.colwise() += b_out;
  return y;
}

Model init_model(Arch arch, Index input_dim, Index hidden, Index output_dim, Index vocab,
                 Rng& rng) {
  if (input_dim < 1 || hidden < 1 || output_dim < 1) {
    throw std::invalid_argument("init_model: dimensions must be >= 1");
  }
  Model model;
  model.arch = arch;
  model.input_dim = input_dim;
  model.hidden = hidden;
  model.output_dim = output_dim;
  model.vocab = vocab;

  switch (arch) {
    case Arch::Rnn: model.cell = init_rnn(input_dim, hidden, rng); break;
    case Arch::Gru: model.cell = init_gru(input_dim, hidden, rng); break;
    case Arch::Lstm: model.cell = init_lstm(input_dim, hidden, rng); break;
    case Arch::Nlstm: model.cell = init_nlstm(input_dim, hidden, rng); break;
    case Arch::Mcrm: model.cell = init_mcrm(input_dim, hidden, rng); break;
  }

  const Real bound = 1.0 / std::sqrt(static_cast<Real>(hidden));
  if (vocab > 0) {
    model.embedding = rand_uniform_matrix(rng, -bound, bound, vocab, input_dim);
  } else {
    model.embedding.resize(0, 0);
  }
  model.w_out = rand_uniform_matrix(rng, -bound, bound, output_dim, hidden);
  model.b_out = rand_uniform(rng, -bound, bound, output_dim);
  return model;
}

Model zero_model(Arch arch, Index input_dim, Index hidden, Index output_dim, Index vocab) {
  if (input_dim < 1 || hidden < 1 || output_dim < 1) {
    throw std::invalid_argument("zero_model: dimensions must be >= 1");
  }
  Model model;
  model.arch = arch;
  model.input_dim = input_dim;
  model.hidden = hidden;
  model.output_dim = output_dim;
  model.vocab = vocab;
  switch (arch) {
    case Arch::Rnn: model.cell = zero_rnn(input_dim, hidden); break;
    case Arch::Gru: model.cell = zero_gru(input_dim, hidden); break;
    case Arch::Lstm: model.cell = zero_lstm(input_dim, hidden); break;
    case Arch::Nlstm: model.cell = zero_nlstm(input_dim, hidden); break;
    case Arch::Mcrm: model.cell = zero_mcrm(input_dim, hidden); break;
  }
  model.embedding = vocab > 0 ? Matrix::Zero(vocab, input_dim) : Matrix();
  model.w_out = Matrix::Zero(output_dim, hidden);
  model.b_out = Vector::Zero(output_dim);
  return model;
}

TensorSet::TensorSet(const Model& shape_like) {
  for (const auto& t : tensor_views(shape_like)) {
    items_.emplace_back(Matrix::Zero(t.rows, t.cols));
  }
}

void TensorSet::set_zero() {
  for (auto& m : items_) m.setZero();
}

void TensorSet::add(const TensorSet& other) {
  if (other.items_.size() != items_.size()) {
    throw std::invalid_argument("TensorSet::add: mismatched tensor counts");
  }
  for (std::size_t i = 0; i < items_.size(); ++i) items_[i] += other.items_[i];
}

void TensorSet::scale(Real factor) {
  for (auto& m : items_) m *= factor;
}

Real TensorSet::squared_norm() const {
  Real total = 0.0;
  for (const auto& m : items_) total += m.squaredNorm();
  return total;
}

bool TensorSet::all_finite() const {
  for (const auto& m : items_) {
    if (!m.allFinite()) return false;
  }
  return true;
}

std::int64_t TensorSet::size() const {
  std::int64_t total = 0;
  for (const auto& m : items_) total += m.size();
  return total;
}

}  // namespace mcrm
