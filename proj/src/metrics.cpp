#include "mcrm/metrics.hpp"

#include <stdexcept>

namespace mcrm {

Real mse(const Vector& pred, const Vector& target) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("mse: length mismatch: " + std::to_string(pred.size()) +
                                " vs " + std::to_string(target.size()));
  }
  if (pred.size() == 0) {
    throw std::invalid_argument("mse: empty vectors");
  }
  return (pred - target).squaredNorm() / static_cast<Real>(pred.size());
}

Real softmax_ce_sum(const Matrix& logits, const std::int32_t* labels, Index n,
                    Matrix* dlogits, Real grad_scale) {
  const Index k = logits.rows();
  Real total = 0.0;
  for (Index j = 0; j < n; ++j) {
    const std::int32_t label = labels[j];
    if (label < 0 || label >= k) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(label) +
                                  " out of range for " + std::to_string(k) + " classes");
    }
    const auto col = logits.col(j);
    const Real peak = col.maxCoeff();
    const Vector shifted_exp = (col.array() - peak).exp();
    const Real denom = shifted_exp.sum();
    total += -(col[label] - peak - std::log(denom));
    if (dlogits != nullptr) {
      Vector soft = shifted_exp / denom;
      soft[label] -= 1.0;
      dlogits->col(j) += grad_scale * soft;
    }
  }
  return total;
}

Real cross_entropy(const Matrix& logits, const std::vector<std::int32_t>& targets) {
  if (static_cast<Index>(targets.size()) != logits.cols()) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(logits.cols()) +
                                " logit columns vs " + std::to_string(targets.size()) +
                                " targets");
  }
  if (targets.empty()) {
    throw std::invalid_argument("cross_entropy: no positions");
  }
  const Real total = softmax_ce_sum(logits, targets.data(),
                                    static_cast<Index>(targets.size()), nullptr, 0.0);
  return total / static_cast<Real>(targets.size());
}

Real accuracy(const Matrix& logits, const std::vector<std::int32_t>& labels) {
  if (static_cast<Index>(labels.size()) != logits.cols()) {
    throw std::invalid_argument("accuracy: " + std::to_string(logits.cols()) +
                                " logit columns vs " + std::to_string(labels.size()) +
                                " labels");
  }
  if (labels.empty()) {
    throw std::invalid_argument("accuracy: no samples");
  }
  std::int64_t hits = 0;
  for (Index j = 0; j < logits.cols(); ++j) {
    Index best = 0;
    // maxCoeff keeps the first (lowest-index) maximum.
    logits.col(j).maxCoeff(&best);
    if (best == static_cast<Index>(labels[static_cast<std::size_t>(j)])) ++hits;
  }
  return static_cast<Real>(hits) / static_cast<Real>(labels.size());
}

}  // namespace mcrm
