#pragma once

// Loss and evaluation metrics. Cross-entropy is kept in nats as the one
// canonical training loss; bpc and ppl are derived at the reporting
// boundary. Metric names appear in CSV/CLI output as the lowercase tokens
// mse, ce, bpc, ppl, acc.

#include "mcrm/numkit.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace mcrm {

struct EvalReport {
  std::string metric;
  Real value = 0.0;
  std::int64_t sample_count = 0;
  std::string split;
};

Real mse(const Vector& pred, const Vector& target);

// logits: one column of K class scores per position; targets: one class id
// per position. Mean over positions of -log softmax(logits)[target],
// stabilized by max subtraction. A target id outside [0, K) is a hard error.
Real cross_entropy(const Matrix& logits, const std::vector<std::int32_t>& targets);

inline Real bpc(Real ce_loss_nats) { return ce_loss_nats / std::log(2.0); }
inline Real ppl(Real ce_loss_nats) { return std::exp(ce_loss_nats); }

// Fraction of columns whose argmax equals the label; ties break toward the
// lowest class index.
Real accuracy(const Matrix& logits, const std::vector<std::int32_t>& labels);

// Training-side helper: summed stabilized cross-entropy over the given
// columns, with the softmax-minus-onehot gradient scaled by grad_scale
// written to *dlogits when non-null.
Real softmax_ce_sum(const Matrix& logits, const std::int32_t* labels, Index n,
                    Matrix* dlogits, Real grad_scale);

}  // namespace mcrm
