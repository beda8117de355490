#include "evp/loss.hpp"

#include <cmath>
#include <string>

#include "evp/errors.hpp"

namespace evp {

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double shift = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - shift).exp();
  return p / p.sum();
}

LossValue cross_entropy(const Eigen::VectorXd& logits, std::span<const SoftTarget> targets) {
  if (logits.size() == 0) throw Error(ErrorKind::kShape, "empty logit vector");
  const double shift = logits.maxCoeff();
  const double log_z = shift + std::log((logits.array() - shift).exp().sum());

  LossValue out;
  out.dlogits = Eigen::VectorXd::Zero(logits.size());
  double total_weight = 0.0;
  for (const SoftTarget& t : targets) {
    if (t.label < 0 || t.label >= logits.size()) {
      throw Error(ErrorKind::kInvalidInput, "label " + std::to_string(t.label) + " out of range");
    }
    out.loss += t.weight * (log_z - logits[t.label]);
    out.dlogits[t.label] -= t.weight;
    total_weight += t.weight;
  }
  out.dlogits += total_weight * (logits.array() - log_z).exp().matrix();
  return out;
}

LossValue cross_entropy(const Eigen::VectorXd& logits, int label) {
  const SoftTarget t{label, 1.0};
  return cross_entropy(logits, std::span<const SoftTarget>(&t, 1));
}

}  // namespace evp
