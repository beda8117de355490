#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

namespace evp {

struct SoftTarget {
  int label = 0;
  double weight = 1.0;
};

struct LossValue {
  double loss = 0.0;
  Eigen::VectorXd dlogits;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

// Weighted sum of per-target cross-entropies, sum_i w_i * -log p(label_i),
// with its gradient with respect to the logits.
LossValue cross_entropy(const Eigen::VectorXd& logits, std::span<const SoftTarget> targets);
LossValue cross_entropy(const Eigen::VectorXd& logits, int label);

}  // namespace evp
