#include "evp/harness/linear_probe.hpp"

#include <cmath>

#include "evp/errors.hpp"
#include "evp/loss.hpp"

namespace evp::harness {

namespace {

Matrix feature_matrix(const Backbone& backbone, const Dataset& dataset, const DatasetSpec& spec) {
  Matrix f(static_cast<Eigen::Index>(dataset.samples.size()), backbone.config().feature_dim);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    f.row(static_cast<Eigen::Index>(i)) =
        backbone.features(normalize(dataset.samples[i].image, spec.mean, spec.stddev)).transpose();
  }
  return f;
}

MetricsRecord score(const Dataset& dataset, const std::function<Vector(std::size_t)>& logits_of) {
  MetricsRecord r;
  r.split = "eval";
  long correct = 0;
  double loss = 0.0;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Vector logits = logits_of(i);
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    correct += best == dataset.samples[i].label ? 1 : 0;
    loss += cross_entropy(logits, dataset.samples[i].label).loss;
  }
  const double n = std::max<std::size_t>(dataset.samples.size(), 1);
  r.loss = loss / n;
  r.top1 = correct / n;
  return r;
}

}  // namespace

Vector LinearProbe::logits(const Vector& feature) const {
  const Vector z = (feature - feature_mean).cwiseQuotient(feature_scale);
  return weight.transpose() * z + bias;
}

LinearProbe fit_linear_probe(const Backbone& backbone, const Dataset& train, const DatasetSpec& spec,
                             const LinearProbeOptions& options) {
  if (train.samples.empty()) throw Error(ErrorKind::kInvalidDataset, "linear probe needs training data");
  const Matrix f = feature_matrix(backbone, train, spec);
  const auto n = f.rows();
  const int classes = train.num_classes;

  LinearProbe probe;
  probe.feature_mean = f.colwise().mean().transpose();
  const Matrix centered = f.rowwise() - probe.feature_mean.transpose();
  probe.feature_scale = (centered.array().square().colwise().sum() / static_cast<double>(n))
                            .sqrt()
                            .transpose()
                            .cwiseMax(1e-8);
  const Matrix z = centered.array().rowwise() / probe.feature_scale.transpose().array();

  probe.weight = Matrix::Zero(f.cols(), classes);
  probe.bias = Vector::Zero(classes);
  Matrix onehot = Matrix::Zero(n, classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train.samples[i].label) = 1.0;

  // Full-batch gradient descent; the objective is convex so zero init is fine.
  for (int it = 0; it < options.iterations; ++it) {
    Matrix logits = (z * probe.weight).rowwise() + probe.bias.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      const double m = logits.row(i).maxCoeff();
      logits.row(i) = (logits.row(i).array() - m).exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Matrix d = (logits - onehot) / static_cast<double>(n);
    probe.weight -= options.learning_rate * (z.transpose() * d + options.weight_decay * probe.weight);
    probe.bias -= options.learning_rate * d.colwise().sum().transpose();
  }
  return probe;
}

MetricsRecord evaluate_linear_probe(const Backbone& backbone, const LinearProbe& probe,
                                    const Dataset& dataset, const DatasetSpec& spec) {
  const Matrix f = feature_matrix(backbone, dataset, spec);
  return score(dataset, [&](std::size_t i) {
    return probe.logits(f.row(static_cast<Eigen::Index>(i)).transpose());
  });
}

MetricsRecord evaluate_zero_shot(const Backbone& backbone, const Dataset& dataset, const DatasetSpec& spec) {
  if (dataset.num_classes > backbone.config().num_classes) {
    throw Error(ErrorKind::kCapacity, "dataset has more classes than the backbone head");
  }
  return score(dataset, [&](std::size_t i) {
    const Vector logits = backbone.forward(normalize(dataset.samples[i].image, spec.mean, spec.stddev));
    return Vector(logits.head(dataset.num_classes));
  });
}

}  // namespace evp::harness
