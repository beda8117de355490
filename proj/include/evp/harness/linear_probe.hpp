#pragma once

#include "evp/backbone.hpp"
#include "evp/harness/config.hpp"
#include "evp/harness/dataset.hpp"
#include "evp/harness/metrics.hpp"

namespace evp::harness {

struct LinearProbeOptions {
  int iterations = 300;
  double learning_rate = 0.5;
  double weight_decay = 1e-4;
};

// Softmax regression on frozen, promptless backbone features.
struct LinearProbe {
  Matrix weight;  // feature_dim x num_classes
  Vector bias;
  Vector feature_mean;
  Vector feature_scale;

  Vector logits(const Vector& feature) const;
};

LinearProbe fit_linear_probe(const Backbone& backbone, const Dataset& train, const DatasetSpec& spec,
                             const LinearProbeOptions& options = {});
MetricsRecord evaluate_linear_probe(const Backbone& backbone, const LinearProbe& probe,
                                    const Dataset& dataset, const DatasetSpec& spec);

// Frozen backbone with its own head and no learned parameters.
MetricsRecord evaluate_zero_shot(const Backbone& backbone, const Dataset& dataset, const DatasetSpec& spec);

}  // namespace evp::harness
