#pragma once
// Reference implementations used only by tests. Each is written from the
// definition, independent of the library code it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "evp/backbone.hpp"
#include "evp/image.hpp"

namespace oracle {

inline evp::Image random_image(int h, int w, int c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  evp::Image img(h, w, c);
  for (double& v : img.values()) v = n(rng);
  return img;
}

// Sum of mask entries by counting pixels outside the centred k x k block.
inline long mask_ones(int K, int k, int c) {
  const int off = (K - k) / 2;
  long n = 0;
  for (int y = 0; y < K; ++y) {
    for (int x = 0; x < K; ++x) {
      const bool inside = y >= off && y < off + k && x >= off && x < off + k;
      if (!inside) n += c;
    }
  }
  return n;
}

// Central differences of f with respect to every entry of x.
inline std::vector<double> finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                             std::vector<double> x, double eps) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = f(x);
    x[i] = saved - eps;
    const double down = f(x);
    x[i] = saved;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double nll(const Eigen::VectorXd& logits, int label) {
  const double m = logits.maxCoeff();
  double s = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) s += std::exp(logits[i] - m);
  return -(logits[label] - m - std::log(s));
}

// Max over entries of |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Frequency-vote assignment, re-derived: counts predictions per class, then
// repeatedly picks the (class, pretrained) pair with the largest count among
// unassigned classes and unclaimed pretrained indices, preferring classes
// whose overall best count is highest. Returns assignment.
inline std::vector<int> unique_greedy(const std::vector<std::vector<int>>& predictions, int num_pretrained) {
  const int n = static_cast<int>(predictions.size());
  std::vector<std::vector<long>> count(n, std::vector<long>(num_pretrained, 0));
  for (int c = 0; c < n; ++c) {
    for (int p : predictions[c]) ++count[c][p];
  }
  std::vector<long> top(n);
  for (int c = 0; c < n; ++c) top[c] = *std::max_element(count[c].begin(), count[c].end());
  std::vector<int> order(n);
  for (int c = 0; c < n; ++c) order[c] = c;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return top[a] > top[b]; });
  std::vector<bool> taken(num_pretrained, false);
  std::vector<int> out(n, -1);
  for (int c : order) {
    int best = -1;
    for (int p = 0; p < num_pretrained; ++p) {
      if (taken[p]) continue;
      if (best < 0 || count[c][p] > count[c][best]) best = p;
    }
    out[c] = best;
    taken[best] = true;
  }
  return out;
}

inline std::vector<int> plain_argmax(const std::vector<std::vector<int>>& predictions, int num_pretrained) {
  std::vector<int> out;
  for (const auto& preds : predictions) {
    std::vector<long> count(num_pretrained, 0);
    for (int p : preds) ++count[p];
    out.push_back(static_cast<int>(std::max_element(count.begin(), count.end()) - count.begin()));
  }
  return out;
}

}  // namespace oracle
