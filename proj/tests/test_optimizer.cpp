#include <doctest.h>

#include <cmath>
#include <limits>

#include "evp/errors.hpp"
#include "evp/optimizer.hpp"
#include "oracles.hpp"

using namespace evp;

namespace {

constexpr NormKind kAllKinds[] = {NormKind::kNone, NormKind::kL1, NormKind::kLInf, NormKind::kL2Partial,
                                  NormKind::kL2Whole};

double l2(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("zero gradient gives a zero direction in every mode") {
  const MaskMatrix m = make_mask(8, 4, 3);
  for (NormKind k : kAllKinds) {
    const Image d = normalize_gradient(Image(8, 8, 3, 0.0), m, {k, 1e-12});
    CHECK(d.all_finite());
    for (double v : d.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("L2_WHOLE with norm 2 halves the gradient") {
  Image g(2, 2, 1, std::vector<double>{1, 1, 1, 1});  // norm 2
  const MaskMatrix ones = mask_for({2, 2, 1, PromptMode::kOverlayAdd});
  const Image d = normalize_gradient(g, ones, {NormKind::kL2Whole, 1e-12});
  for (double v : d.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("norm definitions against hand computations") {
  const Image g = oracle::random_image(6, 6, 2, 3);
  const MaskMatrix m = make_mask(6, 2, 2);
  double n1 = 0, ninf = 0, n2 = 0, n2m = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double v = g.values()[i];
    n1 += std::abs(v);
    ninf = std::max(ninf, std::abs(v));
    n2 += v * v;
    n2m += m.entries().values()[i] * v * v;
  }
  n2 = std::sqrt(n2);
  n2m = std::sqrt(n2m);
  const std::pair<NormKind, double> cases[] = {
      {NormKind::kNone, 1.0}, {NormKind::kL1, n1}, {NormKind::kLInf, ninf}, {NormKind::kL2Whole, n2},
      {NormKind::kL2Partial, n2m}};
  for (const auto& [kind, denom] : cases) {
    const Image d = normalize_gradient(g, m, {kind, 1e-12});
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double expect = m.entries().values()[i] * g.values()[i] / (kind == NormKind::kNone ? 1.0 : denom + 1e-12);
      CHECK(d.values()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("centre of the direction is exactly zero") {
  const MaskMatrix m = make_mask(10, 6, 3);
  const Image g = oracle::random_image(10, 10, 3, 1);
  for (NormKind k : kAllKinds) {
    const Image d = normalize_gradient(g, m, {k, 1e-12});
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (m.entries().values()[i] == 0.0) CHECK(d.values()[i] == 0.0);
    }
  }
}

TEST_CASE("scale invariance of normalized modes; NONE is linear") {
  const MaskMatrix m = make_mask(8, 4, 3);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Image g = oracle::random_image(8, 8, 3, s);
    const double c = 0.01 + 37.0 * static_cast<double>(s);
    Image cg = g;
    cg *= c;
    for (NormKind k : kAllKinds) {
      const Image a = normalize_gradient(g, m, {k, 1e-12});
      const Image b = normalize_gradient(cg, m, {k, 1e-12});
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double expect = k == NormKind::kNone ? c * a.values()[i] : a.values()[i];
        CHECK(b.values()[i] == doctest::Approx(expect).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("L2_WHOLE direction has norm at most one") {
  const MaskMatrix ones = mask_for({8, 8, 3, PromptMode::kOverlayAdd});
  const MaskMatrix border = make_mask(8, 4, 3);
  for (std::uint64_t s = 0; s < 200; ++s) {
    const Image g = oracle::random_image(8, 8, 3, s, std::pow(10.0, static_cast<double>(s % 13) - 6));
    CHECK(l2(normalize_gradient(g, ones, {NormKind::kL2Whole, 1e-12}).values()) <= 1.0 + 1e-12);
    CHECK(l2(normalize_gradient(g, border, {NormKind::kL2Whole, 1e-12}).values()) <= 1.0 + 1e-12);
  }
}

TEST_CASE("zero learning rate leaves the prompt unchanged") {
  PromptTemplate p = PromptTemplate::gaussian({8, 4, 3, PromptMode::kShrinkPad}, 1);
  const Image before = p.weights;
  UpdateRule rule;
  rule.learning_rate = 0.0;
  step(p, oracle::random_image(8, 8, 3, 2), rule, 0);
  CHECK(p.weights == before);
}

TEST_CASE("one step from zero moves by -lr times the direction") {
  PromptTemplate p = PromptTemplate::zeros({8, 4, 3, PromptMode::kShrinkPad});
  const Image g = oracle::random_image(8, 8, 3, 7);
  UpdateRule rule;
  rule.learning_rate = 0.1;
  rule.schedule = Schedule::kConstant;
  step(p, g, rule, 0);
  const Image d = normalize_gradient(g, p.mask, rule.normalization);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(p.weights.values()[i] == -0.1 * d.values()[i]);
}

TEST_CASE("masked-out weights never change") {
  PromptTemplate p = PromptTemplate::gaussian({12, 6, 3, PromptMode::kShrinkPad}, 4, 1.0);
  const Image before = p.weights;
  UpdateRule rule;
  rule.learning_rate = 5.0;
  rule.total_steps = 50;
  for (NormKind k : kAllKinds) {
    rule.normalization.kind = k;
    for (long t = 0; t < 50; ++t) step(p, oracle::random_image(12, 12, 3, 100 + t), rule, t);
  }
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (p.mask.entries().values()[i] == 0.0) {
      CHECK(p.weights.values()[i] == before.values()[i]);
    } else {
      CHECK(p.weights.values()[i] != before.values()[i]);
    }
  }
}

TEST_CASE("non-finite gradient aborts without touching the prompt") {
  PromptTemplate p = PromptTemplate::gaussian({8, 4, 3, PromptMode::kShrinkPad}, 1);
  const Image before = p.weights;
  Image g = oracle::random_image(8, 8, 3, 2);
  g.at(0, 0, 0) = std::numeric_limits<double>::infinity();
  UpdateRule rule;
  rule.learning_rate = 1.0;
  rule.normalization.kind = NormKind::kNone;
  CHECK_THROWS_AS(step(p, g, rule, 0), NumericError);
  CHECK(p.weights == before);
}

TEST_CASE("cosine schedule") {
  UpdateRule rule;
  rule.learning_rate = 2.0;
  rule.total_steps = 10;
  CHECK(rule.rate_at(0) == doctest::Approx(2.0));
  CHECK(rule.rate_at(5) == doctest::Approx(1.0));
  CHECK(rule.rate_at(10) == doctest::Approx(0.0));
  for (long t = 1; t <= 10; ++t) CHECK(rule.rate_at(t) <= rule.rate_at(t - 1));
  rule.schedule = Schedule::kConstant;
  CHECK(rule.rate_at(7) == 2.0);
}

TEST_CASE("invalid rules are rejected") {
  UpdateRule rule;
  rule.learning_rate = -1.0;
  CHECK_THROWS_AS(rule.validate(), Error);
  NormalizationMode mode{NormKind::kL2Whole, 0.0};
  CHECK_THROWS_AS(mode.validate(), Error);
  CHECK_THROWS_AS(norm_kind_from_string("l3"), Error);
}

TEST_CASE("token step is plain gradient descent") {
  const BackboneConfig cfg;
  TokenPrompts t = TokenPrompts::gaussian(TokenPromptMode::kDeep, 2, 1, cfg, 3);
  const TokenPrompts before = t;
  std::vector<Matrix> grads;
  for (const Matrix& m : t.tokens) grads.push_back(Matrix::Constant(m.rows(), m.cols(), 0.5));
  UpdateRule rule;
  rule.learning_rate = 0.2;
  rule.schedule = Schedule::kConstant;
  step_tokens(t, grads, rule, 0);
  for (std::size_t b = 0; b < t.tokens.size(); ++b) {
    CHECK(t.tokens[b].isApprox(before.tokens[b] - Matrix::Constant(2, cfg.embed_dim, 0.1)));
  }
}
