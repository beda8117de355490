#include <doctest.h>

#include "evp/errors.hpp"
#include "evp/prompt_geometry.hpp"
#include "oracles.hpp"

using namespace evp;

namespace {

PromptGeometry shrink_pad(int K, int k, int c = 3) { return {K, k, c, PromptMode::kShrinkPad}; }

}  // namespace

TEST_CASE("mask 4/2/1 has a 2x2 zero centre") {
  const MaskMatrix m = make_mask(4, 2, 1);
  CHECK(m.entries().size() == 16);
  int zeros = 0;
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      const bool centre = y >= 1 && y < 3 && x >= 1 && x < 3;
      CHECK(m.entries().at(y, x, 0) == (centre ? 0.0 : 1.0));
      zeros += m.entries().at(y, x, 0) == 0.0;
    }
  }
  CHECK(zeros == 4);
}

TEST_CASE("mask with k == K is all zeros") {
  CHECK(make_mask(3, 3, 1).sum() == 0.0);
}

TEST_CASE("mask sum for 224/164 counted entry by entry") {
  const MaskMatrix m = make_mask(224, 164, 3);
  long ones = 0;
  for (double v : m.entries().values()) ones += v == 1.0;
  CHECK(ones == 69840);
  CHECK(ones == oracle::mask_ones(224, 164, 3));
  CHECK(parameter_count(shrink_pad(224, 164)) == 69840);
}

TEST_CASE("parameter count examples") {
  CHECK(parameter_count(shrink_pad(224, 224)) == 0);
  CHECK(parameter_count(shrink_pad(32, 24)) == 1344);
  CHECK(parameter_count({32, 32, 3, PromptMode::kOverlayAdd}) == 32 * 32 * 3);
  CHECK(parameter_count({40, 32, 3, PromptMode::kOuterPadWithPe}) == (40 * 40 - 32 * 32) * 3);
}

TEST_CASE("parameter count equals brute-force mask sum over a sweep") {
  for (int K = 1; K <= 40; ++K) {
    for (int k = (K % 2); k <= K; k += 2) {
      if (k == 0) continue;
      for (int c : {1, 3}) {
        const auto g = shrink_pad(K, k, c);
        CHECK(static_cast<long>(parameter_count(g)) == oracle::mask_ones(K, k, c));
        CHECK(mask_for(g).sum() == doctest::Approx(oracle::mask_ones(K, k, c)));
      }
    }
  }
}

TEST_CASE("invalid geometry is rejected") {
  CHECK_THROWS_AS(make_mask(4, 5, 1), Error);
  CHECK_THROWS_AS(make_mask(0, 0, 1), Error);
  CHECK_THROWS_AS(make_mask(4, -1, 1), Error);
  CHECK_THROWS_AS(make_mask(4, 2, 0), Error);
  CHECK_THROWS_AS((PromptGeometry{32, 24, 3, PromptMode::kOverlayAdd}.validate()), Error);
  try {
    make_mask(4, 5, 1);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInvalidGeometry);
  }
}

TEST_CASE("mask idempotence") {
  const MaskMatrix m = make_mask(12, 6, 3);
  CHECK(m.apply(m.entries()) == m.entries());
  const Image x = oracle::random_image(12, 12, 3, 5);
  CHECK(m.apply(m.apply(x)) == m.apply(x));
}

TEST_CASE("shrink preserves constants") {
  const Image img(20, 20, 3, 0.5);
  for (int k : {1, 7, 13, 20}) {
    for (Interpolation interp : {Interpolation::kBilinear, Interpolation::kArea}) {
      const Image s = shrink(img, k, interp);
      CHECK(s.height() == k);
      for (double v : s.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    }
  }
}

TEST_CASE("area shrink of [[1,1],[3,3]] to 1x1 is 2") {
  Image img(2, 2, 1, std::vector<double>{1, 1, 3, 3});
  const Image s = shrink(img, 1, Interpolation::kArea);
  CHECK(s.values()[0] == doctest::Approx(2.0));
}

TEST_CASE("same-size shrink is the identity") {
  const Image img = oracle::random_image(164, 164, 3, 1);
  CHECK(shrink(img, 164) == img);
  CHECK(shrink(img, 164, Interpolation::kArea) == img);
}

TEST_CASE("empty image cannot be shrunk") {
  CHECK_THROWS_AS(shrink(Image{}, 4), Error);
}

TEST_CASE("zero prompt shrink-pad: zero border, shrunk centre") {
  const auto g = shrink_pad(16, 10);
  const Image img = oracle::random_image(16, 16, 3, 2);
  const Image out = compose(img, PromptTemplate::zeros(g));
  const Image centre = crop(out, 3, 3, 10, 10);
  CHECK(centre == shrink(img, 10));
  const MaskMatrix m = mask_for(g);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (m.entries().values()[i] == 1.0) CHECK(out.values()[i] == 0.0);
  }
}

TEST_CASE("zero prompt overlay returns the input") {
  const Image img = oracle::random_image(8, 8, 3, 3);
  CHECK(compose(img, PromptTemplate::zeros({8, 8, 3, PromptMode::kOverlayAdd})) == img);
}

TEST_CASE("overlay adds the prompt") {
  const Image img = oracle::random_image(8, 8, 3, 3);
  const PromptTemplate p = PromptTemplate::gaussian({8, 8, 3, PromptMode::kOverlayAdd}, 1, 1.0);
  const Image out = compose(img, p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out.values()[i] == img.values()[i] + p.weights.values()[i]);
  }
}

TEST_CASE("all-ones W, K=4, k=2 on a zero image") {
  PromptTemplate p = PromptTemplate::zeros(shrink_pad(4, 2, 1));
  for (double& v : p.weights.values()) v = 1.0;
  const Image out = compose(Image(4, 4, 1, 0.0), p);
  int ones = 0, zeros = 0;
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      const bool centre = y >= 1 && y < 3 && x >= 1 && x < 3;
      CHECK(out.at(y, x, 0) == (centre ? 0.0 : 1.0));
      (centre ? zeros : ones)++;
    }
  }
  CHECK(ones == 12);
  CHECK(zeros == 4);
}

TEST_CASE("centre preservation for random images and prompts") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Image img = oracle::random_image(32, 32, 3, seed);
    const auto g = shrink_pad(32, 18 + 2 * (seed % 4));
    const PromptTemplate p = PromptTemplate::gaussian(g, seed + 100, 1.0);
    const Image out = compose(img, p);
    CHECK(crop(out, g.offset(), g.offset(), g.inner_size, g.inner_size) == shrink(img, g.inner_size));

    const PromptGeometry outer{40, 32, 3, PromptMode::kOuterPadNoPe};
    const Image padded = compose(img, PromptTemplate::gaussian(outer, seed, 1.0));
    CHECK(padded.height() == 40);
    CHECK(crop(padded, 4, 4, 32, 32) == img);
  }
}

TEST_CASE("border of composed image equals V_e") {
  const auto g = shrink_pad(16, 8);
  const PromptTemplate p = PromptTemplate::gaussian(g, 9, 1.0);
  const Image out = compose(oracle::random_image(16, 16, 3, 4), p);
  const Image ve = p.effective();
  const MaskMatrix m = mask_for(g);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (m.entries().values()[i] == 1.0) CHECK(out.values()[i] == ve.values()[i]);
  }
}

TEST_CASE("V_e is zero wherever the mask is zero") {
  const PromptTemplate p = PromptTemplate::gaussian(shrink_pad(16, 8), 3, 1.0);
  const Image ve = p.effective();
  for (std::size_t i = 0; i < ve.size(); ++i) {
    if (p.mask.entries().values()[i] == 0.0) CHECK(ve.values()[i] == 0.0);
  }
}

TEST_CASE("prompt gradient vanishes in the centre") {
  const PromptTemplate p = PromptTemplate::gaussian(shrink_pad(16, 8), 3, 1.0);
  const Image g = prompt_gradient(oracle::random_image(16, 16, 3, 8), p);
  for (int y = 4; y < 12; ++y) {
    for (int x = 4; x < 12; ++x) {
      for (int c = 0; c < 3; ++c) CHECK(g.at(y, x, c) == 0.0);
    }
  }
}

TEST_CASE("outer pad requires a native-size image") {
  const PromptTemplate p = PromptTemplate::zeros({40, 32, 3, PromptMode::kOuterPadWithPe});
  CHECK_THROWS_AS(compose(Image(30, 30, 3), p), Error);
}

TEST_CASE("backbone fit") {
  CHECK_NOTHROW(check_backbone_fit(shrink_pad(32, 24), 32, 4));
  CHECK_THROWS_AS(check_backbone_fit(shrink_pad(36, 24), 32, 4), Error);
  CHECK_NOTHROW(check_backbone_fit({40, 32, 3, PromptMode::kOuterPadWithPe}, 32, 4));
  CHECK_THROWS_AS(check_backbone_fit({38, 32, 3, PromptMode::kOuterPadWithPe}, 32, 4), Error);
}

TEST_CASE("matched outer size is patch aligned and nearest in parameters") {
  const int outer = matched_outer_size(32, 4, 24, 3);
  CHECK((outer - 32) % 8 == 0);
  const long target = oracle::mask_ones(32, 24, 3);
  long best = -1;
  int best_outer = 0;
  for (int pad = 4; pad <= 32; pad += 4) {
    const long diff = std::abs(oracle::mask_ones(32 + 2 * pad, 32, 3) - target);
    if (best < 0 || diff < best) {
      best = diff;
      best_outer = 32 + 2 * pad;
    }
  }
  CHECK(outer == best_outer);
}

TEST_CASE("bilinear resize matches a hand stencil") {
  // 2x2 -> 4x4 with half-pixel centres: output (1,1) samples (0.25, 0.25).
  Image img(2, 2, 1, std::vector<double>{0, 1, 2, 3});
  const Image up = resize(img, 4, 4, Interpolation::kBilinear);
  CHECK(up.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(up.at(1, 1, 0) == doctest::Approx(0.75 * 0.75 * 0 + 0.75 * 0.25 * 1 + 0.25 * 0.75 * 2 + 0.25 * 0.25 * 3));
  CHECK(up.at(3, 3, 0) == doctest::Approx(3.0));
}

TEST_CASE("prompt container round trip is bit exact") {
  const PromptTemplate p = PromptTemplate::gaussian(shrink_pad(32, 20), 77);
  const TensorFile f = prompt_to_tensor_file(p, 77);
  const TensorFile back = parse_tensor_file(serialize_tensor_file(f));
  CHECK(back == f);
  const PromptTemplate q = prompt_from_tensor_file(back);
  CHECK(q.weights == p.weights);
  CHECK(q.mask == p.mask);
  CHECK(q.geometry == p.geometry);
  CHECK(back.require_meta("seed") == "77");
}

TEST_CASE("visualization clips to [0,1] and blacks out the centre") {
  PromptTemplate p = PromptTemplate::gaussian(shrink_pad(8, 4), 1, 10.0);
  const std::vector<double> mean{0.5, 0.5, 0.5}, sd{0.25, 0.25, 0.25};
  const Image v = prompt_visualization(p, mean, sd);
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(v.values()[i] >= 0.0);
    CHECK(v.values()[i] <= 1.0);
    if (p.mask.entries().values()[i] == 0.0) CHECK(v.values()[i] == 0.0);
  }
}

TEST_CASE("gaussian init is seeded") {
  const auto g = shrink_pad(16, 8);
  CHECK(PromptTemplate::gaussian(g, 4).weights == PromptTemplate::gaussian(g, 4).weights);
  CHECK_FALSE(PromptTemplate::gaussian(g, 4).weights == PromptTemplate::gaussian(g, 5).weights);
}
