#pragma once

#include <string>
#include <vector>

#include "evp/backbone.hpp"
#include "evp/image.hpp"
#include "evp/prompt_geometry.hpp"

namespace evp {

enum class NormKind { kNone, kL1, kLInf, kL2Partial, kL2Whole };

std::string to_string(NormKind kind);
NormKind norm_kind_from_string(const std::string& name);

struct NormalizationMode {
  NormKind kind = NormKind::kL2Whole;
  double epsilon = 1e-12;

  void validate() const;
  bool operator==(const NormalizationMode&) const = default;
};

enum class Schedule { kConstant, kCosineDecay };

std::string to_string(Schedule schedule);
Schedule schedule_from_string(const std::string& name);

struct UpdateRule {
  double learning_rate = 0.0;
  Schedule schedule = Schedule::kCosineDecay;
  NormalizationMode normalization;
  long total_steps = 1;  // horizon of the cosine schedule

  void validate() const;
  // Rate used at zero-based step t; cosine decay runs from lr toward 0 over total_steps.
  double rate_at(long step) const;
};

// Masked update direction:
//   NONE       g*M
//   L1 / LINF  g*M / (|g|_1 or |g|_inf + eps), norms over the full gradient
//   L2_WHOLE   g*M / (|g|_2 + eps)
//   L2_PARTIAL g*M / (|g*M|_2 + eps)
Image normalize_gradient(const Image& grad_full, const MaskMatrix& mask, NormalizationMode mode);

// W <- W - rate_at(step) * normalize_gradient(grad_full). Entries outside
// the mask are left bit-identical. Throws NumericError on a non-finite result
// and leaves the prompt untouched in that case.
void step(PromptTemplate& prompt, const Image& grad_full, const UpdateRule& rule, long step_index);

// Plain gradient descent on prompt tokens at the same scheduled rate.
void step_tokens(TokenPrompts& prompts, const std::vector<Matrix>& grads, const UpdateRule& rule,
                 long step_index);

}  // namespace evp
