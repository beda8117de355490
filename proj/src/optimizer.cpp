#include "evp/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "evp/errors.hpp"

namespace evp {

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kNone: return "none";
    case NormKind::kL1: return "l1";
    case NormKind::kLInf: return "linf";
    case NormKind::kL2Partial: return "l2_partial";
    case NormKind::kL2Whole: return "l2_whole";
  }
  return "unknown";
}

NormKind norm_kind_from_string(const std::string& name) {
  for (auto k : {NormKind::kNone, NormKind::kL1, NormKind::kLInf, NormKind::kL2Partial,
                 NormKind::kL2Whole}) {
    if (to_string(k) == name) return k;
  }
  throw Error(ErrorKind::kConfig, "unknown normalization '" + name + "'");
}

std::string to_string(Schedule schedule) {
  return schedule == Schedule::kConstant ? "constant" : "cosine";
}

Schedule schedule_from_string(const std::string& name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "cosine") return Schedule::kCosineDecay;
  throw Error(ErrorKind::kConfig, "unknown schedule '" + name + "'");
}

void NormalizationMode::validate() const {
  if (!(epsilon > 0.0)) throw Error(ErrorKind::kConfig, "normalization epsilon must be positive");
}

void UpdateRule::validate() const {
  normalization.validate();
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorKind::kConfig, "learning rate must be a finite nonnegative number");
  }
  if (total_steps < 1) throw Error(ErrorKind::kConfig, "schedule horizon must be >= 1 step");
}

double UpdateRule::rate_at(long step) const {
  if (schedule == Schedule::kConstant) return learning_rate;
  const double progress = std::clamp(static_cast<double>(step) / total_steps, 0.0, 1.0);
  return learning_rate * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Image normalize_gradient(const Image& grad_full, const MaskMatrix& mask, NormalizationMode mode) {
  mode.validate();
  Image direction = mask.apply(grad_full);
  double norm = 0.0;
  switch (mode.kind) {
    case NormKind::kNone:
      return direction;
    case NormKind::kL1:
      for (double v : grad_full.values()) norm += std::abs(v);
      break;
    case NormKind::kLInf:
      for (double v : grad_full.values()) norm = std::max(norm, std::abs(v));
      break;
    case NormKind::kL2Whole:
      for (double v : grad_full.values()) norm += v * v;
      norm = std::sqrt(norm);
      break;
    case NormKind::kL2Partial:
      for (double v : direction.values()) norm += v * v;
      norm = std::sqrt(norm);
      break;
  }
  direction *= 1.0 / (norm + mode.epsilon);
  return direction;
}

void step(PromptTemplate& prompt, const Image& grad_full, const UpdateRule& rule, long step_index) {
  rule.validate();
  prompt.validate();
  if (!grad_full.same_shape(prompt.weights)) {
    throw Error(ErrorKind::kShape, "gradient shape does not match prompt");
  }
  const Image direction = normalize_gradient(grad_full, prompt.mask, rule.normalization);
  const double rate = rule.rate_at(step_index);

  Image updated = prompt.weights;
  auto w = updated.values();
  auto d = direction.values();
  auto m = prompt.mask.entries().values();
  NumericDiagnostic diag;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (m[i] == 0.0) continue;
    w[i] -= rate * d[i];
    if (!std::isfinite(w[i])) {
      ++diag.nonfinite_count;
    } else {
      diag.max_abs_finite = std::max(diag.max_abs_finite, std::abs(w[i]));
    }
  }
  if (diag.nonfinite_count > 0) {
    diag.stage = "prompt update";
    diag.value = rate;
    throw NumericError(diag);
  }
  prompt.weights = std::move(updated);
}

void step_tokens(TokenPrompts& prompts, const std::vector<Matrix>& grads, const UpdateRule& rule,
                 long step_index) {
  if (prompts.mode == TokenPromptMode::kNone) return;
  if (grads.size() != prompts.tokens.size()) {
    throw Error(ErrorKind::kShape, "token gradient blocks do not match prompt tokens");
  }
  const double rate = rule.rate_at(step_index);
  std::vector<Matrix> updated = prompts.tokens;
  for (std::size_t b = 0; b < updated.size(); ++b) {
    if (grads[b].size() == 0) continue;
    updated[b] -= rate * grads[b];
    if (!updated[b].allFinite()) {
      NumericDiagnostic diag;
      diag.stage = "token prompt update";
      diag.value = rate;
      diag.nonfinite_count = static_cast<std::size_t>((!updated[b].array().isFinite()).count());
      throw NumericError(diag);
    }
  }
  prompts.tokens = std::move(updated);
}

}  // namespace evp
