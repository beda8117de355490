#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evp/image.hpp"
#include "evp/loss.hpp"
#include "evp/prompt_geometry.hpp"
#include "evp/tensor_file.hpp"

namespace evp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class HeadKind { kLinear, kCosine };

std::string to_string(HeadKind head);
HeadKind head_kind_from_string(const std::string& name);

struct BackboneConfig {
  int native_size = 32;
  int patch_size = 4;
  int channels = 3;
  int embed_dim = 64;
  int depth = 4;
  int heads = 4;
  int mlp_dim = 128;
  int feature_dim = 64;
  int num_classes = 4;
  HeadKind head = HeadKind::kCosine;
  double logit_scale = 100.0;
  std::uint64_t seed = 0;

  int grid() const noexcept { return native_size / patch_size; }
  int num_patches() const noexcept { return grid() * grid(); }
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

enum class TokenPromptMode { kNone, kVptShallow, kVpNT, kDeep };

std::string to_string(TokenPromptMode mode);
TokenPromptMode token_prompt_mode_from_string(const std::string& name);

// Learnable tokens inserted between CLS and the patch embeddings. DEEP holds
// one block per encoder layer; the others hold a single block.
struct TokenPrompts {
  TokenPromptMode mode = TokenPromptMode::kNone;
  int num_prompts = 0;
  int position_index = 1;  // row of the positional table added under VP_N_T
  std::vector<Matrix> tokens;

  static TokenPrompts none() { return {}; }
  static TokenPrompts zeros(TokenPromptMode mode, int num_prompts, int position_index,
                            const BackboneConfig& config);
  static TokenPrompts gaussian(TokenPromptMode mode, int num_prompts, int position_index,
                               const BackboneConfig& config, std::uint64_t seed,
                               double stddev = 0.02);

  int active_count() const noexcept { return mode == TokenPromptMode::kNone ? 0 : num_prompts; }
  void validate(const BackboneConfig& config, int positional_rows) const;
  bool all_finite() const;
};

// How positional embeddings attach to a (possibly enlarged) input.
enum class PositionalMode {
  kNative,        // input is native size
  kInterpolated,  // table bilinearly resampled to the larger grid
  kCenterOnly,    // original table on the centered native grid, none on the border
};

PositionalMode positional_mode_for(const PromptGeometry* geometry);

struct BackboneGradient {
  double loss = 0.0;
  Vector logits;
  Image image_grad;
  std::vector<Matrix> token_grads;  // parallel to TokenPrompts::tokens
};

// Computes a loss from logits and writes dL/dlogits.
using LogitLoss = std::function<double(const Vector& logits, Vector& dlogits)>;

// Resamples the spatial rows of a (1 + g*g) x D table to (1 + n*n) x D with
// half-pixel bilinear weights; row 0 (CLS) is copied.
Matrix interpolate_positional_embeddings(const Matrix& pe, int new_grid);

// Small pre-LN vision transformer. Weights are fixed at construction and
// every method is const.
class Backbone {
 public:
  static Backbone create(const BackboneConfig& config);
  static Backbone from_tensor_file(const TensorFile& file);
  TensorFile to_tensor_file() const;

  const BackboneConfig& config() const noexcept { return config_; }
  const std::map<std::string, NamedArray>& weights() const noexcept { return named_; }
  std::uint64_t checksum() const;

  Matrix patch_embed(const Image& image) const;
  const Matrix& positional_embeddings() const noexcept { return pos_; }
  Matrix positional_table(int grid, PositionalMode mode) const;
  Matrix build_input_sequence(const Matrix& patches, const TokenPrompts& prompts,
                              const Matrix& positional) const;
  Vector head_logits(const Vector& feature) const;

  Vector forward(const Image& image, const TokenPrompts& prompts = TokenPrompts::none(),
                 PositionalMode pe_mode = PositionalMode::kNative) const;
  Vector features(const Image& image, const TokenPrompts& prompts = TokenPrompts::none(),
                  PositionalMode pe_mode = PositionalMode::kNative) const;

  BackboneGradient gradient(const Image& image, const TokenPrompts& prompts,
                            PositionalMode pe_mode, const LogitLoss& loss) const;
  // Cross-entropy against one label.
  BackboneGradient input_gradient(const Image& image, int label,
                                  const TokenPrompts& prompts = TokenPrompts::none(),
                                  PositionalMode pe_mode = PositionalMode::kNative) const;

 private:
  struct Layer {
    Vector ln1_g, ln1_b, qkv_b, proj_b, ln2_g, ln2_b, fc1_b, fc2_b;
    Matrix qkv_w, proj_w, fc1_w, fc2_w;
  };
  struct Trace;

  Backbone() = default;
  void unpack();
  void check_image(const Image& image, PositionalMode pe_mode) const;
  Vector run(const Image& image, const TokenPrompts& prompts, PositionalMode pe_mode,
             Trace* trace, Vector* feature_out) const;

  BackboneConfig config_;
  std::map<std::string, NamedArray> named_;
  Matrix patch_w_, pos_, proj_out_, head_w_;
  Vector cls_, patch_b_, lnf_g_, lnf_b_, head_b_;
  std::vector<Layer> layers_;
};

}  // namespace evp
