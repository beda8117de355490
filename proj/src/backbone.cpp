#include "evp/backbone.hpp"

#include <cmath>
#include <random>

#include <nlohmann/json.hpp>

#include "evp/errors.hpp"

namespace evp {

namespace {

using json = nlohmann::json;
using MatrixMap = Eigen::Map<const Matrix>;

constexpr double kLnEps = 1e-5;

std::string layer_key(int layer, const char* name) {
  return "blocks." + std::to_string(layer) + "." + name;
}

json config_to_json(const BackboneConfig& c) {
  return {{"native_size", c.native_size}, {"patch_size", c.patch_size},
          {"channels", c.channels},       {"embed_dim", c.embed_dim},
          {"depth", c.depth},             {"heads", c.heads},
          {"mlp_dim", c.mlp_dim},         {"feature_dim", c.feature_dim},
          {"num_classes", c.num_classes}, {"head", to_string(c.head)},
          {"logit_scale", c.logit_scale}, {"seed", c.seed}};
}

BackboneConfig config_from_json(const json& j) {
  BackboneConfig c;
  c.native_size = j.at("native_size").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.feature_dim = j.at("feature_dim").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.head = head_kind_from_string(j.at("head").get<std::string>());
  c.logit_scale = j.at("logit_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

Matrix to_matrix(const NamedArray& a, std::int64_t rows, std::int64_t cols, const std::string& name) {
  if (a.shape.size() != 2 || a.shape[0] != rows || a.shape[1] != cols) {
    throw Error(ErrorKind::kShape, "weight '" + name + "' has unexpected shape");
  }
  return MatrixMap(a.values.data(), rows, cols);
}

Vector to_vector(const NamedArray& a, std::int64_t n, const std::string& name) {
  if (a.shape.size() != 1 || a.shape[0] != n) {
    throw Error(ErrorKind::kShape, "weight '" + name + "' has unexpected shape");
  }
  return Eigen::Map<const Vector>(a.values.data(), n);
}

struct LnCache {
  Matrix xhat;
  Vector inv_std;
};

Matrix layer_norm(const Matrix& x, const Vector& g, const Vector& b, LnCache* cache) {
  const Eigen::Index d = x.cols();
  Matrix xhat(x.rows(), d);
  Vector inv(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    inv[r] = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = (x.row(r).array() - mu) * inv[r];
  }
  Matrix y = (xhat.array().rowwise() * g.transpose().array()).rowwise() + b.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Vector& g, const LnCache& cache) {
  Matrix dxhat = dy.array().rowwise() * g.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = cache.inv_std[r] *
                (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - m).exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

std::string to_string(HeadKind head) { return head == HeadKind::kLinear ? "linear" : "cosine"; }

HeadKind head_kind_from_string(const std::string& name) {
  if (name == "linear") return HeadKind::kLinear;
  if (name == "cosine") return HeadKind::kCosine;
  throw Error(ErrorKind::kConfig, "unknown head '" + name + "'");
}

std::string to_string(TokenPromptMode mode) {
  switch (mode) {
    case TokenPromptMode::kNone: return "none";
    case TokenPromptMode::kVptShallow: return "vpt";
    case TokenPromptMode::kVpNT: return "vpnt";
    case TokenPromptMode::kDeep: return "deep";
  }
  return "unknown";
}

TokenPromptMode token_prompt_mode_from_string(const std::string& name) {
  for (auto m : {TokenPromptMode::kNone, TokenPromptMode::kVptShallow, TokenPromptMode::kVpNT,
                 TokenPromptMode::kDeep}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::kConfig, "unknown token prompt mode '" + name + "'");
}

void BackboneConfig::validate() const {
  if (native_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || depth < 0 ||
      heads <= 0 || mlp_dim <= 0 || feature_dim <= 0) {
    throw Error(ErrorKind::kConfig, "backbone dimensions must be positive");
  }
  if (native_size % patch_size != 0) {
    throw Error(ErrorKind::kShape, "native size is not divisible by the patch size");
  }
  if (embed_dim % heads != 0) throw Error(ErrorKind::kConfig, "embed_dim not divisible by heads");
  if (num_classes <= 0) throw Error(ErrorKind::kConfig, "head needs at least one class");
  if (head == HeadKind::kCosine && !(logit_scale > 0.0)) {
    throw Error(ErrorKind::kConfig, "logit_scale must be positive");
  }
}

TokenPrompts TokenPrompts::zeros(TokenPromptMode mode, int num_prompts, int position_index,
                                 const BackboneConfig& config) {
  TokenPrompts p;
  p.mode = mode;
  p.num_prompts = mode == TokenPromptMode::kNone ? 0 : num_prompts;
  p.position_index = position_index;
  if (mode != TokenPromptMode::kNone) {
    const int blocks = mode == TokenPromptMode::kDeep ? config.depth : 1;
    p.tokens.assign(blocks, Matrix::Zero(num_prompts, config.embed_dim));
  }
  return p;
}

TokenPrompts TokenPrompts::gaussian(TokenPromptMode mode, int num_prompts, int position_index,
                                    const BackboneConfig& config, std::uint64_t seed,
                                    double stddev) {
  TokenPrompts p = zeros(mode, num_prompts, position_index, config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, stddev);
  for (Matrix& block : p.tokens) {
    for (Eigen::Index i = 0; i < block.size(); ++i) block.data()[i] = normal(rng);
  }
  return p;
}

void TokenPrompts::validate(const BackboneConfig& config, int positional_rows) const {
  if (mode == TokenPromptMode::kNone) return;
  if (num_prompts < 0) throw Error(ErrorKind::kConfig, "negative prompt-token count");
  const std::size_t blocks = mode == TokenPromptMode::kDeep ? config.depth : 1;
  if (tokens.size() != blocks) throw Error(ErrorKind::kConfig, "wrong number of prompt-token blocks");
  for (const Matrix& t : tokens) {
    if (t.rows() != num_prompts || t.cols() != config.embed_dim) {
      throw Error(ErrorKind::kShape, "prompt-token block has wrong shape");
    }
  }
  if (mode == TokenPromptMode::kVpNT && (position_index < 0 || position_index >= positional_rows)) {
    throw Error(ErrorKind::kConfig, "positional index " + std::to_string(position_index) +
                                        " outside table of " + std::to_string(positional_rows) +
                                        " rows");
  }
}

bool TokenPrompts::all_finite() const {
  for (const Matrix& t : tokens) {
    if (!t.allFinite()) return false;
  }
  return true;
}

PositionalMode positional_mode_for(const PromptGeometry* geometry) {
  if (!geometry) return PositionalMode::kNative;
  switch (geometry->mode) {
    case PromptMode::kOuterPadWithPe: return PositionalMode::kInterpolated;
    case PromptMode::kOuterPadNoPe: return PositionalMode::kCenterOnly;
    default: return PositionalMode::kNative;
  }
}

Matrix interpolate_positional_embeddings(const Matrix& pe, int new_grid) {
  const Eigen::Index spatial = pe.rows() - 1;
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(spatial))));
  if (spatial < 1 || static_cast<Eigen::Index>(grid) * grid != spatial) {
    throw Error(ErrorKind::kShape, "positional table does not hold a square grid");
  }
  if (new_grid < grid) throw Error(ErrorKind::kShape, "positional grid can only be enlarged");
  if (new_grid == grid) return pe;

  const Eigen::Index d = pe.cols();
  Image src(grid, grid, static_cast<int>(d));
  for (int i = 0; i < grid * grid; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) src.at(i / grid, i % grid, static_cast<int>(c)) = pe(1 + i, c);
  }
  const Image dst = resize(src, new_grid, new_grid, Interpolation::kBilinear);
  Matrix out(1 + static_cast<Eigen::Index>(new_grid) * new_grid, d);
  out.row(0) = pe.row(0);
  for (int i = 0; i < new_grid * new_grid; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) out(1 + i, c) = dst.at(i / new_grid, i % new_grid, static_cast<int>(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Construction and persistence

Backbone Backbone::create(const BackboneConfig& config) {
  config.validate();
  const auto D = config.embed_dim;
  const auto M = config.mlp_dim;
  const auto F = config.feature_dim;
  const auto C = config.num_classes;
  const auto P = config.patch_size * config.patch_size * config.channels;

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Backbone b;
  b.config_ = config;
  auto gaussian = [&](const std::string& name, std::vector<std::int64_t> shape, double stddev) {
    NamedArray a{shape, {}};
    std::size_t n = 1;
    for (auto s : shape) n *= static_cast<std::size_t>(s);
    a.values.resize(n);
    for (double& v : a.values) v = stddev * normal(rng);
    b.named_[name] = std::move(a);
  };
  auto constant = [&](const std::string& name, std::int64_t n, double value) {
    b.named_[name] = NamedArray{{n}, std::vector<double>(static_cast<std::size_t>(n), value)};
  };

  gaussian("patch_embed.weight", {P, D}, 1.0 / std::sqrt(static_cast<double>(P)));
  gaussian("patch_embed.bias", {D}, 0.02);
  gaussian("cls_token", {D}, 1.0);
  gaussian("pos_embed", {1 + config.num_patches(), D}, 0.5);
  for (int l = 0; l < config.depth; ++l) {
    constant(layer_key(l, "ln1.weight"), D, 1.0);
    constant(layer_key(l, "ln1.bias"), D, 0.0);
    gaussian(layer_key(l, "attn.qkv.weight"), {D, 3 * D}, 1.0 / std::sqrt(static_cast<double>(D)));
    gaussian(layer_key(l, "attn.qkv.bias"), {3 * D}, 0.02);
    gaussian(layer_key(l, "attn.proj.weight"), {D, D}, 1.0 / std::sqrt(static_cast<double>(D)));
    gaussian(layer_key(l, "attn.proj.bias"), {D}, 0.02);
    constant(layer_key(l, "ln2.weight"), D, 1.0);
    constant(layer_key(l, "ln2.bias"), D, 0.0);
    gaussian(layer_key(l, "mlp.fc1.weight"), {D, M}, 1.0 / std::sqrt(static_cast<double>(D)));
    gaussian(layer_key(l, "mlp.fc1.bias"), {M}, 0.02);
    gaussian(layer_key(l, "mlp.fc2.weight"), {M, D}, 1.0 / std::sqrt(static_cast<double>(M)));
    gaussian(layer_key(l, "mlp.fc2.bias"), {D}, 0.02);
  }
  constant("norm.weight", D, 1.0);
  constant("norm.bias", D, 0.0);
  gaussian("feature_proj.weight", {D, F}, 1.0 / std::sqrt(static_cast<double>(D)));
  if (config.head == HeadKind::kLinear) {
    gaussian("head.weight", {F, C}, 1.0 / std::sqrt(static_cast<double>(F)));
    constant("head.bias", C, 0.0);
  } else {
    gaussian("head.class_embeddings", {C, F}, 1.0);
    auto& e = b.named_["head.class_embeddings"].values;
    for (int c = 0; c < C; ++c) {
      double norm = 0.0;
      for (int f = 0; f < F; ++f) norm += e[c * F + f] * e[c * F + f];
      norm = std::sqrt(norm);
      for (int f = 0; f < F; ++f) e[c * F + f] /= norm;
    }
  }
  b.unpack();
  return b;
}

void Backbone::unpack() {
  const auto& c = config_;
  const auto D = c.embed_dim;
  const auto P = c.patch_size * c.patch_size * c.channels;
  auto get = [&](const std::string& name) -> const NamedArray& {
    auto it = named_.find(name);
    if (it == named_.end()) throw Error(ErrorKind::kConfig, "backbone weight '" + name + "' missing");
    return it->second;
  };
  patch_w_ = to_matrix(get("patch_embed.weight"), P, D, "patch_embed.weight");
  patch_b_ = to_vector(get("patch_embed.bias"), D, "patch_embed.bias");
  cls_ = to_vector(get("cls_token"), D, "cls_token");
  pos_ = to_matrix(get("pos_embed"), 1 + c.num_patches(), D, "pos_embed");
  layers_.clear();
  for (int l = 0; l < c.depth; ++l) {
    auto m = [&](const char* n, std::int64_t r, std::int64_t k) {
      return to_matrix(get(layer_key(l, n)), r, k, layer_key(l, n));
    };
    auto v = [&](const char* n, std::int64_t k) { return to_vector(get(layer_key(l, n)), k, layer_key(l, n)); };
    Layer layer;
    layer.ln1_g = v("ln1.weight", D);
    layer.ln1_b = v("ln1.bias", D);
    layer.qkv_w = m("attn.qkv.weight", D, 3 * D);
    layer.qkv_b = v("attn.qkv.bias", 3 * D);
    layer.proj_w = m("attn.proj.weight", D, D);
    layer.proj_b = v("attn.proj.bias", D);
    layer.ln2_g = v("ln2.weight", D);
    layer.ln2_b = v("ln2.bias", D);
    layer.fc1_w = m("mlp.fc1.weight", D, c.mlp_dim);
    layer.fc1_b = v("mlp.fc1.bias", c.mlp_dim);
    layer.fc2_w = m("mlp.fc2.weight", c.mlp_dim, D);
    layer.fc2_b = v("mlp.fc2.bias", D);
    layers_.push_back(std::move(layer));
  }
  lnf_g_ = to_vector(get("norm.weight"), D, "norm.weight");
  lnf_b_ = to_vector(get("norm.bias"), D, "norm.bias");
  proj_out_ = to_matrix(get("feature_proj.weight"), D, c.feature_dim, "feature_proj.weight");
  if (c.head == HeadKind::kLinear) {
    head_w_ = to_matrix(get("head.weight"), c.feature_dim, c.num_classes, "head.weight");
    head_b_ = to_vector(get("head.bias"), c.num_classes, "head.bias");
  } else {
    auto it = named_.find("head.class_embeddings");
    if (it == named_.end()) {
      throw Error(ErrorKind::kConfig, "cosine head requires a class-embedding table");
    }
    head_w_ = to_matrix(it->second, c.num_classes, c.feature_dim, "head.class_embeddings");
  }
}

Backbone Backbone::from_tensor_file(const TensorFile& file) {
  Backbone b;
  b.config_ = config_from_json(json::parse(file.require_meta("backbone_config")));
  b.config_.validate();
  for (const auto& [name, array] : file.arrays) {
    if (name.rfind("prompt.", 0) == 0 || name.rfind("tokens.", 0) == 0) continue;
    b.named_[name] = array;
  }
  b.unpack();
  auto it = file.metadata.find("freeze_checksum");
  if (it != file.metadata.end() && it->second != checksum_hex(b.checksum())) {
    throw Error(ErrorKind::kConfig, "backbone checksum mismatch: manifest says " + it->second);
  }
  return b;
}

TensorFile Backbone::to_tensor_file() const {
  TensorFile file;
  file.arrays = named_;
  file.metadata["backbone_config"] = config_to_json(config_).dump();
  file.metadata["freeze_checksum"] = checksum_hex(checksum());
  return file;
}

std::uint64_t Backbone::checksum() const { return content_checksum(named_); }

// ---------------------------------------------------------------------------
// Forward pieces

Matrix Backbone::patch_embed(const Image& image) const {
  const int p = config_.patch_size;
  const int ch = config_.channels;
  if (image.height() != image.width() || image.height() % p != 0) {
    throw Error(ErrorKind::kShape, "image side " + std::to_string(image.height()) +
                                       " is not a square multiple of the patch size");
  }
  if (image.channels() != ch) throw Error(ErrorKind::kShape, "image channel count mismatch");
  const int grid = image.height() / p;
  Matrix patches(static_cast<Eigen::Index>(grid) * grid, static_cast<Eigen::Index>(p) * p * ch);
  for (int gy = 0; gy < grid; ++gy) {
    for (int gx = 0; gx < grid; ++gx) {
      double* row = patches.row(gy * grid + gx).data();
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < ch; ++c) *row++ = image.at(gy * p + dy, gx * p + dx, c);
        }
      }
    }
  }
  Matrix out = patches * patch_w_;
  out.rowwise() += patch_b_.transpose();
  return out;
}

Matrix Backbone::positional_table(int grid, PositionalMode mode) const {
  const int native = config_.grid();
  switch (mode) {
    case PositionalMode::kNative:
      if (grid != native) {
        throw Error(ErrorKind::kShape, "input grid " + std::to_string(grid) +
                                           " differs from the native grid without PE resampling");
      }
      return pos_;
    case PositionalMode::kInterpolated:
      return interpolate_positional_embeddings(pos_, grid);
    case PositionalMode::kCenterOnly: {
      if (grid < native || (grid - native) % 2 != 0) {
        throw Error(ErrorKind::kShape, "center-only PE needs a symmetric enlarged grid");
      }
      const int off = (grid - native) / 2;
      Matrix out = Matrix::Zero(1 + static_cast<Eigen::Index>(grid) * grid, pos_.cols());
      out.row(0) = pos_.row(0);
      for (int y = 0; y < native; ++y) {
        for (int x = 0; x < native; ++x) {
          out.row(1 + (y + off) * grid + (x + off)) = pos_.row(1 + y * native + x);
        }
      }
      return out;
    }
  }
  throw Error(ErrorKind::kConfig, "unhandled positional mode");
}

Matrix Backbone::build_input_sequence(const Matrix& patches, const TokenPrompts& prompts,
                                      const Matrix& positional) const {
  prompts.validate(config_, static_cast<int>(positional.rows()));
  if (positional.rows() != patches.rows() + 1 || patches.cols() != config_.embed_dim) {
    throw Error(ErrorKind::kShape, "positional table does not match the patch sequence");
  }
  const Eigen::Index n_prompts = prompts.active_count();
  Matrix x(1 + n_prompts + patches.rows(), config_.embed_dim);
  x.row(0) = cls_.transpose() + positional.row(0);
  if (n_prompts > 0) {
    x.middleRows(1, n_prompts) = prompts.tokens.front();
    if (prompts.mode == TokenPromptMode::kVpNT) {
      x.middleRows(1, n_prompts).rowwise() += positional.row(prompts.position_index);
    }
  }
  x.bottomRows(patches.rows()) = patches + positional.bottomRows(patches.rows());
  return x;
}

Vector Backbone::head_logits(const Vector& feature) const {
  if (config_.head == HeadKind::kLinear) return head_w_.transpose() * feature + head_b_;
  const double norm = feature.norm();
  const Vector unit = norm == 0.0 ? Vector(Vector::Zero(feature.size())) : Vector(feature / norm);
  return config_.logit_scale * (head_w_ * unit);
}

// ---------------------------------------------------------------------------
// Forward with optional trace for backprop

struct Backbone::Trace {
  struct LayerTrace {
    LnCache ln1, ln2;
    Matrix qkv, attn_out, z1, g1;
    std::vector<Matrix> attn;
  };
  int grid = 0;
  Eigen::Index n_prompts = 0;
  std::vector<LayerTrace> layers;
  LnCache lnf;
  Vector feature;
};

void Backbone::check_image(const Image& image, PositionalMode pe_mode) const {
  if (image.empty()) throw Error(ErrorKind::kInvalidInput, "empty image");
  if (pe_mode == PositionalMode::kNative &&
      (image.height() != config_.native_size || image.width() != config_.native_size)) {
    throw Error(ErrorKind::kShape, "image is " + std::to_string(image.height()) + "x" +
                                       std::to_string(image.width()) + ", backbone expects " +
                                       std::to_string(config_.native_size));
  }
}

Vector Backbone::run(const Image& image, const TokenPrompts& prompts, PositionalMode pe_mode,
                     Trace* trace, Vector* feature_out) const {
  check_image(image, pe_mode);
  const Matrix patches = patch_embed(image);
  const int grid = image.height() / config_.patch_size;
  const Matrix positional = positional_table(grid, pe_mode);
  Matrix x = build_input_sequence(patches, prompts, positional);

  const Eigen::Index n_prompts = prompts.active_count();
  const int heads = config_.heads;
  const int dh = config_.embed_dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index T = x.rows();
  if (trace) {
    trace->grid = grid;
    trace->n_prompts = n_prompts;
    trace->layers.resize(layers_.size());
  }

  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    if (prompts.mode == TokenPromptMode::kDeep && l > 0 && n_prompts > 0) {
      x.middleRows(1, n_prompts) = prompts.tokens[l];
    }
    LnCache ln1, ln2;
    const Matrix h1 = layer_norm(x, L.ln1_g, L.ln1_b, trace ? &ln1 : nullptr);
    Matrix qkv = h1 * L.qkv_w;
    qkv.rowwise() += L.qkv_b.transpose();

    const Eigen::Index D = config_.embed_dim;
    Matrix attn_out(T, D);
    std::vector<Matrix> attn_maps;
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.middleCols(h * dh, dh);
      const auto k = qkv.middleCols(D + h * dh, dh);
      const auto v = qkv.middleCols(2 * D + h * dh, dh);
      Matrix a = (q * k.transpose()) * scale;
      softmax_rows(a);
      attn_out.middleCols(h * dh, dh).noalias() = a * v;
      if (trace) attn_maps.push_back(std::move(a));
    }
    Matrix proj = attn_out * L.proj_w;
    proj.rowwise() += L.proj_b.transpose();
    x += proj;

    const Matrix h2 = layer_norm(x, L.ln2_g, L.ln2_b, trace ? &ln2 : nullptr);
    Matrix z1 = h2 * L.fc1_w;
    z1.rowwise() += L.fc1_b.transpose();
    Matrix g1 = z1.unaryExpr([](double v) { return gelu(v); });
    Matrix mlp = g1 * L.fc2_w;
    mlp.rowwise() += L.fc2_b.transpose();
    x += mlp;

    if (trace) {
      auto& t = trace->layers[l];
      t.ln1 = std::move(ln1);
      t.ln2 = std::move(ln2);
      t.qkv = std::move(qkv);
      t.attn_out = std::move(attn_out);
      t.attn = std::move(attn_maps);
      t.z1 = std::move(z1);
      t.g1 = std::move(g1);
    }
  }

  LnCache lnf;
  const Matrix cls_norm = layer_norm(x.topRows(1), lnf_g_, lnf_b_, trace ? &lnf : nullptr);
  Vector feature = (cls_norm * proj_out_).transpose();
  if (trace) {
    trace->lnf = std::move(lnf);
    trace->feature = feature;
  }
  Vector logits = head_logits(feature);
  if (feature_out) *feature_out = std::move(feature);
  return logits;
}

Vector Backbone::forward(const Image& image, const TokenPrompts& prompts,
                         PositionalMode pe_mode) const {
  return run(image, prompts, pe_mode, nullptr, nullptr);
}

Vector Backbone::features(const Image& image, const TokenPrompts& prompts,
                          PositionalMode pe_mode) const {
  Vector feature;
  run(image, prompts, pe_mode, nullptr, &feature);
  return feature;
}

BackboneGradient Backbone::gradient(const Image& image, const TokenPrompts& prompts,
                                    PositionalMode pe_mode, const LogitLoss& loss) const {
  Trace trace;
  BackboneGradient out;
  out.logits = run(image, prompts, pe_mode, &trace, nullptr);

  Vector dlogits = Vector::Zero(out.logits.size());
  out.loss = loss(out.logits, dlogits);
  if (!std::isfinite(out.loss) || !dlogits.allFinite()) {
    NumericDiagnostic diag;
    diag.stage = "loss";
    diag.value = out.loss;
    for (Eigen::Index i = 0; i < out.logits.size(); ++i) {
      if (!std::isfinite(out.logits[i])) {
        ++diag.nonfinite_count;
      } else {
        diag.max_abs_finite = std::max(diag.max_abs_finite, std::abs(out.logits[i]));
      }
    }
    throw NumericError(diag);
  }

  // Head and feature projection.
  Vector dfeature;
  if (config_.head == HeadKind::kLinear) {
    dfeature = head_w_ * dlogits;
  } else {
    const double norm = trace.feature.norm();
    if (norm == 0.0) {
      dfeature = Vector::Zero(trace.feature.size());
    } else {
      const Vector unit = trace.feature / norm;
      const Vector dunit = config_.logit_scale * (head_w_.transpose() * dlogits);
      dfeature = (dunit - unit * unit.dot(dunit)) / norm;
    }
  }
  const Matrix dcls_norm = (proj_out_ * dfeature).transpose();
  const Matrix dcls = layer_norm_backward(dcls_norm, lnf_g_, trace.lnf);

  const Eigen::Index n_prompts = trace.n_prompts;
  const Eigen::Index n_patches = static_cast<Eigen::Index>(trace.grid) * trace.grid;
  const Eigen::Index T = 1 + n_prompts + n_patches;
  const Eigen::Index D = config_.embed_dim;
  const int heads = config_.heads;
  const int dh = static_cast<int>(D / heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx = Matrix::Zero(T, D);
  dx.row(0) = dcls.row(0);
  out.token_grads.assign(prompts.tokens.size(), Matrix());

  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& L = layers_[li];
    const auto& t = trace.layers[li];

    // MLP branch.
    Matrix dg1 = dx * L.fc2_w.transpose();
    Matrix dz1 = dg1.array() * t.z1.unaryExpr([](double v) { return gelu_grad(v); }).array();
    Matrix dh2 = dz1 * L.fc1_w.transpose();
    dx += layer_norm_backward(dh2, L.ln2_g, t.ln2);

    // Attention branch.
    const Matrix dattn_out = dx * L.proj_w.transpose();
    Matrix dqkv(T, 3 * D);
    for (int h = 0; h < heads; ++h) {
      const auto q = t.qkv.middleCols(h * dh, dh);
      const auto k = t.qkv.middleCols(D + h * dh, dh);
      const auto v = t.qkv.middleCols(2 * D + h * dh, dh);
      const Matrix& a = t.attn[h];
      const auto dout = dattn_out.middleCols(h * dh, dh);
      const Matrix da = dout * v.transpose();
      dqkv.middleCols(2 * D + h * dh, dh).noalias() = a.transpose() * dout;
      Matrix ds = a.array() * (da.array().colwise() - (da.array() * a.array()).rowwise().sum());
      ds *= scale;
      dqkv.middleCols(h * dh, dh).noalias() = ds * k;
      dqkv.middleCols(D + h * dh, dh).noalias() = ds.transpose() * q;
    }
    const Matrix dh1 = dqkv * L.qkv_w.transpose();
    dx += layer_norm_backward(dh1, L.ln1_g, t.ln1);

    if (prompts.mode == TokenPromptMode::kDeep && n_prompts > 0) {
      out.token_grads[li] = dx.middleRows(1, n_prompts);
      if (li > 0) dx.middleRows(1, n_prompts).setZero();
    }
  }

  if (n_prompts > 0 && prompts.mode != TokenPromptMode::kDeep) {
    out.token_grads[0] = dx.middleRows(1, n_prompts);
  }

  // Patch embedding back to pixels.
  const Matrix dpatches = dx.bottomRows(n_patches) * patch_w_.transpose();
  const int p = config_.patch_size;
  const int ch = config_.channels;
  out.image_grad = Image(image.height(), image.width(), ch);
  for (int gy = 0; gy < trace.grid; ++gy) {
    for (int gx = 0; gx < trace.grid; ++gx) {
      const double* row = dpatches.row(gy * trace.grid + gx).data();
      for (int dy = 0; dy < p; ++dy) {
        for (int dxp = 0; dxp < p; ++dxp) {
          for (int c = 0; c < ch; ++c) out.image_grad.at(gy * p + dy, gx * p + dxp, c) = *row++;
        }
      }
    }
  }
  return out;
}

BackboneGradient Backbone::input_gradient(const Image& image, int label,
                                          const TokenPrompts& prompts,
                                          PositionalMode pe_mode) const {
  if (label < 0 || label >= config_.num_classes) {
    throw Error(ErrorKind::kInvalidInput, "label " + std::to_string(label) + " out of range");
  }
  return gradient(image, prompts, pe_mode, [label](const Vector& logits, Vector& dlogits) {
    LossValue v = cross_entropy(logits, label);
    dlogits = std::move(v.dlogits);
    return v.loss;
  });
}

}  // namespace evp
