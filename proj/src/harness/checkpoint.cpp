#include "evp/harness/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include "evp/errors.hpp"

namespace evp::harness {

using json = nlohmann::json;

TensorFile checkpoint_to_tensor_file(const PromptState& state, const RunConfig& config,
                                     std::uint64_t backbone_checksum) {
  TensorFile file;
  if (state.pixel) file = prompt_to_tensor_file(*state.pixel, config.seed);
  file.metadata["seed"] = std::to_string(config.seed);
  file.metadata["run_config"] = to_json(config).dump();
  file.metadata["backbone_checksum"] = checksum_hex(backbone_checksum);
  file.metadata["token_prompts"] = json{{"mode", to_string(state.tokens.mode)},
                                        {"num_prompts", state.tokens.num_prompts},
                                        {"position_index", state.tokens.position_index},
                                        {"blocks", state.tokens.tokens.size()}}
                                       .dump();
  for (std::size_t b = 0; b < state.tokens.tokens.size(); ++b) {
    const Matrix& t = state.tokens.tokens[b];
    file.arrays["tokens." + std::to_string(b)] = {{t.rows(), t.cols()},
                                                  std::vector<double>(t.data(), t.data() + t.size())};
  }
  if (state.mapping) {
    file.metadata["label_mapping"] = json{{"num_pretrained", state.mapping->num_pretrained},
                                          {"assignment", state.mapping->assignment}}
                                         .dump();
  }
  return file;
}

Checkpoint checkpoint_from_tensor_file(const TensorFile& file) {
  Checkpoint ck;
  ck.config = merge_json(RunConfig{}, json::parse(file.require_meta("run_config")));
  ck.backbone_checksum = file.require_meta("backbone_checksum");
  if (file.arrays.contains("prompt.W")) ck.state.pixel = prompt_from_tensor_file(file);

  const json tokens = json::parse(file.require_meta("token_prompts"));
  ck.state.tokens.mode = token_prompt_mode_from_string(tokens.at("mode").get<std::string>());
  ck.state.tokens.num_prompts = tokens.at("num_prompts").get<int>();
  ck.state.tokens.position_index = tokens.at("position_index").get<int>();
  const auto blocks = tokens.at("blocks").get<std::size_t>();
  for (std::size_t b = 0; b < blocks; ++b) {
    const NamedArray& a = file.require("tokens." + std::to_string(b));
    if (a.shape.size() != 2) throw Error(ErrorKind::kShape, "token block is not 2-D");
    ck.state.tokens.tokens.push_back(Eigen::Map<const Matrix>(a.values.data(), a.shape[0], a.shape[1]));
  }
  if (auto it = file.metadata.find("label_mapping"); it != file.metadata.end()) {
    const json m = json::parse(it->second);
    LabelMapping mapping;
    mapping.num_pretrained = m.at("num_pretrained").get<int>();
    mapping.assignment = m.at("assignment").get<std::vector<int>>();
    mapping.validate();
    ck.state.mapping = std::move(mapping);
  }
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const PromptState& state,
                     const RunConfig& config, std::uint64_t backbone_checksum) {
  write_tensor_file(path, checkpoint_to_tensor_file(state, config, backbone_checksum));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_tensor_file(read_tensor_file(path));
}

}  // namespace evp::harness
