#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace evp::harness {

struct MetricsRecord {
  int epoch = 0;
  std::string split;  // "train" (running, augmented) or "eval"
  double loss = 0.0;
  double top1 = 0.0;
  long steps = 0;
  std::size_t prompt_params = 0;
  double wall_time_s = 0.0;  // kept out of metrics.jsonl, see MetricsWriter
};

// Fields of a metrics.jsonl record, in output order.
inline const std::vector<std::string> kMetricsFields{"epoch", "split", "loss", "top1", "steps",
                                                     "prompt_params"};

nlohmann::json to_json(const MetricsRecord& record);
MetricsRecord metrics_from_json(const nlohmann::json& j);

// Writes metrics.jsonl: a header line naming the fields and carrying the run
// config, then one JSON object per record. Wall-clock times go to a separate
// timing.jsonl so the metrics bytes depend only on (config, seed).
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& dir, const nlohmann::json& header);
  void append(const MetricsRecord& record);

 private:
  std::ofstream metrics_;
  std::ofstream timing_;
};

struct MetricsFile {
  nlohmann::json header;
  std::vector<MetricsRecord> records;
};

MetricsFile read_metrics(const std::filesystem::path& path);

// Fixed-width table of the per-epoch records.
std::string summary_table(const std::vector<MetricsRecord>& records);

}  // namespace evp::harness
