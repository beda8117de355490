#include "evp/harness/metrics.hpp"

#include <cstdio>

#include "evp/errors.hpp"

namespace evp::harness {

using json = nlohmann::json;

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.split = j.at("split").get<std::string>();
  r.loss = j.at("loss").get<double>();
  r.top1 = j.at("top1").get<double>();
  r.steps = j.at("steps").get<long>();
  r.prompt_params = j.at("prompt_params").get<std::size_t>();
  return r;
}

namespace {

std::string record_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["split"] = r.split;
  j["loss"] = r.loss;
  j["top1"] = r.top1;
  j["steps"] = r.steps;
  j["prompt_params"] = r.prompt_params;
  return j.dump();
}

}  // namespace

json to_json(const MetricsRecord& r) { return json::parse(record_line(r)); }

MetricsWriter::MetricsWriter(const std::filesystem::path& dir, const json& header)
    : metrics_(dir / "metrics.jsonl", std::ios::trunc), timing_(dir / "timing.jsonl", std::ios::trunc) {
  if (!metrics_ || !timing_) {
    throw Error(ErrorKind::kIo, "cannot write metrics in '" + dir.string() + "'");
  }
  nlohmann::ordered_json h;
  h["type"] = "header";
  h["fields"] = kMetricsFields;
  for (const auto& [k, v] : header.items()) h[k] = v;
  metrics_ << h.dump() << '\n';
  metrics_.flush();
}

void MetricsWriter::append(const MetricsRecord& record) {
  metrics_ << record_line(record) << '\n';
  metrics_.flush();
  nlohmann::ordered_json t;
  t["epoch"] = record.epoch;
  t["split"] = record.split;
  t["wall_time_s"] = record.wall_time_s;
  timing_ << t.dump() << '\n';
  timing_.flush();
  if (!metrics_ || !timing_) throw Error(ErrorKind::kIo, "failed writing metrics");
}

MetricsFile read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read metrics '" + path.string() + "'");
  MetricsFile file;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.contains("type") && j["type"] == "header") {
      file.header = std::move(j);
    } else {
      file.records.push_back(metrics_from_json(j));
    }
  }
  return file;
}

std::string summary_table(const std::vector<MetricsRecord>& records) {
  std::string out = "epoch  split   loss        top1     steps\n";
  char buf[128];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%5d  %-6s  %-10.6f  %-7.4f  %5ld\n", r.epoch, r.split.c_str(),
                  r.loss, r.top1, r.steps);
    out += buf;
  }
  return out;
}

}  // namespace evp::harness
