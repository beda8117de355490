#include "evp/label_mapping.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "evp/errors.hpp"
#include "evp/tensor_file.hpp"

namespace evp {

std::string to_string(CollisionPolicy policy) {
  return policy == CollisionPolicy::kUniqueGreedy ? "unique" : "allow_duplicates";
}

CollisionPolicy collision_policy_from_string(const std::string& name) {
  if (name == "unique") return CollisionPolicy::kUniqueGreedy;
  if (name == "allow_duplicates") return CollisionPolicy::kAllowDuplicates;
  throw Error(ErrorKind::kConfig, "unknown collision policy '" + name + "'");
}

long LabelMapping::top_frequency(int downstream) const {
  if (frequency.empty()) return 0;
  const auto& row = frequency.at(downstream);
  return row.empty() ? 0 : *std::max_element(row.begin(), row.end());
}

std::uint64_t LabelMapping::checksum() const {
  NamedArray a{{static_cast<std::int64_t>(assignment.size())}, {}};
  for (int v : assignment) a.values.push_back(v);
  return content_checksum({{"assignment", a}});
}

void LabelMapping::validate() const {
  for (int p : assignment) {
    if (p < 0 || p >= num_pretrained) throw Error(ErrorKind::kConfig, "unmapped downstream class");
  }
}

LabelMapping mapping_from_frequencies(std::vector<std::vector<long>> frequency, int num_pretrained,
                                      CollisionPolicy policy) {
  const int n = static_cast<int>(frequency.size());
  for (const auto& row : frequency) {
    if (static_cast<int>(row.size()) != num_pretrained) {
      throw Error(ErrorKind::kShape, "frequency row width differs from pretrained class count");
    }
    if (std::accumulate(row.begin(), row.end(), 0L) == 0) {
      throw Error(ErrorKind::kInvalidDataset, "downstream class with no images");
    }
  }
  if (policy == CollisionPolicy::kUniqueGreedy && n > num_pretrained) {
    throw Error(ErrorKind::kCapacity, "more downstream classes than pretrained classes");
  }

  LabelMapping m;
  m.num_pretrained = num_pretrained;
  m.frequency = std::move(frequency);
  m.assignment.assign(n, -1);

  // Pretrained classes ordered by count, ties toward the lower index.
  auto preference = [&](int d) {
    std::vector<int> order(num_pretrained);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return m.frequency[d][a] > m.frequency[d][b]; });
    return order;
  };

  if (policy == CollisionPolicy::kAllowDuplicates) {
    for (int d = 0; d < n; ++d) m.assignment[d] = preference(d).front();
    return m;
  }

  std::vector<int> visit(n);
  std::iota(visit.begin(), visit.end(), 0);
  std::stable_sort(visit.begin(), visit.end(),
                   [&](int a, int b) { return m.top_frequency(a) > m.top_frequency(b); });
  std::vector<int> holder(num_pretrained, -1);
  for (int d : visit) {
    const auto order = preference(d);
    for (int p : order) {
      if (holder[p] < 0) {
        holder[p] = d;
        m.assignment[d] = p;
        break;
      }
    }
    if (m.assignment[d] != order.front()) {
      m.collision_log.push_back({d, order.front(), holder[order.front()], m.assignment[d]});
    }
  }
  return m;
}

LabelMapping build_mapping(const Backbone& backbone, const std::vector<LabeledImage>& dataset,
                           int num_downstream, CollisionPolicy policy) {
  const int num_pretrained = backbone.config().num_classes;
  std::vector<std::vector<long>> frequency(num_downstream, std::vector<long>(num_pretrained, 0));
  for (const LabeledImage& s : dataset) {
    if (s.label < 0 || s.label >= num_downstream) {
      throw Error(ErrorKind::kInvalidDataset, "label outside downstream class range");
    }
    const Vector logits = backbone.forward(s.image);
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    ++frequency[s.label][best];
  }
  return mapping_from_frequencies(std::move(frequency), num_pretrained, policy);
}

LabelMapping arbitrary_mapping(int num_downstream, int num_pretrained, std::uint64_t seed) {
  if (num_downstream < 1 || num_pretrained < 1) {
    throw Error(ErrorKind::kConfig, "class counts must be positive");
  }
  if (num_downstream > num_pretrained) {
    throw Error(ErrorKind::kCapacity, "more downstream classes than pretrained classes");
  }
  std::vector<int> pool(num_pretrained);
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  LabelMapping m;
  m.num_pretrained = num_pretrained;
  m.assignment.assign(pool.begin(), pool.begin() + num_downstream);
  return m;
}

Vector remap_logits(const Vector& pretrained_logits, const LabelMapping& mapping) {
  Vector out(mapping.num_downstream());
  for (int d = 0; d < mapping.num_downstream(); ++d) {
    const int p = mapping.assignment[d];
    if (p < 0 || p >= pretrained_logits.size()) {
      throw Error(ErrorKind::kConfig, "downstream class " + std::to_string(d) + " is unmapped");
    }
    out[d] = pretrained_logits[p];
  }
  return out;
}

Vector remap_gradient(const Vector& downstream_grad, const LabelMapping& mapping, int num_pretrained) {
  Vector out = Vector::Zero(num_pretrained);
  for (int d = 0; d < mapping.num_downstream(); ++d) out[mapping.assignment[d]] += downstream_grad[d];
  return out;
}

void write_mapping_table(const std::filesystem::path& path, const LabelMapping& mapping) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kIo, "cannot write mapping table '" + path.string() + "'");
  out << "# downstream\tpretrained\ttop_frequency\n";
  for (int d = 0; d < mapping.num_downstream(); ++d) {
    out << d << '\t' << mapping.assignment[d] << '\t' << mapping.top_frequency(d) << '\n';
  }
  for (const CollisionEvent& e : mapping.collision_log) {
    out << "# collision: downstream " << e.downstream << " wanted " << e.contested
        << " (held by " << e.holder << "), assigned " << e.assigned << '\n';
  }
}

LabelMapping read_mapping_table(const std::filesystem::path& path, int num_pretrained) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read mapping table '" + path.string() + "'");
  LabelMapping m;
  m.num_pretrained = num_pretrained;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line.front() == '#') continue;
    std::istringstream row(line);
    int d = -1, p = -1;
    long freq = 0;
    if (!(row >> d >> p >> freq) || d != m.num_downstream()) {
      throw Error(ErrorKind::kConfig, "malformed mapping table row: " + line);
    }
    m.assignment.push_back(p);
  }
  m.validate();
  return m;
}

}  // namespace evp
