#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evp/backbone.hpp"
#include "evp/diversity.hpp"

namespace evp {

enum class CollisionPolicy {
  kUniqueGreedy,     // downstream classes claim distinct pretrained classes
  kAllowDuplicates,  // each class takes its own argmax
};

std::string to_string(CollisionPolicy policy);
CollisionPolicy collision_policy_from_string(const std::string& name);

struct CollisionEvent {
  int downstream = 0;        // class that lost its preferred pretrained class
  int contested = 0;         // pretrained class it wanted
  int holder = 0;            // downstream class that already claimed it
  int assigned = 0;          // where it ended up
};

struct LabelMapping {
  int num_pretrained = 0;
  std::vector<int> assignment;                // downstream -> pretrained
  std::vector<std::vector<long>> frequency;   // [downstream][pretrained]
  std::vector<CollisionEvent> collision_log;

  int num_downstream() const noexcept { return static_cast<int>(assignment.size()); }
  long top_frequency(int downstream) const;
  std::uint64_t checksum() const;
  void validate() const;
};

// Assigns each downstream class from its prediction-count row.
// Unique-greedy: classes are visited in descending order of their top count
// (ties: lower downstream index); each takes its most frequent unclaimed
// pretrained class (ties: lower pretrained index).
LabelMapping mapping_from_frequencies(std::vector<std::vector<long>> frequency, int num_pretrained,
                                      CollisionPolicy policy);

// Runs the promptless backbone over every image and counts argmax
// predictions per downstream class.
LabelMapping build_mapping(const Backbone& backbone, const std::vector<LabeledImage>& dataset,
                           int num_downstream, CollisionPolicy policy = CollisionPolicy::kUniqueGreedy);

// Seeded injective assignment used by the VP baseline.
LabelMapping arbitrary_mapping(int num_downstream, int num_pretrained, std::uint64_t seed);

Vector remap_logits(const Vector& pretrained_logits, const LabelMapping& mapping);
// Scatters downstream logit gradients back to the pretrained logits.
Vector remap_gradient(const Vector& downstream_grad, const LabelMapping& mapping, int num_pretrained);

// Tab-separated table: downstream, pretrained, top_frequency.
void write_mapping_table(const std::filesystem::path& path, const LabelMapping& mapping);
LabelMapping read_mapping_table(const std::filesystem::path& path, int num_pretrained);

}  // namespace evp
