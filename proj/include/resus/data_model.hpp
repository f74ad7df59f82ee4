// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "resus/errors.hpp"
#include "resus/rng.hpp"

namespace resus {

// Per-field vocabulary index 0 is the out-of-vocabulary bucket; real tokens
// start at 1.
inline constexpr int kOovIndex = 0;

struct FieldSchema {
  std::string name;
  bool is_user_id = false;  // recorded in instances but excluded from models
  std::unordered_map<std::string, int> vocab;  // token -> index (>= 1)
  std::vector<std::string> tokens;             // index - 1 -> token, for decoding

  // Vocabulary size including the OOV slot.
  int size() const { return static_cast<int>(tokens.size()) + 1; }
  int distinct() const { return static_cast<int>(tokens.size()); }

  int index_of(const std::string& token) const {
    auto it = vocab.find(token);
    return it == vocab.end() ? kOovIndex : it->second;
  }

  int add(const std::string& token) {
    auto it = vocab.find(token);
    if (it != vocab.end()) return it->second;
    const int idx = static_cast<int>(tokens.size()) + 1;
    vocab.emplace(token, idx);
    tokens.push_back(token);
    return idx;
  }

  // Decodes an index back to its raw token ("" for OOV).
  const std::string& token_of(int idx) const {
    static const std::string oov;
    if (idx == kOovIndex) return oov;
    return tokens.at(static_cast<std::size_t>(idx) - 1);
  }
};

struct FeatureSpace {
  std::vector<FieldSchema> fields;

  int field_count() const { return static_cast<int>(fields.size()); }

  long total_features() const {
    long n = 0;
    for (const auto& f : fields) n += f.distinct();
    return n;
  }

  long total_features_with_oov() const {
    long n = 0;
    for (const auto& f : fields) n += f.size();
    return n;
  }
};

// One CTR record: one dense index per field plus the binary label.
struct Instance {
  std::vector<int32_t> field_indices;
  uint8_t label = 0;
  std::optional<int64_t> timestamp;
};

struct UserLog {
  std::string user_id;
  std::vector<Instance> instances;

  bool has_timestamps() const {
    return !instances.empty() && instances.front().timestamp.has_value();
  }

  // Stable-sorts by timestamp when present; throws if timestamps are mixed.
  void normalize();
};

// A (support, query) pair for one user; the unit of meta-learning.
// Disjointness is by position in the source log, so duplicate instances are
// allowed; the offsets record where each member came from.
struct Task {
  std::string user_id;
  std::vector<Instance> support;
  std::vector<Instance> query;
  std::vector<int> support_offsets;
  std::vector<int> query_offsets;
};

// Evaluation grouping of support sizes into three cold-start stages.
struct ColdnessConfig {
  int tau = 30;
  // Inclusive [lo, hi] bounds on the support size per stage, in order I, II, III.
  std::vector<std::pair<int, int>> stage_bounds;

  static ColdnessConfig from_sizes(const std::vector<int>& sizes, int tau);
  int stage_of(int support_size) const;  // 0, 1 or 2; -1 if outside all stages
};

// Partitions a log into (positives, negatives) preserving order.
std::pair<std::vector<Instance>, std::vector<Instance>> split_by_label(const UserLog& log);

// Builds a task from a user log. time_ordered: support = earliest
// support_size instances (log must be normalized); otherwise support indices
// are drawn uniformly without replacement from rng. Query = remainder,
// original order preserved.
Task make_task(const UserLog& log, int support_size, bool time_ordered, Rng& rng);

// Invariant check used by tests and samplers in debug paths.
void validate_task(const Task& task);

}  // namespace resus
