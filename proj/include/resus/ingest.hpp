// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "resus/data_model.hpp"

namespace resus {

enum class Split : uint8_t { Train = 0, Validation = 1, Test = 2 };

struct IngestConfig {
  std::string format = "movielens";  // "movielens" | "tabular"
  std::string path;                  // directory (movielens) or file (tabular)
  char delimiter = '\t';
  std::string user_col = "user";
  std::string item_col = "item";
  std::string label_col = "label";
  std::string time_col;  // empty: no timestamps
  int rating_threshold = 3;
  int min_item_interactions = 100;
  std::array<double, 3> split_ratio{7.0, 2.0, 1.0};
  uint64_t seed = 42;
};

// Raw (pre-encoding) view of a dataset: string tokens per field.
struct RawRecord {
  std::vector<std::string> tokens;  // one per field
  uint8_t label = 0;
  std::optional<int64_t> timestamp;
};

struct RawDataset {
  std::vector<std::string> field_names;
  int user_field = 0;
  int item_field = -1;  // -1: no item field, the interaction filter is skipped
  std::vector<RawRecord> records;
};

// MovieLens-1M layout: ratings.dat / users.dat / movies.dat, "::"-delimited.
// Fields: user ID, age, gender, occupation, movie ID, genre (primary token of
// the genre list), release year. Label = rating >= threshold.
RawDataset parse_movielens(const std::string& dir, int rating_threshold);

// Generic delimited file with a header row. The label column must hold
// 0/1 (-1 accepted as 0); the optional time column must be integral.
RawDataset parse_tabular(const std::string& file, const IngestConfig& cfg);

// Drops every record whose item occurs fewer than min_count times globally.
// Counts are taken once before any removal (single pass, no refiltering).
void filter_cold_items(RawDataset& raw, int min_count);

struct SplitAssignment {
  std::unordered_map<std::string, Split> by_user;
  std::array<int, 3> counts{0, 0, 0};
};

// Deterministic user-disjoint split with largest-remainder rounding.
SplitAssignment split_users(const std::vector<std::string>& user_ids, const std::array<double, 3>& ratio,
                            uint64_t seed);

// Vocabulary built only from users accepted by the filter; everything else
// later encodes to the per-field OOV bucket.
FeatureSpace build_feature_space(const RawDataset& raw, const std::function<bool(const std::string&)>& include_user);

struct Bundle {
  FeatureSpace space;
  std::vector<UserLog> logs;  // encoded, time-normalized, first-appearance user order
  SplitAssignment split;
  nlohmann::ordered_json manifest;
};

// Full pipeline: parse -> item filter -> user split -> train-only vocabulary
// -> encode. The manifest echoes every preprocessing parameter and count.
Bundle ingest_dataset(const IngestConfig& cfg);

void write_bundle(const std::string& path, const Bundle& bundle);
Bundle read_bundle(const std::string& path);

// Materializes the logs of one split.
std::vector<UserLog> split_logs(const Bundle& bundle, Split split);

// All instances of one split flattened (pretraining input).
std::vector<Instance> split_instances(const Bundle& bundle, Split split);

}  // namespace resus
