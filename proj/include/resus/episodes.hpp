// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "resus/data_model.hpp"

namespace resus {

// Distribution of sampled support sizes over {1..tau}.
struct SupportSizeDist {
  enum class Mode { Uniform, Empirical };
  Mode mode = Mode::Uniform;
  int tau = 30;
  std::vector<double> weights;  // weights[i] = P(size = i+1); sums to 1

  static SupportSizeDist uniform(int tau);
  // P(size = i) proportional to the number of cold users (|D_u| <= tau) whose
  // log length is exactly i.
  static SupportSizeDist empirical(const std::vector<UserLog>& logs, int tau);

  int sample(Rng& rng) const;
};

struct EpisodeBatch {
  std::vector<Task> tasks;  // distinct users
  int epoch = 0;
  int batch_index = 0;
};

// Fixed evaluation tasks: for each configured support size, one task per
// eligible test user.
struct MetaTestSuite {
  struct Entry {
    int size;
    std::vector<Task> tasks;
    int skipped_users = 0;  // users with |D_u| <= size
  };
  std::vector<Entry> entries;
  ColdnessConfig stages;
  uint64_t seed = 0;
};

// Samples one meta-train batch: per user draw a size from dist, clamp it to
// |D_u|-1 so the query set is nonempty, and split (time-ordered when the log
// carries timestamps). user_indices selects rows of train_logs.
EpisodeBatch sample_train_batch(const std::vector<UserLog>& train_logs, const std::vector<int>& user_indices,
                                const SupportSizeDist& dist, Rng& rng, int epoch, int batch_index);

// Builds the fixed meta-test suite over the given sizes. Deterministic for a
// given (logs, sizes, seed); users whose logs are too short for a size are
// skipped and counted.
MetaTestSuite build_meta_test(const std::vector<UserLog>& test_logs, const std::vector<int>& sizes,
                              const ColdnessConfig& stages, uint64_t seed);

// JSON audit index of a suite: per size, per task, the user id and the
// support/query offsets into that user's instance list.
std::string suite_to_json(const MetaTestSuite& suite, const std::vector<UserLog>& test_logs);

// Expands a size-list spec: "1-30" -> 1..30, "10-150:10" -> 10,20,...,150,
// or an explicit comma list "1,5,10".
std::vector<int> parse_size_list(const std::string& spec);

}  // namespace resus
