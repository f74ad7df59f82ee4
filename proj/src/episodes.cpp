// SPDX-License-Identifier: Apache-2.0
#include "resus/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace resus {

SupportSizeDist SupportSizeDist::uniform(int tau) {
  if (tau < 1) throw ConfigError("support size distribution: tau must be >= 1");
  SupportSizeDist d;
  d.mode = Mode::Uniform;
  d.tau = tau;
  d.weights.assign(static_cast<std::size_t>(tau), 1.0 / tau);
  return d;
}

SupportSizeDist SupportSizeDist::empirical(const std::vector<UserLog>& logs, int tau) {
  if (tau < 1) throw ConfigError("support size distribution: tau must be >= 1");
  SupportSizeDist d;
  d.mode = Mode::Empirical;
  d.tau = tau;
  d.weights.assign(static_cast<std::size_t>(tau), 0.0);
  long cold = 0;
  for (const auto& log : logs) {
    const auto n = log.instances.size();
    if (n >= 1 && n <= static_cast<std::size_t>(tau)) {
      d.weights[n - 1] += 1.0;
      ++cold;
    }
  }
  if (cold == 0) throw ConfigError("empirical support size distribution: no cold users (|D_u| <= tau) in input");
  for (auto& w : d.weights) w /= static_cast<double>(cold);
  return d;
}

int SupportSizeDist::sample(Rng& rng) const {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i) + 1;
  }
  return tau;
}

EpisodeBatch sample_train_batch(const std::vector<UserLog>& train_logs, const std::vector<int>& user_indices,
                                const SupportSizeDist& dist, Rng& rng, int epoch, int batch_index) {
  if (user_indices.empty()) throw DataError("sample_train_batch: no eligible users");
  EpisodeBatch batch;
  batch.epoch = epoch;
  batch.batch_index = batch_index;
  batch.tasks.reserve(user_indices.size());
  for (int ui : user_indices) {
    const UserLog& log = train_logs[static_cast<std::size_t>(ui)];
    const int n = static_cast<int>(log.instances.size());
    if (n < 2) throw DataError("sample_train_batch: user " + log.user_id + " has fewer than 2 instances");
    const int size = std::min(dist.sample(rng), n - 1);
    batch.tasks.push_back(make_task(log, size, log.has_timestamps(), rng));
  }
  return batch;
}

MetaTestSuite build_meta_test(const std::vector<UserLog>& test_logs, const std::vector<int>& sizes,
                              const ColdnessConfig& stages, uint64_t seed) {
  MetaTestSuite suite;
  suite.stages = stages;
  suite.seed = seed;
  Rng rng(seed);
  for (int size : sizes) {
    MetaTestSuite::Entry entry;
    entry.size = size;
    for (const auto& log : test_logs) {
      if (static_cast<int>(log.instances.size()) <= size) {
        ++entry.skipped_users;
        continue;
      }
      entry.tasks.push_back(make_task(log, size, log.has_timestamps(), rng));
    }
    suite.entries.push_back(std::move(entry));
  }
  return suite;
}

std::string suite_to_json(const MetaTestSuite& suite, const std::vector<UserLog>& test_logs) {
  (void)test_logs;  // offsets already refer to the bundle's per-user instance order
  nlohmann::ordered_json root;
  root["seed"] = suite.seed;
  root["sizes"] = nlohmann::ordered_json::array();
  for (const auto& entry : suite.entries) {
    nlohmann::ordered_json je;
    je["size"] = entry.size;
    je["skipped_users"] = entry.skipped_users;
    je["tasks"] = nlohmann::ordered_json::array();
    for (const auto& task : entry.tasks) {
      nlohmann::ordered_json jt;
      jt["user"] = task.user_id;
      jt["support"] = task.support_offsets;
      jt["query"] = task.query_offsets;
      je["tasks"].push_back(std::move(jt));
    }
    root["sizes"].push_back(std::move(je));
  }
  return root.dump(2);
}

std::vector<int> parse_size_list(const std::string& spec) {
  std::vector<int> out;
  std::stringstream ss(spec);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    if (piece.empty()) continue;
    const auto dash = piece.find('-', 1);  // allow leading minus to fail parse naturally
    if (dash == std::string::npos) {
      out.push_back(std::stoi(piece));
      continue;
    }
    const auto colon = piece.find(':', dash);
    const int lo = std::stoi(piece.substr(0, dash));
    const int hi = std::stoi(colon == std::string::npos ? piece.substr(dash + 1)
                                                        : piece.substr(dash + 1, colon - dash - 1));
    const int step = colon == std::string::npos ? 1 : std::stoi(piece.substr(colon + 1));
    if (step <= 0 || hi < lo) throw ConfigError("bad size list: " + spec);
    for (int v = lo; v <= hi; v += step) out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty size list: " + spec);
  return out;
}

}  // namespace resus
