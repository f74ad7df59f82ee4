// SPDX-License-Identifier: Apache-2.0
#include "resus/data_model.hpp"

#include <algorithm>

namespace resus {

void UserLog::normalize() {
  if (instances.empty()) return;
  const bool first_has = instances.front().timestamp.has_value();
  for (const auto& inst : instances)
    if (inst.timestamp.has_value() != first_has)
      throw DataError("user " + user_id + ": mixed timestamped and untimestamped instances");
  if (first_has)
    std::stable_sort(instances.begin(), instances.end(),
                     [](const Instance& a, const Instance& b) { return *a.timestamp < *b.timestamp; });
}

ColdnessConfig ColdnessConfig::from_sizes(const std::vector<int>& sizes, int tau) {
  if (sizes.empty()) throw ConfigError("coldness config: empty size list");
  ColdnessConfig cfg;
  cfg.tau = tau;
  const int n = static_cast<int>(sizes.size());
  const int base = n / 3;
  const int extra = n % 3;
  int pos = 0;
  for (int s = 0; s < 3; ++s) {
    const int len = base + (s < extra ? 1 : 0);
    if (len == 0) continue;
    cfg.stage_bounds.emplace_back(sizes[pos], sizes[pos + len - 1]);
    pos += len;
  }
  return cfg;
}

int ColdnessConfig::stage_of(int support_size) const {
  for (std::size_t s = 0; s < stage_bounds.size(); ++s)
    if (support_size >= stage_bounds[s].first && support_size <= stage_bounds[s].second) return static_cast<int>(s);
  return -1;
}

std::pair<std::vector<Instance>, std::vector<Instance>> split_by_label(const UserLog& log) {
  std::pair<std::vector<Instance>, std::vector<Instance>> out;
  for (const auto& inst : log.instances) {
    if (inst.label)
      out.first.push_back(inst);
    else
      out.second.push_back(inst);
  }
  return out;
}

Task make_task(const UserLog& log, int support_size, bool time_ordered, Rng& rng) {
  const int n = static_cast<int>(log.instances.size());
  if (support_size < 1 || support_size >= n)
    throw InsufficientHistoryError("user " + log.user_id + ": support size " + std::to_string(support_size) +
                                   " needs a log longer than it (have " + std::to_string(n) + ")");
  Task task;
  task.user_id = log.user_id;
  std::vector<bool> in_support(static_cast<std::size_t>(n), false);
  if (time_ordered) {
    for (int i = 0; i < support_size; ++i) in_support[static_cast<std::size_t>(i)] = true;
  } else {
    std::vector<int> pick(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pick[static_cast<std::size_t>(i)] = i;
    // partial Fisher-Yates: first support_size entries are the support draw
    for (int i = 0; i < support_size; ++i) {
      const int j = i + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(n - i)));
      std::swap(pick[static_cast<std::size_t>(i)], pick[static_cast<std::size_t>(j)]);
    }
    for (int i = 0; i < support_size; ++i) in_support[static_cast<std::size_t>(pick[static_cast<std::size_t>(i)])] = true;
  }
  for (int i = 0; i < n; ++i) {
    if (in_support[static_cast<std::size_t>(i)]) {
      task.support.push_back(log.instances[static_cast<std::size_t>(i)]);
      task.support_offsets.push_back(i);
    } else {
      task.query.push_back(log.instances[static_cast<std::size_t>(i)]);
      task.query_offsets.push_back(i);
    }
  }
  return task;
}

void validate_task(const Task& task) {
  if (task.support.empty()) throw DataError("task " + task.user_id + ": empty support set");
  if (task.query.empty()) throw DataError("task " + task.user_id + ": empty query set");
  const bool ts = task.support.front().timestamp.has_value();
  if (ts) {
    int64_t max_support = *task.support.front().timestamp;
    for (const auto& s : task.support) max_support = std::max(max_support, *s.timestamp);
    for (const auto& q : task.query)
      if (*q.timestamp < max_support)
        throw DataError("task " + task.user_id + ": query precedes support in time");
  }
}

}  // namespace resus
