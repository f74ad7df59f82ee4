// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "resus/data_model.hpp"

namespace resus {

// Rank-sum AUC with ties credited 0.5, O(n log n). Returns nullopt when the
// labels are single-class (the undefined-AUC signal).
std::optional<double> auc(std::span<const uint8_t> labels, std::span<const double> scores);

// O(n^2) pairwise probability that a positive outscores a negative; the test
// oracle for the rank-sum form.
std::optional<double> auc_pairwise(std::span<const uint8_t> labels, std::span<const double> scores);

// ((target - 0.5) / (base - 0.5) - 1) * 100. Throws ConfigError when
// base <= 0.5 (undefined baseline).
double rela_impr(double target_auc, double base_auc);

// Mean clamped cross entropy over (label, probability) pairs.
double mean_logloss(std::span<const uint8_t> labels, std::span<const double> probs);

// Pooled metrics for one support size.
struct SizeMetrics {
  int size = 0;
  int n_users = 0;
  int skipped_users = 0;
  long n_queries = 0;
  double logloss = 0.0;
  std::optional<double> auc;       // nullopt: single-class pool, excluded
  std::optional<double> base_auc;  // shared-predictor AUC on the same pool
  double base_logloss = 0.0;
};

// One evaluation pass = one seed; reports aggregate several.
struct SeedRun {
  uint64_t seed = 0;
  std::vector<SizeMetrics> sizes;
};

struct SizeRow {
  int size = 0;
  int n_users = 0;
  int skipped_users = 0;
  long n_queries = 0;
  double logloss = 0.0;            // mean over seeds
  std::optional<double> auc;       // mean over seeds with a defined pool
  std::optional<double> base_auc;
  std::vector<double> logloss_per_seed;
  std::vector<double> auc_per_seed;  // NaN marks an excluded seed
  int excluded_seeds = 0;
};

struct StageRow {
  std::string name;  // "I", "II", "III"
  int lo = 0, hi = 0;
  std::vector<int> sizes;
  double logloss = 0.0;
  std::optional<double> auc;
  double auc_std = 0.0;  // across seeds of the stage-mean AUC
  std::optional<double> base_auc;
  std::optional<double> rela_impr_vs_base;
};

struct SuiteReport {
  std::string method;
  std::string base_method;  // empty when no base applies (MUS)
  std::vector<SizeRow> rows;
  std::vector<StageRow> stages;
};

SuiteReport make_report(const std::string& method, const std::string& base_method,
                        const std::vector<SeedRun>& runs, const ColdnessConfig& stages);

std::string report_to_json(const SuiteReport& report, const nlohmann::ordered_json& config_echo);
SuiteReport report_from_json(const std::string& text);
std::string report_to_csv(const SuiteReport& report);

}  // namespace resus
