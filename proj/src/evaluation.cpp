// SPDX-License-Identifier: Apache-2.0
#include "resus/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "resus/kernels.hpp"

namespace resus {

std::optional<double> auc(std::span<const uint8_t> labels, std::span<const double> scores) {
  const std::size_t n = labels.size();
  if (scores.size() != n) throw ShapeError("auc: label/score length mismatch");
  long npos = 0;
  for (uint8_t y : labels) npos += y ? 1 : 0;
  const long nneg = static_cast<long>(n) - npos;
  if (npos == 0 || nneg == 0) return std::nullopt;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // average ranks over tie blocks, then the Mann-Whitney identity
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(npos) * static_cast<double>(npos + 1);
  return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

std::optional<double> auc_pairwise(std::span<const uint8_t> labels, std::span<const double> scores) {
  long npos = 0;
  for (uint8_t y : labels) npos += y ? 1 : 0;
  const long nneg = static_cast<long>(labels.size()) - npos;
  if (npos == 0 || nneg == 0) return std::nullopt;
  double wins = 0.0;
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (!labels[p]) continue;
    for (std::size_t q = 0; q < labels.size(); ++q) {
      if (labels[q]) continue;
      if (scores[p] > scores[q])
        wins += 1.0;
      else if (scores[p] == scores[q])
        wins += 0.5;
    }
  }
  return wins / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double rela_impr(double target_auc, double base_auc) {
  if (!(base_auc > 0.5)) throw ConfigError("rela_impr: base AUC must exceed 0.5");
  return ((target_auc - 0.5) / (base_auc - 0.5) - 1.0) * 100.0;
}

double mean_logloss(std::span<const uint8_t> labels, std::span<const double> probs) {
  if (labels.size() != probs.size()) throw ShapeError("mean_logloss: length mismatch");
  if (labels.empty()) throw ShapeError("mean_logloss: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) total += bce_loss(static_cast<double>(labels[i]), probs[i]);
  return total / static_cast<double>(labels.size());
}

namespace {

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

SuiteReport make_report(const std::string& method, const std::string& base_method,
                        const std::vector<SeedRun>& runs, const ColdnessConfig& stages) {
  if (runs.empty()) throw ConfigError("make_report: no seed runs");
  SuiteReport report;
  report.method = method;
  report.base_method = base_method;

  const std::size_t nsizes = runs.front().sizes.size();
  for (const auto& run : runs)
    if (run.sizes.size() != nsizes) throw ShapeError("make_report: seed runs disagree on size lists");

  for (std::size_t si = 0; si < nsizes; ++si) {
    SizeRow row;
    row.size = runs.front().sizes[si].size;
    row.n_users = runs.front().sizes[si].n_users;
    row.skipped_users = runs.front().sizes[si].skipped_users;
    row.n_queries = runs.front().sizes[si].n_queries;
    std::vector<double> aucs, base_aucs;
    for (const auto& run : runs) {
      const SizeMetrics& m = run.sizes[si];
      if (m.size != row.size) throw ShapeError("make_report: size mismatch across seeds");
      row.logloss_per_seed.push_back(m.logloss);
      if (m.auc) {
        aucs.push_back(*m.auc);
        row.auc_per_seed.push_back(*m.auc);
      } else {
        row.auc_per_seed.push_back(std::numeric_limits<double>::quiet_NaN());
        ++row.excluded_seeds;
      }
      if (m.base_auc) base_aucs.push_back(*m.base_auc);
    }
    row.logloss = mean(row.logloss_per_seed);
    if (!aucs.empty()) row.auc = mean(aucs);
    if (!base_aucs.empty()) row.base_auc = mean(base_aucs);
    report.rows.push_back(std::move(row));
  }

  const char* names[3] = {"I", "II", "III"};
  for (std::size_t s = 0; s < stages.stage_bounds.size() && s < 3; ++s) {
    StageRow st;
    st.name = names[s];
    st.lo = stages.stage_bounds[s].first;
    st.hi = stages.stage_bounds[s].second;
    std::vector<double> per_seed_stage_auc;
    // stage value per seed = mean over the stage's per-size values
    for (std::size_t r = 0; r < runs.size(); ++r) {
      std::vector<double> vals;
      for (const auto& m : runs[r].sizes)
        if (m.size >= st.lo && m.size <= st.hi && m.auc) vals.push_back(*m.auc);
      if (!vals.empty()) per_seed_stage_auc.push_back(mean(vals));
    }
    std::vector<double> ll, av, bv;
    for (const auto& row : report.rows) {
      if (row.size < st.lo || row.size > st.hi) continue;
      st.sizes.push_back(row.size);
      ll.push_back(row.logloss);
      if (row.auc) av.push_back(*row.auc);
      if (row.base_auc) bv.push_back(*row.base_auc);
    }
    if (st.sizes.empty()) continue;
    st.logloss = mean(ll);
    if (!av.empty()) st.auc = mean(av);
    if (!bv.empty()) st.base_auc = mean(bv);
    st.auc_std = stddev(per_seed_stage_auc);
    if (st.auc && st.base_auc && *st.base_auc > 0.5) st.rela_impr_vs_base = rela_impr(*st.auc, *st.base_auc);
    report.stages.push_back(std::move(st));
  }
  return report;
}

namespace {

nlohmann::ordered_json row_to_json(const SizeRow& row) {
  nlohmann::ordered_json j;
  j["size"] = row.size;
  j["n_users"] = row.n_users;
  j["skipped_users"] = row.skipped_users;
  j["n_queries"] = row.n_queries;
  j["logloss"] = row.logloss;
  if (row.auc)
    j["auc"] = *row.auc;
  else
    j["auc"] = nullptr;
  if (row.base_auc) j["base_auc"] = *row.base_auc;
  j["excluded_seeds"] = row.excluded_seeds;
  j["logloss_per_seed"] = row.logloss_per_seed;
  nlohmann::ordered_json aucs = nlohmann::ordered_json::array();
  for (double a : row.auc_per_seed) {
    if (std::isnan(a))
      aucs.push_back(nullptr);
    else
      aucs.push_back(a);
  }
  j["auc_per_seed"] = std::move(aucs);
  return j;
}

}  // namespace

std::string report_to_json(const SuiteReport& report, const nlohmann::ordered_json& config_echo) {
  nlohmann::ordered_json root;
  root["method"] = report.method;
  root["base_method"] = report.base_method;
  root["config"] = config_echo;
  root["sizes"] = nlohmann::ordered_json::array();
  for (const auto& row : report.rows) root["sizes"].push_back(row_to_json(row));
  root["stages"] = nlohmann::ordered_json::array();
  for (const auto& st : report.stages) {
    nlohmann::ordered_json j;
    j["stage"] = st.name;
    j["size_lo"] = st.lo;
    j["size_hi"] = st.hi;
    j["sizes"] = st.sizes;
    j["logloss"] = st.logloss;
    if (st.auc)
      j["auc"] = *st.auc;
    else
      j["auc"] = nullptr;
    j["auc_std"] = st.auc_std;
    if (st.base_auc) j["base_auc"] = *st.base_auc;
    if (st.rela_impr_vs_base) j["rela_impr_vs_base"] = *st.rela_impr_vs_base;
    root["stages"].push_back(std::move(j));
  }
  return root.dump(2);
}

SuiteReport report_from_json(const std::string& text) {
  const auto root = nlohmann::json::parse(text);
  SuiteReport report;
  report.method = root.at("method").get<std::string>();
  report.base_method = root.at("base_method").get<std::string>();
  for (const auto& j : root.at("sizes")) {
    SizeRow row;
    row.size = j.at("size").get<int>();
    row.n_users = j.at("n_users").get<int>();
    row.skipped_users = j.at("skipped_users").get<int>();
    row.n_queries = j.at("n_queries").get<long>();
    row.logloss = j.at("logloss").get<double>();
    if (!j.at("auc").is_null()) row.auc = j.at("auc").get<double>();
    if (j.contains("base_auc")) row.base_auc = j.at("base_auc").get<double>();
    row.excluded_seeds = j.at("excluded_seeds").get<int>();
    row.logloss_per_seed = j.at("logloss_per_seed").get<std::vector<double>>();
    for (const auto& a : j.at("auc_per_seed"))
      row.auc_per_seed.push_back(a.is_null() ? std::numeric_limits<double>::quiet_NaN() : a.get<double>());
    report.rows.push_back(std::move(row));
  }
  for (const auto& j : root.at("stages")) {
    StageRow st;
    st.name = j.at("stage").get<std::string>();
    st.lo = j.at("size_lo").get<int>();
    st.hi = j.at("size_hi").get<int>();
    st.sizes = j.at("sizes").get<std::vector<int>>();
    st.logloss = j.at("logloss").get<double>();
    if (!j.at("auc").is_null()) st.auc = j.at("auc").get<double>();
    st.auc_std = j.at("auc_std").get<double>();
    if (j.contains("base_auc")) st.base_auc = j.at("base_auc").get<double>();
    if (j.contains("rela_impr_vs_base")) st.rela_impr_vs_base = j.at("rela_impr_vs_base").get<double>();
    report.stages.push_back(std::move(st));
  }
  return report;
}

std::string report_to_csv(const SuiteReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "method,size,n_users,skipped_users,n_queries,logloss,auc,base_auc\n";
  for (const auto& row : report.rows) {
    os << report.method << ',' << row.size << ',' << row.n_users << ',' << row.skipped_users << ',' << row.n_queries
       << ',' << row.logloss << ',';
    if (row.auc) os << *row.auc;
    os << ',';
    if (row.base_auc) os << *row.base_auc;
    os << '\n';
  }
  return os.str();
}

}  // namespace resus
