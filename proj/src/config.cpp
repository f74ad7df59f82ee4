// SPDX-License-Identifier: Apache-2.0
#include "resus/config.hpp"

#include <fstream>
#include <sstream>

namespace resus {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  ExperimentConfig cfg;
  std::string line;
  long line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key = value");
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      return std::stoi(v);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected integer, got '" + v + "'");
    }
  };
  auto as_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": expected number, got '" + v + "'");
    }
  };

  if (key == "dataset.format") dataset_format = value;
  else if (key == "dataset.path") dataset_path = value;
  else if (key == "dataset.bundle") bundle_path = value;
  else if (key == "dataset.delimiter") delimiter = value == "\\t" ? "\t" : value;
  else if (key == "dataset.user_col") user_col = value;
  else if (key == "dataset.item_col") item_col = value;
  else if (key == "dataset.label_col") label_col = value;
  else if (key == "dataset.time_col") time_col = value;
  else if (key == "dataset.rating_threshold") rating_threshold = as_int(value);
  else if (key == "dataset.min_item_interactions") min_item_interactions = as_int(value);
  else if (key == "dataset.split_ratio") split_ratio = value;
  else if (key == "model.arch") arch = value;
  else if (key == "model.embed_dim") embed_dim = as_int(value);
  else if (key == "model.mlp_widths") mlp_widths = value;
  else if (key == "meta.mode") mode = value;
  else if (key == "meta.tau") tau = as_int(value);
  else if (key == "meta.dist") dist = value;
  else if (key == "meta.batch_tasks") batch_tasks = as_int(value);
  else if (key == "meta.beta_per_size") beta_per_size = value == "1" || value == "true";
  else if (key == "train.lr") lr = as_double(value);
  else if (key == "train.batch") batch = as_int(value);
  else if (key == "train.max_epochs") max_epochs = as_int(value);
  else if (key == "train.patience") patience = as_int(value);
  else if (key == "eval.sizes") eval_sizes = value;
  else if (key == "eval.seeds") eval_seeds = value;
  else if (key == "seed") seed = static_cast<uint64_t>(std::stoull(value));
  else if (key == "threads") threads = as_int(value);
  else if (key == "out") out_dir = value;
  else if (key == "beta_override") beta_override = as_double(value);
  else if (key == "verbose") verbose = value == "1" || value == "true";
  else throw ConfigError("unknown config key: " + key);
}

std::string ExperimentConfig::echo() const {
  std::ostringstream os;
  os.precision(17);
  os << "dataset.format = " << dataset_format << "\n";
  os << "dataset.path = " << dataset_path << "\n";
  os << "dataset.bundle = " << bundle_path << "\n";
  os << "dataset.delimiter = " << (delimiter == "\t" ? "\\t" : delimiter) << "\n";
  os << "dataset.user_col = " << user_col << "\n";
  os << "dataset.item_col = " << item_col << "\n";
  os << "dataset.label_col = " << label_col << "\n";
  os << "dataset.time_col = " << time_col << "\n";
  os << "dataset.rating_threshold = " << rating_threshold << "\n";
  os << "dataset.min_item_interactions = " << min_item_interactions << "\n";
  os << "dataset.split_ratio = " << split_ratio << "\n";
  os << "model.arch = " << arch << "\n";
  os << "model.embed_dim = " << embed_dim << "\n";
  os << "model.mlp_widths = " << mlp_widths << "\n";
  os << "meta.mode = " << mode << "\n";
  os << "meta.tau = " << tau << "\n";
  os << "meta.dist = " << dist << "\n";
  os << "meta.batch_tasks = " << batch_tasks << "\n";
  os << "meta.beta_per_size = " << (beta_per_size ? 1 : 0) << "\n";
  os << "train.lr = " << lr << "\n";
  os << "train.batch = " << batch << "\n";
  os << "train.max_epochs = " << max_epochs << "\n";
  os << "train.patience = " << patience << "\n";
  os << "eval.sizes = " << eval_sizes << "\n";
  os << "eval.seeds = " << eval_seeds << "\n";
  os << "seed = " << seed << "\n";
  os << "threads = " << threads << "\n";
  os << "out = " << out_dir << "\n";
  if (beta_override) os << "beta_override = " << *beta_override << "\n";
  if (verbose) os << "verbose = 1\n";
  return os.str();
}

nlohmann::ordered_json ExperimentConfig::echo_json() const {
  nlohmann::ordered_json j;
  std::istringstream is(echo());
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

IngestConfig ExperimentConfig::ingest_config() const {
  IngestConfig ic;
  ic.format = dataset_format;
  ic.path = dataset_path;
  if (delimiter.size() != 1) throw ConfigError("dataset.delimiter must be a single character");
  ic.delimiter = delimiter[0];
  ic.user_col = user_col;
  ic.item_col = item_col;
  ic.label_col = label_col;
  ic.time_col = time_col;
  ic.rating_threshold = rating_threshold;
  ic.min_item_interactions = min_item_interactions;
  ic.split_ratio = parsed_ratio();
  ic.seed = seed;
  return ic;
}

std::array<double, 3> ExperimentConfig::parsed_ratio() const {
  std::array<double, 3> r{};
  std::stringstream ss(split_ratio);
  std::string piece;
  int i = 0;
  while (std::getline(ss, piece, ',') && i < 3) r[static_cast<std::size_t>(i++)] = std::stod(piece);
  if (i != 3) throw ConfigError("dataset.split_ratio must have three weights");
  return r;
}

std::vector<int> ExperimentConfig::parsed_widths() const {
  std::vector<int> out;
  std::stringstream ss(mlp_widths);
  std::string piece;
  while (std::getline(ss, piece, ','))
    if (!piece.empty()) out.push_back(std::stoi(piece));
  return out;
}

std::vector<uint64_t> ExperimentConfig::parsed_eval_seeds() const {
  std::vector<uint64_t> out;
  std::stringstream ss(eval_seeds);
  std::string piece;
  while (std::getline(ss, piece, ','))
    if (!piece.empty()) out.push_back(std::stoull(piece));
  if (out.empty()) out.push_back(seed);
  return out;
}

}  // namespace resus
