// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "resus/ingest.hpp"

namespace resus {

// Flat dotted-key configuration. Defaults follow the reported experimental
// settings: lr 0.001, batch 1024, embedding dim 10, tau 30, patience 2,
// at most 10 epochs.
struct ExperimentConfig {
  // dataset.*
  std::string dataset_format = "movielens";
  std::string dataset_path;
  std::string bundle_path = "bundle.bin";
  std::string delimiter = "\t";
  std::string user_col = "user";
  std::string item_col = "item";
  std::string label_col = "label";
  std::string time_col;
  int rating_threshold = 3;
  int min_item_interactions = 100;
  std::string split_ratio = "7,2,1";
  // model.*
  std::string arch = "deepfm";
  int embed_dim = 10;
  std::string mlp_widths = "64,32";
  // meta.*
  std::string mode = "rr";
  int tau = 30;
  std::string dist = "uniform";
  int batch_tasks = 32;
  bool beta_per_size = false;
  // train.*
  double lr = 0.001;
  int batch = 1024;
  int max_epochs = 10;
  int patience = 2;
  // eval.*
  std::string eval_sizes = "1-30";
  std::string eval_seeds;  // comma list; empty -> just `seed`
  // run-level
  uint64_t seed = 42;
  int threads = 0;  // 0: leave the OpenMP default
  std::string out_dir = "runs/latest";
  std::optional<double> beta_override;
  bool verbose = false;

  static ExperimentConfig from_file(const std::string& path);
  void set(const std::string& key, const std::string& value);

  // Canonical key=value text, one key per line; parsing it back yields an
  // identical config.
  std::string echo() const;
  nlohmann::ordered_json echo_json() const;

  IngestConfig ingest_config() const;
  std::array<double, 3> parsed_ratio() const;
  std::vector<int> parsed_widths() const;
  std::vector<uint64_t> parsed_eval_seeds() const;
};

}  // namespace resus
