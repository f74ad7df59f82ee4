// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "resus/data_model.hpp"
#include "resus/tape.hpp"

namespace resus {

enum class Arch { LR, FM, DeepFM };

std::string to_string(Arch arch);
Arch arch_from_string(const std::string& s);

struct PredictorSpec {
  Arch arch = Arch::DeepFM;
  int embed_dim = 10;
  std::vector<int> mlp_widths = {64, 32};  // DeepFM only

  bool operator==(const PredictorSpec&) const = default;

  // Encoder output dimension for a model with `model_fields` usable fields:
  // LR concatenates raw embeddings (F*d), FM pools to d, DeepFM concatenates
  // the pooled vector with the last MLP hidden layer (d + widths.back()).
  int encode_dim(int model_fields) const;
};

// A CTR network in one of two roles: with_head=true emits a single logit
// (shared predictor); with_head=false emits the K-dim encoding (feature
// encoder). The two roles never share parameter storage.
class Network {
 public:
  Network(PredictorSpec spec, const FeatureSpace& space, bool with_head);

  void init_params(Rng& rng);
  void zero_params();

  VarPtr logits(Tape& tape, std::span<const Instance> batch) const;
  VarPtr encode(Tape& tape, std::span<const Instance> batch) const;

  // Plain forward values (tape discarded; nothing differentiable escapes).
  Mat logits_value(std::span<const Instance> batch) const;
  Mat encode_value(std::span<const Instance> batch) const;

  std::vector<VarPtr> params() const;
  long param_count() const;

  int encode_dim() const { return spec_.encode_dim(static_cast<int>(field_pos_.size())); }
  const PredictorSpec& spec() const { return spec_; }
  const std::vector<int>& vocab_sizes() const { return vocab_sizes_; }
  bool with_head() const { return with_head_; }

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  // Flat parameter payload in params() order, for checkpoints and snapshots.
  std::vector<double> flatten_params() const;
  void load_params(std::span<const double> flat);

 private:
  std::vector<std::vector<int>> field_indices(std::span<const Instance> batch) const;

  PredictorSpec spec_;
  bool with_head_;
  bool frozen_ = false;
  std::vector<int> field_pos_;    // positions within Instance::field_indices (user-id fields excluded)
  std::vector<int> vocab_sizes_;  // per used field, including the OOV slot

  std::vector<VarPtr> embed_;  // per field, vocab x d (absent for the LR head role)
  std::vector<VarPtr> lin_w_;  // per field, vocab x 1 (head roles only)
  VarPtr bias_;                // 1 x 1 (head roles only)
  std::vector<VarPtr> mlp_w_;  // DeepFM: hidden layers, plus the 1-wide head layer in head role
  std::vector<VarPtr> mlp_b_;
};

class Adam {
 public:
  Adam(std::vector<VarPtr> params, double lr);
  // Applies one update from the accumulated gradients, then zeroes them.
  void step();
  void zero_grads();

 private:
  std::vector<VarPtr> params_;
  std::vector<Mat> m_, v_;
  double lr_, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
};

struct TrainOptions {
  double lr = 1e-3;
  int batch = 1024;
  int max_epochs = 10;
  int patience = 2;  // consecutive epochs without a new best validation AUC
  uint64_t seed = 42;
  bool verbose = false;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_auc;
  int best_epoch = -1;
  double best_val_auc = 0.0;
};

// Supervised pretraining of the shared predictor on all training-user
// instances; early-stops on validation AUC and leaves the network frozen at
// the best epoch. Throws TrainingDivergedError on a non-finite loss.
TrainHistory pretrain_shared(Network& psi, const std::vector<Instance>& train_instances,
                             const std::vector<Instance>& val_instances, const TrainOptions& opts);

// Checkpoint IO. Loading validates spec and vocabulary shape against the
// requesting configuration and throws SpecMismatchError on any difference.
void save_shared_checkpoint(const std::string& path, const Network& psi, double train_seconds);
Network load_shared_checkpoint(const std::string& path, const PredictorSpec& expect, const FeatureSpace& space,
                               double* train_seconds = nullptr);

}  // namespace resus
