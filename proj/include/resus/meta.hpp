// SPDX-License-Identifier: Apache-2.0
//
// Residual-preference meta-learners over a frozen shared predictor: the
// similarity-weighted nearest-neighbor head, the closed-form ridge head, the
// metric-only baseline (the same attention head applied to raw labels), and
// the episodic training loop that fits the encoder and head hyperparameters.
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "resus/episodes.hpp"
#include "resus/evaluation.hpp"
#include "resus/model.hpp"

namespace resus {

enum class MetaMode { NN, RR, MUS, SharedOnly };

std::string to_string(MetaMode mode);
MetaMode meta_mode_from_string(const std::string& s);

// Meta-learned hyperparameters of the residual head. The ridge regularizer
// is stored pre-softplus so unconstrained updates keep lambda >= 0. beta is
// a single global scalar by default; with the per-size option it holds one
// row per support size in {1..tau}.
struct MetaParams {
  VarPtr similarity_w;    // K x 1
  VarPtr similarity_b;    // 1 x 1
  VarPtr ridge_lambda_raw;  // 1 x 1
  VarPtr beta;            // 1 x 1, or tau x 1 in per-size mode; init 1.0

  void init(int encode_dim, Rng& rng);
  double lambda() const;  // softplus(ridge_lambda_raw)
};

struct MetaModel {
  PredictorSpec spec;
  MetaMode mode = MetaMode::RR;
  Network psi;  // shared predictor, frozen before meta-training
  Network phi;  // feature encoder
  MetaParams mp;
  bool beta_per_size = false;
  double train_seconds = 0.0;

  MetaModel(PredictorSpec s, MetaMode m, Network shared, Network encoder)
      : spec(std::move(s)), mode(m), psi(std::move(shared)), phi(std::move(encoder)) {}

  MetaModel(const MetaModel&) = delete;
  MetaModel& operator=(const MetaModel&) = delete;
  MetaModel(MetaModel&&) = default;
  MetaModel& operator=(MetaModel&&) = default;

  // Switches to one rescaling coefficient per support size in {1..tau}.
  void enable_per_size_beta(int tau);
  // The coefficient applied to a task with this support size.
  double beta_value(int support_size) const;

  // Encoder + head hyperparameters relevant to this mode (never psi).
  std::vector<VarPtr> meta_learned_params() const;
};

MetaModel make_meta_model(const PredictorSpec& spec, const FeatureSpace& space, MetaMode mode, Rng& rng);

// Per-support-instance residual targets: label - sigma(psi logit), with the
// probability clamped to [eps, 1-eps] so every entry is strictly inside
// (-1, 1).
Mat residual_targets(const Mat& psi_logits, std::span<const Instance> support);

// w^T |v1 - v2| + b with the elementwise absolute difference.
double nn_similarity(const Mat& w, double b, std::span<const double> v1, std::span<const double> v2);

// Ridge fits on an S x K support encoding, both algebraic routes, no tape.
// The feature-side normal equations (K x K solve):
Mat ridge_fit_direct(const Mat& sup_enc, const Mat& targets, double lambda);
// The Gram-side identity used in production (S x S solve):
Mat ridge_fit_woodbury(const Mat& sup_enc, const Mat& targets, double lambda);

// sigma(psi_logit + beta * residual).
double fuse(double psi_logit, double beta, double residual);

struct InferenceStats {
  long support_encode_passes = 0;
  long query_encode_passes = 0;
  long ridge_fallbacks = 0;  // inference-time singular systems, residual forced to 0
};

struct InferOptions {
  bool per_query = false;  // re-derive everything per query instead of once per user
  std::optional<double> beta_override;
};

struct UserPrediction {
  std::vector<double> fused;     // final probabilities (for MUS: the direct label-pool prediction)
  std::vector<double> shared;    // sigma(psi) per query; empty for MUS
  std::vector<double> residual;  // pre-fusion residual prediction per query; empty for MUS/shared
};

UserPrediction infer_user(const MetaModel& model, std::span<const Instance> support,
                          std::span<const Instance> queries, InferenceStats* stats = nullptr,
                          const InferOptions& opts = {});

// Forward pass of one task's query loss on the caller's tape (mean query
// cross entropy through fusion and the mode's residual head). Exposed so
// gradient suites can drive finite-difference checks through the whole path.
VarPtr task_loss(Tape& tape, const MetaModel& model, std::span<const Instance> support,
                 std::span<const Instance> queries);

struct MetaTrainOptions : TrainOptions {
  int batch_tasks = 32;
};

// Episodic optimization of the encoder and head hyperparameters with the
// shared predictor frozen. Early-stops on pooled validation AUC over a fixed
// set of validation tasks sampled once from dist.
TrainHistory meta_train(MetaModel& model, const std::vector<UserLog>& train_logs,
                        const std::vector<UserLog>& val_logs, const SupportSizeDist& dist,
                        const MetaTrainOptions& opts);

struct RunOptions {
  std::optional<double> beta_override;
  bool per_query = false;
};

// Evaluates a suite: one pooled (logloss, AUC) per support size, plus the
// shared-predictor baseline on the same pools.
std::vector<SizeMetrics> run_suite(const MetaModel& model, const MetaTestSuite& suite, const RunOptions& opts = {},
                                   InferenceStats* stats = nullptr);

void save_meta_checkpoint(const std::string& path, const MetaModel& model);
MetaModel load_meta_checkpoint(const std::string& path, const PredictorSpec& expect, const FeatureSpace& space);

}  // namespace resus
