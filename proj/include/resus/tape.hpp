// SPDX-License-Identifier: Apache-2.0
//
// Replay tape over a fixed set of kernels, each with a hand-derived adjoint.
// There is no general graph: ops record a backward closure at call time and
// backward() replays closures in exact reverse order. Gradients accumulate
// into Var::g; a parameter never touched by an op keeps a zero gradient.
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "resus/mat.hpp"

namespace resus {

struct Var {
  Mat v;
  Mat g;
  bool requires_grad;

  explicit Var(Mat value, bool rg = true) : v(std::move(value)), g(v.rows, v.cols), requires_grad(rg) {}
};

using VarPtr = std::shared_ptr<Var>;

inline VarPtr make_var(Mat value, bool requires_grad = true) {
  return std::make_shared<Var>(std::move(value), requires_grad);
}

// One tape per training thread; ops on distinct tapes never share state
// except through parameter Vars.
class Tape {
 public:
  void record(std::function<void()> backward_step) { steps_.push_back(std::move(backward_step)); }

  // Replays all recorded steps in reverse. Loss seeds must be written into
  // the corresponding Var::g entries beforehand.
  void backward() {
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  // Convenience for a single scalar loss.
  void backward_from(Var& loss, double seed = 1.0) {
    loss.g(0, 0) += seed;
    backward();
  }

  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

// --- tape ops -------------------------------------------------------------
// All ops return a fresh Var holding the forward value and record one
// backward closure. Adjoints accumulate (+=) into input gradients.

// Row gather from a table (used for embedding lookup); adjoint scatter-adds.
VarPtr gather_rows(Tape& tape, const VarPtr& table, std::vector<int> idx);

// Column-wise concatenation of same-row-count blocks.
VarPtr concat_cols(Tape& tape, std::vector<VarPtr> parts);

// FM pooling over per-field embedding blocks (each rows x d):
// out = (sum_f e_f)^2 - sum_f e_f^2 per row.
VarPtr fm_pool_rows(Tape& tape, std::vector<VarPtr> fields);

VarPtr matmul_op(Tape& tape, const VarPtr& a, const VarPtr& b);

// X + broadcast row bias (bias is 1 x C).
VarPtr add_row_bias(Tape& tape, const VarPtr& x, const VarPtr& bias);

VarPtr relu_op(Tape& tape, const VarPtr& x);

// Elementwise sum of same-shape Vars.
VarPtr add_op(Tape& tape, const VarPtr& a, const VarPtr& b);

// Row sums: B x C -> B x 1.
VarPtr rowsum_op(Tape& tape, const VarPtr& x);

// out = scalar * X, scalar a 1x1 Var.
VarPtr scale_by_scalar(Tape& tape, const VarPtr& x, const VarPtr& scalar);

// Softplus of a 1x1 Var (keeps the ridge regularizer nonnegative).
VarPtr softplus_op(Tape& tape, const VarPtr& x);

// Similarity-weighted pooling of per-support targets onto each query row:
//   score(q, i) = w^T |q - s_i| + b,  alpha(q, .) = softmax(score(q, .)),
//   out(q) = sum_i alpha(q, i) * targets(i).
// sup_enc: S x K, query_enc: Q x K, w: K x 1, b: 1 x 1, targets: S x 1.
VarPtr attention_pool(Tape& tape, const VarPtr& sup_enc, const VarPtr& query_enc, const VarPtr& w, const VarPtr& b,
                      const VarPtr& targets);

// Ridge weights via the Gram-side identity: with G the S x K support
// encoding, solves (G G^T + lambda I) z = targets and returns G^T z.
// Throws SingularSystemError if the jittered factorization still fails.
VarPtr ridge_weights(Tape& tape, const VarPtr& sup_enc, const VarPtr& targets, const VarPtr& lambda);

// Mean logistic loss on logits (exact softplus form) -> 1x1.
VarPtr bce_with_logits_op(Tape& tape, const VarPtr& logits, const std::vector<double>& labels);

// Mean cross entropy on probabilities, clamped to [eps, 1-eps] -> 1x1.
// The gradient is exactly zero where the clamp is active.
VarPtr bce_on_probs_op(Tape& tape, const VarPtr& probs, const std::vector<double>& labels);

}  // namespace resus
