// SPDX-License-Identifier: Apache-2.0
#include "resus/tape.hpp"

#include <cmath>

#include "resus/kernels.hpp"
#include "resus/solver.hpp"

namespace resus {

VarPtr gather_rows(Tape& tape, const VarPtr& table, std::vector<int> idx) {
  Mat out(static_cast<int>(idx.size()), table->v.cols);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (int j = 0; j < table->v.cols; ++j) out(static_cast<int>(r), j) = table->v(idx[r], j);
  auto res = make_var(std::move(out));
  tape.record([table, res, idx = std::move(idx)] {
    if (!table->requires_grad) return;
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < table->v.cols; ++j) table->g(idx[r], j) += res->g(static_cast<int>(r), j);
  });
  return res;
}

VarPtr concat_cols(Tape& tape, std::vector<VarPtr> parts) {
  int cols = 0;
  const int rows = parts.front()->v.rows;
  for (const auto& p : parts) {
    if (p->v.rows != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p->v.cols;
  }
  Mat out(rows, cols);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < p->v.cols; ++j) out(i, off + j) = p->v(i, j);
    off += p->v.cols;
  }
  auto res = make_var(std::move(out));
  tape.record([parts = std::move(parts), res, rows] {
    int off = 0;
    for (const auto& p : parts) {
      if (p->requires_grad)
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < p->v.cols; ++j) p->g(i, j) += res->g(i, off + j);
      off += p->v.cols;
    }
  });
  return res;
}

VarPtr fm_pool_rows(Tape& tape, std::vector<VarPtr> fields) {
  const int rows = fields.front()->v.rows;
  const int d = fields.front()->v.cols;
  for (const auto& f : fields)
    if (f->v.rows != rows || f->v.cols != d) throw ShapeError("fm_pool_rows: field shape mismatch");
  Mat out(rows, d);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0, sq = 0.0;
      for (const auto& f : fields) {
        const double e = f->v(i, j);
        s += e;
        sq += e * e;
      }
      out(i, j) = s * s - sq;
    }
  auto res = make_var(std::move(out));
  tape.record([fields = std::move(fields), res, rows, d] {
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (const auto& f : fields) s += f->v(i, j);
        const double go = res->g(i, j);
        for (const auto& f : fields)
          if (f->requires_grad) f->g(i, j) += go * 2.0 * (s - f->v(i, j));
      }
  });
  return res;
}

VarPtr matmul_op(Tape& tape, const VarPtr& a, const VarPtr& b) {
  Mat c;
  matmul(a->v, b->v, c);
  auto res = make_var(std::move(c));
  tape.record([a, b, res] {
    Mat t;
    if (a->requires_grad) {
      matmul_nt(res->g, b->v, t);
      for (std::size_t i = 0; i < t.size(); ++i) a->g.a[i] += t.a[i];
    }
    if (b->requires_grad) {
      matmul_tn(a->v, res->g, t);
      for (std::size_t i = 0; i < t.size(); ++i) b->g.a[i] += t.a[i];
    }
  });
  return res;
}

VarPtr add_row_bias(Tape& tape, const VarPtr& x, const VarPtr& bias) {
  if (bias->v.rows != 1 || bias->v.cols != x->v.cols) throw ShapeError("add_row_bias: bias shape mismatch");
  Mat out = x->v;
  for (int i = 0; i < out.rows; ++i)
    for (int j = 0; j < out.cols; ++j) out(i, j) += bias->v(0, j);
  auto res = make_var(std::move(out));
  tape.record([x, bias, res] {
    if (x->requires_grad)
      for (std::size_t i = 0; i < x->g.size(); ++i) x->g.a[i] += res->g.a[i];
    if (bias->requires_grad)
      for (int i = 0; i < res->g.rows; ++i)
        for (int j = 0; j < res->g.cols; ++j) bias->g(0, j) += res->g(i, j);
  });
  return res;
}

VarPtr relu_op(Tape& tape, const VarPtr& x) {
  Mat out = x->v;
  relu_inplace(out);
  auto res = make_var(std::move(out));
  tape.record([x, res] {
    if (x->requires_grad) relu_adjoint(res->g, res->v, x->g);
  });
  return res;
}

VarPtr add_op(Tape& tape, const VarPtr& a, const VarPtr& b) {
  if (!a->v.same_shape(b->v)) throw ShapeError("add_op: shape mismatch");
  Mat out = a->v;
  for (std::size_t i = 0; i < out.size(); ++i) out.a[i] += b->v.a[i];
  auto res = make_var(std::move(out));
  tape.record([a, b, res] {
    if (a->requires_grad)
      for (std::size_t i = 0; i < a->g.size(); ++i) a->g.a[i] += res->g.a[i];
    if (b->requires_grad)
      for (std::size_t i = 0; i < b->g.size(); ++i) b->g.a[i] += res->g.a[i];
  });
  return res;
}

VarPtr rowsum_op(Tape& tape, const VarPtr& x) {
  Mat out(x->v.rows, 1);
  for (int i = 0; i < x->v.rows; ++i) {
    double s = 0.0;
    for (int j = 0; j < x->v.cols; ++j) s += x->v(i, j);
    out(i, 0) = s;
  }
  auto res = make_var(std::move(out));
  tape.record([x, res] {
    if (!x->requires_grad) return;
    for (int i = 0; i < x->v.rows; ++i)
      for (int j = 0; j < x->v.cols; ++j) x->g(i, j) += res->g(i, 0);
  });
  return res;
}

VarPtr scale_by_scalar(Tape& tape, const VarPtr& x, const VarPtr& scalar) {
  if (scalar->v.rows != 1 || scalar->v.cols != 1) throw ShapeError("scale_by_scalar: scalar must be 1x1");
  const double s = scalar->v(0, 0);
  Mat out = x->v;
  for (auto& e : out.a) e *= s;
  auto res = make_var(std::move(out));
  tape.record([x, scalar, res, s] {
    if (scalar->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x->v.size(); ++i) acc += res->g.a[i] * x->v.a[i];
      scalar->g(0, 0) += acc;
    }
    if (x->requires_grad)
      for (std::size_t i = 0; i < x->g.size(); ++i) x->g.a[i] += res->g.a[i] * s;
  });
  return res;
}

VarPtr softplus_op(Tape& tape, const VarPtr& x) {
  if (x->v.rows != 1 || x->v.cols != 1) throw ShapeError("softplus_op: input must be 1x1");
  const double t = x->v(0, 0);
  Mat out(1, 1);
  out(0, 0) = t > 30.0 ? t : std::log1p(std::exp(t));
  auto res = make_var(std::move(out));
  tape.record([x, res, t] {
    if (x->requires_grad) x->g(0, 0) += res->g(0, 0) * sigmoid(t);
  });
  return res;
}

VarPtr attention_pool(Tape& tape, const VarPtr& sup_enc, const VarPtr& query_enc, const VarPtr& w, const VarPtr& b,
                      const VarPtr& targets) {
  const int ns = sup_enc->v.rows;
  const int nq = query_enc->v.rows;
  const int k = sup_enc->v.cols;
  if (query_enc->v.cols != k) throw ShapeError("attention_pool: encoder dim mismatch");
  require_shape(w->v, k, 1, "attention_pool similarity weights");
  require_shape(targets->v, ns, 1, "attention_pool targets");

  auto alpha = std::make_shared<Mat>(nq, ns);
  Mat out(nq, 1);
  std::vector<double> scores(ns);
  for (int q = 0; q < nq; ++q) {
    for (int i = 0; i < ns; ++i) {
      double s = b->v(0, 0);
      for (int j = 0; j < k; ++j) s += w->v(j, 0) * std::abs(query_enc->v(q, j) - sup_enc->v(i, j));
      scores[i] = s;
    }
    softmax_weights(std::span<const double>(scores), std::span<double>(alpha->row(q), static_cast<std::size_t>(ns)));
    double acc = 0.0;
    for (int i = 0; i < ns; ++i) acc += (*alpha)(q, i) * targets->v(i, 0);
    out(q, 0) = acc;
  }
  auto res = make_var(std::move(out));
  tape.record([sup_enc, query_enc, w, b, targets, res, alpha, ns, nq, k] {
    for (int q = 0; q < nq; ++q) {
      const double go = res->g(q, 0);
      if (go == 0.0) continue;
      const double y = res->v(q, 0);
      for (int i = 0; i < ns; ++i) {
        if (targets->requires_grad) targets->g(i, 0) += go * (*alpha)(q, i);
        // softmax jacobian folded with the weighted sum
        const double ds = go * (*alpha)(q, i) * (targets->v(i, 0) - y);
        if (ds == 0.0) continue;
        if (b->requires_grad) b->g(0, 0) += ds;
        for (int j = 0; j < k; ++j) {
          const double diff = query_enc->v(q, j) - sup_enc->v(i, j);
          const double ad = std::abs(diff);
          if (w->requires_grad) w->g(j, 0) += ds * ad;
          const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
          const double dq = ds * w->v(j, 0) * sgn;
          if (query_enc->requires_grad) query_enc->g(q, j) += dq;
          if (sup_enc->requires_grad) sup_enc->g(i, j) -= dq;
        }
      }
    }
  });
  return res;
}

VarPtr ridge_weights(Tape& tape, const VarPtr& sup_enc, const VarPtr& targets, const VarPtr& lambda) {
  const int ns = sup_enc->v.rows;
  const int k = sup_enc->v.cols;
  require_shape(targets->v, ns, 1, "ridge_weights targets");
  if (lambda->v.rows != 1 || lambda->v.cols != 1) throw ShapeError("ridge_weights: lambda must be 1x1");

  Mat gram;
  matmul_nt(sup_enc->v, sup_enc->v, gram);
  const double lam = lambda->v(0, 0);
  for (int i = 0; i < ns; ++i) gram(i, i) += lam;

  auto factor = std::make_shared<CholeskyFactor>(gram);
  auto z = std::make_shared<Mat>(factor->solve(targets->v));
  Mat wstar;
  matmul_tn(sup_enc->v, *z, wstar);
  auto res = make_var(std::move(wstar));

  tape.record([sup_enc, targets, lambda, res, factor, z, ns, k] {
    // w = G^T z with (G G^T + lambda I) z = r.
    Mat zbar(ns, 1);  // dL/dz = G * dw
    matmul(sup_enc->v, res->g, zbar);
    const Mat rbar = factor->solve(zbar);  // dL/dr, also the solve adjoint rhs
    if (targets->requires_grad)
      for (int i = 0; i < ns; ++i) targets->g(i, 0) += rbar(i, 0);
    if (lambda->requires_grad) {
      double tr = 0.0;  // trace of dA = -(rbar z^T) symmetrized
      for (int i = 0; i < ns; ++i) tr += rbar(i, 0) * (*z)(i, 0);
      lambda->g(0, 0) -= tr;
    }
    if (sup_enc->requires_grad) {
      // dG = z dw^T - (rbar z^T + z rbar^T) G, assembled without the S x S outer products
      Mat ztg(1, k), rtg(1, k);
      matmul_tn(*z, sup_enc->v, ztg);
      matmul_tn(rbar, sup_enc->v, rtg);
      for (int i = 0; i < ns; ++i)
        for (int j = 0; j < k; ++j)
          sup_enc->g(i, j) += (*z)(i, 0) * res->g(j, 0) - rbar(i, 0) * ztg(0, j) - (*z)(i, 0) * rtg(0, j);
    }
  });
  return res;
}

VarPtr bce_with_logits_op(Tape& tape, const VarPtr& logits, const std::vector<double>& labels) {
  const int n = logits->v.rows;
  require_shape(logits->v, n, 1, "bce_with_logits logits");
  if (static_cast<int>(labels.size()) != n) throw ShapeError("bce_with_logits: label count mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += bce_with_logits(labels[i], logits->v(i, 0));
  Mat out(1, 1);
  out(0, 0) = total / n;
  auto res = make_var(std::move(out));
  tape.record([logits, labels, res, n] {
    if (!logits->requires_grad) return;
    const double seed = res->g(0, 0) / n;
    for (int i = 0; i < n; ++i) logits->g(i, 0) += seed * bce_with_logits_adjoint(labels[i], logits->v(i, 0));
  });
  return res;
}

VarPtr bce_on_probs_op(Tape& tape, const VarPtr& probs, const std::vector<double>& labels) {
  const int n = probs->v.rows;
  require_shape(probs->v, n, 1, "bce_on_probs probabilities");
  if (static_cast<int>(labels.size()) != n) throw ShapeError("bce_on_probs: label count mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i) total += bce_loss(labels[i], probs->v(i, 0));
  Mat out(1, 1);
  out(0, 0) = total / n;
  auto res = make_var(std::move(out));
  tape.record([probs, labels, res, n] {
    if (!probs->requires_grad) return;
    const double seed = res->g(0, 0) / n;
    for (int i = 0; i < n; ++i) probs->g(i, 0) += seed * bce_loss_adjoint(labels[i], probs->v(i, 0));
  });
  return res;
}

}  // namespace resus
