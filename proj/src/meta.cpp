// SPDX-License-Identifier: Apache-2.0
#include "resus/meta.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "resus/kernels.hpp"
#include "resus/solver.hpp"

namespace resus {

std::string to_string(MetaMode mode) {
  switch (mode) {
    case MetaMode::NN: return "nn";
    case MetaMode::RR: return "rr";
    case MetaMode::MUS: return "mus";
    case MetaMode::SharedOnly: return "shared";
  }
  return "?";
}

MetaMode meta_mode_from_string(const std::string& s) {
  if (s == "nn") return MetaMode::NN;
  if (s == "rr") return MetaMode::RR;
  if (s == "mus") return MetaMode::MUS;
  if (s == "shared") return MetaMode::SharedOnly;
  throw ConfigError("unknown meta mode: " + s);
}

void MetaParams::init(int encode_dim, Rng& rng) {
  similarity_w = make_var(Mat(encode_dim, 1));
  const double s = 1.0 / std::sqrt(static_cast<double>(encode_dim));
  for (auto& x : similarity_w->v.a) x = uniform_range(rng, -s, s);
  similarity_b = make_var(Mat(1, 1));
  ridge_lambda_raw = make_var(Mat(1, 1));
  ridge_lambda_raw->v(0, 0) = std::log(std::exp(1.0) - 1.0);  // softplus^-1(1): lambda starts at 1
  beta = make_var(Mat(1, 1));
  beta->v(0, 0) = 1.0;
}

double MetaParams::lambda() const {
  const double t = ridge_lambda_raw->v(0, 0);
  return t > 30.0 ? t : std::log1p(std::exp(t));
}

void MetaModel::enable_per_size_beta(int tau) {
  if (tau < 1) throw ConfigError("per-size beta: tau must be >= 1");
  Mat b(tau, 1);
  b.fill(1.0);
  mp.beta = make_var(std::move(b));
  beta_per_size = true;
}

double MetaModel::beta_value(int support_size) const {
  if (!beta_per_size) return mp.beta->v(0, 0);
  const int idx = std::min(std::max(support_size, 1), mp.beta->v.rows) - 1;
  return mp.beta->v(idx, 0);
}

std::vector<VarPtr> MetaModel::meta_learned_params() const {
  std::vector<VarPtr> out = phi.params();
  switch (mode) {
    case MetaMode::NN:
      out.push_back(mp.similarity_w);
      out.push_back(mp.similarity_b);
      out.push_back(mp.beta);
      break;
    case MetaMode::RR:
      out.push_back(mp.ridge_lambda_raw);
      out.push_back(mp.beta);
      break;
    case MetaMode::MUS:
      out.push_back(mp.similarity_w);
      out.push_back(mp.similarity_b);
      break;
    case MetaMode::SharedOnly:
      throw ConfigError("shared-only mode has no meta-learned parameters");
  }
  return out;
}

MetaModel make_meta_model(const PredictorSpec& spec, const FeatureSpace& space, MetaMode mode, Rng& rng) {
  Network psi(spec, space, /*with_head=*/true);
  Network phi(spec, space, /*with_head=*/false);
  psi.init_params(rng);
  phi.init_params(rng);
  MetaModel model(spec, mode, std::move(psi), std::move(phi));
  model.mp.init(model.phi.encode_dim(), rng);
  return model;
}

Mat residual_targets(const Mat& psi_logits, std::span<const Instance> support) {
  require_shape(psi_logits, static_cast<int>(support.size()), 1, "residual_targets logits");
  Mat out(psi_logits.rows, 1);
  for (int i = 0; i < psi_logits.rows; ++i) {
    const double p = clamp_prob(sigmoid(psi_logits(i, 0)));
    out(i, 0) = static_cast<double>(support[static_cast<std::size_t>(i)].label) - p;
  }
  return out;
}

double nn_similarity(const Mat& w, double b, std::span<const double> v1, std::span<const double> v2) {
  if (static_cast<std::size_t>(w.rows) != v1.size() || v1.size() != v2.size())
    throw ShapeError("nn_similarity: dimension mismatch (w " + std::to_string(w.rows) + ", v1 " +
                     std::to_string(v1.size()) + ", v2 " + std::to_string(v2.size()) + ")");
  double s = b;
  for (std::size_t j = 0; j < v1.size(); ++j) s += w(static_cast<int>(j), 0) * std::abs(v1[j] - v2[j]);
  return s;
}

Mat ridge_fit_direct(const Mat& sup_enc, const Mat& targets, double lambda) {
  Mat gtg;
  matmul_tn(sup_enc, sup_enc, gtg);
  for (int i = 0; i < gtg.rows; ++i) gtg(i, i) += lambda;
  Mat gtr;
  matmul_tn(sup_enc, targets, gtr);
  return solve_spd(gtg, gtr);
}

Mat ridge_fit_woodbury(const Mat& sup_enc, const Mat& targets, double lambda) {
  Mat gram;
  matmul_nt(sup_enc, sup_enc, gram);
  for (int i = 0; i < gram.rows; ++i) gram(i, i) += lambda;
  const Mat z = solve_spd(gram, targets);
  Mat w;
  matmul_tn(sup_enc, z, w);
  return w;
}

double fuse(double psi_logit, double beta, double residual) {
  return sigmoid(psi_logit + beta * residual);
}

namespace {

std::vector<double> labels_of(std::span<const Instance> batch) {
  std::vector<double> y(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) y[i] = static_cast<double>(batch[i].label);
  return y;
}

// The rescaling coefficient as a 1x1 node: the global scalar, or a slice of
// the per-size table so only the sampled size's row receives gradient.
VarPtr beta_node(Tape& tape, const MetaModel& model, int support_size) {
  if (!model.beta_per_size) return model.mp.beta;
  const int idx = std::min(std::max(support_size, 1), model.mp.beta->v.rows) - 1;
  return gather_rows(tape, model.mp.beta, {idx});
}

}  // namespace

// psi outputs enter as constants: the shared predictor is frozen, so nothing
// propagates into it.
VarPtr task_loss(Tape& tape, const MetaModel& model, std::span<const Instance> support,
                 std::span<const Instance> queries) {
  const std::vector<double> query_labels = labels_of(queries);
  const VarPtr sup_enc = model.phi.encode(tape, support);
  const VarPtr q_enc = model.phi.encode(tape, queries);
  if (model.mode == MetaMode::MUS) {
    auto y_s = make_var(Mat(static_cast<int>(support.size()), 1), /*requires_grad=*/false);
    for (std::size_t i = 0; i < support.size(); ++i) y_s->v(static_cast<int>(i), 0) = support[i].label;
    const VarPtr pred = attention_pool(tape, sup_enc, q_enc, model.mp.similarity_w, model.mp.similarity_b, y_s);
    return bce_on_probs_op(tape, pred, query_labels);
  }
  const Mat psi_s = model.psi.logits_value(support);
  const Mat psi_q = model.psi.logits_value(queries);
  auto dy = make_var(residual_targets(psi_s, support), /*requires_grad=*/false);
  VarPtr resid;
  if (model.mode == MetaMode::NN) {
    resid = attention_pool(tape, sup_enc, q_enc, model.mp.similarity_w, model.mp.similarity_b, dy);
  } else if (model.mode == MetaMode::RR) {
    const VarPtr lam = softplus_op(tape, model.mp.ridge_lambda_raw);
    const VarPtr w = ridge_weights(tape, sup_enc, dy, lam);
    resid = matmul_op(tape, q_enc, w);
  } else {
    throw ConfigError("task_loss: shared-only mode has no task loss");
  }
  const VarPtr beta = beta_node(tape, model, static_cast<int>(support.size()));
  const VarPtr fused = add_op(tape, make_var(psi_q, /*requires_grad=*/false), scale_by_scalar(tape, resid, beta));
  return bce_with_logits_op(tape, fused, query_labels);
}

UserPrediction infer_user(const MetaModel& model, std::span<const Instance> support,
                          std::span<const Instance> queries, InferenceStats* stats, const InferOptions& opts) {
  if (queries.empty()) throw ShapeError("infer_user: empty query set");
  if (model.mode != MetaMode::SharedOnly && support.empty())
    throw DataError("infer_user: empty support set (zero-shot inference is out of scope)");

  InferenceStats local;
  InferenceStats& st = stats ? *stats : local;
  const double beta = opts.beta_override.value_or(model.beta_value(static_cast<int>(support.size())));

  UserPrediction out;
  out.fused.resize(queries.size());
  if (model.mode == MetaMode::NN || model.mode == MetaMode::RR) out.residual.resize(queries.size());

  const bool needs_psi = model.mode != MetaMode::MUS;
  Mat psi_q;
  if (needs_psi) {
    psi_q = model.psi.logits_value(queries);
    out.shared.resize(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) out.shared[i] = sigmoid(psi_q(static_cast<int>(i), 0));
  }
  if (model.mode == MetaMode::SharedOnly) {
    out.fused = out.shared;
    return out;
  }

  auto run_block = [&](std::span<const Instance> block, const Mat* psi_block, std::size_t out_at) {
    // one support encoding pass per call; per-query mode calls this per row
    Tape tape;
    const VarPtr sup_enc = model.phi.encode(tape, support);
    ++st.support_encode_passes;
    const VarPtr q_enc = model.phi.encode(tape, block);
    ++st.query_encode_passes;
    if (model.mode == MetaMode::MUS) {
      auto y_s = make_var(Mat(static_cast<int>(support.size()), 1), false);
      for (std::size_t i = 0; i < support.size(); ++i) y_s->v(static_cast<int>(i), 0) = support[i].label;
      const VarPtr pred = attention_pool(tape, sup_enc, q_enc, model.mp.similarity_w, model.mp.similarity_b, y_s);
      for (std::size_t i = 0; i < block.size(); ++i) out.fused[out_at + i] = pred->v(static_cast<int>(i), 0);
      return;
    }
    const Mat psi_s = model.psi.logits_value(support);
    auto dy = make_var(residual_targets(psi_s, support), false);
    Mat resid(static_cast<int>(block.size()), 1);
    if (model.mode == MetaMode::NN) {
      const VarPtr r = attention_pool(tape, sup_enc, q_enc, model.mp.similarity_w, model.mp.similarity_b, dy);
      resid = r->v;
    } else {
      try {
        const VarPtr lam = softplus_op(tape, model.mp.ridge_lambda_raw);
        const VarPtr w = ridge_weights(tape, sup_enc, dy, lam);
        resid = matmul_op(tape, q_enc, w)->v;
      } catch (const SingularSystemError&) {
        resid.zero();  // serve the shared prediction rather than fail
        ++st.ridge_fallbacks;
      }
    }
    for (std::size_t i = 0; i < block.size(); ++i) {
      out.residual[out_at + i] = resid(static_cast<int>(i), 0);
      out.fused[out_at + i] = fuse((*psi_block)(static_cast<int>(i), 0), beta, resid(static_cast<int>(i), 0));
    }
  };

  if (!opts.per_query) {
    run_block(queries, needs_psi ? &psi_q : nullptr, 0);
  } else {
    for (std::size_t i = 0; i < queries.size(); ++i) {
      Mat psi_one(1, 1);
      if (needs_psi) psi_one(0, 0) = psi_q(static_cast<int>(i), 0);
      run_block(queries.subspan(i, 1), needs_psi ? &psi_one : nullptr, i);
    }
  }
  return out;
}

namespace {

struct ParamSnapshot {
  std::vector<Mat> values;
  static ParamSnapshot take(const std::vector<VarPtr>& params) {
    ParamSnapshot s;
    for (const auto& p : params) s.values.push_back(p->v);
    return s;
  }
  void restore(const std::vector<VarPtr>& params) const {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->v = values[i];
  }
};

std::optional<double> pooled_val_auc(const MetaModel& model, const std::vector<Task>& val_tasks) {
  std::vector<uint8_t> labels;
  std::vector<double> preds;
  for (const auto& task : val_tasks) {
    const UserPrediction p = infer_user(model, task.support, task.query);
    for (std::size_t i = 0; i < task.query.size(); ++i) {
      labels.push_back(task.query[i].label);
      preds.push_back(p.fused[i]);
    }
  }
  if (labels.empty()) return std::nullopt;
  return auc(labels, preds);
}

}  // namespace

TrainHistory meta_train(MetaModel& model, const std::vector<UserLog>& train_logs,
                        const std::vector<UserLog>& val_logs, const SupportSizeDist& dist,
                        const MetaTrainOptions& opts) {
  if (model.mode == MetaMode::SharedOnly) throw ConfigError("meta_train: shared-only mode has nothing to train");
  if (model.mode != MetaMode::MUS && !model.psi.frozen())
    throw ConfigError("meta_train: shared predictor must be pretrained and frozen first");

  std::vector<int> eligible;
  for (std::size_t i = 0; i < train_logs.size(); ++i)
    if (train_logs[i].instances.size() >= 2) eligible.push_back(static_cast<int>(i));
  if (eligible.empty()) throw DataError("meta_train: no training users with at least 2 instances");

  // Fixed validation tasks: one per eligible validation user, sizes drawn
  // once from the same distribution.
  std::vector<Task> val_tasks;
  {
    Rng vrng(opts.seed ^ 0x5eedbeefULL);
    for (const auto& log : val_logs) {
      const int n = static_cast<int>(log.instances.size());
      if (n < 2) continue;
      const int size = std::min(dist.sample(vrng), n - 1);
      val_tasks.push_back(make_task(log, size, log.has_timestamps(), vrng));
    }
  }

  const std::vector<VarPtr> params = model.meta_learned_params();
  Adam adam(params, opts.lr);
  Rng rng(opts.seed);
  TrainHistory hist;
  ParamSnapshot best;
  int since_best = 0;

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    shuffle(eligible, rng);
    double loss_sum = 0.0;
    long n_batches = 0, skipped_tasks = 0;
    for (std::size_t at = 0; at < eligible.size(); at += static_cast<std::size_t>(opts.batch_tasks)) {
      const std::size_t n = std::min(static_cast<std::size_t>(opts.batch_tasks), eligible.size() - at);
      const std::vector<int> chunk(eligible.begin() + static_cast<long>(at),
                                   eligible.begin() + static_cast<long>(at + n));
      EpisodeBatch batch =
          sample_train_batch(train_logs, chunk, dist, rng, epoch, static_cast<int>(at / static_cast<std::size_t>(opts.batch_tasks)));

      long total_queries = 0;
      for (const auto& task : batch.tasks) total_queries += static_cast<long>(task.query.size());

      double batch_loss = 0.0;
      long batch_done = 0;
      for (const auto& task : batch.tasks) {
        Tape tape;
        VarPtr loss;
        try {
          loss = task_loss(tape, model, task.support, task.query);
        } catch (const SingularSystemError&) {
          ++skipped_tasks;
          continue;
        }
        const double l = loss->v(0, 0);
        if (!std::isfinite(l)) {
          if (!best.values.empty()) best.restore(params);
          throw TrainingDivergedError("meta_train: non-finite task loss at epoch " + std::to_string(epoch), "");
        }
        const double weight = static_cast<double>(task.query.size()) / static_cast<double>(total_queries);
        tape.backward_from(*loss, weight);
        batch_loss += l * weight;
        ++batch_done;
      }
      if (batch_done == 0) {
        adam.zero_grads();  // every task skipped: drop the batch
        continue;
      }
      adam.step();
      loss_sum += batch_loss;
      ++n_batches;
    }
    if (n_batches == 0) throw DataError("meta_train: all batches skipped in epoch " + std::to_string(epoch));
    hist.train_loss.push_back(loss_sum / static_cast<double>(n_batches));

    const double val = pooled_val_auc(model, val_tasks).value_or(0.5);
    hist.val_auc.push_back(val);
    if (opts.verbose)
      std::fprintf(stderr, "[meta-train %s] epoch %d loss %.6f val_auc %.6f skipped %ld\n",
                   to_string(model.mode).c_str(), epoch, hist.train_loss.back(), val, skipped_tasks);

    if (hist.best_epoch < 0 || val > hist.best_val_auc) {
      hist.best_epoch = epoch;
      hist.best_val_auc = val;
      best = ParamSnapshot::take(params);
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  if (!best.values.empty()) best.restore(params);
  return hist;
}

std::vector<SizeMetrics> run_suite(const MetaModel& model, const MetaTestSuite& suite, const RunOptions& opts,
                                   InferenceStats* stats) {
  std::vector<SizeMetrics> out;
  InferOptions iopts;
  iopts.per_query = opts.per_query;
  iopts.beta_override = opts.beta_override;
  for (const auto& entry : suite.entries) {
    SizeMetrics m;
    m.size = entry.size;
    m.n_users = static_cast<int>(entry.tasks.size());
    m.skipped_users = entry.skipped_users;

    // tasks are independent given the read-only model; per-task slots keep
    // the pooled order (and hence the metrics) identical at any thread count
    const int n_tasks = static_cast<int>(entry.tasks.size());
    std::vector<UserPrediction> preds(static_cast<std::size_t>(n_tasks));
    std::string error;
#pragma omp parallel
    {
      InferenceStats local;
#pragma omp for schedule(dynamic)
      for (int t = 0; t < n_tasks; ++t) {
        try {
          preds[static_cast<std::size_t>(t)] =
              infer_user(model, entry.tasks[static_cast<std::size_t>(t)].support,
                         entry.tasks[static_cast<std::size_t>(t)].query, &local, iopts);
        } catch (const std::exception& e) {
#pragma omp critical
          error = e.what();
        }
      }
      if (stats) {
#pragma omp critical
        {
          stats->support_encode_passes += local.support_encode_passes;
          stats->query_encode_passes += local.query_encode_passes;
          stats->ridge_fallbacks += local.ridge_fallbacks;
        }
      }
    }
    if (!error.empty()) throw DataError("run_suite: " + error);

    std::vector<uint8_t> labels;
    std::vector<double> fused, shared;
    for (int t = 0; t < n_tasks; ++t) {
      const Task& task = entry.tasks[static_cast<std::size_t>(t)];
      const UserPrediction& p = preds[static_cast<std::size_t>(t)];
      for (std::size_t i = 0; i < task.query.size(); ++i) {
        labels.push_back(task.query[i].label);
        fused.push_back(p.fused[i]);
        if (!p.shared.empty()) shared.push_back(p.shared[i]);
      }
    }
    m.n_queries = static_cast<long>(labels.size());
    if (!labels.empty()) {
      m.logloss = mean_logloss(labels, fused);
      m.auc = auc(labels, fused);
      if (!shared.empty()) {
        m.base_logloss = mean_logloss(labels, shared);
        m.base_auc = auc(labels, shared);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

namespace {

constexpr char kMetaMagic[9] = "RESUSMT1";

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

double read_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

void write_blob(std::ostream& os, const std::vector<double>& flat) {
  write_u32(os, static_cast<uint32_t>(flat.size()));
  for (double x : flat) write_f64(os, x);
}

std::vector<double> read_blob(std::istream& is) {
  std::vector<double> flat(read_u32(is));
  for (auto& x : flat) x = read_f64(is);
  return flat;
}

}  // namespace

void save_meta_checkpoint(const std::string& path, const MetaModel& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write(kMetaMagic, 8);
  write_u32(os, static_cast<uint32_t>(model.spec.arch));
  write_u32(os, static_cast<uint32_t>(model.spec.embed_dim));
  write_u32(os, static_cast<uint32_t>(model.spec.mlp_widths.size()));
  for (int w : model.spec.mlp_widths) write_u32(os, static_cast<uint32_t>(w));
  const auto& vs = model.psi.vocab_sizes();
  write_u32(os, static_cast<uint32_t>(vs.size()));
  for (int v : vs) write_u32(os, static_cast<uint32_t>(v));
  write_u32(os, static_cast<uint32_t>(model.mode));
  os.put(model.beta_per_size ? 1 : 0);
  write_f64(os, model.train_seconds);
  write_blob(os, model.psi.flatten_params());
  write_blob(os, model.phi.flatten_params());
  write_blob(os, model.mp.similarity_w->v.a);
  write_blob(os, model.mp.similarity_b->v.a);
  write_blob(os, model.mp.ridge_lambda_raw->v.a);
  write_blob(os, model.mp.beta->v.a);
  if (!os) throw DataError("short write on checkpoint: " + path);
}

MetaModel load_meta_checkpoint(const std::string& path, const PredictorSpec& expect, const FeatureSpace& space) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kMetaMagic, 8) != 0) throw SpecMismatchError("not a meta checkpoint: " + path);
  const auto arch = static_cast<Arch>(read_u32(is));
  const int d = static_cast<int>(read_u32(is));
  std::vector<int> widths(read_u32(is));
  for (auto& w : widths) w = static_cast<int>(read_u32(is));
  std::vector<int> vs(read_u32(is));
  for (auto& v : vs) v = static_cast<int>(read_u32(is));
  if (arch != expect.arch || d != expect.embed_dim || widths != expect.mlp_widths)
    throw SpecMismatchError("checkpoint " + path + " does not match the requested architecture spec");
  const auto mode = static_cast<MetaMode>(read_u32(is));
  const bool per_size = is.get() != 0;
  const double secs = read_f64(is);

  Network psi(expect, space, true);
  Network phi(expect, space, false);
  if (psi.vocab_sizes() != vs)
    throw SpecMismatchError("checkpoint " + path + " vocabulary shape does not match the dataset bundle");
  MetaModel model(expect, mode, std::move(psi), std::move(phi));
  model.train_seconds = secs;
  model.psi.load_params(read_blob(is));
  model.phi.load_params(read_blob(is));
  Rng dummy(0);
  model.mp.init(model.phi.encode_dim(), dummy);
  auto load_into = [&](const VarPtr& var) {
    const auto blob = read_blob(is);
    if (blob.size() != var->v.size()) throw SpecMismatchError("checkpoint " + path + ": meta parameter size mismatch");
    var->v.a = blob;
  };
  load_into(model.mp.similarity_w);
  load_into(model.mp.similarity_b);
  load_into(model.mp.ridge_lambda_raw);
  if (per_size) {
    const auto blob = read_blob(is);
    model.enable_per_size_beta(static_cast<int>(blob.size()));
    model.mp.beta->v.a = blob;
  } else {
    load_into(model.mp.beta);
  }
  if (!is) throw DataError("truncated checkpoint: " + path);
  model.psi.freeze();
  return model;
}

}  // namespace resus
