// SPDX-License-Identifier: Apache-2.0
#include "resus/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "resus/evaluation.hpp"
#include "resus/kernels.hpp"

namespace resus {

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::LR: return "lr";
    case Arch::FM: return "fm";
    case Arch::DeepFM: return "deepfm";
  }
  return "?";
}

Arch arch_from_string(const std::string& s) {
  if (s == "lr") return Arch::LR;
  if (s == "fm") return Arch::FM;
  if (s == "deepfm") return Arch::DeepFM;
  throw ConfigError("unknown architecture: " + s);
}

int PredictorSpec::encode_dim(int model_fields) const {
  switch (arch) {
    case Arch::LR: return model_fields * embed_dim;
    case Arch::FM: return embed_dim;
    case Arch::DeepFM:
      if (mlp_widths.empty()) throw ConfigError("deepfm requires at least one MLP width");
      return embed_dim + mlp_widths.back();
  }
  return 0;
}

Network::Network(PredictorSpec spec, const FeatureSpace& space, bool with_head)
    : spec_(std::move(spec)), with_head_(with_head) {
  for (int f = 0; f < space.field_count(); ++f) {
    if (space.fields[static_cast<std::size_t>(f)].is_user_id) continue;  // task key, not a model feature
    field_pos_.push_back(f);
    vocab_sizes_.push_back(space.fields[static_cast<std::size_t>(f)].size());
  }
  if (field_pos_.empty()) throw ConfigError("network: feature space has no usable fields");
  if (spec_.arch == Arch::DeepFM && spec_.mlp_widths.empty())
    throw ConfigError("deepfm requires at least one MLP width");

  const int d = spec_.embed_dim;
  const bool needs_embed = !(spec_.arch == Arch::LR && with_head_);
  if (needs_embed)
    for (int vs : vocab_sizes_) embed_.push_back(make_var(Mat(vs, d)));
  if (with_head_) {
    for (int vs : vocab_sizes_) lin_w_.push_back(make_var(Mat(vs, 1)));
    bias_ = make_var(Mat(1, 1));
  }
  if (spec_.arch == Arch::DeepFM) {
    int in = static_cast<int>(field_pos_.size()) * d;
    for (int w : spec_.mlp_widths) {
      mlp_w_.push_back(make_var(Mat(in, w)));
      mlp_b_.push_back(make_var(Mat(1, w)));
      in = w;
    }
    if (with_head_) {
      mlp_w_.push_back(make_var(Mat(in, 1)));
      mlp_b_.push_back(make_var(Mat(1, 1)));
    }
  }
}

void Network::init_params(Rng& rng) {
  const double escale = 1.0 / std::sqrt(static_cast<double>(spec_.embed_dim));
  for (auto& e : embed_)
    for (auto& x : e->v.a) x = uniform_range(rng, -escale, escale);
  // linear terms and biases start at zero so an untrained head emits logit 0
  for (auto& w : lin_w_) w->v.zero();
  if (bias_) bias_->v.zero();
  for (std::size_t l = 0; l < mlp_w_.size(); ++l) {
    const double s = 1.0 / std::sqrt(static_cast<double>(mlp_w_[l]->v.rows));
    for (auto& x : mlp_w_[l]->v.a) x = uniform_range(rng, -s, s);
    mlp_b_[l]->v.zero();
  }
}

void Network::zero_params() {
  for (const auto& p : params()) p->v.zero();
}

std::vector<std::vector<int>> Network::field_indices(std::span<const Instance> batch) const {
  std::vector<std::vector<int>> idx(field_pos_.size(), std::vector<int>(batch.size()));
  for (std::size_t f = 0; f < field_pos_.size(); ++f) {
    const int pos = field_pos_[f];
    const int vs = vocab_sizes_[f];
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (pos >= static_cast<int>(batch[r].field_indices.size()))
        throw DataError("instance has fewer fields than the feature space");
      const int v = batch[r].field_indices[static_cast<std::size_t>(pos)];
      if (v < 0 || v >= vs)
        throw DataError("encoding error: field " + std::to_string(pos) + " index " + std::to_string(v) +
                        " outside vocabulary of size " + std::to_string(vs));
      idx[f][r] = v;
    }
  }
  return idx;
}

VarPtr Network::logits(Tape& tape, std::span<const Instance> batch) const {
  if (!with_head_) throw ConfigError("logits() called on an encoder-role network");
  if (batch.empty()) throw ShapeError("logits: empty batch");
  const auto idx = field_indices(batch);

  VarPtr out = gather_rows(tape, lin_w_[0], idx[0]);
  for (std::size_t f = 1; f < lin_w_.size(); ++f) out = add_op(tape, out, gather_rows(tape, lin_w_[f], idx[f]));
  out = add_row_bias(tape, out, bias_);
  if (spec_.arch == Arch::LR) return out;

  std::vector<VarPtr> fields;
  fields.reserve(embed_.size());
  for (std::size_t f = 0; f < embed_.size(); ++f) fields.push_back(gather_rows(tape, embed_[f], idx[f]));
  out = add_op(tape, out, rowsum_op(tape, fm_pool_rows(tape, fields)));
  if (spec_.arch == Arch::FM) return out;

  VarPtr h = concat_cols(tape, fields);
  for (std::size_t l = 0; l + 1 < mlp_w_.size(); ++l)
    h = relu_op(tape, add_row_bias(tape, matmul_op(tape, h, mlp_w_[l]), mlp_b_[l]));
  h = add_row_bias(tape, matmul_op(tape, h, mlp_w_.back()), mlp_b_.back());
  return add_op(tape, out, h);
}

VarPtr Network::encode(Tape& tape, std::span<const Instance> batch) const {
  if (with_head_) throw ConfigError("encode() called on a predictor-role network");
  if (batch.empty()) throw ShapeError("encode: empty batch");
  const auto idx = field_indices(batch);

  std::vector<VarPtr> fields;
  fields.reserve(embed_.size());
  for (std::size_t f = 0; f < embed_.size(); ++f) fields.push_back(gather_rows(tape, embed_[f], idx[f]));

  switch (spec_.arch) {
    case Arch::LR: return concat_cols(tape, fields);
    case Arch::FM: return fm_pool_rows(tape, fields);
    case Arch::DeepFM: {
      VarPtr h = concat_cols(tape, fields);
      for (std::size_t l = 0; l < mlp_w_.size(); ++l)
        h = relu_op(tape, add_row_bias(tape, matmul_op(tape, h, mlp_w_[l]), mlp_b_[l]));
      return concat_cols(tape, {fm_pool_rows(tape, fields), h});
    }
  }
  throw ConfigError("encode: bad arch");
}

Mat Network::logits_value(std::span<const Instance> batch) const {
  Tape tape;
  return logits(tape, batch)->v;
}

Mat Network::encode_value(std::span<const Instance> batch) const {
  Tape tape;
  return encode(tape, batch)->v;
}

std::vector<VarPtr> Network::params() const {
  std::vector<VarPtr> out;
  for (const auto& e : embed_) out.push_back(e);
  for (const auto& w : lin_w_) out.push_back(w);
  if (bias_) out.push_back(bias_);
  for (const auto& w : mlp_w_) out.push_back(w);
  for (const auto& b : mlp_b_) out.push_back(b);
  return out;
}

long Network::param_count() const {
  long n = 0;
  for (const auto& p : params()) n += static_cast<long>(p->v.size());
  return n;
}

std::vector<double> Network::flatten_params() const {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(param_count()));
  for (const auto& p : params()) flat.insert(flat.end(), p->v.a.begin(), p->v.a.end());
  return flat;
}

void Network::load_params(std::span<const double> flat) {
  std::size_t off = 0;
  for (const auto& p : params()) {
    if (off + p->v.size() > flat.size()) throw SpecMismatchError("checkpoint payload shorter than parameter set");
    std::copy(flat.begin() + static_cast<long>(off), flat.begin() + static_cast<long>(off + p->v.size()),
              p->v.a.begin());
    off += p->v.size();
  }
  if (off != flat.size()) throw SpecMismatchError("checkpoint payload longer than parameter set");
}

Adam::Adam(std::vector<VarPtr> params, double lr) : params_(std::move(params)), lr_(lr) {
  for (const auto& p : params_) {
    m_.emplace_back(p->v.rows, p->v.cols);
    v_.emplace_back(p->v.rows, p->v.cols);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = *params_[i];
    for (std::size_t k = 0; k < p.v.size(); ++k) {
      const double g = p.g.a[k];
      m_[i].a[k] = beta1_ * m_[i].a[k] + (1.0 - beta1_) * g;
      v_[i].a[k] = beta2_ * v_[i].a[k] + (1.0 - beta2_) * g * g;
      p.v.a[k] -= lr_ * (m_[i].a[k] / bc1) / (std::sqrt(v_[i].a[k] / bc2) + eps_);
    }
    p.g.zero();
  }
}

void Adam::zero_grads() {
  for (const auto& p : params_) p->g.zero();
}

namespace {

// Pooled prediction AUC of a head network, batched to bound peak memory.
std::optional<double> head_auc(const Network& net, const std::vector<Instance>& instances) {
  if (instances.empty()) return std::nullopt;
  std::vector<double> scores;
  std::vector<uint8_t> labels;
  scores.reserve(instances.size());
  labels.reserve(instances.size());
  const std::size_t chunk = 8192;
  for (std::size_t at = 0; at < instances.size(); at += chunk) {
    const std::size_t n = std::min(chunk, instances.size() - at);
    const Mat logit = net.logits_value({instances.data() + at, n});
    for (std::size_t i = 0; i < n; ++i) {
      scores.push_back(logit(static_cast<int>(i), 0));
      labels.push_back(instances[at + i].label);
    }
  }
  return auc(labels, scores);
}

}  // namespace

TrainHistory pretrain_shared(Network& psi, const std::vector<Instance>& train_instances,
                             const std::vector<Instance>& val_instances, const TrainOptions& opts) {
  if (train_instances.empty()) throw DataError("pretrain: no training instances");
  if (!psi.with_head()) throw ConfigError("pretrain: network must be in predictor role");

  Rng rng(opts.seed);
  Adam adam(psi.params(), opts.lr);
  TrainHistory hist;
  std::vector<double> best_params;
  int since_best = 0;

  std::vector<std::size_t> order(train_instances.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    shuffle(order, rng);
    double loss_sum = 0.0;
    long steps = 0;
    std::vector<Instance> batch;
    std::vector<double> labels;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(opts.batch)) {
      const std::size_t n = std::min(static_cast<std::size_t>(opts.batch), order.size() - at);
      batch.clear();
      labels.clear();
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(train_instances[order[at + i]]);
        labels.push_back(static_cast<double>(batch.back().label));
      }
      Tape tape;
      VarPtr loss = bce_with_logits_op(tape, psi.logits(tape, batch), labels);
      const double l = loss->v(0, 0);
      if (!std::isfinite(l)) {
        // leave the network at its last good state for the caller to persist
        if (!best_params.empty()) psi.load_params(best_params);
        throw TrainingDivergedError("pretrain: non-finite loss at epoch " + std::to_string(epoch), "");
      }
      tape.backward_from(*loss);
      adam.step();
      loss_sum += l;
      ++steps;
    }
    hist.train_loss.push_back(loss_sum / static_cast<double>(steps));

    const auto va = head_auc(psi, val_instances);
    const double val = va.value_or(0.5);  // degenerate validation pool: no signal
    hist.val_auc.push_back(val);
    if (opts.verbose)
      std::fprintf(stderr, "[pretrain] epoch %d loss %.6f val_auc %.6f\n", epoch, hist.train_loss.back(), val);

    if (hist.best_epoch < 0 || val > hist.best_val_auc) {
      hist.best_epoch = epoch;
      hist.best_val_auc = val;
      best_params = psi.flatten_params();
      since_best = 0;
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  if (!best_params.empty()) psi.load_params(best_params);
  psi.freeze();
  return hist;
}

namespace {

constexpr char kSharedMagic[9] = "RESUSCK1";

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

void write_spec(std::ostream& os, const PredictorSpec& spec, const std::vector<int>& vocab_sizes) {
  write_u32(os, static_cast<uint32_t>(spec.arch));
  write_u32(os, static_cast<uint32_t>(spec.embed_dim));
  write_u32(os, static_cast<uint32_t>(spec.mlp_widths.size()));
  for (int w : spec.mlp_widths) write_u32(os, static_cast<uint32_t>(w));
  write_u32(os, static_cast<uint32_t>(vocab_sizes.size()));
  for (int v : vocab_sizes) write_u32(os, static_cast<uint32_t>(v));
}

void check_spec(std::istream& is, const PredictorSpec& expect, const std::vector<int>& vocab_sizes,
                const std::string& path) {
  const auto arch = static_cast<Arch>(read_u32(is));
  const int d = static_cast<int>(read_u32(is));
  std::vector<int> widths(read_u32(is));
  for (auto& w : widths) w = static_cast<int>(read_u32(is));
  std::vector<int> vs(read_u32(is));
  for (auto& v : vs) v = static_cast<int>(read_u32(is));
  if (arch != expect.arch || d != expect.embed_dim || widths != expect.mlp_widths)
    throw SpecMismatchError("checkpoint " + path + " was written for arch " + to_string(arch) +
                            " and does not match the requested spec");
  if (vs != vocab_sizes)
    throw SpecMismatchError("checkpoint " + path + " vocabulary shape does not match the dataset bundle");
}

void write_params(std::ostream& os, const std::vector<double>& flat) {
  write_u32(os, static_cast<uint32_t>(flat.size()));
  for (double x : flat) write_f64(os, x);
}

std::vector<double> read_params(std::istream& is) {
  std::vector<double> flat(read_u32(is));
  for (auto& x : flat) x = read_f64(is);
  return flat;
}

}  // namespace

void save_shared_checkpoint(const std::string& path, const Network& psi, double train_seconds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint: " + path);
  os.write(kSharedMagic, 8);
  write_spec(os, psi.spec(), psi.vocab_sizes());
  write_f64(os, train_seconds);
  write_params(os, psi.flatten_params());
  if (!os) throw DataError("short write on checkpoint: " + path);
}

Network load_shared_checkpoint(const std::string& path, const PredictorSpec& expect, const FeatureSpace& space,
                               double* train_seconds) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kSharedMagic, 8) != 0) throw SpecMismatchError("not a shared-predictor checkpoint: " + path);
  Network psi(expect, space, /*with_head=*/true);
  check_spec(is, expect, psi.vocab_sizes(), path);
  const double secs = read_f64(is);
  if (train_seconds) *train_seconds = secs;
  psi.load_params(read_params(is));
  if (!is) throw DataError("truncated checkpoint: " + path);
  psi.freeze();
  return psi;
}

}  // namespace resus
