#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "resus/grad_check.hpp"
#include "resus/kernels.hpp"
#include "resus/model.hpp"

using namespace resus;

namespace {

FeatureSpace tiny_space(int n_fields, int tokens_per_field, bool with_user_field = true) {
  FeatureSpace space;
  if (with_user_field) {
    FieldSchema uf;
    uf.name = "user_id";
    uf.is_user_id = true;
    for (int t = 0; t < 3; ++t) uf.add("u" + std::to_string(t));
    space.fields.push_back(std::move(uf));
  }
  for (int f = 0; f < n_fields; ++f) {
    FieldSchema field;
    field.name = "f" + std::to_string(f);
    for (int t = 0; t < tokens_per_field; ++t) field.add("t" + std::to_string(t));
    space.fields.push_back(std::move(field));
  }
  return space;
}

Instance make_inst(const FeatureSpace& space, Rng& rng, uint8_t label) {
  Instance inst;
  for (const auto& f : space.fields)
    inst.field_indices.push_back(static_cast<int32_t>(uniform_index(rng, static_cast<std::size_t>(f.size()))));
  inst.label = label;
  return inst;
}

}  // namespace

TEST_CASE("fm pooling equals the brute-force pairwise sum") {
  // two fields: e1 = (1,2), e2 = (3,4) -> 2 * e1 .* e2 = (6, 16)
  Mat fields(2, 2);
  fields(0, 0) = 1;
  fields(0, 1) = 2;
  fields(1, 0) = 3;
  fields(1, 1) = 4;
  Mat out;
  fm_pool(fields, out);
  CHECK(out(0, 0) == doctest::Approx(6.0));
  CHECK(out(0, 1) == doctest::Approx(16.0));

  Mat zero(3, 4);
  fm_pool(zero, out);
  for (double v : out.a) CHECK(v == 0.0);

  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int f = 2 + static_cast<int>(uniform_index(rng, 4));
    const int d = 1 + static_cast<int>(uniform_index(rng, 6));
    Mat e(f, d);
    for (auto& x : e.a) x = 2.0 * uniform01(rng) - 1.0;
    fm_pool(e, out);
    for (int j = 0; j < d; ++j) {
      double brute = 0.0;
      for (int a = 0; a < f; ++a)
        for (int b = a + 1; b < f; ++b) brute += 2.0 * e(a, j) * e(b, j);
      CHECK(out(0, j) == doctest::Approx(brute).epsilon(1e-9));
    }
  }
}

TEST_CASE("encoder output dimensions per architecture") {
  CHECK(PredictorSpec{Arch::DeepFM, 10, {64, 32}}.encode_dim(6) == 42);
  CHECK(PredictorSpec{Arch::LR, 10, {}}.encode_dim(6) == 60);
  CHECK(PredictorSpec{Arch::FM, 10, {}}.encode_dim(6) == 10);

  const FeatureSpace space = tiny_space(4, 5);
  // the user-id field is excluded from the model: 4 usable fields
  Network enc(PredictorSpec{Arch::DeepFM, 3, {8, 4}}, space, false);
  CHECK(enc.encode_dim() == 7);
  Rng rng(1);
  enc.init_params(rng);
  Instance inst = make_inst(space, rng, 1);
  CHECK(enc.encode_value({&inst, 1}).cols == 7);
}

TEST_CASE("zero-initialized predictors emit logit 0 for every architecture") {
  const FeatureSpace space = tiny_space(3, 4);
  Rng rng(7);
  for (Arch arch : {Arch::LR, Arch::FM, Arch::DeepFM}) {
    PredictorSpec spec{arch, 4, arch == Arch::DeepFM ? std::vector<int>{6, 3} : std::vector<int>{}};
    Network net(spec, space, true);
    net.zero_params();
    Instance inst = make_inst(space, rng, 1);
    const Mat logit = net.logits_value({&inst, 1});
    CHECK(logit(0, 0) == 0.0);
    CHECK(sigmoid(logit(0, 0)) == 0.5);
  }
  // zero weights and embeddings also zero the encoding
  Network enc(PredictorSpec{Arch::DeepFM, 4, {6, 3}}, space, false);
  enc.zero_params();
  Instance inst = make_inst(space, rng, 1);
  for (double v : enc.encode_value({&inst, 1}).a) CHECK(v == 0.0);
}

TEST_CASE("LR predictor sums one weight per active feature") {
  const FeatureSpace space = tiny_space(2, 4);
  Network net(PredictorSpec{Arch::LR, 4, {}}, space, true);
  net.zero_params();
  Instance inst;
  inst.field_indices = {0, 2, 1};  // leading user field is ignored by the model
  // params order for an LR head is lin_w per usable field, then the bias
  net.params()[0]->v(2, 0) = 1.3;
  const Mat logit = net.logits_value({&inst, 1});
  CHECK(logit(0, 0) == doctest::Approx(1.3));
}

TEST_CASE("encode and predict are pure: identical instances get bit-identical outputs") {
  const FeatureSpace space = tiny_space(4, 6);
  Rng rng(17);
  Network psi(PredictorSpec{Arch::DeepFM, 5, {8, 4}}, space, true);
  Network phi(PredictorSpec{Arch::DeepFM, 5, {8, 4}}, space, false);
  psi.init_params(rng);
  phi.init_params(rng);
  Instance inst = make_inst(space, rng, 1);
  std::vector<Instance> pair{inst, inst};
  const Mat enc = phi.encode_value(pair);
  for (int j = 0; j < enc.cols; ++j) CHECK(enc(0, j) == enc(1, j));
  const Mat lg = psi.logits_value(pair);
  CHECK(lg(0, 0) == lg(1, 0));
  CHECK(psi.logits_value(pair)(0, 0) == lg(0, 0));
}

TEST_CASE("all shared-predictor gradients pass the finite-difference check on a 5-instance microbatch") {
  const FeatureSpace space = tiny_space(3, 5);
  Rng rng(23);
  for (Arch arch : {Arch::LR, Arch::FM, Arch::DeepFM}) {
    PredictorSpec spec{arch, 3, arch == Arch::DeepFM ? std::vector<int>{4, 3} : std::vector<int>{}};
    Network net(spec, space, true);
    net.init_params(rng);
    // move every parameter (zero-initialized biases included) off the exact
    // ReLU kinks the finite differences would otherwise straddle
    for (const auto& p : net.params())
      for (auto& x : p->v.a) x += 0.02 * (uniform01(rng) - 0.5);
    std::vector<Instance> batch;
    std::vector<double> labels;
    for (int i = 0; i < 5; ++i) {
      batch.push_back(make_inst(space, rng, i % 2 == 0));
      labels.push_back(batch.back().label);
    }
    Tape tape;
    auto loss = bce_with_logits_op(tape, net.logits(tape, batch), labels);
    tape.backward_from(*loss);

    auto pure = [&] {
      const Mat logits = net.logits_value(batch);
      double s = 0.0;
      for (int i = 0; i < 5; ++i) s += bce_with_logits(labels[static_cast<std::size_t>(i)], logits(i, 0));
      return s / 5.0;
    };
    std::vector<GradCheckParam<double>> params;
    const auto vars = net.params();
    for (std::size_t p = 0; p < vars.size(); ++p)
      params.push_back({"p" + std::to_string(p), &vars[p]->v, &vars[p]->g});
    CHECK(grad_check<double>(pure, params) < 1e-4);
  }
}

TEST_CASE("pretraining fits a constant-label dataset and beats the ln2 floor on balanced data") {
  const FeatureSpace space = tiny_space(3, 4);
  Rng rng(31);

  // all-positive labels: predicted probability must reach 0.9 inside 3 epochs
  {
    std::vector<Instance> train;
    for (int i = 0; i < 1000; ++i) train.push_back(make_inst(space, rng, 1));
    Network psi(PredictorSpec{Arch::DeepFM, 4, {8, 4}}, space, true);
    psi.init_params(rng);
    TrainOptions opts;
    opts.batch = 32;
    opts.max_epochs = 3;
    opts.lr = 0.05;  // tiny dataset, few optimizer steps per epoch
    pretrain_shared(psi, train, {}, opts);
    const Mat logits = psi.logits_value({train.data(), 32});
    for (int i = 0; i < 32; ++i) CHECK(sigmoid(logits(i, 0)) >= 0.9);
  }

  // balanced labels with signal: first-epoch loss beats the zero-model ln 2
  {
    std::vector<Instance> train;
    for (int i = 0; i < 600; ++i) {
      Instance inst = make_inst(space, rng, 0);
      inst.label = inst.field_indices[1] % 2 == 0 ? 1 : 0;
      train.push_back(inst);
    }
    Network psi(PredictorSpec{Arch::FM, 4, {}}, space, true);
    psi.init_params(rng);
    TrainOptions opts;
    opts.batch = 32;
    opts.max_epochs = 1;
    opts.lr = 0.05;
    const TrainHistory hist = pretrain_shared(psi, train, {}, opts);
    CHECK(hist.train_loss.back() < std::log(2.0));
  }
}

TEST_CASE("pretraining marks the predictor frozen and tracks validation AUC") {
  const FeatureSpace space = tiny_space(2, 4);
  Rng rng(41);
  std::vector<Instance> train, val;
  for (int i = 0; i < 300; ++i) {
    Instance inst = make_inst(space, rng, 0);
    inst.label = inst.field_indices[1] % 2;
    (i < 240 ? train : val).push_back(inst);
  }
  Network psi(PredictorSpec{Arch::LR, 2, {}}, space, true);
  psi.init_params(rng);
  TrainOptions opts;
  opts.batch = 32;
  opts.max_epochs = 10;
  const TrainHistory hist = pretrain_shared(psi, train, val, opts);
  CHECK(psi.frozen());
  CHECK(hist.best_epoch >= 0);
  CHECK(hist.val_auc.size() == hist.train_loss.size());
  CHECK(hist.best_val_auc > 0.9);  // the label is a deterministic function of one field
}

TEST_CASE("a non-finite loss raises the divergence error") {
  const FeatureSpace space = tiny_space(2, 3);
  Rng rng(61);
  std::vector<Instance> train;
  for (int i = 0; i < 64; ++i) train.push_back(make_inst(space, rng, 1));
  Network psi(PredictorSpec{Arch::FM, 2, {}}, space, true);
  psi.init_params(rng);
  psi.params()[0]->v(0, 0) = std::numeric_limits<double>::quiet_NaN();
  TrainOptions opts;
  opts.batch = 32;
  CHECK_THROWS_AS(pretrain_shared(psi, train, {}, opts), TrainingDivergedError);
}

TEST_CASE("checkpoints round-trip exactly and refuse mismatched specs") {
  namespace fs = std::filesystem;
  const FeatureSpace space = tiny_space(3, 5);
  Rng rng(51);
  PredictorSpec spec{Arch::DeepFM, 4, {6, 3}};
  Network psi(spec, space, true);
  psi.init_params(rng);
  psi.freeze();
  const auto path = (fs::temp_directory_path() / "resus_ckpt_test.bin").string();
  save_shared_checkpoint(path, psi, 12.5);

  double secs = 0;
  Network back = load_shared_checkpoint(path, spec, space, &secs);
  CHECK(secs == 12.5);
  CHECK(back.flatten_params() == psi.flatten_params());
  CHECK(back.frozen());

  PredictorSpec other{Arch::DeepFM, 4, {8, 3}};
  CHECK_THROWS_AS(load_shared_checkpoint(path, other, space), SpecMismatchError);
  PredictorSpec lr{Arch::LR, 4, {}};
  CHECK_THROWS_AS(load_shared_checkpoint(path, lr, space), SpecMismatchError);
  fs::remove(path);
}
