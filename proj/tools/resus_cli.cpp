// SPDX-License-Identifier: Apache-2.0
//
// Experiment driver: ingest -> pretrain -> meta-train -> evaluate (+ timing),
// each stage writing a self-describing output directory.
#include <omp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "resus/config.hpp"
#include "resus/episodes.hpp"
#include "resus/evaluation.hpp"
#include "resus/ingest.hpp"
#include "resus/meta.hpp"
#include "resus/model.hpp"

namespace fs = std::filesystem;
using namespace resus;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write " + path);
  os << content;
}

struct RunDir {
  fs::path dir;
  explicit RunDir(const ExperimentConfig& cfg) : dir(cfg.out_dir) {
    fs::create_directories(dir);
    write_text((dir / "config.echo").string(), cfg.echo());
  }
  std::string file(const std::string& name) const { return (dir / name).string(); }
};

PredictorSpec spec_of(const ExperimentConfig& cfg) {
  PredictorSpec spec;
  spec.arch = arch_from_string(cfg.arch);
  spec.embed_dim = cfg.embed_dim;
  spec.mlp_widths = spec.arch == Arch::DeepFM ? cfg.parsed_widths() : std::vector<int>{};
  if (spec.arch == Arch::DeepFM && spec.mlp_widths.empty())
    throw ConfigError("deepfm needs model.mlp_widths");
  return spec;
}

SupportSizeDist dist_of(const ExperimentConfig& cfg, const std::vector<UserLog>& train_logs) {
  if (cfg.dist == "uniform") return SupportSizeDist::uniform(cfg.tau);
  if (cfg.dist == "empirical") return SupportSizeDist::empirical(train_logs, cfg.tau);
  throw ConfigError("meta.dist must be uniform or empirical");
}

std::string history_json(const TrainHistory& hist) {
  nlohmann::ordered_json j;
  j["train_loss"] = hist.train_loss;
  j["val_auc"] = hist.val_auc;
  j["best_epoch"] = hist.best_epoch;
  j["best_val_auc"] = hist.best_val_auc;
  return j.dump(2);
}

int cmd_ingest(const ExperimentConfig& cfg) {
  RunDir run(cfg);
  const Bundle bundle = ingest_dataset(cfg.ingest_config());
  write_bundle(cfg.bundle_path, bundle);
  write_text(run.file("manifest.json"), bundle.manifest.dump(2) + "\n");
  std::cout << "ingest: " << bundle.logs.size() << " users, "
            << bundle.manifest["instances_after_filter"] << " instances -> " << cfg.bundle_path << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  RunDir run(cfg);
  const Bundle bundle = read_bundle(cfg.bundle_path);
  const auto train = split_instances(bundle, Split::Train);
  const auto val = split_instances(bundle, Split::Validation);

  Network psi(spec_of(cfg), bundle.space, /*with_head=*/true);
  Rng rng(cfg.seed);
  psi.init_params(rng);

  TrainOptions opts;
  opts.lr = cfg.lr;
  opts.batch = cfg.batch;
  opts.max_epochs = cfg.max_epochs;
  opts.patience = cfg.patience;
  opts.seed = cfg.seed;
  opts.verbose = cfg.verbose;

  const auto t0 = std::chrono::steady_clock::now();
  TrainHistory hist;
  try {
    hist = pretrain_shared(psi, train, val, opts);
  } catch (TrainingDivergedError& e) {
    // the network holds its last good parameters; keep them on disk
    save_shared_checkpoint(run.file("psi.ckpt"), psi, seconds_since(t0));
    throw TrainingDivergedError(e.what(), run.file("psi.ckpt"));
  }
  save_shared_checkpoint(run.file("psi.ckpt"), psi, seconds_since(t0));
  write_text(run.file("pretrain_history.json"), history_json(hist) + "\n");
  std::cout << "pretrain: best val AUC " << hist.best_val_auc << " at epoch " << hist.best_epoch << " -> "
            << run.file("psi.ckpt") << "\n";
  return 0;
}

int cmd_meta_train(const ExperimentConfig& cfg, const std::string& psi_ckpt) {
  RunDir run(cfg);
  const Bundle bundle = read_bundle(cfg.bundle_path);
  const PredictorSpec spec = spec_of(cfg);
  Network psi = load_shared_checkpoint(psi_ckpt, spec, bundle.space);
  Network phi(spec, bundle.space, /*with_head=*/false);
  Rng rng(cfg.seed);
  phi.init_params(rng);

  MetaModel model(spec, meta_mode_from_string(cfg.mode), std::move(psi), std::move(phi));
  if (model.mode == MetaMode::SharedOnly) throw ConfigError("meta-train: mode shared has nothing to train");
  model.mp.init(model.phi.encode_dim(), rng);
  if (cfg.beta_per_size) model.enable_per_size_beta(cfg.tau);

  const auto train_logs = split_logs(bundle, Split::Train);
  const auto val_logs = split_logs(bundle, Split::Validation);
  MetaTrainOptions opts;
  opts.lr = cfg.lr;
  opts.batch = cfg.batch;
  opts.batch_tasks = cfg.batch_tasks;
  opts.max_epochs = cfg.max_epochs;
  opts.patience = cfg.patience;
  opts.seed = cfg.seed;
  opts.verbose = cfg.verbose;

  const auto t0 = std::chrono::steady_clock::now();
  TrainHistory hist;
  try {
    hist = meta_train(model, train_logs, val_logs, dist_of(cfg, train_logs), opts);
  } catch (TrainingDivergedError& e) {
    model.train_seconds = seconds_since(t0);
    save_meta_checkpoint(run.file("meta.ckpt"), model);
    throw TrainingDivergedError(e.what(), run.file("meta.ckpt"));
  }
  model.train_seconds = seconds_since(t0);
  save_meta_checkpoint(run.file("meta.ckpt"), model);
  write_text(run.file("meta_history.json"), history_json(hist) + "\n");
  std::cout << "meta-train[" << cfg.mode << "]: best val AUC " << hist.best_val_auc << " at epoch "
            << hist.best_epoch << " -> " << run.file("meta.ckpt") << "\n";
  return 0;
}

bool is_meta_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path);
  char magic[8] = {};
  is.read(magic, 8);
  return std::string(magic, 8) == "RESUSMT1";
}

MetaModel load_any_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt, const FeatureSpace& space,
                              bool mode_flag_given) {
  const PredictorSpec spec = spec_of(cfg);
  if (is_meta_checkpoint(ckpt)) {
    MetaModel model = load_meta_checkpoint(ckpt, spec, space);
    if (mode_flag_given && meta_mode_from_string(cfg.mode) != model.mode)
      throw SpecMismatchError("checkpoint " + ckpt + " holds mode " + to_string(model.mode) +
                              ", refusing requested mode " + cfg.mode);
    return model;
  }
  // a shared-predictor checkpoint evaluates as the shared-only baseline
  double secs = 0.0;
  Network psi = load_shared_checkpoint(ckpt, spec, space, &secs);
  Network phi(spec, space, /*with_head=*/false);
  MetaModel model(spec, MetaMode::SharedOnly, std::move(psi), std::move(phi));
  Rng rng(cfg.seed);
  model.mp.init(model.phi.encode_dim(), rng);
  model.train_seconds = secs;
  if (mode_flag_given && meta_mode_from_string(cfg.mode) != MetaMode::SharedOnly)
    throw SpecMismatchError("checkpoint " + ckpt + " is a shared predictor, refusing mode " + cfg.mode);
  return model;
}

std::string method_name(const MetaModel& model, const ExperimentConfig& cfg) {
  return to_string(model.mode) + "(" + cfg.arch + ")";
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& ckpt, const std::string& export_suite,
                 bool per_query, bool mode_flag_given) {
  RunDir run(cfg);
  const Bundle bundle = read_bundle(cfg.bundle_path);
  const MetaModel model = load_any_checkpoint(cfg, ckpt, bundle.space, mode_flag_given);
  const auto test_logs = split_logs(bundle, Split::Test);
  const std::vector<int> sizes = parse_size_list(cfg.eval_sizes);
  const ColdnessConfig stages = ColdnessConfig::from_sizes(sizes, cfg.tau);

  RunOptions ropts;
  ropts.beta_override = cfg.beta_override;
  ropts.per_query = per_query;

  std::vector<SeedRun> runs;
  for (uint64_t seed : cfg.parsed_eval_seeds()) {
    const MetaTestSuite suite = build_meta_test(test_logs, sizes, stages, seed);
    if (!export_suite.empty() && runs.empty()) write_text(export_suite, suite_to_json(suite, test_logs) + "\n");
    runs.push_back(SeedRun{seed, run_suite(model, suite, ropts)});
  }
  const std::string base = model.mode == MetaMode::MUS ? "" : "shared(" + cfg.arch + ")";
  const SuiteReport report = make_report(method_name(model, cfg), base, runs, stages);
  write_text(run.file("report.json"), report_to_json(report, cfg.echo_json()) + "\n");
  write_text(run.file("report.csv"), report_to_csv(report));
  for (const auto& st : report.stages) {
    std::cout << "stage " << st.name << " [" << st.lo << ".." << st.hi << "]: logloss " << st.logloss << ", auc "
              << (st.auc ? std::to_string(*st.auc) : "n/a");
    if (st.rela_impr_vs_base) std::cout << ", rela_impr " << *st.rela_impr_vs_base << "%";
    std::cout << "\n";
  }
  return 0;
}

int cmd_timing(const ExperimentConfig& cfg, const std::string& ckpt, bool mode_flag_given) {
  RunDir run(cfg);
  const Bundle bundle = read_bundle(cfg.bundle_path);
  const MetaModel model = load_any_checkpoint(cfg, ckpt, bundle.space, mode_flag_given);
  const auto test_logs = split_logs(bundle, Split::Test);
  const std::vector<int> sizes = parse_size_list(cfg.eval_sizes);
  const ColdnessConfig stages = ColdnessConfig::from_sizes(sizes, cfg.tau);
  const MetaTestSuite suite = build_meta_test(test_logs, sizes, stages, cfg.seed);

  InferenceStats batched_stats, per_query_stats;
  auto t0 = std::chrono::steady_clock::now();
  run_suite(model, suite, RunOptions{}, &batched_stats);
  const double batched_s = seconds_since(t0);

  RunOptions pq;
  pq.per_query = true;
  t0 = std::chrono::steady_clock::now();
  run_suite(model, suite, pq, &per_query_stats);
  const double per_query_s = seconds_since(t0);

  nlohmann::ordered_json j;
  j["train_seconds"] = model.train_seconds;
  j["test_seconds_batched"] = batched_s;
  j["test_seconds_per_query"] = per_query_s;
  j["batched_support_encode_passes"] = batched_stats.support_encode_passes;
  j["per_query_support_encode_passes"] = per_query_stats.support_encode_passes;
  write_text(run.file("timing.json"), j.dump(2) + "\n");
  std::cout << "timing: batched " << batched_s << "s, per-query " << per_query_s << "s\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decoupled cold-start CTR prediction"};
  app.require_subcommand(0, 1);

  std::string config_path, ckpt, export_suite;
  bool print_config = false, per_query = false;
  std::vector<std::pair<std::string, std::string>> overrides;

  auto add_override = [&overrides](const std::string& key) {
    return [key, &overrides](const std::string& v) { overrides.emplace_back(key, v); };
  };
  app.add_option("--config", config_path, "key = value configuration file");
  app.add_flag("--print-config", print_config, "print the resolved configuration and exit");
  app.add_option_function<std::string>("--seed", add_override("seed"), "run seed");
  app.add_option_function<std::string>("--mode", add_override("meta.mode"), "nn | rr | mus | shared");
  app.add_option_function<std::string>("--arch", add_override("model.arch"), "lr | fm | deepfm");
  app.add_option_function<std::string>("--tau", add_override("meta.tau"), "cold-user interaction cap");
  app.add_option_function<std::string>("--beta-override", add_override("beta_override"),
                                       "evaluate with a fixed rescaling coefficient");
  app.add_option_function<std::string>("--threads", add_override("threads"), "cap OpenMP workers");
  app.add_option_function<std::string>("--out", add_override("out"), "output directory");
  app.add_option_function<std::string>("--bundle", add_override("dataset.bundle"), "dataset bundle path");
  app.add_flag_function("--verbose", [&overrides](std::int64_t) { overrides.emplace_back("verbose", "1"); },
                        "per-epoch logging");

  CLI::App* ingest = app.add_subcommand("ingest", "parse and preprocess a raw dataset into a bundle");
  CLI::App* pretrain = app.add_subcommand("pretrain", "fit the shared predictor on training users");
  CLI::App* meta = app.add_subcommand("meta-train", "fit the residual head and encoder episodically");
  CLI::App* evaluate = app.add_subcommand("evaluate", "score a checkpoint over the cold-start suite");
  CLI::App* timing = app.add_subcommand("timing", "wall-clock comparison of batched vs per-query inference");
  meta->add_option("--checkpoint", ckpt, "shared-predictor checkpoint")->required();
  evaluate->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  evaluate->add_option("--export-suite", export_suite, "write the meta-test suite index to this JSON file");
  evaluate->add_flag("--per-query", per_query, "disable user-based batching");
  timing->add_option("--checkpoint", ckpt, "model checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : ExperimentConfig::from_file(config_path);
    bool mode_flag_given = false;
    for (const auto& [key, value] : overrides) {
      cfg.set(key, value);
      if (key == "meta.mode") mode_flag_given = true;
    }
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
    if (print_config) {
      std::cout << cfg.echo();
      return 0;
    }
    if (ingest->parsed()) return cmd_ingest(cfg);
    if (pretrain->parsed()) return cmd_pretrain(cfg);
    if (meta->parsed()) return cmd_meta_train(cfg, ckpt);
    if (evaluate->parsed()) return cmd_evaluate(cfg, ckpt, export_suite, per_query, mode_flag_given);
    if (timing->parsed()) return cmd_timing(cfg, ckpt, mode_flag_given);
    std::cerr << app.help();
    return 2;
  } catch (const ConfigError& e) {  // SpecMismatchError included
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const TrainingDivergedError& e) {
    std::cerr << "training diverged: " << e.what();
    if (!e.last_checkpoint.empty()) std::cerr << " (last checkpoint: " << e.last_checkpoint << ")";
    std::cerr << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
