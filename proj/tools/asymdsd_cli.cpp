// Command-line entry points for the AsymDSD pipeline: synthetic dataset
// generation, self-distillation pre-training, frozen-feature probes, and
// the gradient-check harness.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "asymdsd/config.hpp"
#include "asymdsd/data_io.hpp"
#include "asymdsd/evaluation.hpp"
#include "asymdsd/gradcheck.hpp"
#include "asymdsd/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace asymdsd;

namespace {

int cmd_gen_data(const std::string& out, int per_class, int points,
                 uint64_t seed, double noise) {
  auto rows = data::generate_dataset(out, per_class, points, seed, noise);
  json line{{"event", "gen-data"},
            {"out", out},
            {"clouds", rows.size()},
            {"classes", data::shape_class_names().size()},
            {"per_class", per_class},
            {"points", points},
            {"seed", seed}};
  std::cout << line.dump() << "\n";
  return 0;
}

struct PretrainArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir;
  std::string out_dir;
  std::string scale = "micro";
  std::string resume;
  bool force = false;
};

int cmd_pretrain(const PretrainArgs& args) {
  json file_values;
  if (!args.config_path.empty())
    file_values = config::load_json_file(args.config_path);
  const auto cfg = config::RunConfig::build(file_values, args.overrides,
                                            args.scale);
  const auto pcfg = cfg.pipeline();
  const auto tcfg = cfg.trainer();
  const uint64_t digest = cfg.digest();

  auto ds = data::load_dataset(args.data_dir);
  fs::create_directories(args.out_dir);

  // the effective config is echoed both to its own file and to the run log,
  // so a run is reproducible from the log alone
  {
    std::ofstream f(fs::path(args.out_dir) / "effective_config.json");
    f << cfg.values.dump(2) << "\n";
  }
  std::ofstream metrics(fs::path(args.out_dir) / "metrics.jsonl",
                        std::ios::trunc);
  check(metrics.good(), "pretrain: cannot write metrics log in '",
        args.out_dir, "'");
  metrics << json{{"config", cfg.values}, {"config_digest", digest}}.dump()
          << "\n";

  train::TrainState state;
  if (!args.resume.empty()) {
    uint64_t stored = 0;
    state = train::load_checkpoint(args.resume, &stored);
    if (stored != digest) {
      warn("resume: config digest mismatch (checkpoint ", stored,
           ", config ", digest, ")", args.force ? ", continuing with --force" : "");
      check(args.force, "resume: config digest mismatch, pass --force to continue");
    }
  } else {
    state = train::make_train_state(pcfg.model, tcfg.seed);
  }

  train::TrainHooks hooks;
  hooks.on_step = [&](const train::LossReport& r) {
    metrics << json{{"step", r.step},
                    {"epoch", r.epoch},
                    {"total", r.total},
                    {"cls", r.cls},
                    {"mpm", r.mpm},
                    {"koleo", r.koleo},
                    {"regression", r.regression},
                    {"lr", r.lr},
                    {"ema", r.ema},
                    {"tau_cls", r.tau_cls},
                    {"tau_patch", r.tau_patch},
                    {"grad_norm", r.grad_norm},
                    {"grad_norm_clipped", r.grad_norm_clipped},
                    {"h_marg_cls", r.h_marg_cls},
                    {"h_post_cls", r.h_post_cls},
                    {"kl_cls", r.kl_cls},
                    {"h_marg_patch", r.h_marg_patch},
                    {"h_post_patch", r.h_post_patch},
                    {"kl_patch", r.kl_patch},
                    {"teacher_forwards", r.teacher_forwards}}
                   .dump()
            << "\n";
  };
  const int every = cfg.checkpoint_every();
  hooks.on_epoch_end = [&](int epoch, train::TrainState& st) {
    metrics.flush();
    if ((epoch + 1) % every == 0 && epoch + 1 < tcfg.epochs) {
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_epoch%04d.adsd", epoch + 1);
      train::save_checkpoint(st, digest, (fs::path(args.out_dir) / name).string());
    }
  };

  train::train_loop(state, ds.clouds, pcfg, tcfg, hooks);
  train::save_checkpoint(state, digest,
                         (fs::path(args.out_dir) / "ckpt_final.adsd").string());
  std::cout << json{{"event", "pretrain-done"},
                    {"steps", state.step},
                    {"out", args.out_dir}}
                   .dump()
            << "\n";
  return 0;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string data_dir;
  std::string kind = "linear";
  int k = 5;
  bool cosine = false;
  double test_fraction = 0.3;
  uint64_t split_seed = 1;
  std::string features_out;
  std::vector<std::string> overrides;
  std::string scale = "micro";
};

int cmd_probe(const ProbeArgs& args) {
  check(args.kind == "linear" || args.kind == "knn",
        "probe: --kind must be linear or knn");
  const auto cfg = config::RunConfig::build(json(), args.overrides, args.scale);
  const auto pcfg = cfg.pipeline();
  auto state = train::load_checkpoint(args.checkpoint);
  auto ds = data::load_dataset(args.data_dir);

  // deterministic stratified split
  std::vector<int> train_idx, test_idx;
  {
    std::map<int, std::vector<int>> by_class;
    for (int i = 0; i < int(ds.clouds.size()); ++i)
      by_class[ds.labels[size_t(i)]].push_back(i);
    for (auto& [cls, idx] : by_class) {
      Rng rng = Rng::stream(args.split_seed, {0x5F17, uint64_t(cls)});
      rng.shuffle(idx);
      const int n_test = std::max(1, int(std::floor(args.test_fraction *
                                                    double(idx.size()) + 0.5)));
      for (size_t q = 0; q < idx.size(); ++q)
        (int(q) < n_test ? test_idx : train_idx).push_back(idx[q]);
    }
  }
  auto subset = [&](const std::vector<int>& idx) {
    std::vector<geometry::PointCloud> clouds;
    std::vector<int> labels;
    for (int i : idx) {
      clouds.push_back(ds.clouds[size_t(i)]);
      labels.push_back(ds.labels[size_t(i)]);
    }
    return std::pair(clouds, labels);
  };
  auto [train_clouds, train_labels] = subset(train_idx);
  auto [test_clouds, test_labels] = subset(test_idx);

  // frozen teacher encoder features
  auto train_fs = eval::extract_features(train_clouds, train_labels,
                                         state.teacher.ema, pcfg.model,
                                         pcfg.crops.global_patches,
                                         pcfg.crops.patch_points);
  auto test_fs = eval::extract_features(test_clouds, test_labels,
                                        state.teacher.ema, pcfg.model,
                                        pcfg.crops.global_patches,
                                        pcfg.crops.patch_points);
  if (!args.features_out.empty()) {
    eval::save_features(train_fs, args.features_out + ".train");
    eval::save_features(test_fs, args.features_out + ".test");
  }

  const double acc = args.kind == "linear"
                         ? eval::linear_probe(train_fs, test_fs)
                         : eval::knn_probe(train_fs, test_fs, args.k, args.cosine);
  std::cout << json{{"event", "probe"},
                    {"kind", args.kind},
                    {"k", args.k},
                    {"accuracy", acc},
                    {"train_size", train_fs.size()},
                    {"test_size", test_fs.size()},
                    {"checkpoint", args.checkpoint}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed, int samples, const std::string& corrupt) {
  const auto t0 = std::chrono::steady_clock::now();
  auto res = gradcheck::run(seed, samples, 1e-4, corrupt);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << json{{"event", "gradcheck"},
                    {"passed", res.passed},
                    {"max_rel_error", res.max_rel_error},
                    {"worst_tensor", res.worst_tensor},
                    {"parameters_checked", res.checked},
                    {"seconds", secs}}
                   .dump()
            << "\n";
  return res.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AsymDSD: asymmetric dual self-distillation for point clouds"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  int gen_per_class = 100, gen_points = 2048;
  uint64_t gen_seed = 0;
  double gen_noise = 0.0;
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--per-class", gen_per_class, "clouds per shape class");
  gen->add_option("--points", gen_points, "points per cloud");
  gen->add_option("--seed", gen_seed, "generation seed");
  gen->add_option("--noise", gen_noise, "per-point gaussian jitter sigma");

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "run self-distillation pre-training");
  PretrainArgs pargs;
  pre->add_option("--config", pargs.config_path, "JSON config file");
  pre->add_option("--override", pargs.overrides, "key=value config override");
  pre->add_option("--data", pargs.data_dir, "dataset directory")->required();
  pre->add_option("--out", pargs.out_dir, "output directory")->required();
  pre->add_option("--scale", pargs.scale, "model scale preset (micro|small)");
  pre->add_option("--resume", pargs.resume, "checkpoint to resume from");
  pre->add_flag("--force", pargs.force, "resume despite config digest mismatch");

  // probe
  auto* prb = app.add_subcommand("probe", "probe frozen features");
  ProbeArgs bargs;
  prb->add_option("--checkpoint", bargs.checkpoint, "checkpoint file")->required();
  prb->add_option("--data", bargs.data_dir, "dataset directory")->required();
  prb->add_option("--kind", bargs.kind, "probe kind (linear|knn)");
  prb->add_option("--k", bargs.k, "kNN neighbor count");
  prb->add_flag("--cosine", bargs.cosine, "cosine distance for kNN");
  prb->add_option("--test-fraction", bargs.test_fraction, "held-out fraction");
  prb->add_option("--split-seed", bargs.split_seed, "split seed");
  prb->add_option("--features-out", bargs.features_out,
                  "export features as tensor tables");
  prb->add_option("--override", bargs.overrides, "key=value config override");
  prb->add_option("--scale", bargs.scale, "model scale preset (micro|small)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  uint64_t gc_seed = 7;
  int gc_samples = 128;
  std::string gc_corrupt;
  gc->add_option("--seed", gc_seed, "seed");
  gc->add_option("--samples", gc_samples, "parameters to sample (>= 100)");
  gc->add_option("--corrupt", gc_corrupt,
                 "test hook: corrupt this tensor's gradient");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_per_class, gen_points, gen_seed, gen_noise);
    if (pre->parsed()) return cmd_pretrain(pargs);
    if (prb->parsed()) return cmd_probe(bargs);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_samples, gc_corrupt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    // config and usage problems exit 2, runtime failures exit 1
    const std::string msg = e.what();
    return msg.find("config") != std::string::npos ? 2 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
