// msr_cli: train, evaluate and inspect normalization-free CNNs.
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "fetch_cifar.hpp"
#include "msr/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kDivergence = 4 };

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::size_t trials = 1;
  std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Config file ([section] / key = value)");
  cmd->add_option("--set", c.sets, "Override a config key, e.g. --set msr.zmg=1 (repeatable)");
  cmd->add_option("--seed", c.seed, "Training seed (train.seed)");
  cmd->add_option("--trials", c.trials, "Run seeds seed..seed+N-1 and write a summary")->check(CLI::PositiveNumber);
  cmd->add_option("--out-dir", c.out_dir, "Output directory (output.out_dir)");
}

/// File, then --set, then the dedicated flags.
msr::ExperimentConfig resolve(const Common& c, msr::ExperimentConfig base = {},
                              const std::vector<std::string>& flag_sets = {}) {
  msr::ExperimentConfig cfg = c.config.empty() ? base : msr::load_config(c.config, base);
  msr::apply_overrides(cfg, c.sets);
  msr::apply_overrides(cfg, flag_sets);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  return cfg;
}

int run_train(const Common& c, const std::vector<std::string>& flag_sets, const std::string& resume) {
  std::optional<msr::Checkpoint> ckpt;
  msr::ExperimentConfig base;
  if (!resume.empty()) {
    ckpt = msr::load_checkpoint(resume);
    base = msr::checkpoint_config(*ckpt);
  }
  msr::ExperimentConfig cfg = resolve(c, base, flag_sets);
  cfg.validate();
  if (ckpt && c.trials > 1) throw msr::ConfigError("--resume and --trials cannot be combined");
  const auto data = msr::load_datasets(cfg.data);
  std::printf("train: %s, arm %s, %zu train / %zu test images, lr %g\n", cfg.arch.c_str(), msr::to_string(cfg.arm),
              data.train.size(), data.test.size(), cfg.base_lr());
  std::fflush(stdout);

  if (c.trials <= 1) {
    msr::Trainer t = ckpt ? msr::Trainer(cfg, data, *ckpt) : msr::Trainer(cfg, data);
    auto r = t.run();
    const auto& last = r.rows.back();
    std::printf("done: %llu steps, train_acc %.4f, test_acc %.4f, metrics in %s\n",
                static_cast<unsigned long long>(r.steps), last.train_acc, r.final_test_acc,
                (fs::path(cfg.out_dir) / "metrics.csv").c_str());
    return kOk;
  }

  const fs::path root = cfg.out_dir;
  fs::create_directories(root);
  std::ofstream summary(root / "trials.csv");
  summary << "seed,status,steps,train_acc,test_acc\n";
  std::vector<double> accs;
  bool any_diverged = false;
  for (std::size_t i = 0; i < c.trials; ++i) {
    msr::ExperimentConfig tc = cfg;
    tc.seed = cfg.seed + i;
    tc.out_dir = (root / ("seed-" + std::to_string(tc.seed))).string();
    try {
      msr::Trainer t(tc, data);
      auto r = t.run();
      accs.push_back(r.final_test_acc);
      summary << tc.seed << ",ok," << r.steps << ',' << msr::fmt_g17(r.rows.back().train_acc) << ','
              << msr::fmt_g17(r.final_test_acc) << '\n';
      std::printf("trial seed %llu: test_acc %.4f\n", static_cast<unsigned long long>(tc.seed), r.final_test_acc);
    } catch (const msr::DivergenceError& e) {
      any_diverged = true;
      summary << tc.seed << ",diverged,,,\n";
      std::printf("trial seed %llu: diverged (%s)\n", static_cast<unsigned long long>(tc.seed), e.what());
    }
  }
  double mean = 0.0, var = 0.0;
  for (double a : accs) mean += a;
  if (!accs.empty()) mean /= static_cast<double>(accs.size());
  for (double a : accs) var += (a - mean) * (a - mean);
  const double sd = accs.size() > 1 ? std::sqrt(var / static_cast<double>(accs.size() - 1)) : 0.0;
  summary << "summary,mean_std," << accs.size() << ",," << msr::fmt_g17(mean) << " +- " << msr::fmt_g17(sd) << '\n';
  std::printf("test_acc over %zu completed trials: %.4f +- %.4f (sample std)\n", accs.size(), mean, sd);
  return any_diverged ? kDivergence : kOk;
}

int run_eval(const Common& c, const std::string& checkpoint) {
  const auto ckpt = msr::load_checkpoint(checkpoint);
  msr::ExperimentConfig cfg = resolve(c, msr::checkpoint_config(ckpt));
  const auto data = msr::load_datasets(cfg.data);
  const auto model = msr::model_from_checkpoint(ckpt, cfg, msr::config_num_classes(cfg));
  const auto r = msr::evaluate(model, data.test, data.stats);
  std::printf("test_acc %.17g (%zu/%zu), test_loss %.17g\n", r.accuracy, r.correct, r.count, r.loss);
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    std::ofstream(fs::path(c.out_dir) / "eval.csv") << "checkpoint,test_acc,correct,count,test_loss\n"
                                                    << checkpoint << ',' << msr::fmt_g17(r.accuracy) << ','
                                                    << r.correct << ',' << r.count << ',' << msr::fmt_g17(r.loss)
                                                    << '\n';
  }
  return kOk;
}

int run_inspect(const Common& c, const std::string& checkpoint, std::optional<double> lr) {
  const auto ckpt = msr::load_checkpoint(checkpoint);
  msr::ExperimentConfig cfg = resolve(c, msr::checkpoint_config(ckpt));
  const auto model = msr::model_from_checkpoint(ckpt, cfg, msr::config_num_classes(cfg));
  const std::size_t epoch = ckpt.meta.count("epoch") ? std::stoull(ckpt.at("epoch")) : 0;
  const double at = lr.value_or(msr::lr_at(cfg.lr_schedule(), epoch));
  const std::string report = msr::inspect_report(model, at);
  std::cout << "checkpoint " << checkpoint << " (" << model.arch << ", arm " << msr::to_string(model.arm)
            << ", step " << (ckpt.meta.count("step") ? ckpt.at("step") : "?") << ")\n\n"
            << report;
  if (!c.out_dir.empty()) {
    fs::create_directories(c.out_dir);
    std::ofstream(fs::path(c.out_dir) / "inspect.txt") << report;
  }
  return kOk;
}

int run_gen_synthetic(const Common& c) {
  msr::ExperimentConfig cfg = resolve(c);
  cfg.data.source = "synthetic";
  cfg.validate();
  const auto d = msr::load_datasets(cfg.data);
  const fs::path out = c.out_dir.empty() ? fs::path("data/synthetic") : fs::path(c.out_dir);
  fs::create_directories(out);
  msr::write_file_bytes(out / "train.bin", msr::serialize_records(d.train.records));
  msr::write_file_bytes(out / "test.bin", msr::serialize_records(d.test.records));
  if (cfg.data.image_size == msr::kCifarImageSize && cfg.data.classes <= msr::kCifarClasses) {
    // Also lay the data out like cifar-10-batches-bin so data.source = cifar10 can read it.
    const std::size_t per = (d.train.size() + 4) / 5;
    for (std::size_t b = 0; b < 5; ++b) {
      const std::size_t lo = std::min(d.train.size(), b * per), hi = std::min(d.train.size(), lo + per);
      std::vector<msr::ImageRecord> part(d.train.records.begin() + static_cast<long>(lo),
                                         d.train.records.begin() + static_cast<long>(hi));
      msr::write_file_bytes(out / ("data_batch_" + std::to_string(b + 1) + ".bin"), msr::serialize_records(part));
    }
    msr::write_file_bytes(out / "test_batch.bin", msr::serialize_records(d.test.records));
  }
  std::ofstream(out / "meta.txt") << "image_size = " << cfg.data.image_size << "\nclasses = " << cfg.data.classes
                                  << "\nrecord_bytes = " << msr::record_bytes_for(cfg.data.image_size) << '\n';
  std::printf("wrote %zu train and %zu test records (%zux%zu, %zu classes) to %s\n", d.train.size(), d.test.size(),
              cfg.data.image_size, cfg.data.image_size, cfg.data.classes, out.c_str());
  return kOk;
}

int run_fetch(const Common& c, const std::string& url, const std::string& md5) {
  const fs::path dest = c.out_dir.empty() ? fs::path("data") : fs::path(c.out_dir);
  const auto dir = msr::fetch::fetch_cifar10(dest, url, md5);
  std::printf("CIFAR-10 verified (md5 %s) and unpacked to %s\n", md5.c_str(), dir.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Normalization-free CNN training with mean shift rejection"};
  app.require_subcommand(1);

  Common train_c, eval_c, inspect_c, gen_c, fetch_c;
  std::string resume, eval_ckpt, inspect_ckpt;
  std::optional<double> inspect_lr;
  std::string url = msr::fetch::kCifarUrl, md5 = msr::fetch::kCifarMd5;
  std::string arch, arm;
  std::optional<double> lr, zmg;
  std::optional<std::size_t> epochs, max_steps, batch_size;

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, train_c);
  train->add_option("--resume", resume, "Resume from a checkpoint (its config is the base)");
  train->add_option("--arch", arch, "model.arch: tinycnn | vggsmall | resnet-mini[-N] | resnet110");
  train->add_option("--arm", arm, "model.arm: msr | batchnorm-baseline | plain");
  train->add_option("--lr", lr, "optim.lr");
  train->add_option("--zmg", zmg, "msr.zmg");
  train->add_option("--epochs", epochs, "train.epochs");
  train->add_option("--max-steps", max_steps, "train.max_steps");
  train->add_option("--batch-size", batch_size, "train.batch_size");

  auto* eval = app.add_subcommand("eval", "Top-1 test accuracy of a checkpoint");
  add_common(eval, eval_c);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();

  auto* inspect = app.add_subcommand("inspect", "Mean-shift and magnitude diagnostics of a checkpoint");
  add_common(inspect, inspect_c);
  inspect->add_option("--checkpoint", inspect_ckpt, "Checkpoint file")->required();
  inspect->add_option("--lr", inspect_lr, "Learning rate for the effective-lr column (default: schedule value)");

  auto* gen = app.add_subcommand("gen-synthetic", "Write the synthetic dataset in CIFAR record format");
  add_common(gen, gen_c);

  auto* fetch = app.add_subcommand("fetch-cifar10", "Download and verify the CIFAR-10 binary archive");
  add_common(fetch, fetch_c);
  fetch->add_option("--url", url, "Archive URL (file:// works)");
  fetch->add_option("--md5", md5, "Expected archive MD5");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (*train) {
      std::vector<std::string> flags;
      if (!arch.empty()) flags.push_back("model.arch=" + arch);
      if (!arm.empty()) flags.push_back("model.arm=" + arm);
      if (lr) flags.push_back("optim.lr=" + msr::fmt_g17(*lr));
      if (zmg) flags.push_back("msr.zmg=" + msr::fmt_g17(*zmg));
      if (epochs) flags.push_back("train.epochs=" + std::to_string(*epochs));
      if (max_steps) flags.push_back("train.max_steps=" + std::to_string(*max_steps));
      if (batch_size) flags.push_back("train.batch_size=" + std::to_string(*batch_size));
      return run_train(train_c, flags, resume);
    }
    if (*eval) return run_eval(eval_c, eval_ckpt);
    if (*inspect) return run_inspect(inspect_c, inspect_ckpt, inspect_lr);
    if (*gen) return run_gen_synthetic(gen_c);
    if (*fetch) return run_fetch(fetch_c, url, md5);
  } catch (const msr::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const msr::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kData;
  } catch (const msr::DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return kDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kOk;
}
