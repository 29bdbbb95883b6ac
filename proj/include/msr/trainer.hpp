#pragma once

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msr/architectures.hpp"
#include "msr/checkpoint.hpp"
#include "msr/config.hpp"
#include "msr/data.hpp"
#include "msr/diagnostics.hpp"
#include "msr/errors.hpp"
#include "msr/layers.hpp"
#include "msr/optimizer.hpp"

namespace msr {

/// splitmix64 of (seed, stream): independent PRNG seeds per purpose.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum RngStream : std::uint64_t { kInitStream = 1, kShuffleStream = 2, kAugmentStream = 3, kNoiseStream = 4 };

// ---------------------------------------------------------------------------
// Data

struct Datasets {
  Dataset train;
  Dataset test;
  ChannelStats stats;  // from the training split
};

inline Datasets load_datasets(const DataConfig& d) {
  Datasets out;
  if (d.source == "synthetic") {
    Prng rng(derive_seed(d.seed, 0));
    out.train = gen_synthetic(d.classes, d.train_per_class, d.image_size, rng);
    out.test = gen_synthetic(d.classes, d.test_per_class, d.image_size, rng);
  } else if (d.source == "cifar10") {
    out.train = load_cifar10(d.path, true);
    out.test = load_cifar10(d.path, false);
  } else {
    throw ConfigError("data.source: unknown value '" + d.source + "'");
  }
  if (d.train_subset > 0 && d.train_subset < out.train.size()) out.train.records.resize(d.train_subset);
  if (d.test_subset > 0 && d.test_subset < out.test.size()) out.test.records.resize(d.test_subset);
  if (out.train.size() == 0) throw DataError("training split is empty");
  if (out.test.size() == 0) throw DataError("test split is empty");
  out.stats = compute_channel_stats(out.train);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

/// Top-1 accuracy with noise off, running batch-norm statistics and folded
/// inference weights. Never touches training state.
inline EvalResult evaluate(const Model& model, const Dataset& ds, const ChannelStats& stats,
                           std::size_t chunk = 250) {
  const Model inference = model.folded();
  Prng unused(0);
  EvalResult r;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + chunk); ++i) idx.push_back(i);
    Batch b = make_batch(ds, stats, idx, nullptr, nullptr);
    auto trace = inference.forward(b.images, Mode::eval, unused);
    auto x = softmax_xent(trace.logits, b.labels);
    r.loss += x.loss * static_cast<double>(idx.size());
    r.correct += x.correct;
    r.count += idx.size();
  }
  r.accuracy = r.count ? static_cast<double>(r.correct) / static_cast<double>(r.count) : 0.0;
  r.loss = r.count ? r.loss / static_cast<double>(r.count) : 0.0;
  return r;
}

struct MetricsRow {
  std::uint64_t epoch = 0;  // 0-based epoch the row summarizes
  std::uint64_t step = 0;   // optimizer steps taken so far
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_acc;
  double luma_loss = 0.0;
  ShiftDiagnostics::Summary magnitudes;
  double max_slice_mean = 0.0;
  std::size_t deflated = 0;
};

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* metrics_header() {
  return "epoch,step,lr,train_loss,train_acc,test_acc,luma_loss,w_mean,w_min,w_max,v_min,v_max,"
         "max_slice_mean,eff_lr_mean,deflated";
}

inline std::string format_metrics_row(const MetricsRow& r) {
  std::string s = std::to_string(r.epoch) + "," + std::to_string(r.step) + "," + fmt_g17(r.lr) + "," +
                  fmt_g17(r.train_loss) + "," + fmt_g17(r.train_acc) + "," +
                  (r.test_acc ? fmt_g17(*r.test_acc) : std::string()) + "," + fmt_g17(r.luma_loss) + "," +
                  fmt_g17(r.magnitudes.w_mean) + "," + fmt_g17(r.magnitudes.w_min) + "," +
                  fmt_g17(r.magnitudes.w_max) + "," + fmt_g17(r.magnitudes.v_min) + "," +
                  fmt_g17(r.magnitudes.v_max) + "," + fmt_g17(r.max_slice_mean) + "," +
                  fmt_g17(r.magnitudes.eff_lr_mean) + "," + std::to_string(r.deflated);
  return s;
}

struct StepInfo {
  std::uint64_t step = 0;  // 1-based index of the step just taken
  std::uint64_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // cross-entropy of the batch before the update
  double acc = 0.0;
  double luma_loss = 0.0;
  const Model* model = nullptr;  // after the update
};

using StepHook = std::function<void(const StepInfo&)>;

struct TrainResult {
  std::vector<MetricsRow> rows;
  std::uint64_t steps = 0;
  double final_test_acc = 0.0;
};

// ---------------------------------------------------------------------------
// Trainer

class Trainer {
 public:
  /// Fresh run: model initialized from the config seed.
  Trainer(ExperimentConfig cfg, Datasets data)
      : cfg_(std::move(cfg)),
        data_(std::move(data)),
        shuffle_rng_(derive_seed(cfg_.seed, kShuffleStream)),
        epoch_start_rng_(shuffle_rng_),
        aug_rng_(derive_seed(cfg_.seed, kAugmentStream)),
        noise_rng_(derive_seed(cfg_.seed, kNoiseStream)) {
    cfg_.validate();
    Prng init(derive_seed(cfg_.seed, kInitStream));
    model_ = build_model(cfg_.model_options(num_classes()), init);
    opt_.momentum = cfg_.momentum;
  }

  /// Resumes from a checkpoint. `cfg` is the checkpoint's config with any
  /// overrides applied; the architecture must match the stored tensors.
  Trainer(ExperimentConfig cfg, Datasets data, const Checkpoint& ckpt) : Trainer(std::move(cfg), std::move(data)) {
    restore(ckpt);
  }

  const ExperimentConfig& config() const { return cfg_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  const OptimState& optimizer() const { return opt_; }
  const Datasets& data() const { return data_; }
  std::uint64_t step() const { return opt_.step; }
  std::uint64_t epoch() const { return opt_.epoch; }

  EvalResult evaluate_test() const { return evaluate(model_, data_.test, data_.stats); }

  /// Trains until the epoch budget or train.max_steps is reached, writing
  /// metrics.csv, steps.csv, timing.csv, config.resolved.cfg and checkpoints
  /// under the output directory. Throws DivergenceError on a non-finite loss
  /// after writing divergence.txt.
  TrainResult run(const StepHook& hook = {}) {
    namespace fs = std::filesystem;
    const fs::path out = cfg_.out_dir;
    fs::create_directories(out);
    {
      std::ofstream(out / "config.resolved.cfg") << cfg_.to_text();
    }
    std::ofstream metrics = open_log(out / "metrics.csv", metrics_header(), 1);
    std::ofstream steps;
    if (cfg_.step_log_every > 0) steps = open_log(out / "steps.csv", "step,epoch,lr,loss,acc,luma_loss", 0);
    std::ofstream timing = open_log(out / "timing.csv", "epoch,step,seconds", 1);
    const auto t0 = std::chrono::steady_clock::now();

    TrainResult result;
    const std::size_t n = data_.train.size();
    auto budget_left = [&] { return cfg_.max_steps == 0 || opt_.step < cfg_.max_steps; };
    while (opt_.epoch < cfg_.epochs && budget_left()) {
      if (step_in_epoch_ == 0) {
        epoch_start_rng_ = shuffle_rng_;
        order_ = batch_iter(n, cfg_.batch_size, shuffle_rng_, cfg_.drop_last);
        acc_ = {};
      } else if (order_.empty()) {
        Prng replay = epoch_start_rng_;
        order_ = batch_iter(n, cfg_.batch_size, replay, cfg_.drop_last);
      }
      const double lr = lr_at(cfg_.lr_schedule(), opt_.epoch);
      while (step_in_epoch_ < order_.size() && budget_left()) {
        train_step(order_[step_in_epoch_], lr, hook, steps, out);
        ++step_in_epoch_;
      }
      const bool epoch_done = step_in_epoch_ >= order_.size();
      const bool last = !epoch_done || opt_.epoch + 1 >= cfg_.epochs || !budget_left();
      const bool eval = last || (cfg_.eval_every > 0 && (opt_.epoch + 1) % cfg_.eval_every == 0);
      MetricsRow row = make_row(lr, eval);
      metrics << format_metrics_row(row) << '\n' << std::flush;
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      timing << row.epoch << ',' << row.step << ',' << secs << '\n' << std::flush;
      result.rows.push_back(row);
      if (row.test_acc) result.final_test_acc = *row.test_acc;
      if (!epoch_done) break;
      ++opt_.epoch;
      step_in_epoch_ = 0;
      order_.clear();
      if (cfg_.checkpoint_every > 0 && opt_.epoch % cfg_.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch-%04" PRIu64 ".ckpt", opt_.epoch);
        save_checkpoint(out / "checkpoints" / name, checkpoint());
      }
    }
    save_checkpoint(out / "final.ckpt", checkpoint());
    result.steps = opt_.step;
    return result;
  }

  Checkpoint checkpoint() const {
    Checkpoint c;
    c.config_text = cfg_.to_text();
    c.meta["arch"] = model_.arch;
    c.meta["step"] = std::to_string(opt_.step);
    c.meta["epoch"] = std::to_string(opt_.epoch);
    c.meta["step_in_epoch"] = std::to_string(step_in_epoch_);
    c.meta["acc.loss_sum"] = hex_double(acc_.loss_sum);
    c.meta["acc.luma_sum"] = hex_double(acc_.luma_sum);
    c.meta["acc.correct"] = std::to_string(acc_.correct);
    c.meta["acc.seen"] = std::to_string(acc_.seen);
    c.meta["acc.steps"] = std::to_string(acc_.steps);
    c.meta["rng.shuffle"] = shuffle_rng_.state();
    c.meta["rng.epoch_start"] = epoch_start_rng_.state();
    c.meta["rng.augment"] = aug_rng_.state();
    c.meta["rng.noise"] = noise_rng_.state();
    Model& m = const_cast<Model&>(model_);  // parameters() hands out mutable refs; read only here
    for (const auto& p : m.parameters()) c.tensors.emplace_back(p.name, *p.value);
    for (const auto& b : m.buffers()) c.tensors.emplace_back(b.name, *b.value);
    for (const auto& [name, v] : opt_.buffers) c.tensors.emplace_back("momentum/" + name, v);
    return c;
  }

 private:
  struct EpochAccum {
    double loss_sum = 0.0;
    double luma_sum = 0.0;
    std::uint64_t correct = 0;
    std::uint64_t seen = 0;
    std::uint64_t steps = 0;
  };

  std::size_t num_classes() const {
    if (cfg_.data.source == "synthetic") return cfg_.data.classes;
    return std::max<std::size_t>(data_.train.num_classes, kCifarClasses);
  }

  static std::string hex_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
  }
  static double parse_hex_double(const std::string& s) { return std::strtod(s.c_str(), nullptr); }
  static std::uint64_t parse_u64(const std::string& s) { return std::stoull(s); }

  /// Opens a CSV log. When resuming into an existing file, rows whose
  /// `step_column` value exceeds the current step are dropped first.
  std::ofstream open_log(const std::filesystem::path& path, const char* header, std::size_t step_column) {
    std::vector<std::string> keep;
    if (opt_.step > 0 && std::filesystem::exists(path)) {
      std::ifstream in(path);
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string cell;
        for (std::size_t i = 0; i <= step_column; ++i) std::getline(ss, cell, ',');
        if (!cell.empty() && std::stoull(cell) <= opt_.step) keep.push_back(line);
      }
    }
    std::ofstream out(path, std::ios::trunc);
    out << header << '\n';
    for (const auto& l : keep) out << l << '\n';
    return out;
  }

  void train_step(const std::vector<std::size_t>& idx, double lr, const StepHook& hook, std::ofstream& steps,
                  const std::filesystem::path& out) {
    Batch b = make_batch(data_.train, data_.stats, idx, cfg_.data.augment ? &cfg_.data.aug : nullptr, &aug_rng_);
    auto trace = model_.forward(b.images, Mode::train, noise_rng_);
    auto xent = softmax_xent(trace.logits, b.labels);
    if (!std::isfinite(xent.loss)) diverged(xent.loss, lr, out);
    Gradients grads = model_.backward(trace, xent.dlogits);
    model_.apply_running_stats(trace);
    double luma = 0.0;
    const auto params = model_.parameters();
    if (cfg_.arm == Arm::batchnorm) {
      baseline_l2_step(params, grads, cfg_.weight_decay, opt_, lr);
    } else {
      try {
        luma = msr_update_pipeline(params, grads, cfg_.update_options(), opt_, lr);
      } catch (const DegenerateFilterError& e) {
        write_dump(out, std::string("degenerate filter: ") + e.what(), xent.loss, lr);
        throw DivergenceError(std::string("degenerate filter at step ") + std::to_string(opt_.step + 1) + ": " +
                              e.what());
      }
    }
    const double batch_acc = static_cast<double>(xent.correct) / static_cast<double>(idx.size());
    acc_.loss_sum += xent.loss;
    acc_.luma_sum += luma;
    acc_.correct += xent.correct;
    acc_.seen += idx.size();
    ++acc_.steps;
    recent_.push_back(xent.loss);
    if (recent_.size() > 20) recent_.pop_front();
    if (steps.is_open() && opt_.step % cfg_.step_log_every == 0) {
      steps << opt_.step << ',' << opt_.epoch << ',' << fmt_g17(lr) << ',' << fmt_g17(xent.loss) << ','
            << fmt_g17(batch_acc) << ',' << fmt_g17(luma) << '\n';
    }
    if (hook) hook({opt_.step, opt_.epoch, lr, xent.loss, batch_acc, luma, &model_});
  }

  MetricsRow make_row(double lr, bool eval) const {
    MetricsRow r;
    r.epoch = opt_.epoch;
    r.step = opt_.step;
    r.lr = lr;
    const double steps = static_cast<double>(std::max<std::uint64_t>(acc_.steps, 1));
    r.train_loss = acc_.loss_sum / steps;
    r.luma_loss = acc_.luma_sum / steps;
    r.train_acc = acc_.seen ? static_cast<double>(acc_.correct) / static_cast<double>(acc_.seen) : 0.0;
    if (eval) r.test_acc = evaluate_test().accuracy;
    const auto d = shift_diagnostics(model_, lr);
    r.magnitudes = d.summary();
    r.max_slice_mean = d.max_slice_mean();
    r.deflated = d.deflated_count();
    return r;
  }

  void write_dump(const std::filesystem::path& out, const std::string& reason, double loss, double lr) {
    std::ofstream f(out / "divergence.txt");
    f << "reason: " << reason << "\nstep: " << opt_.step + 1 << "\nepoch: " << opt_.epoch << "\nlr: " << fmt_g17(lr)
      << "\nloss: " << fmt_g17(loss) << "\nrecent losses:";
    for (double l : recent_) f << ' ' << fmt_g17(l);
    f << "\n\nparameter max_abs finite\n";
    for (const auto& p : model_.parameters()) {
      f << p.name << ' ' << fmt_g17(max_abs(*p.value)) << ' ' << (all_finite(*p.value) ? "yes" : "no") << '\n';
    }
  }

  [[noreturn]] void diverged(double loss, double lr, const std::filesystem::path& out) {
    write_dump(out, "non-finite training loss", loss, lr);
    throw DivergenceError("non-finite loss " + fmt_g17(loss) + " at step " + std::to_string(opt_.step + 1) +
                          " (epoch " + std::to_string(opt_.epoch) + ", lr " + fmt_g17(lr) + "); see " +
                          (out / "divergence.txt").string());
  }

  void restore(const Checkpoint& c) {
    if (c.at("arch") != model_.arch) {
      throw ConfigError("checkpoint architecture " + c.at("arch") + " does not match config " + model_.arch);
    }
    auto load = [&](const std::string& name, Tensor<double>& dst) {
      const Tensor<double>& src = c.tensor(name);
      if (src.shape() != dst.shape()) {
        throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                          shape_str(dst.shape()));
      }
      dst = src;
    };
    for (const auto& p : model_.parameters()) load(p.name, *p.value);
    for (const auto& b : model_.buffers()) load(b.name, *b.value);
    opt_.buffers.clear();
    const std::string prefix = "momentum/";
    for (const auto& [name, t] : c.tensors) {
      if (name.rfind(prefix, 0) == 0) opt_.buffers.emplace(name.substr(prefix.size()), t);
    }
    opt_.step = parse_u64(c.at("step"));
    opt_.epoch = parse_u64(c.at("epoch"));
    step_in_epoch_ = parse_u64(c.at("step_in_epoch"));
    acc_.loss_sum = parse_hex_double(c.at("acc.loss_sum"));
    acc_.luma_sum = parse_hex_double(c.at("acc.luma_sum"));
    acc_.correct = parse_u64(c.at("acc.correct"));
    acc_.seen = parse_u64(c.at("acc.seen"));
    acc_.steps = parse_u64(c.at("acc.steps"));
    try {
      shuffle_rng_.restore(c.at("rng.shuffle"));
      epoch_start_rng_.restore(c.at("rng.epoch_start"));
      aug_rng_.restore(c.at("rng.augment"));
      noise_rng_.restore(c.at("rng.noise"));
    } catch (const std::runtime_error& e) {
      throw DataError(std::string("checkpoint: ") + e.what());
    }
    order_.clear();
  }

  ExperimentConfig cfg_;
  Datasets data_;
  Model model_;
  OptimState opt_;
  Prng shuffle_rng_;
  Prng epoch_start_rng_;  // shuffle stream as it was before this epoch's shuffle
  Prng aug_rng_;
  Prng noise_rng_;
  std::uint64_t step_in_epoch_ = 0;
  std::vector<std::vector<std::size_t>> order_;
  EpochAccum acc_;
  std::deque<double> recent_;
};

/// Config stored in a checkpoint, with `overrides` applied on top.
inline ExperimentConfig checkpoint_config(const Checkpoint& c, const std::vector<std::string>& overrides = {}) {
  ExperimentConfig cfg = parse_config_text(c.config_text);
  apply_overrides(cfg, overrides);
  return cfg;
}

/// Model from a checkpoint (for eval and inspect).
inline Model model_from_checkpoint(const Checkpoint& c, const ExperimentConfig& cfg, std::size_t num_classes) {
  Prng init(0);
  Model m = build_model(cfg.model_options(num_classes), init);
  auto load = [&](const std::string& name, Tensor<double>& dst) {
    const Tensor<double>& src = c.tensor(name);
    if (src.shape() != dst.shape()) {
      throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) + ", model expects " +
                        shape_str(dst.shape()));
    }
    dst = src;
  };
  for (const auto& p : m.parameters()) load(p.name, *p.value);
  for (const auto& b : m.buffers()) load(b.name, *b.value);
  return m;
}

inline std::size_t config_num_classes(const ExperimentConfig& cfg) {
  return cfg.data.source == "synthetic" ? cfg.data.classes : kCifarClasses;
}

// ---------------------------------------------------------------------------
// Inspect report

inline std::string inspect_report(const Model& model, double lr) {
  const auto d = shift_diagnostics(model, lr);
  std::ostringstream os;
  char line[256];
  os << "layer                            czm  max|slice mean|  filters   min|W|     max|W|     mean eff_lr\n";
  for (const auto& l : d.layers) {
    double wmin = 1e300, wmax = 0.0, eff = 0.0;
    for (const auto& f : l.filters) {
      wmin = std::min(wmin, f.w_norm);
      wmax = std::max(wmax, f.w_norm);
      eff += f.effective_lr;
    }
    eff /= static_cast<double>(std::max<std::size_t>(l.filters.size(), 1));
    std::snprintf(line, sizeof line, "%-32s %-4s %-16.3e %-9zu %-10.4f %-10.4f %.4g\n", l.name.c_str(),
                  l.czm_eligible ? "yes" : "no", l.max_abs_slice_mean, l.filters.size(), wmin, wmax, eff);
    os << line;
  }
  // ||W|| histogram in 0.1 bins up to 2, then an overflow bin.
  std::vector<std::size_t> hist(21, 0);
  std::vector<double> effs;
  for (const auto& l : d.layers)
    for (const auto& f : l.filters) {
      hist[std::min<std::size_t>(20, static_cast<std::size_t>(f.w_norm / 0.1))]++;
      effs.push_back(f.effective_lr);
    }
  os << "\n||W|| histogram\n";
  for (std::size_t i = 0; i < hist.size(); ++i) {
    if (i < 20) std::snprintf(line, sizeof line, "[%.1f, %.1f)  %zu\n", 0.1 * i, 0.1 * (i + 1), hist[i]);
    else std::snprintf(line, sizeof line, "[2.0, inf)  %zu\n", hist[i]);
    os << line;
  }
  std::sort(effs.begin(), effs.end());
  const auto s = d.summary();
  os << "\nfilters: " << s.filters << "\ndeflated (||W|| < 0.1): " << d.deflated_count() << "\n";
  if (!effs.empty()) {
    std::snprintf(line, sizeof line, "effective lr at lr=%g: min %.6g  median %.6g  max %.6g  mean %.6g\n", lr,
                  effs.front(), effs[effs.size() / 2], effs.back(), s.eff_lr_mean);
    os << line;
  }
  std::snprintf(line, sizeof line, "max |slice mean| over czm layers: %.6e\n", d.max_slice_mean());
  os << line;
  return os.str();
}

}  // namespace msr
