#pragma once

#include <boost/program_options.hpp>

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msr/architectures.hpp"
#include "msr/data.hpp"
#include "msr/errors.hpp"
#include "msr/optimizer.hpp"

namespace msr {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10
  std::string path = "data/cifar-10-batches-bin";
  std::uint64_t seed = 1234;         // synthetic generation; independent of the training seed
  std::size_t classes = 10;          // synthetic only
  std::size_t train_per_class = 500; // synthetic only
  std::size_t test_per_class = 100;  // synthetic only
  std::size_t image_size = 32;       // synthetic only
  std::size_t train_subset = 0;      // first N training records, 0 = all
  std::size_t test_subset = 0;
  bool augment = true;
  AugmentOptions aug;
};

/// One training run. Defaults follow the long-run ResNet110 protocol; desk
/// configs override architecture, data and step budget.
struct ExperimentConfig {
  std::string arch = "resnet110";
  Arm arm = Arm::msr;
  NoisePosition noise_position = NoisePosition::residual_input;
  NoiseGranularity noise_granularity = NoiseGranularity::element;
  std::optional<bool> conv_bias;  // unset: on for batch-norm arm only

  MsrConfig msr;
  CzmgStage czmg_stage = CzmgStage::before_momentum;

  std::optional<double> lr;  // unset: 0.4 for msr and plain, 0.1 for batchnorm-baseline
  std::vector<std::pair<std::size_t, double>> schedule{{100, 0.1}, {150, 0.1}};
  double momentum = 0.9;
  double weight_decay = 5e-4;  // batchnorm-baseline only

  std::size_t epochs = 200;
  std::size_t batch_size = 128;
  std::size_t max_steps = 0;  // 0 = no cap
  std::uint64_t seed = 1;
  bool drop_last = false;
  std::size_t eval_every = 1;        // epochs; 0 = only at the end
  std::size_t checkpoint_every = 0;  // epochs; 0 = only the final checkpoint
  std::size_t step_log_every = 0;    // steps; 0 = no steps.csv

  DataConfig data;
  std::string out_dir = "runs/default";

  double base_lr() const { return lr.value_or(arm == Arm::batchnorm ? 0.1 : 0.4); }
  LrSchedule lr_schedule() const { return {base_lr(), schedule}; }

  ModelOptions model_options(std::size_t num_classes) const {
    ModelOptions o;
    o.arch = arch;
    o.arm = arm;
    o.msr = msr;
    o.num_classes = num_classes;
    o.noise_position = noise_position;
    o.noise_granularity = noise_granularity;
    o.conv_bias = conv_bias;
    return o;
  }

  MsrUpdateOptions update_options() const {
    return {msr.zmg, msr.luma_weight, arm == Arm::msr, czmg_stage};
  }

  void validate() const;
  /// Sets one `section.key` from text. Throws ConfigError naming the key.
  void set(const std::string& key, const std::string& value);
  /// Resolved config in the same format parse_config reads.
  std::string to_text() const;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last) throw ConfigError(key + ": cannot parse '" + text + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "on" || text == "yes" || text == "1") return true;
  if (text == "false" || text == "off" || text == "no" || text == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& text, const std::vector<std::pair<std::string, E>>& table) {
  std::string valid;
  for (const auto& [name, value] : table) {
    if (name == text) return value;
    valid += (valid.empty() ? "" : " | ") + name;
  }
  throw ConfigError(key + ": unknown value '" + text + "' (expected " + valid + ")");
}

template <typename E>
std::string enum_name(E v, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, value] : table) {
    if (value == v) return name;
  }
  return "?";
}

inline const std::vector<std::pair<std::string, Arm>>& arm_names() {
  static const std::vector<std::pair<std::string, Arm>> t{
      {"msr", Arm::msr}, {"batchnorm-baseline", Arm::batchnorm}, {"plain", Arm::plain}};
  return t;
}
inline const std::vector<std::pair<std::string, NoisePosition>>& noise_position_names() {
  static const std::vector<std::pair<std::string, NoisePosition>> t{{"none", NoisePosition::none},
                                                                     {"residual_input", NoisePosition::residual_input},
                                                                     {"conv_input", NoisePosition::conv_input}};
  return t;
}
inline const std::vector<std::pair<std::string, NoiseGranularity>>& granularity_names() {
  static const std::vector<std::pair<std::string, NoiseGranularity>> t{{"element", NoiseGranularity::element},
                                                                        {"channel", NoiseGranularity::channel}};
  return t;
}
inline const std::vector<std::pair<std::string, CzmgStage>>& czmg_stage_names() {
  static const std::vector<std::pair<std::string, CzmgStage>> t{{"before_momentum", CzmgStage::before_momentum},
                                                                 {"after_momentum", CzmgStage::after_momentum}};
  return t;
}

/// "100:0.1,150:0.1" or "none".
inline std::vector<std::pair<std::size_t, double>> parse_schedule(const std::string& key, const std::string& text) {
  std::vector<std::pair<std::size_t, double>> out;
  if (text == "none" || text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError(key + ": expected epoch:multiplier, got '" + item + "'");
    out.emplace_back(parse_number<std::size_t>(key, item.substr(0, colon)),
                     parse_number<double>(key, item.substr(colon + 1)));
  }
  return out;
}

inline std::string schedule_text(const std::vector<std::pair<std::size_t, double>>& s) {
  if (s.empty()) return "none";
  std::string out;
  for (const auto& [epoch, mult] : s) out += (out.empty() ? "" : ",") + std::to_string(epoch) + ":" + fmt_double(mult);
  return out;
}

struct Field {
  const char* key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define MSR_NUM_FIELD(KEY, MEMBER, T)                                                                   \
  Field {                                                                                               \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_number<T>(KEY, v); },         \
        [](const ExperimentConfig& c) {                                                                 \
          if constexpr (std::is_floating_point_v<T>) return fmt_double(c.MEMBER);                       \
          else return std::to_string(c.MEMBER);                                                         \
        }                                                                                               \
  }
#define MSR_BOOL_FIELD(KEY, MEMBER)                                                                     \
  Field {                                                                                               \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_bool(KEY, v); },              \
        [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }               \
  }
#define MSR_STR_FIELD(KEY, MEMBER)                                                                      \
  Field {                                                                                               \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = v; },                                \
        [](const ExperimentConfig& c) { return c.MEMBER; }                                              \
  }
#define MSR_ENUM_FIELD(KEY, MEMBER, TABLE)                                                              \
  Field {                                                                                               \
    KEY, [](ExperimentConfig& c, const std::string& v) { c.MEMBER = parse_enum(KEY, v, TABLE()); },      \
        [](const ExperimentConfig& c) { return enum_name(c.MEMBER, TABLE()); }                           \
  }

/// Every config key in echo order. Keys are `section.name`.
inline const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      MSR_STR_FIELD("model.arch", arch),
      MSR_ENUM_FIELD("model.arm", arm, arm_names),
      MSR_ENUM_FIELD("model.noise_position", noise_position, noise_position_names),
      MSR_ENUM_FIELD("model.noise_granularity", noise_granularity, granularity_names),
      Field{"model.conv_bias",
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "auto") c.conv_bias.reset();
              else c.conv_bias = parse_bool("model.conv_bias", v);
            },
            [](const ExperimentConfig& c) {
              return std::string(!c.conv_bias ? "auto" : (*c.conv_bias ? "true" : "false"));
            }},
      MSR_NUM_FIELD("msr.zmg", msr.zmg, double),
      MSR_NUM_FIELD("msr.luma_weight", msr.luma_weight, double),
      MSR_NUM_FIELD("msr.init_scale", msr.init_scale, double),
      MSR_NUM_FIELD("msr.noise_amplitude", msr.noise_amplitude, double),
      MSR_BOOL_FIELD("msr.first_layer_czm", msr.first_layer_czm),
      MSR_ENUM_FIELD("msr.czmg_stage", czmg_stage, czmg_stage_names),
      Field{"optim.lr",
            [](ExperimentConfig& c, const std::string& v) {
              if (v == "auto") c.lr.reset();
              else c.lr = parse_number<double>("optim.lr", v);
            },
            [](const ExperimentConfig& c) { return fmt_double(c.base_lr()); }},
      Field{"optim.schedule",
            [](ExperimentConfig& c, const std::string& v) { c.schedule = parse_schedule("optim.schedule", v); },
            [](const ExperimentConfig& c) { return schedule_text(c.schedule); }},
      MSR_NUM_FIELD("optim.momentum", momentum, double),
      MSR_NUM_FIELD("optim.weight_decay", weight_decay, double),
      MSR_NUM_FIELD("train.epochs", epochs, std::size_t),
      MSR_NUM_FIELD("train.batch_size", batch_size, std::size_t),
      MSR_NUM_FIELD("train.max_steps", max_steps, std::size_t),
      MSR_NUM_FIELD("train.seed", seed, std::uint64_t),
      MSR_BOOL_FIELD("train.drop_last", drop_last),
      MSR_NUM_FIELD("train.eval_every", eval_every, std::size_t),
      MSR_NUM_FIELD("train.checkpoint_every", checkpoint_every, std::size_t),
      MSR_NUM_FIELD("train.step_log_every", step_log_every, std::size_t),
      MSR_STR_FIELD("data.source", data.source),
      MSR_STR_FIELD("data.path", data.path),
      MSR_NUM_FIELD("data.seed", data.seed, std::uint64_t),
      MSR_NUM_FIELD("data.classes", data.classes, std::size_t),
      MSR_NUM_FIELD("data.train_per_class", data.train_per_class, std::size_t),
      MSR_NUM_FIELD("data.test_per_class", data.test_per_class, std::size_t),
      MSR_NUM_FIELD("data.image_size", data.image_size, std::size_t),
      MSR_NUM_FIELD("data.train_subset", data.train_subset, std::size_t),
      MSR_NUM_FIELD("data.test_subset", data.test_subset, std::size_t),
      MSR_BOOL_FIELD("data.augment", data.augment),
      MSR_BOOL_FIELD("data.flip", data.aug.flip),
      MSR_NUM_FIELD("data.pad", data.aug.pad, std::size_t),
      MSR_BOOL_FIELD("data.scale_jitter", data.aug.scale_jitter),
      MSR_NUM_FIELD("data.scale_max", data.aug.scale_max, double),
      MSR_STR_FIELD("output.out_dir", out_dir),
  };
  return f;
}

#undef MSR_NUM_FIELD
#undef MSR_BOOL_FIELD
#undef MSR_STR_FIELD
#undef MSR_ENUM_FIELD

}  // namespace detail

inline void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (key == f.key) return f.set(*this, value);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string ExperimentConfig::to_text() const {
  std::string out, section;
  for (const auto& f : detail::fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    if (key.substr(0, dot) != section) {
      section = key.substr(0, dot);
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += key.substr(dot + 1) + " = " + f.get(*this) + "\n";
  }
  return out;
}

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (arch != "tinycnn" && arch != "vggsmall" && detail::resnet_depth(arch) == 0) {
    std::string valid;
    for (const auto& n : architecture_names()) valid += (valid.empty() ? "" : ", ") + n;
    fail("model.arch: unknown architecture '" + arch + "'; valid names: " + valid);
  }
  try {
    msr.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (!(base_lr() > 0.0)) fail("optim.lr must be > 0");
  try {
    lr_schedule().validate();
  } catch (const std::invalid_argument& e) {
    fail(std::string("optim.schedule: ") + e.what());
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) fail("optim.momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) fail("optim.weight_decay must be >= 0");
  if (epochs == 0) fail("train.epochs must be >= 1");
  if (batch_size == 0) fail("train.batch_size must be >= 1");
  if (data.source != "synthetic" && data.source != "cifar10") {
    fail("data.source: unknown value '" + data.source + "' (expected synthetic | cifar10)");
  }
  if (data.source == "synthetic") {
    if (data.classes < 2 || data.classes > 255) fail("data.classes must be in [2,255]");
    if (data.train_per_class == 0) fail("data.train_per_class must be >= 1");
    if (data.test_per_class == 0) fail("data.test_per_class must be >= 1");
    if (data.image_size < 4) fail("data.image_size must be >= 4");
  }
  if (data.aug.pad > 64) fail("data.pad must be <= 64");
  if (!(data.aug.scale_max >= 1.0)) fail("data.scale_max must be >= 1");
  if (out_dir.empty()) fail("output.out_dir must not be empty");
}

/// Parses `[section]` / `key = value` text (# comments) on top of `base`.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {}) {
  namespace po = boost::program_options;
  po::options_description desc;
  for (const auto& f : detail::fields()) desc.add_options()(f.key, po::value<std::string>());
  po::parsed_options parsed(&desc);
  try {
    parsed = po::parse_config_file(in, desc, false);
  } catch (const po::error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& opt : parsed.options) {
    if (opt.value.size() != 1) throw ConfigError("config: key '" + opt.string_key + "' needs one value");
    base.set(opt.string_key, opt.value.front());
  }
  return base;
}

inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  return parse_config(in, std::move(base));
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

/// Applies "key=value" overrides in order.
inline void apply_overrides(ExperimentConfig& c, const std::vector<std::string>& overrides) {
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    c.set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
  }
}

}  // namespace msr
