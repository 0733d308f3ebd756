#include "eqdp/config.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>

#include "eqdp/rng.hpp"

namespace eqdp {

void Config::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (group_kind != "cyclic" && group_kind != "dihedral" && group_kind != "so2")
    fail("group.kind must be cyclic, dihedral, or so2");
  if (group_kind != "so2" && rotation_order < 1) fail("group.rotation_order must be >= 1");
  if (group_kind == "so2" && max_frequency < 0) fail("group.max_frequency must be >= 0");
  for (int w : reference_widths)
    if (w < 1) fail("model.reference_widths must be positive");
  if (num_classes < 2) fail("model.num_classes must be >= 2");
  if (kernel_size != 1 && kernel_size != 3 && kernel_size != 5 && kernel_size != 7)
    fail("model.kernel_size must be one of 1, 3, 5, 7");
  if (fourier_samples < 1) fail("model.fourier_samples must be >= 1");
  if (!(learning_rate > 0.0)) fail("optimizer.learning_rate must be positive");
  if (batch_expected < 1) fail("optimizer.batch_expected must be >= 1");
  if (!(clip_norm > 0.0)) fail("optimizer.clip_norm must be positive");
  if (num_updates < 0) fail("optimizer.num_updates must be >= 0");
  if (aug_multiplicity < 1) fail("optimizer.aug_multiplicity must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) fail("optimizer.ema_decay must lie in [0, 1)");
  if (source != "synthetic" && source != "cifar10") fail("dataset.source must be synthetic or cifar10");
  if (source == "cifar10" && path.empty()) fail("dataset.path is required for cifar10");
  if (source == "cifar10" && num_classes != 10) fail("cifar10 has 10 classes");
  if (subset_size < 0) fail("dataset.subset_size must be >= 0");
  if (image_size < 8) fail("dataset.image_size must be >= 8");
  if (test_size < 1) fail("dataset.test_size must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) fail("privacy.delta must lie in (0, 1)");
  if (has_noise_multiplier() && has_target_epsilon())
    fail("privacy.target_epsilon and optimizer.noise_multiplier are mutually exclusive: "
         "set a target to calibrate sigma, or set sigma explicitly");
  if (has_target_epsilon() && !(target_epsilon > 0.0))
    fail("privacy.target_epsilon must be positive when set");
  if (precision != "float64") fail("numerics.precision: only float64 is supported");
  if (padding_mode != "circular" && padding_mode != "zero")
    fail("numerics.padding_mode must be circular or zero");
  if (log_every < 1) fail("run.log_every must be >= 1");
  if (workers < 0) fail("run.workers must be >= 0");
  if (!(l0_threshold >= 0.0)) fail("run.l0_threshold must be >= 0");
}

GroupSpec Config::group_spec() const {
  if (group_kind == "cyclic") return GroupSpec::cyclic(rotation_order);
  if (group_kind == "dihedral") return GroupSpec::dihedral(rotation_order);
  if (group_kind == "so2") return GroupSpec::so2(max_frequency);
  throw ConfigError("group.kind must be cyclic, dihedral, or so2");
}

ResNetOptions Config::model_options() const {
  ResNetOptions opt;
  opt.reference_widths = reference_widths;
  opt.num_classes = num_classes;
  opt.kernel_size = kernel_size;
  opt.restrict_last_block = restrict_last_block;
  opt.fourier_samples = fourier_samples;
  opt.init_seed = derive_seed(seed, seed_tags::kInit);
  return opt;
}

void attach_config_options(CLI::App& app, Config& cfg) {
  app.add_option("--group.kind", cfg.group_kind);
  app.add_option("--group.rotation_order", cfg.rotation_order);
  app.add_option("--group.max_frequency", cfg.max_frequency);
  app.add_option("--model.reference_widths", cfg.reference_widths);
  app.add_option("--model.num_classes", cfg.num_classes);
  app.add_option("--model.kernel_size", cfg.kernel_size);
  app.add_option("--model.restrict_last_block", cfg.restrict_last_block);
  app.add_option("--model.fourier_samples", cfg.fourier_samples);
  app.add_option("--optimizer.learning_rate", cfg.learning_rate);
  app.add_option("--optimizer.batch_expected", cfg.batch_expected);
  app.add_option("--optimizer.clip_norm", cfg.clip_norm);
  app.add_option("--optimizer.noise_multiplier", cfg.noise_multiplier);
  app.add_option("--optimizer.num_updates", cfg.num_updates);
  app.add_option("--optimizer.aug_multiplicity", cfg.aug_multiplicity);
  app.add_option("--optimizer.ema_decay", cfg.ema_decay);
  app.add_option("--dataset.source", cfg.source);
  app.add_option("--dataset.path", cfg.path);
  app.add_option("--dataset.test_path", cfg.test_path);
  app.add_option("--dataset.subset_size", cfg.subset_size);
  app.add_option("--dataset.seed", cfg.seed);
  app.add_option("--dataset.image_size", cfg.image_size);
  app.add_option("--dataset.test_size", cfg.test_size);
  app.add_option("--privacy.delta", cfg.delta);
  app.add_option("--privacy.target_epsilon", cfg.target_epsilon);
  app.add_option("--numerics.precision", cfg.precision);
  app.add_option("--numerics.padding_mode", cfg.padding_mode);
  app.add_option("--run.log_every", cfg.log_every);
  app.add_option("--run.checkpoint", cfg.checkpoint);
  app.add_flag("--run.deterministic", cfg.deterministic);
  app.add_option("--run.workers", cfg.workers);
  app.add_option("--run.l0_threshold", cfg.l0_threshold);
  // Consumed here for help text and token accounting; the file itself is read
  // by parse_config_args before the command line is applied, so flags win.
  app.add_option("--config", "read options from an INI file before parsing flags");
}

namespace {

// CLI11 routes config-file sections to subcommands, so a flat option namespace
// like "--optimizer.learning_rate" never receives file values.  We read the
// file ourselves with CLI11's INI tokenizer and feed entries through the
// key/value table instead.
std::string config_path_from_args(const std::vector<std::string>& args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (i + 1 >= args.size()) throw ConfigError("--config expects a file path");
      path = args[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      path = a.substr(9);
    }
  }
  return path;
}

void apply_config_file(Config& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI{}.from_config(in);
  } catch (const std::exception& e) {
    throw ConfigError("malformed config file " + path + ": " + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") continue;  // section markers
    std::string key;
    for (const auto& parent : item.parents) key += parent + ".";
    key += item.name;
    std::string value;
    if (item.inputs.empty()) {
      value = "true";  // a bare key reads as an enabled flag
    } else {
      for (std::size_t i = 0; i < item.inputs.size(); ++i) {
        if (i > 0) value += ' ';
        value += item.inputs[i];
      }
    }
    set_config_entry(cfg, key, value);
  }
}

}  // namespace

Config parse_config_args(const std::vector<std::string>& args) {
  return parse_config_args(args, Config{});
}

Config parse_config_args(const std::vector<std::string>& args, Config base) {
  Config cfg = std::move(base);
  const std::string config_path = config_path_from_args(args);
  if (!config_path.empty()) apply_config_file(cfg, config_path);
  CLI::App app{"configuration"};
  attach_config_options(app, cfg);
  std::vector<std::string> reversed(args.rbegin(), args.rend());  // CLI11 pops from the back
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    throw ConfigError(e.what());
  }
  cfg.validate();
  return cfg;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_widths(const std::array<int, 3>& w) {
  return std::to_string(w[0]) + " " + std::to_string(w[1]) + " " + std::to_string(w[2]);
}

struct FieldDef {
  const char* key;
  std::function<std::string(const Config&)> get;
  std::function<void(Config&, const std::string&)> set;
};

const std::vector<FieldDef>& field_table() {
  static const std::vector<FieldDef> table = {
      {"group.kind", [](const Config& c) { return c.group_kind; },
       [](Config& c, const std::string& v) { c.group_kind = v; }},
      {"group.rotation_order", [](const Config& c) { return std::to_string(c.rotation_order); },
       [](Config& c, const std::string& v) { c.rotation_order = std::stoi(v); }},
      {"group.max_frequency", [](const Config& c) { return std::to_string(c.max_frequency); },
       [](Config& c, const std::string& v) { c.max_frequency = std::stoi(v); }},
      {"model.reference_widths", [](const Config& c) { return fmt_widths(c.reference_widths); },
       [](Config& c, const std::string& v) {
         std::array<int, 3> w{};
         if (std::sscanf(v.c_str(), "%d %d %d", &w[0], &w[1], &w[2]) != 3)
           throw ConfigError("reference_widths needs three integers");
         c.reference_widths = w;
       }},
      {"model.num_classes", [](const Config& c) { return std::to_string(c.num_classes); },
       [](Config& c, const std::string& v) { c.num_classes = std::stoi(v); }},
      {"model.kernel_size", [](const Config& c) { return std::to_string(c.kernel_size); },
       [](Config& c, const std::string& v) { c.kernel_size = std::stoi(v); }},
      {"model.restrict_last_block",
       [](const Config& c) { return std::string(c.restrict_last_block ? "true" : "false"); },
       [](Config& c, const std::string& v) { c.restrict_last_block = v == "true" || v == "1"; }},
      {"model.fourier_samples", [](const Config& c) { return std::to_string(c.fourier_samples); },
       [](Config& c, const std::string& v) { c.fourier_samples = std::stoi(v); }},
      {"optimizer.learning_rate", [](const Config& c) { return fmt_double(c.learning_rate); },
       [](Config& c, const std::string& v) { c.learning_rate = std::stod(v); }},
      {"optimizer.batch_expected", [](const Config& c) { return std::to_string(c.batch_expected); },
       [](Config& c, const std::string& v) { c.batch_expected = std::stoi(v); }},
      {"optimizer.clip_norm", [](const Config& c) { return fmt_double(c.clip_norm); },
       [](Config& c, const std::string& v) { c.clip_norm = std::stod(v); }},
      {"optimizer.noise_multiplier",
       [](const Config& c) { return fmt_double(c.noise_multiplier); },
       [](Config& c, const std::string& v) { c.noise_multiplier = std::stod(v); }},
      {"optimizer.num_updates", [](const Config& c) { return std::to_string(c.num_updates); },
       [](Config& c, const std::string& v) { c.num_updates = std::stoi(v); }},
      {"optimizer.aug_multiplicity",
       [](const Config& c) { return std::to_string(c.aug_multiplicity); },
       [](Config& c, const std::string& v) { c.aug_multiplicity = std::stoi(v); }},
      {"optimizer.ema_decay", [](const Config& c) { return fmt_double(c.ema_decay); },
       [](Config& c, const std::string& v) { c.ema_decay = std::stod(v); }},
      {"dataset.source", [](const Config& c) { return c.source; },
       [](Config& c, const std::string& v) { c.source = v; }},
      {"dataset.path", [](const Config& c) { return c.path; },
       [](Config& c, const std::string& v) { c.path = v; }},
      {"dataset.test_path", [](const Config& c) { return c.test_path; },
       [](Config& c, const std::string& v) { c.test_path = v; }},
      {"dataset.subset_size", [](const Config& c) { return std::to_string(c.subset_size); },
       [](Config& c, const std::string& v) { c.subset_size = std::stoi(v); }},
      {"dataset.seed", [](const Config& c) { return std::to_string(c.seed); },
       [](Config& c, const std::string& v) { c.seed = std::stoull(v); }},
      {"dataset.image_size", [](const Config& c) { return std::to_string(c.image_size); },
       [](Config& c, const std::string& v) { c.image_size = std::stoi(v); }},
      {"dataset.test_size", [](const Config& c) { return std::to_string(c.test_size); },
       [](Config& c, const std::string& v) { c.test_size = std::stoi(v); }},
      {"privacy.delta", [](const Config& c) { return fmt_double(c.delta); },
       [](Config& c, const std::string& v) { c.delta = std::stod(v); }},
      {"privacy.target_epsilon", [](const Config& c) { return fmt_double(c.target_epsilon); },
       [](Config& c, const std::string& v) { c.target_epsilon = std::stod(v); }},
      {"numerics.precision", [](const Config& c) { return c.precision; },
       [](Config& c, const std::string& v) { c.precision = v; }},
      {"numerics.padding_mode", [](const Config& c) { return c.padding_mode; },
       [](Config& c, const std::string& v) { c.padding_mode = v; }},
      {"run.log_every", [](const Config& c) { return std::to_string(c.log_every); },
       [](Config& c, const std::string& v) { c.log_every = std::stoi(v); }},
      {"run.checkpoint", [](const Config& c) { return c.checkpoint; },
       [](Config& c, const std::string& v) { c.checkpoint = v; }},
      {"run.deterministic",
       [](const Config& c) { return std::string(c.deterministic ? "true" : "false"); },
       [](Config& c, const std::string& v) { c.deterministic = v == "true" || v == "1"; }},
      {"run.workers", [](const Config& c) { return std::to_string(c.workers); },
       [](Config& c, const std::string& v) { c.workers = std::stoi(v); }},
      {"run.l0_threshold", [](const Config& c) { return fmt_double(c.l0_threshold); },
       [](Config& c, const std::string& v) { c.l0_threshold = std::stod(v); }},
  };
  return table;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_entries(const Config& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : field_table()) out.emplace_back(f.key, f.get(cfg));
  return out;
}

void set_config_entry(Config& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : field_table()) {
    if (key == f.key) {
      try {
        f.set(cfg, value);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("bad value '" + value + "' for " + key + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace eqdp
