#pragma once

// Run configuration: one flat struct covering the group, model, optimizer,
// dataset, privacy, and numerics knobs. The CLI binds every field to a dotted
// flag (--optimizer.learning_rate ...) and the same names work as sections in
// an INI config file; command-line values override file values.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eqdp/common.hpp"
#include "eqdp/groups.hpp"
#include "eqdp/model.hpp"

namespace CLI {
class App;
}

namespace eqdp {

// Every random decision in a run draws from its own stream, seeded with
// derive_seed(cfg.seed, tag). Keeping the tags public lets a reference
// implementation reproduce any one stream in isolation.
namespace seed_tags {
inline constexpr std::uint64_t kInit = 0x696e6974ULL;       // "init": parameter init
inline constexpr std::uint64_t kLot = 0x6c6f74ULL;          // "lot": Poisson sampling
inline constexpr std::uint64_t kNoise = 0x6e6f697365ULL;    // "noise": privatization
inline constexpr std::uint64_t kAugment = 0x617567ULL;      // "aug": augmentation
inline constexpr std::uint64_t kTestSplit = 0x74657374ULL;  // "test": held-out split
inline constexpr std::uint64_t kProbe = 0x70726f6265ULL;    // "probe": audit inputs
}  // namespace seed_tags

struct Config {
  // group
  std::string group_kind = "dihedral";  // cyclic | dihedral | so2
  int rotation_order = 4;               // cyclic/dihedral; 1 = trivial group
  int max_frequency = 1;                // so2 band limit

  // model
  std::array<int, 3> reference_widths{15, 30, 60};
  int num_classes = 10;
  int kernel_size = 3;
  bool restrict_last_block = true;
  int fourier_samples = 8;

  // optimizer
  double learning_rate = 0.5;
  int batch_expected = 64;        // expected lot size L; q = L / n
  double clip_norm = 1.0;
  double noise_multiplier = -1.0; // explicit sigma; < 0 means "not set"
  int num_updates = 100;
  int aug_multiplicity = 1;       // K instances per datum (original + K-1 augmented)
  double ema_decay = 0.999;

  // dataset
  std::string source = "synthetic";  // synthetic | cifar10
  std::string path;                  // cifar10 train file/directory
  std::string test_path;             // cifar10 held-out file
  int subset_size = 0;               // 0 keeps everything (synthetic: train size)
  std::uint64_t seed = 1;
  int image_size = 16;               // synthetic render size
  int test_size = 1000;              // synthetic held-out size

  // privacy
  double delta = 1e-5;
  double target_epsilon = -1.0;  // < 0 means "not set"; calibrates sigma when set

  // numerics
  std::string precision = "float64";
  std::string padding_mode = "circular";  // circular | zero

  // run control
  int log_every = 20;
  std::string checkpoint = "model.ckpt";
  bool deterministic = false;
  int workers = 0;
  double l0_threshold = 1e-5;

  void validate() const;
  GroupSpec group_spec() const;
  ResNetOptions model_options() const;

  bool has_noise_multiplier() const { return noise_multiplier >= 0.0; }
  bool has_target_epsilon() const { return target_epsilon >= 0.0; }
};

/// Registers every Config field on the app under its dotted name, plus a
/// --config option naming an INI file (read by parse_config_args before the
/// flags are applied, so flags win).
void attach_config_options(CLI::App& app, Config& cfg);

/// Parses `--key value` style arguments (plus an optional leading config
/// file via --config) into a Config. Throws ConfigError on unknown keys or
/// unparsable values; the result has been validated. The second form starts
/// from an existing configuration instead of the defaults.
Config parse_config_args(const std::vector<std::string>& args);
Config parse_config_args(const std::vector<std::string>& args, Config base);

/// Deterministic (key, value) serialization of every field, round-trippable
/// through set_config_entry. Doubles use shortest-exact formatting.
std::vector<std::pair<std::string, std::string>> config_entries(const Config& cfg);
void set_config_entry(Config& cfg, const std::string& key, const std::string& value);

}  // namespace eqdp
