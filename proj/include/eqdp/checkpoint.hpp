#pragma once

// Checkpoint container: a text manifest (config, parameter registration
// order, normalization statistics, accountant and optimizer state) followed
// by a binary blob of little-endian float32 parameter arrays, each prefixed
// by an unsigned 64-bit little-endian element count. The EMA shadow arrays
// follow the live parameters in the same order. Round-trips are bit-exact.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "eqdp/config.hpp"
#include "eqdp/data.hpp"
#include "eqdp/dp.hpp"
#include "eqdp/model.hpp"

namespace eqdp {

struct Checkpoint {
  Config config;
  std::array<int, 3> widths{};

  std::vector<std::string> param_names;       // registration order
  std::vector<std::vector<int>> param_shapes;
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> ema;        // same shapes; may be absent
  double ema_decay = 0.999;

  ChannelStats normalization;

  double accountant_sample_rate = 1.0;
  double accountant_noise = 0.0;
  int64_t accountant_steps = 0;
  int64_t step_count = 0;

  bool has_ema() const { return !ema.empty(); }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Snapshot of a live model (and optional EMA shadow) into a checkpoint.
Checkpoint checkpoint_from_model(Model<double>& model, const Config& cfg,
                                 const EmaState* ema, const ChannelStats& stats);

/// Writes the checkpoint's live parameters into a freshly built model; the
/// registration order, names, and shapes must match.
void load_into_model(const Checkpoint& ckpt, Model<double>& model);

/// The EMA shadow (or, absent one, the live parameters) as a flat vector in
/// registration order, widened back to double.
std::vector<double> checkpoint_ema_flat(const Checkpoint& ckpt);

}  // namespace eqdp
