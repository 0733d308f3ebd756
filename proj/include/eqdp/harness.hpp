#pragma once

// Training, evaluation, and audit harness: ties the dataset pipeline, the
// equivariant model, the private optimizer, and the accountant together
// behind three entry points (train / evaluate_checkpoint /
// check_equivariance) that the command-line driver exposes one-to-one.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "eqdp/checkpoint.hpp"
#include "eqdp/config.hpp"
#include "eqdp/data.hpp"
#include "eqdp/model.hpp"

namespace eqdp {

// Loads the training set named by the config: a synthetic split generated
// from cfg.seed, or the CIFAR-10 binary at cfg.path. dataset.subset_size
// applies to both.
DatasetSource load_train_dataset(const Config& cfg);

// Held-out data: a fresh synthetic split drawn from the seed_tags::kTestSplit
// stream (never overlapping the training draw), or the file at cfg.test_path.
DatasetSource load_test_dataset(const Config& cfg);

// The noise multiplier a run will use: the explicit optimizer.noise_multiplier
// when set, otherwise a value calibrated so that privacy.target_epsilon is
// met after optimizer.num_updates steps (rounded up until the full run fits
// the budget). Returns 0 when neither knob is set. Throws BudgetExceeded when
// no noise level can reach the target.
double resolve_noise_multiplier(const Config& cfg, double sample_rate);

// Largest t <= max_steps with epsilon(t) <= target_eps under the refined
// conversion; epsilon is monotone in the step count, so training stops at
// exactly this boundary.
int64_t steps_within_budget(double q, double sigma, double delta, double target_eps,
                            int64_t max_steps);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<std::string> log_lines;
  double final_epsilon = 0.0;  // infinity when sigma == 0 and steps were taken
  double sigma = 0.0;          // effective noise multiplier
  double sample_rate = 1.0;
  int64_t steps_run = 0;
  int64_t steps_planned = 0;
  bool halted_on_budget = false;
  double initial_loss = 0.0;  // mean loss of the first non-empty lot
  double final_loss = 0.0;    // mean loss of the last non-empty lot
};

// Receives each metrics log line as it is produced (may be null).
using LogSink = std::function<void(const std::string&)>;

// Runs the full private training loop on an explicit raw (unnormalized)
// dataset: per-channel statistics are computed and applied here, the model is
// initialized from the seed_tags::kInit stream, and every update performs
// Poisson sampling -> augmentation multiplicity -> per-sample gradients ->
// averaging over each datum's instances -> clipping -> noisy mean ->
// SGD step -> EMA update -> one accountant step. Log lines are collected in
// the result and also streamed to on_log when given.
TrainResult train(const Config& cfg, const DatasetSource& raw_train, const LogSink& on_log = {});

// Convenience overload: loads the dataset named by the config first.
TrainResult train(const Config& cfg, const LogSink& on_log = {});

struct EvalResult {
  double accuracy = 0.0;
  double brier = 0.0;
  double mean_loss = 0.0;
  int n = 0;
};

// Deterministic, augmentation-free evaluation of a checkpoint on raw
// (unnormalized) held-out data, using the stored channel statistics and the
// EMA parameters (falling back to the live ones when no EMA was saved).
EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const DatasetSource& raw_test);

// The group elements an audit can test exactly on the pixel grid: every
// element for groups N in {1, 2, 4} (plus axis-aligned reflections), the
// quarter-turn subset otherwise; SO(2) always audits the four quarter turns.
std::vector<GroupElement> audit_elements(const GroupSpec& g);

struct LayerAudit {
  std::string name;
  double max_rel_err = 0.0;
};

// Layer-boundary equivariance audit under circular padding: for every exact
// element, the transformed input is pushed through the network and each
// boundary activation is compared against the group action applied to the
// base activation (relative Frobenius error, maximized over elements). The
// final entry checks logit invariance. Boundaries past the restriction are
// subgroup-equivariant only, so they are checked against the subgroup's
// exact elements.
std::vector<LayerAudit> audit_layers(Model<double>& model, const std::vector<double>& input,
                                     int batch, int height, int width);

// Builds the configured model, genericizes its parameters with a seeded
// perturbation (so the audit cannot pass by degeneracy), and audits a random
// input batch.
std::vector<LayerAudit> check_equivariance(const Config& cfg, int batch = 2,
                                           uint64_t probe_seed = seed_tags::kProbe);

}  // namespace eqdp
