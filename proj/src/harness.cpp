#include "eqdp/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>

#include "eqdp/accountant.hpp"
#include "eqdp/dp.hpp"
#include "eqdp/kernels.hpp"
#include "eqdp/metrics.hpp"
#include "eqdp/parallel.hpp"

namespace eqdp {

namespace {

PadKind pad_kind_of(const Config& cfg) {
  return cfg.padding_mode == "zero" ? PadKind::zero : PadKind::circular;
}

void apply_worker_config(const Config& cfg) {
  worker_count() = cfg.deterministic ? 1 : cfg.workers;
}

void check_dataset_matches(const Config& cfg, const DatasetSource& data, const char* which) {
  data.validate();
  if (data.channels != 3)
    throw ConfigError(std::string(which) + " dataset must have 3 channels");
  if (data.num_classes != cfg.num_classes)
    throw ConfigError(std::string(which) + " dataset class count does not match model.num_classes");
}

std::string format_kv(const char* fmt, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, ap);
  va_end(ap);
  return std::string(buf);
}

void check_synthetic_classes(const Config& cfg) {
  if (cfg.num_classes < 2 || cfg.num_classes > 8)
    throw ConfigError("the synthetic set supports 2..8 classes; set model.num_classes");
}

}  // namespace

DatasetSource load_train_dataset(const Config& cfg) {
  cfg.validate();
  if (cfg.source == "cifar10") return take_subset(load_cifar10_binary(cfg.path), cfg.subset_size);
  check_synthetic_classes(cfg);
  const int n = cfg.subset_size > 0 ? cfg.subset_size : 5000;
  return synthetic_oriented_dataset(n, cfg.num_classes, cfg.image_size, cfg.seed);
}

DatasetSource load_test_dataset(const Config& cfg) {
  cfg.validate();
  if (cfg.source == "cifar10") {
    if (cfg.test_path.empty())
      throw ConfigError("dataset.test_path is required to evaluate on cifar10");
    return load_cifar10_binary(cfg.test_path);
  }
  check_synthetic_classes(cfg);
  return synthetic_oriented_dataset(cfg.test_size, cfg.num_classes, cfg.image_size,
                                    derive_seed(cfg.seed, seed_tags::kTestSplit));
}

int64_t steps_within_budget(double q, double sigma, double delta, double target_eps,
                            int64_t max_steps) {
  require(sigma > 0.0, "steps_within_budget needs a positive noise multiplier");
  require(max_steps >= 0, "steps_within_budget needs a non-negative step count");
  Accountant acct(q, sigma);
  for (int64_t t = 0; t < max_steps; ++t) {
    acct.account_steps(1);
    if (acct.to_epsilon(delta).epsilon > target_eps) return t;
  }
  return max_steps;
}

double resolve_noise_multiplier(const Config& cfg, double sample_rate) {
  if (cfg.has_noise_multiplier()) return cfg.noise_multiplier;
  if (!cfg.has_target_epsilon() || cfg.num_updates == 0) return 0.0;
  double sigma = 0.0;
  try {
    sigma = calibrate_sigma(cfg.target_epsilon, cfg.delta, sample_rate, cfg.num_updates);
  } catch (const Error& e) {
    throw BudgetExceeded(std::string("privacy.target_epsilon cannot be met at any noise level: ") +
                         e.what());
  }
  // the calibration tolerance can leave epsilon a hair above the target;
  // nudge sigma up until the whole run fits the budget
  for (int i = 0; i < 64; ++i) {
    Accountant acct(sample_rate, sigma);
    acct.account_steps(cfg.num_updates);
    if (acct.to_epsilon(cfg.delta).epsilon <= cfg.target_epsilon) return sigma;
    sigma *= 1.0 + 1e-3;
  }
  throw BudgetExceeded("could not fit optimizer.num_updates steps inside privacy.target_epsilon");
}

TrainResult train(const Config& cfg, const DatasetSource& raw_train, const LogSink& on_log) {
  cfg.validate();
  apply_worker_config(cfg);
  check_dataset_matches(cfg, raw_train, "training");

  DatasetSource data = take_subset(raw_train, cfg.subset_size);
  if (cfg.batch_expected > data.n)
    throw ConfigError("optimizer.batch_expected exceeds the training set size");
  const ChannelStats stats = compute_channel_stats(data);
  normalize_channels(data, stats);

  Model<double> model = build_eq_resnet9<double>(cfg.group_spec(), cfg.model_options());
  const auto params = model.parameters();

  const double q = double(cfg.batch_expected) / double(data.n);
  const double lot_size = double(cfg.batch_expected);
  const double sigma = resolve_noise_multiplier(cfg, q);

  TrainResult res;
  const auto emit = [&](std::string line) {
    if (on_log) on_log(line);
    res.log_lines.push_back(std::move(line));
  };
  res.sigma = sigma;
  res.sample_rate = q;

  std::optional<Accountant> acct;
  if (sigma > 0.0) acct.emplace(q, sigma);

  int64_t planned = cfg.num_updates;
  if (cfg.has_target_epsilon() && acct) {
    planned = steps_within_budget(q, sigma, cfg.delta, cfg.target_epsilon, cfg.num_updates);
    if (planned == 0 && cfg.num_updates > 0)
      throw BudgetExceeded("a single update already crosses privacy.target_epsilon");
  }
  res.steps_planned = planned;
  res.halted_on_budget = planned < cfg.num_updates;

  Rng lot_rng(derive_seed(cfg.seed, seed_tags::kLot));
  Rng noise_rng(derive_seed(cfg.seed, seed_tags::kNoise));
  Rng aug_rng(derive_seed(cfg.seed, seed_tags::kAugment));
  EmaState ema = EmaState::init(params, cfg.ema_decay);

  const PadKind pad = pad_kind_of(cfg);
  const int C = data.channels, H = data.height, W = data.width;
  const int64_t img = data.image_size();
  const int K = cfg.aug_multiplicity;
  const double inf = std::numeric_limits<double>::infinity();
  bool have_loss = false;

  for (int64_t t = 0; t < planned; ++t) {
    const std::vector<int64_t> lot = poisson_sample(data.n, q, lot_rng);
    const int B = int(lot.size());

    std::vector<double> instances;
    instances.reserve(size_t(int64_t(B) * K * img));
    std::vector<int> lot_labels(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const double* im = data.image(lot[size_t(b)]);
      instances.insert(instances.end(), im, im + img);
      for (int j = 1; j < K; ++j) {
        const std::vector<double> a = augment(im, C, H, W, aug_rng);
        instances.insert(instances.end(), a.begin(), a.end());
      }
      lot_labels[size_t(b)] = data.labels[size_t(lot[size_t(b)])];
    }

    std::vector<double> losses;
    const PerSampleGrads grads = lot_gradients_with_multiplicity(
        model, std::move(instances), lot_labels, B, K, C, H, W, pad, &losses);
    std::vector<double> clipped_sum;
    const std::vector<double> update =
        privatize(grads, cfg.clip_norm, sigma, lot_size, noise_rng, &clipped_sum);
    sgd_step(params, update, cfg.learning_rate);
    ema.update(params);
    if (acct) acct->account_steps(1);
    ++res.steps_run;

    double mean_loss = std::numeric_limits<double>::quiet_NaN();
    if (B > 0) {
      mean_loss = std::accumulate(losses.begin(), losses.end(), 0.0) / double(B);
      if (!have_loss) {
        res.initial_loss = mean_loss;
        have_loss = true;
      }
      res.final_loss = mean_loss;
    }

    if ((t + 1) % cfg.log_every == 0 || t == 0 || t + 1 == planned) {
      const double eps = acct ? acct->to_epsilon(cfg.delta).epsilon : inf;
      double grad_l0 = std::numeric_limits<double>::quiet_NaN();
      if (B > 0) {
        std::vector<double> clipped_mean = clipped_sum;
        for (double& v : clipped_mean) v /= double(B);
        grad_l0 = l0_eps_fraction(clipped_mean, cfg.l0_threshold);
      }
      const double param_l0 = l0_eps_fraction(snapshot_parameters(params), cfg.l0_threshold);
      emit(format_kv("step=%" PRId64 " lot=%d loss=%.6g eps=%.6g param_l0=%.6g grad_l0=%.6g",
                     t + 1, B, mean_loss, eps, param_l0, grad_l0));
    }
  }

  res.final_epsilon = acct              ? acct->to_epsilon(cfg.delta).epsilon
                      : res.steps_run == 0 ? 0.0
                                           : inf;
  emit(format_kv("final steps=%" PRId64 " eps=%.6g sigma=%.6g halted=%d", res.steps_run,
                 res.final_epsilon, sigma, res.halted_on_budget ? 1 : 0));

  res.checkpoint = checkpoint_from_model(model, cfg, &ema, stats);
  res.checkpoint.accountant_sample_rate = q;
  res.checkpoint.accountant_noise = sigma;
  res.checkpoint.accountant_steps = res.steps_run;
  res.checkpoint.step_count = res.steps_run;
  return res;
}

TrainResult train(const Config& cfg, const LogSink& on_log) {
  return train(cfg, load_train_dataset(cfg), on_log);
}

EvalResult evaluate_checkpoint(const Checkpoint& ckpt, const DatasetSource& raw_test) {
  const Config& cfg = ckpt.config;
  apply_worker_config(cfg);
  check_dataset_matches(cfg, raw_test, "evaluation");

  DatasetSource data = raw_test;
  normalize_channels(data, ckpt.normalization);

  Model<double> model = build_eq_resnet9<double>(cfg.group_spec(), cfg.model_options());
  const auto params = model.parameters();
  restore_parameters(params, checkpoint_ema_flat(ckpt));

  const PadKind pad = pad_kind_of(cfg);
  const int C = data.channels, H = data.height, W = data.width;
  const int64_t img = data.image_size();
  const int num_classes = data.num_classes;

  std::vector<double> probs(size_t(int64_t(data.n) * num_classes));
  double loss_sum = 0.0;
  const int chunk = 64;
  for (int start = 0; start < data.n; start += chunk) {
    const int B = std::min(chunk, data.n - start);
    Tape<double> tape;
    auto xb = std::make_shared<std::vector<double>>(
        data.images.begin() + int64_t(start) * img,
        data.images.begin() + int64_t(start + B) * img);
    const Tensor<double> x = constant(tape, {B, C, H, W}, std::move(xb), true);
    const Tensor<double> logits = model.forward(tape, x, pad);
    const std::vector<int> labels(data.labels.begin() + start, data.labels.begin() + start + B);
    const Tensor<double> losses = softmax_cross_entropy(logits, labels);
    loss_sum = std::accumulate(losses.data->begin(), losses.data->end(), loss_sum);
    for (int b = 0; b < B; ++b) {
      const double* row = logits.ptr() + int64_t(b) * num_classes;
      const double m = *std::max_element(row, row + num_classes);
      double z = 0.0;
      double* out = probs.data() + int64_t(start + b) * num_classes;
      for (int k = 0; k < num_classes; ++k) z += (out[k] = std::exp(row[k] - m));
      for (int k = 0; k < num_classes; ++k) out[k] /= z;
    }
  }

  EvalResult r;
  r.n = data.n;
  r.mean_loss = loss_sum / double(data.n);
  r.accuracy = top1_accuracy(probs, num_classes, data.labels);
  r.brier = brier_score(probs, num_classes, data.labels);
  return r;
}

std::vector<GroupElement> audit_elements(const GroupSpec& g) {
  if (g.kind == GroupKind::so2) {
    return {GroupElement::rotation(0.0), GroupElement::rotation(kPi / 2),
            GroupElement::rotation(kPi), GroupElement::rotation(3 * kPi / 2)};
  }
  std::vector<GroupElement> out;
  for (const GroupElement& e : enumerate_elements(g))
    if (exact_steering(e)) out.push_back(e);
  return out;
}

namespace {

struct CapturedRun {
  std::vector<std::vector<double>> taps;  // one activation per boundary
  std::vector<std::array<int, 2>> spatial;
  std::vector<double> logits;
};

// Mirrors Model::forward, recording the activation after the stem and after
// each stage's residual add (post-restriction for the last stage).
CapturedRun capture_forward(Model<double>& model, const std::vector<double>& x_data, int batch,
                            int height, int width) {
  Tape<double> tape;
  const Padding pad = Padding::circular(model.options.kernel_size / 2);
  const int c_in = model.input_fields.total_channels();
  const Tensor<double> x =
      constant(tape, {batch, c_in, height, width},
               std::make_shared<std::vector<double>>(x_data), true);
  CapturedRun run;
  auto record = [&run](const Tensor<double>& t) {
    run.taps.push_back(*t.data);
    run.spatial.push_back({t.dim(2), t.dim(3)});
  };
  Tensor<double> h = model.stem.forward(tape, x, pad);
  record(h);
  for (int i = 0; i < 3; ++i) {
    auto& st = model.stages[size_t(i)];
    h = st.main.forward(tape, h, pad);
    h = equivariant_spatial_pool(h, st.main.conv.field_out, 2);
    if (i == 2 && model.restriction) h = model.restriction->forward(h);
    const Tensor<double> r = st.res_b.forward(tape, st.res_a.forward(tape, h, pad), pad);
    h = add(h, r);
    record(h);
  }
  h = model.invariant_pool.forward(h);
  const Tensor<double> f = global_avg_pool(h);
  const Tensor<double> logits = linear(f, model.head_w.use(tape), model.head_b.use(tape));
  run.logits = *logits.data;
  return run;
}

double relative_error(const std::vector<double>& actual, const std::vector<double>& expected) {
  require(actual.size() == expected.size(), "audit buffers must match");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < actual.size(); ++i) {
    const double d = actual[i] - expected[i];
    num += d * d;
    den += expected[i] * expected[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-30);
}

}  // namespace

std::vector<LayerAudit> audit_layers(Model<double>& model, const std::vector<double>& input,
                                     int batch, int height, int width) {
  const int c_in = model.input_fields.total_channels();
  require(int64_t(input.size()) == int64_t(batch) * c_in * height * width,
          "audit input does not match (batch, channels, height, width)");

  std::vector<const FieldType*> fields = {
      &model.stem.field_out, &model.stages[0].res_b.conv.field_out,
      &model.stages[1].res_b.conv.field_out, &model.feature_fields()};
  std::vector<LayerAudit> audits = {
      {"stem", 0.0}, {"stage1", 0.0}, {"stage2", 0.0}, {"stage3", 0.0}, {"logits", 0.0}};

  const CapturedRun base = capture_forward(model, input, batch, height, width);

  // guard against the capture drifting from the real forward pass: the last
  // boundary must be byte-identical to Model::forward's feature output
  {
    Tape<double> tape;
    Tensor<double> features;
    const Tensor<double> logits =
        model.forward(tape,
                      constant(tape, {batch, c_in, height, width},
                               std::make_shared<std::vector<double>>(input), true),
                      PadKind::circular, &features);
    require(base.taps.back().size() == features.data->size() &&
                std::memcmp(base.taps.back().data(), features.data->data(),
                            features.data->size() * sizeof(double)) == 0,
            "captured boundaries diverge from Model::forward");
    require(base.logits.size() == logits.data->size() &&
                std::memcmp(base.logits.data(), logits.data->data(),
                            logits.data->size() * sizeof(double)) == 0,
            "captured logits diverge from Model::forward");
  }

  // after the restriction the network is equivariant to the subgroup only, so
  // the stage3 and logit checks apply to elements the restricted field accepts
  const GroupSpec& res_group = model.feature_fields().group;
  auto in_restricted = [&res_group](const GroupElement& e) {
    if (res_group.kind == GroupKind::so2) return !e.reflect;
    try {
      element_index(res_group, e);
      return true;
    } catch (const Error&) {
      return false;
    }
  };

  for (const GroupElement& e : audit_elements(model.group)) {
    const std::vector<double> moved = transform_input(e, input, batch, c_in, height, width);
    const CapturedRun got = capture_forward(model, moved, batch, height, width);
    const size_t upto = in_restricted(e) ? fields.size() : fields.size() - 1;
    for (size_t k = 0; k < upto; ++k) {
      const std::vector<double> expected =
          transform_feature_map(e, *fields[k], base.taps[k], batch, fields[k]->total_channels(),
                                base.spatial[k][0], base.spatial[k][1]);
      audits[k].max_rel_err = std::max(audits[k].max_rel_err, relative_error(got.taps[k], expected));
    }
    if (upto == fields.size())
      audits.back().max_rel_err =
          std::max(audits.back().max_rel_err, relative_error(got.logits, base.logits));
  }
  return audits;
}

std::vector<LayerAudit> check_equivariance(const Config& cfg, int batch, uint64_t probe_seed) {
  cfg.validate();
  apply_worker_config(cfg);
  require(batch >= 1, "audit batch must be at least 1");

  Model<double> model = build_eq_resnet9<double>(cfg.group_spec(), cfg.model_options());
  // genericize: shift every parameter off its init so no boundary can pass by
  // sitting at a fixed point (biases at zero, norm gains at one, ...); every
  // parameter direction preserves equivariance by construction
  Rng perturb_rng(derive_seed(probe_seed, 0x7061726dULL));
  for (Parameter<double>* p : model.parameters())
    for (double& v : *p->value) v += 0.2 * perturb_rng.normal();

  const int hw = cfg.source == "cifar10" ? 32 : cfg.image_size;
  const int c_in = model.input_fields.total_channels();
  Rng input_rng(derive_seed(probe_seed, 0x696e707574ULL));
  std::vector<double> input(size_t(int64_t(batch) * c_in * hw * hw));
  for (double& v : input) v = input_rng.normal();

  return audit_layers(model, input, batch, hw, hw);
}

}  // namespace eqdp
