// eqdp: command-line driver for group-equivariant CNNs trained with DP-SGD.
//
// usage: eqdp <command> [--config FILE] [--<section>.<key> VALUE ...]
//
// Exit codes: 0 success, 2 configuration error, 3 equivariance-audit failure,
// 1 any other error.

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <string>
#include <vector>

#include "eqdp/accountant.hpp"
#include "eqdp/checkpoint.hpp"
#include "eqdp/config.hpp"
#include "eqdp/data.hpp"
#include "eqdp/harness.hpp"
#include "eqdp/model.hpp"
#include "eqdp/rng.hpp"

namespace {

using namespace eqdp;

constexpr double kAuditThreshold = 1e-4;

void print_usage(std::FILE* out) {
  std::fputs(
      "eqdp - group-equivariant CNNs with differentially private SGD\n"
      "\n"
      "usage: eqdp <command> [--config FILE] [--<section>.<key> VALUE ...]\n"
      "\n"
      "commands:\n"
      "  train               run DP-SGD training and save a checkpoint\n"
      "  evaluate            score a saved checkpoint on the held-out split\n"
      "  check-equivariance  audit per-layer equivariance of the configured model\n"
      "  accountant          print the privacy order table and final epsilon\n"
      "  param-count         list parameter shapes and the total count\n"
      "  gen-synthetic       write the synthetic oriented dataset in cifar layout\n"
      "\n"
      "Every configuration key doubles as a flag (--optimizer.learning_rate 0.5)\n"
      "and as `key = value` under `[section]` in the INI file named by --config;\n"
      "command-line flags override file values. `eqdp <command> --help` lists\n"
      "the keys with their defaults.\n",
      out);
}

void print_command_help(const std::string& cmd, const char* blurb) {
  std::printf("eqdp %s: %s\n\nkeys (showing defaults):\n", cmd.c_str(), blurb);
  for (const auto& [key, value] : config_entries(Config{}))
    std::printf("  --%s %s\n", key.c_str(), value.empty() ? "\"\"" : value.c_str());
  std::printf("  --config FILE  read keys from an INI file before the flags\n");
}

int cmd_train(const std::vector<std::string>& args) {
  const Config cfg = parse_config_args(args);
  const TrainResult res = train(cfg, [](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  });
  save_checkpoint(res.checkpoint, cfg.checkpoint);
  std::printf("checkpoint=%s\n", cfg.checkpoint.c_str());
  return 0;
}

int cmd_evaluate(const std::vector<std::string>& args) {
  // The checkpoint's embedded configuration is the baseline, so the model and
  // the held-out split match the training run unless flags say otherwise.
  const Config cli_cfg = parse_config_args(args);
  const Checkpoint ckpt = load_checkpoint(cli_cfg.checkpoint);
  const Config cfg = parse_config_args(args, ckpt.config);
  const EvalResult res = evaluate_checkpoint(ckpt, load_test_dataset(cfg));
  std::printf("n=%d accuracy=%.6g brier=%.6g loss=%.6g\n", res.n, res.accuracy, res.brier,
              res.mean_loss);
  return 0;
}

int cmd_check_equivariance(const std::vector<std::string>& args) {
  const Config cfg = parse_config_args(args);
  const std::vector<LayerAudit> audits = check_equivariance(cfg);
  bool ok = true;
  for (const LayerAudit& a : audits) {
    std::printf("layer=%s max_rel_err=%.6g\n", a.name.c_str(), a.max_rel_err);
    ok = ok && a.max_rel_err <= kAuditThreshold;
  }
  std::printf("status=%s threshold=%.6g\n", ok ? "pass" : "fail", kAuditThreshold);
  return ok ? 0 : 3;
}

int cmd_accountant(const std::vector<std::string>& args) {
  const Config cfg = parse_config_args(args);
  const int64_t n = cfg.subset_size > 0 ? cfg.subset_size
                    : cfg.source == "cifar10" ? 50000
                                              : 5000;
  if (cfg.batch_expected > n)
    throw ConfigError("optimizer.batch_expected exceeds the dataset size");
  const double q = double(cfg.batch_expected) / double(n);
  const double sigma = resolve_noise_multiplier(cfg, q);
  if (!(sigma > 0.0))
    throw ConfigError("the accountant needs optimizer.noise_multiplier or privacy.target_epsilon");

  Accountant acct(q, sigma);
  acct.account_steps(cfg.num_updates);
  const std::vector<double>& orders = acct.orders();
  const std::vector<double>& rho = acct.rho();
  for (size_t i = 0; i < orders.size(); ++i)
    std::printf("order=%.6g rdp=%.6g eps=%.6g\n", orders[i], rho[i],
                rdp_to_epsilon(rho[i], orders[i], cfg.delta));
  const EpsilonReport rep = acct.to_epsilon(cfg.delta);
  std::printf("sample_rate=%.6g noise=%.6g steps=%d delta=%.6g epsilon=%.6g best_order=%.6g\n", q,
              sigma, cfg.num_updates, cfg.delta, rep.epsilon, rep.best_order);
  return 0;
}

int cmd_param_count(const std::vector<std::string>& args) {
  const Config cfg = parse_config_args(args);
  Model<double> model = build_eq_resnet9<double>(cfg.group_spec(), cfg.model_options());
  int64_t total = 0;
  for (const auto* p : model.parameters()) {
    std::string shape;
    for (size_t i = 0; i < p->shape.size(); ++i)
      shape += (i ? "x" : "") + std::to_string(p->shape[i]);
    std::printf("param=%s shape=%s count=%" PRId64 "\n", p->name.c_str(), shape.c_str(),
                p->size());
    total += p->size();
  }
  std::printf("group=%s rotation_order=%d total=%" PRId64 "\n", cfg.group_kind.c_str(),
              cfg.rotation_order, total);
  return 0;
}

int cmd_gen_synthetic(const std::vector<std::string>& args) {
  const Config cfg = parse_config_args(args);
  if (cfg.path.empty())
    throw ConfigError("gen-synthetic writes the file named by dataset.path; set --dataset.path");
  if (cfg.num_classes < 2 || cfg.num_classes > 8)
    throw ConfigError("the synthetic set supports 2..8 classes; set model.num_classes");
  // The cifar record layout fixes the render size at 32x32; dataset.image_size
  // is ignored here.
  const int n = cfg.subset_size > 0 ? cfg.subset_size : 5000;
  save_cifar10_binary(synthetic_oriented_dataset(n, cfg.num_classes, 32, cfg.seed), cfg.path);
  std::printf("wrote=%s n=%d classes=%d\n", cfg.path.c_str(), n, cfg.num_classes);
  if (!cfg.test_path.empty()) {
    save_cifar10_binary(synthetic_oriented_dataset(cfg.test_size, cfg.num_classes, 32,
                                                   derive_seed(cfg.seed, seed_tags::kTestSplit)),
                        cfg.test_path);
    std::printf("wrote=%s n=%d classes=%d\n", cfg.test_path.c_str(), cfg.test_size,
                cfg.num_classes);
  }
  return 0;
}

struct Command {
  const char* name;
  const char* blurb;
  int (*run)(const std::vector<std::string>&);
};

constexpr Command kCommands[] = {
    {"train", "run DP-SGD training and save a checkpoint to run.checkpoint", cmd_train},
    {"evaluate", "score the checkpoint at run.checkpoint on the held-out split", cmd_evaluate},
    {"check-equivariance", "transform-and-compare audit of every layer", cmd_check_equivariance},
    {"accountant", "privacy order table for (sample rate, noise, steps, delta)", cmd_accountant},
    {"param-count", "parameter shapes and total for the configured model", cmd_param_count},
    {"gen-synthetic", "write the synthetic oriented dataset to dataset.path", cmd_gen_synthetic},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  if (args.empty()) {
    print_usage(stderr);
    return 2;
  }
  const std::string cmd = args.front();
  args.erase(args.begin());
  if (cmd == "help" || cmd == "--help" || cmd == "-h") {
    print_usage(stdout);
    return 0;
  }
  for (const Command& c : kCommands) {
    if (cmd != c.name) continue;
    const bool want_help = std::any_of(args.begin(), args.end(), [](const std::string& a) {
      return a == "--help" || a == "-h";
    });
    if (want_help) {
      print_command_help(cmd, c.blurb);
      return 0;
    }
    try {
      return c.run(args);
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "%s\n", e.what());
      return 2;
    } catch (const BudgetExceeded& e) {
      std::fprintf(stderr, "%s\n", e.what());
      return 2;
    } catch (const Error& e) {
      std::fprintf(stderr, "%s\n", e.what());
      return 1;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "error: %s\n", e.what());
      return 1;
    }
  }
  std::fprintf(stderr, "unknown command: %s\n\n", cmd.c_str());
  print_usage(stderr);
  return 2;
}
