// Command-line front end: train, eval, ablate, check, dump-prototypes.
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
// 3 check-suite failure.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "opt/checks/suites.hpp"
#include "opt/config.hpp"
#include "opt/dump.hpp"
#include "opt/error.hpp"
#include "opt/trainer.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;
constexpr int kCheckFailed = 3;

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<long> total_steps;
  std::string out = "run";
  bool quiet = false;
};

void add_train_flags(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--config", a.config, "run config file (INI); defaults apply when omitted");
  cmd->add_option("--seed", a.seed, "overrides [train] seed");
  cmd->add_option("--total-steps", a.total_steps, "overrides [train] total_steps");
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  cmd->add_flag("--quiet", a.quiet, "do not echo metrics rows");
}

opt::RunConfig load_run_config(const TrainArgs& a) {
  opt::RunConfig cfg;
  if (!a.config.empty()) cfg = opt::load_config(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.total_steps) cfg.train.total_steps = *a.total_steps;
  return cfg;
}

int run_training(opt::RunConfig cfg, const TrainArgs& a) {
  cfg.validate();
  opt::Trainer trainer(std::move(cfg));
  trainer.run(a.out, a.quiet ? nullptr : &std::cout);
  std::cerr << "wrote " << (std::filesystem::path(a.out) / "metrics.csv").string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prototype-attention multi-agent value learning on a predator-prey grid"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train a model and write metrics.csv, config.ini and checkpoints");
  add_train_flags(train, train_args);

  std::string eval_checkpoint, eval_split = "train";
  int eval_episodes = 32;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint; prints JSON");
  eval->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
  eval->add_option("--split", eval_split, "train | unseen_capability | unseen_scale | unseen_both")->capture_default_str();
  eval->add_option("--episodes", eval_episodes, "number of episodes")->capture_default_str();
  eval->add_option("--seed", eval_seed, "evaluation seed")->capture_default_str();

  TrainArgs ablate_args;
  std::string variant;
  auto* ablate = app.add_subcommand("ablate", "train an ablation variant");
  ablate->add_option("--variant", variant, "no-sparse | no-cd | no-cmi | n-prototypes=K")->required();
  add_train_flags(ablate, ablate_args);

  std::string suite;
  auto* check = app.add_subcommand("check", "run a verification suite");
  check->add_option("--suite", suite, "sparsemax | gradients | cmi | mixer | all")->required();

  std::string dump_checkpoint, dump_out, dump_split = "train";
  int dump_episodes = 1;
  std::uint64_t dump_seed = 0;
  auto* dump = app.add_subcommand("dump-prototypes", "write prototype attention matrices of greedy episodes as JSON");
  dump->add_option("--checkpoint", dump_checkpoint, "checkpoint file")->required();
  dump->add_option("--episodes", dump_episodes, "number of episodes")->capture_default_str();
  dump->add_option("--out", dump_out, "output JSON file")->required();
  dump->add_option("--split", dump_split, "task split")->capture_default_str();
  dump->add_option("--seed", dump_seed, "episode seed")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  try {
    if (*train) return run_training(load_run_config(train_args), train_args);

    if (*ablate) {
      opt::RunConfig cfg = load_run_config(ablate_args);
      opt::apply_variant(cfg, variant);
      return run_training(std::move(cfg), ablate_args);
    }

    if (*eval) {
      const auto split = opt::env::parse_split(eval_split);
      if (!split) throw opt::config_error("unknown split '" + eval_split + "'");
      if (eval_episodes < 1) throw opt::config_error("--episodes must be at least 1");
      const opt::Checkpoint ck = opt::load_checkpoint(eval_checkpoint);
      const opt::EvalResult r = opt::evaluate(ck.model, ck.config.env, *split, eval_episodes, eval_seed);
      const nlohmann::json out = {{"win_rate", r.win_rate},
                                  {"mean_return", r.mean_return},
                                  {"split", opt::env::to_string(r.split)},
                                  {"episodes", r.episodes}};
      std::cout << out.dump() << "\n";
      return kOk;
    }

    if (*check) {
      std::vector<std::string> names = suite == "all" ? opt::checks::suite_names() : std::vector<std::string>{suite};
      bool all_passed = true;
      for (const auto& name : names) {
        const opt::checks::SuiteReport report = opt::checks::run_suite(name);
        for (const auto& c : report.results) {
          std::cout << (c.passed ? "PASS" : "FAIL") << "  " << report.suite << ": " << c.name << "  [" << c.detail
                    << "]\n";
        }
        all_passed = all_passed && report.passed();
      }
      return all_passed ? kOk : kCheckFailed;
    }

    if (*dump) {
      const auto split = opt::env::parse_split(dump_split);
      if (!split) throw opt::config_error("unknown split '" + dump_split + "'");
      if (dump_episodes < 1) throw opt::config_error("--episodes must be at least 1");
      const opt::Checkpoint ck = opt::load_checkpoint(dump_checkpoint);
      opt::SparsityCount count;
      const nlohmann::json doc = opt::dump_prototypes(ck.model, ck.config.env, {*split, dump_episodes, dump_seed}, &count);
      std::ofstream out(dump_out, std::ios::trunc);
      if (!out) throw opt::io_error("cannot write " + dump_out);
      out << doc.dump() << "\n";
      if (!out) throw opt::io_error("failed writing " + dump_out);
      std::cerr << "wrote " << dump_out << ": " << count.zeros << " exact zeros in " << count.entries
                << " attention entries\n";
      return kOk;
    }
  } catch (const opt::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const opt::invalid_input& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
