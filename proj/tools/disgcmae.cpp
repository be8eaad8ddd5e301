// SPDX-License-Identifier: Apache-2.0
// Command-line front end: synth, pretrain, finetune, gtd-oracle, eval.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "disgcmae.hpp"

using namespace disgcmae;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dataset;
  std::optional<std::string> out;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("-c,--config", c.config, "experiment config JSON (defaults when omitted)");
  sub->add_option("--seed", c.seed, "override config seed");
  sub->add_option("--dataset", c.dataset, "override dataset directory");
  sub->add_option("-o,--out", c.out, "override output directory");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.dataset) cfg.dataset = *c.dataset;
  if (c.out) cfg.output_dir = *c.out;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EEG graph pre-training and topology distillation"};
  app.require_subcommand(0, 1);
  bool print_config = false;
  std::string print_from;
  app.add_flag("--print-config", print_config, "print the effective config JSON and exit");
  app.add_option("--config", print_from, "config file for --print-config");

  Common synth_c, pre_c, ft_c, eval_c;
  auto* synth = app.add_subcommand("synth", "generate a synthetic graph dataset");
  add_common(synth, synth_c);

  auto* pre = app.add_subcommand("pretrain", "joint teacher/student pre-training");
  add_common(pre, pre_c);
  PretrainOptions pre_opt;
  pre->add_option("--epochs", pre_opt.epochs, "override epoch count");
  pre->add_flag("--gcl-only", pre_opt.gcl_only, "contrastive terms only");
  pre->add_flag("--gmae-only", pre_opt.gmae_only, "reconstruction terms only");

  auto* ft = app.add_subcommand("finetune", "fine-tune the student with distillation");
  add_common(ft, ft_c);
  FinetuneOptions ft_opt;
  ft->add_option("--teacher", ft_opt.teacher, "teacher checkpoint");
  ft->add_option("--student", ft_opt.student, "student checkpoint (random init when omitted)");
  ft->add_option("--mode", ft_opt.mode, "tuned | frozen");
  ft->add_option("--loss", ft_opt.loss, "ce | ce+kd | ce+gtd | union");
  ft->add_option("--seeds", ft_opt.seeds, "number of seeds (seed, seed+1, ...)");

  auto* oracle = app.add_subcommand("gtd-oracle", "check pair selection and GTD loss against brute force");
  OracleOptions or_opt;
  oracle->add_option("--seeds", or_opt.seeds, "random instances")->capture_default_str();
  oracle->add_option("--max-nodes", or_opt.max_nodes, "largest HD graph (<= 14)")->capture_default_str();
  oracle->add_flag("--inject-fault", or_opt.inject_fault, "use a selector with a broken two-hop scan");

  auto* ev = app.add_subcommand("eval", "evaluate a student checkpoint");
  add_common(ev, eval_c);
  EvalOptions ev_opt;
  ev->add_option("--student", ev_opt.student, "student checkpoint")->required();
  ev->add_option("data", ev_opt.dataset, "dataset directory (defaults to the config dataset)");
  ev->add_option("--split", ev_opt.split, "test | all")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  if (print_config) {
    return run_command(
        [&] {
          const auto cfg = print_from.empty() ? ExperimentConfig{} : load_experiment(print_from);
          std::cout << to_json(cfg).dump(2) << "\n";
          return int{kExitOk};
        },
        std::cerr);
  }

  auto with_config = [](const Common& c, const std::function<int(const ExperimentConfig&)>& f) {
    ExperimentConfig cfg;
    const int rc = run_command(
        [&] {
          cfg = resolve(c);
          return int{kExitOk};
        },
        std::cerr);
    return rc != kExitOk ? rc : f(cfg);
  };

  if (synth->parsed())
    return with_config(synth_c, [](const ExperimentConfig& cfg) { return cmd_synth(cfg, std::cout, std::cerr); });
  if (pre->parsed())
    return with_config(pre_c, [&](const ExperimentConfig& cfg) { return cmd_pretrain(cfg, pre_opt, std::cout, std::cerr); });
  if (ft->parsed())
    return with_config(ft_c, [&](const ExperimentConfig& cfg) { return cmd_finetune(cfg, ft_opt, std::cout, std::cerr); });
  if (oracle->parsed()) return cmd_gtd_oracle(or_opt, std::cout, std::cerr);
  if (ev->parsed())
    return with_config(eval_c, [&](const ExperimentConfig& cfg) { return cmd_eval(cfg, ev_opt, std::cout, std::cerr); });

  std::cout << app.help();
  return kExitOk;
}
