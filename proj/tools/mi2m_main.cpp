// mi2m command line: synth | pretrain | finetune | eval.
#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "mi2m/config.hpp"
#include "mi2m/pipeline.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string dataset;
  std::string out;
  long long seed = -1;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "run configuration file");
  cmd->add_option("--dataset", args.dataset, "dataset manifest path (dataset.path)");
  cmd->add_option("--out", args.out, "output directory (output.dir)");
  cmd->add_option("--seed", args.seed, "global seed");
  cmd->add_option("overrides", args.overrides, "dotted-key overrides, key=value");
}

mi2m::RunConfig build_config(const CommonArgs& args) {
  mi2m::RunConfig cfg;
  if (!args.config_path.empty()) cfg = mi2m::load_config_file(args.config_path);
  if (!args.dataset.empty()) cfg.dataset_path = args.dataset;
  if (!args.out.empty()) cfg.output_dir = args.out;
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  for (const std::string& kv : args.overrides) mi2m::apply_override(cfg, kv);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MI2M: masked WiFi-vision modeling pipeline"};
  app.require_subcommand(1);

  CommonArgs synth_args, pre_args, ft_args, eval_args;
  long long synth_activities = -1, synth_subjects = -1;
  bool resume = false;
  double budget_seconds = -1.0, gamma = -1.0;
  std::string task, condition, seeds, pretrain_data, finetune_data;

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  add_common(synth, synth_args);
  synth->add_option("--activities", synth_activities, "number of activity classes");
  synth->add_option("--subjects", synth_subjects, "number of subjects");

  CLI::App* pretrain = app.add_subcommand("pretrain", "train tokenizers and the encoder");
  add_common(pretrain, pre_args);
  pretrain->add_flag("--resume", resume, "resume from the latest encoder checkpoint");

  CLI::App* finetune = app.add_subcommand("finetune", "few-shot train the GRU head");
  add_common(finetune, ft_args);
  finetune->add_option("--budget-seconds", budget_seconds, "seconds of data per class");
  finetune->add_option("--task", task, "activity | joint");

  CLI::App* eval = app.add_subcommand("eval", "evaluate or run a full protocol");
  add_common(eval, eval_args);
  eval->add_option("--condition", condition, "normal | dark");
  eval->add_option("--gamma", gamma, "darkening gamma");
  eval->add_option("--seeds", seeds, "comma separated protocol seeds");
  eval->add_option("--pretrain-data", pretrain_data, "protocol pretrain manifest");
  eval->add_option("--finetune-data", finetune_data, "protocol finetune manifest");
  eval->add_option("--task", task, "activity | joint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (synth->parsed()) {
      mi2m::RunConfig cfg = build_config(synth_args);
      if (synth_activities > 0) cfg.synth_activities = static_cast<int>(synth_activities);
      if (synth_subjects > 0) cfg.synth_subjects = static_cast<int>(synth_subjects);
      return mi2m::cmd_synth(cfg);
    }
    if (pretrain->parsed()) {
      return mi2m::cmd_pretrain(build_config(pre_args), resume);
    }
    if (finetune->parsed()) {
      mi2m::RunConfig cfg = build_config(ft_args);
      if (budget_seconds > 0) cfg.ft_budget_seconds = budget_seconds;
      if (!task.empty()) cfg.ft_task = task;
      return mi2m::cmd_finetune(cfg);
    }
    if (eval->parsed()) {
      mi2m::RunConfig cfg = build_config(eval_args);
      if (!condition.empty()) cfg.eval_condition = condition;
      if (gamma > 0) cfg.eval_gamma = gamma;
      if (!seeds.empty()) cfg.eval_seeds = seeds;
      if (!task.empty()) cfg.ft_task = task;
      if (!pretrain_data.empty()) cfg.protocol_pretrain_data = pretrain_data;
      if (!finetune_data.empty()) cfg.protocol_finetune_data = finetune_data;
      return mi2m::cmd_eval(cfg);
    }
  } catch (const mi2m::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return static_cast<int>(mi2m::ExitCode::numeric);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(mi2m::ExitCode::data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(mi2m::ExitCode::data);
  }
  return static_cast<int>(mi2m::ExitCode::usage);
}
