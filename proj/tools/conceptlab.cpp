#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "conceptlab/experiment.hpp"
#include "conceptlab/io.hpp"

using conceptlab::experiment::ExperimentConfig;
using conceptlab::experiment::RunOptions;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset_name;
  std::string profile = "desk";
  int seeds = 0;
  std::string out_dir;
  bool force = false;
  int jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "TOML experiment config");
  cmd->add_option("--preset", args.preset_name,
                  "built-in preset (fig3|fig4|fig5|fig6|fig8|fig10b|appd5|appd6)");
  cmd->add_option("--profile", args.profile, "scale profile: desk|paper")
      ->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--seeds", args.seeds, "use seeds 1..N");
  cmd->add_option("--out", args.out_dir, "output run directory");
  cmd->add_flag("--force", args.force, "re-run a completed stage");
  cmd->add_option("--jobs", args.jobs, "parallel jobs for independent work items");
}

ExperimentConfig resolve(const CommonArgs& args, const std::string& kind) {
  if (args.config_path.empty() == args.preset_name.empty())
    throw CLI::ValidationError("exactly one of --config or --preset is required");
  ExperimentConfig cfg;
  if (!args.preset_name.empty()) {
    cfg = conceptlab::experiment::preset(args.preset_name, args.profile);
  } else {
    cfg = ExperimentConfig::from_file(args.config_path);
  }
  cfg.kind = kind;
  if (args.seeds > 0) {
    cfg.seeds.clear();
    for (int s = 1; s <= args.seeds; ++s) cfg.seeds.push_back(s);
  }
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (const char* env_out = std::getenv("CONCEPTLAB_OUT"); env_out && *env_out)
    cfg.out_dir = std::string(env_out) + "/" + cfg.name;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"conceptlab: concept-space learning-dynamics laboratory"};
  app.require_subcommand(1);

  const std::vector<std::string> kinds{"gen-data",  "train",     "probe-train", "evaluate",
                                       "intervene", "simulate",  "report"};
  std::map<std::string, CommonArgs> args_for;
  for (const auto& kind : kinds) {
    auto* cmd = app.add_subcommand(kind, "run the '" + kind + "' pipeline stage");
    add_common(cmd, args_for[kind]);
  }

  std::string emit_preset, emit_path;
  std::string emit_profile = "desk";
  auto* preset_cmd = app.add_subcommand("preset", "write a preset config as TOML");
  preset_cmd->add_option("name", emit_preset, "preset name")->required();
  preset_cmd->add_option("--out", emit_path, "file to write (default stdout)");
  preset_cmd->add_option("--profile", emit_profile, "scale profile: desk|paper")
      ->check(CLI::IsMember({"desk", "paper"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (preset_cmd->parsed()) {
      const auto cfg = conceptlab::experiment::preset(emit_preset, emit_profile);
      const std::string text = cfg.to_toml().dump();
      if (emit_path.empty()) std::cout << text;
      else conceptlab::io::write_text_file(emit_path, text);
      return 0;
    }
    for (const auto& kind : kinds) {
      if (app.get_subcommand(kind)->parsed()) {
        const auto& args = args_for[kind];
        const ExperimentConfig cfg = resolve(args, kind);
        RunOptions opts;
        opts.force = args.force;
        opts.jobs = args.jobs;
        return conceptlab::experiment::run(cfg, opts);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
