// Command line front end: train-teacher, distill, ablate, report.
// Exit codes: 0 success, 1 usage or config error, 2 runtime failure.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tsd/experiment.hpp"

namespace {

struct Options {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string axis;
  bool quiet = false;
};

tsd::ExperimentConfig effective_config(const Options& o) {
  if (o.config_path.empty()) throw tsd::ConfigError("--config is required");
  auto c = tsd::load_config(o.config_path);
  if (!o.out.empty()) c.output_dir = o.out;
  if (o.seed) c.seed = *o.seed;
  c.validate();
  return c;
}

void add_common(CLI::App* cmd, Options& o, bool needs_config) {
  auto* cfg = cmd->add_option("--config", o.config_path, "Experiment config (JSON)");
  if (needs_config) cfg->required();
  cmd->add_option("--out", o.out, "Output directory (overrides output_dir)");
  cmd->add_option("--seed", o.seed, "Global seed (overrides seed)");
  cmd->add_option("--jobs", o.jobs, "Parallel independent runs")->check(CLI::PositiveNumber);
  cmd->add_flag("-q,--quiet", o.quiet, "No progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal saliency distillation experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", tsd::kVersion);
  Options o;
  auto* train = app.add_subcommand("train-teacher", "Train teachers and keep the best seed per dataset");
  auto* distill = app.add_subcommand("distill", "Train students against the saved teachers");
  auto* ablate = app.add_subcommand("ablate", "Sweep one distillation setting");
  auto* report = app.add_subcommand("report", "Render tables from a completed run directory");
  add_common(train, o, true);
  add_common(distill, o, true);
  add_common(ablate, o, true);
  ablate->add_option("--axis", o.axis, "tau, width, num_subsequences, variant, train_fraction or fgsm_epsilon");
  add_common(report, o, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const tsd::Progress progress = [&](const std::string& msg) {
    if (!o.quiet) std::cerr << msg << '\n';
  };
  try {
    if (train->parsed()) {
      tsd::cmd_train_teacher(effective_config(o), progress);
    } else if (distill->parsed()) {
      tsd::cmd_distill(effective_config(o), o.jobs, progress);
    } else if (ablate->parsed()) {
      tsd::cmd_ablate(effective_config(o), o.axis, o.jobs, progress);
    } else if (report->parsed()) {
      std::string dir = o.out;
      if (dir.empty() && !o.config_path.empty()) dir = effective_config(o).output_dir;
      if (dir.empty()) throw tsd::ConfigError("report needs --out <run dir> or --config");
      for (const auto& f : tsd::cmd_report(dir)) std::cout << f << '\n';
    }
  } catch (const tsd::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const tsd::IncompleteRunError& e) {
    std::cerr << "error: " << e.what() << "; missing:\n";
    for (const auto& m : e.missing()) std::cerr << "  " << m << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
