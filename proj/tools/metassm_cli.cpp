#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "metassm/experiment.hpp"

namespace {

constexpr int kConfigExit = 2;
constexpr int kNumericalExit = 3;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned neural state-space models for MPC"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::string algorithm = "imaml";
  std::optional<int> resume;

  auto add_common = [&](CLI::App* cmd, bool with_alg) {
    cmd->add_option("--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--out", out_dir, "output directory (defaults to out_dir in the config)");
    if (with_alg) {
      cmd->add_option("--algorithm", algorithm, "imaml, maml or supervised")
          ->check(CLI::IsMember({"imaml", "maml", "supervised"}));
    }
  };

  auto* make_source = app.add_subcommand("make-source", "generate source and target datasets");
  add_common(make_source, false);
  auto* meta_train = app.add_subcommand("meta-train", "meta-train an initialization");
  add_common(meta_train, true);
  meta_train->add_option("--resume", resume, "resume from a saved outer iteration");
  auto* adapt = app.add_subcommand("adapt", "adapt to the target datasets");
  add_common(adapt, true);
  auto* track = app.add_subcommand("track", "closed-loop tracking with the adapted models");
  add_common(track, true);
  auto* report = app.add_subcommand("report", "aggregate results across seeds");
  report->add_option("--out", out_dir, "run directory")->required();
  report->add_option("--config", config_path, "accepted for symmetry; unused");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (report->parsed()) {
      std::cout << metassm::cmd_report(out_dir);
      return 0;
    }
    const metassm::ExperimentConfig cfg = metassm::load_config(config_path);
    const std::filesystem::path out = out_dir.empty() ? cfg.out_dir : out_dir;
    const metassm::Algorithm alg = metassm::algorithm_from_string(algorithm);
    if (make_source->parsed()) {
      metassm::cmd_make_source(cfg, seed, out);
    } else if (meta_train->parsed()) {
      metassm::cmd_meta_train(cfg, seed, out, alg, resume);
    } else if (adapt->parsed()) {
      metassm::cmd_adapt(cfg, seed, out, alg);
    } else if (track->parsed()) {
      metassm::cmd_track(cfg, seed, out, alg);
    }
  } catch (const metassm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  } catch (const metassm::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kNumericalExit;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigExit;
  }
  return 0;
}
