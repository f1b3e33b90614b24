#include <CLI11.hpp>

#include "ept/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Euler particle transport: fit density ratios and move particles along the estimated flow"};
  app.require_subcommand(1);

  std::string config, out, run_dir, metric = "mmd2", kind = "scatter", resume, preset;
  std::uint64_t seed = 0;
  std::size_t snapshot = 0;

  auto* train = app.add_subcommand("train", "Run a transport job from a JSON config");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--out", out, "Output directory (overrides the config)");
  train->add_option("--seed", seed, "Seed (overrides the config)");
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* evaluate = app.add_subcommand("evaluate", "Score a run against fresh target samples");
  evaluate->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  evaluate->add_option("--metric", metric, "mmd2 or w2")->check(CLI::IsMember({"mmd2", "w2"}));
  evaluate->add_option("--snapshot", snapshot, "Iteration of a stored snapshot (default: final)");

  auto* plot = app.add_subcommand("plot", "Render a figure from a run directory");
  plot->add_option("--run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--kind", kind, "scatter, kde-heatmap, surface-ratio or diagnostics")
      ->check(CLI::IsMember({"scatter", "kde-heatmap", "surface-ratio", "diagnostics"}));
  plot->add_option("--snapshot", snapshot, "Iteration of a stored snapshot (default: final)");

  auto* compare = app.add_subcommand("compare", "Run every method listed under \"compare\" on one target");
  compare->add_option("--config", config, "Config file")->required();
  compare->add_option("--out", out, "Output directory (overrides the config)");
  compare->add_option("--seed", seed, "Seed (overrides the config)");

  auto* presets = app.add_subcommand("presets", "Print the reference hyperparameter sets as configs");
  presets->add_option("name", preset, "gaussians-particles, moons-latent or moons-direct");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : ept::cli::kFailure;
  }

  auto opt_path = [](const std::string& s) -> std::optional<std::filesystem::path> {
    if (s.empty()) return std::nullopt;
    return s;
  };
  auto opt_seed = [&](CLI::App* sub) -> std::optional<std::uint64_t> {
    if (sub->count("--seed") == 0) return std::nullopt;
    return seed;
  };
  auto opt_snapshot = [&](CLI::App* sub) -> std::optional<std::size_t> {
    if (sub->count("--snapshot") == 0) return std::nullopt;
    return snapshot;
  };

  if (*train) return ept::cli::cmd_train(config, opt_path(out), opt_seed(train), opt_path(resume));
  if (*evaluate) return ept::cli::cmd_evaluate(run_dir, metric, opt_snapshot(evaluate));
  if (*plot) return ept::cli::cmd_plot(run_dir, kind, opt_snapshot(plot));
  if (*compare) return ept::cli::cmd_compare(config, opt_path(out), opt_seed(compare));
  return ept::cli::cmd_presets(preset.empty() ? std::nullopt : std::optional<std::string>(preset));
}
