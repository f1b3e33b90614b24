#pragma once

// Run description shared by the transport engine and the command line tool.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ept/data.hpp"
#include "ept/divergences.hpp"
#include "ept/ratio_fit.hpp"

namespace ept {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ObjectiveConfig {
  ObjectiveKind variant = ObjectiveKind::Lsdr;
  double alpha = 0.0;
  std::size_t steps = 5;  // T: optimizer steps per transport iteration
  std::size_t batch = 1000;
  double lr = 5e-4;
  bool warm_start = true;
};

struct TransportConfig {
  double step_size = 0.005;
  std::size_t iterations = 2000;  // K (EPTv1)
  // EPTv2 is selected by outer_loops > 0.
  std::size_t outer_loops = 0;
  std::size_t inner_loops = 20;
  std::size_t latent_dim = 0;
  std::vector<std::size_t> generator_widths{64, 64, 64};
  std::size_t generator_epochs = 10;
  std::size_t generator_batch = 100;
  double generator_lr = 1e-3;
};

struct RunConfig {
  DatasetSpec dataset{"8gaussians", 5000, 0, std::nullopt};
  std::size_t particles = 5000;  // reference pool size
  std::string method = "ept";    // ept | mmd-flow | svgd
  std::string divergence = "chi2";
  ObjectiveConfig objective;
  TransportConfig transport;
  std::vector<std::size_t> net_widths{64, 64, 64};
  std::uint64_t seed = 0;
  std::string output_dir = "runs/ept";
  std::size_t snapshot_every = 100;
  double kernel_bandwidth = 0;   // kernel baselines; 0 selects the median heuristic
  std::size_t metric_every = 0;  // 0: metrics on the first and final ensembles only
  std::size_t metric_samples = 2000;
  bool record_map = false;       // keep per-step network parameters for replay
  std::vector<std::string> compare;  // method list for side-by-side runs

  bool latent() const noexcept { return transport.outer_loops > 0; }

  FitObjective fit_objective() const { return {objective.variant, objective.alpha}; }

  void validate() const {
    const auto& names = dataset_names();
    if (std::find(names.begin(), names.end(), dataset.name) == names.end())
      throw ConfigError("unknown dataset '" + dataset.name + "'");
    if (dataset.n == 0) throw ConfigError("dataset.n must be >= 1");
    if (dataset.noise && !(*dataset.noise >= 0)) throw ConfigError("dataset.noise must be >= 0");
    if (particles == 0) throw ConfigError("reference.n must be >= 1");
    if (method != "ept" && method != "mmd-flow" && method != "svgd")
      throw ConfigError("unknown method '" + method + "' (expected ept, mmd-flow or svgd)");
    try {
      (void)make_energy(divergence);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    const bool diff = divergence == "l2";
    if (method == "ept" && diff != (objective.variant == ObjectiveKind::DensityDiff))
      throw ConfigError("the l2 divergence pairs with the density-diff objective and only with it");
    if (!(objective.alpha >= 0) || !std::isfinite(objective.alpha)) throw ConfigError("objective.alpha must be >= 0");
    if (objective.steps == 0) throw ConfigError("objective.T must be >= 1");
    if (objective.batch == 0) throw ConfigError("objective.batch must be >= 1");
    if (!(objective.lr >= 0) || !std::isfinite(objective.lr)) throw ConfigError("objective.lr must be >= 0");
    if (method == "ept" && (objective.batch > dataset.n || objective.batch > particles))
      throw ConfigError("objective.batch exceeds the data or particle count");
    if (!(transport.step_size > 0) || !std::isfinite(transport.step_size))
      throw ConfigError("transport.s must be > 0");
    if (latent()) {
      if (method != "ept") throw ConfigError("outer loops are only defined for the ept method");
      if (transport.inner_loops == 0) throw ConfigError("transport.IL must be >= 1");
      if (transport.latent_dim == 0) throw ConfigError("transport.latent_dim must be >= 1");
      if (transport.generator_epochs == 0 || transport.generator_batch == 0)
        throw ConfigError("generator epochs and batch must be >= 1");
      if (transport.generator_batch > particles) throw ConfigError("generator batch exceeds the particle count");
      for (std::size_t w : transport.generator_widths)
        if (w == 0) throw ConfigError("generator widths must be positive");
    } else if (transport.iterations == 0) {
      throw ConfigError("transport.K must be >= 1");
    }
    if (net_widths.empty()) throw ConfigError("net.widths must list at least one hidden layer");
    for (std::size_t w : net_widths)
      if (w == 0) throw ConfigError("net.widths must be positive");
    if (snapshot_every == 0) throw ConfigError("snapshot_every must be >= 1");
    if (kernel_bandwidth < 0) throw ConfigError("kernel_bandwidth must be >= 0");
    if (metric_samples < 2) throw ConfigError("metric_samples must be >= 2");
    if (method == "svgd" && !analytic_target(dataset.name))
      throw ConfigError("svgd needs an analytic target score; '" + dataset.name + "' has none");
    if (method == "svgd" && dataset.noise) throw ConfigError("svgd uses the exact mixture; drop dataset.noise");
  }
};

}  // namespace ept
