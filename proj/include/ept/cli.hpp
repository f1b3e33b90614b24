#pragma once

// Subcommands behind the `ept` executable. Each returns a process exit code:
// 0 success, 1 usage or I/O failure, 2 invalid config, 3 numeric divergence.

#include <cstring>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ept/io.hpp"
#include "ept/metrics.hpp"
#include "ept/svg.hpp"
#include "ept/transport.hpp"

namespace ept::cli {

namespace fs = std::filesystem;
using io::json;

enum ExitCode : int { kOk = 0, kFailure = 1, kBadConfig = 2, kDiverged = 3 };

inline std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double v : t.storage()) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xFF;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Writes everything a finished (or failed) run leaves behind.
inline void write_run_outputs(const fs::path& out, const RunRecord& rec, std::uint64_t target_hash) {
  io::write_file(out / "config.json", io::config_to_json(rec.config).dump(2) + "\n");
  io::write_file(out / "diagnostics.csv", io::diagnostics_csv(diagnostics_series(rec)));
  if (rec.checkpoint) io::save_checkpoint(out / "checkpoint.json", rec.config, rec.method, *rec.checkpoint);
  if (rec.final.points.rows() > 0) io::write_file(out / "final.csv", io::particles_csv(rec.final.iteration, rec.final.points));
  json snaps = json::array();
  for (const auto& s : rec.snapshots) snaps.push_back({{"iteration", s.iteration}, {"file", "snapshots/" + io::snapshot_name(s.iteration)}});
  json fits = json::array();
  for (const auto& g : rec.generator_fits)
    fits.push_back({{"outer_loop", g.outer_loop}, {"loss_before", g.loss_before}, {"loss_after", g.loss_after}});
  json summary{{"method", rec.method},
               {"iterations", rec.final.iteration},
               {"particles", rec.final.points.rows()},
               {"target_hash", hex(target_hash)},
               {"initial_metrics", rec.initial_metrics},
               {"final_metrics", rec.final_metrics},
               {"snapshots", snaps},
               {"generator_fits", fits},
               {"failed", rec.failed}};
  if (rec.failed) summary["failure"] = rec.failure;
  io::write_file(out / "run.json", summary.dump(2) + "\n");
}

struct TrainOutcome {
  int code = kOk;
  std::optional<RunRecord> record;
  std::uint64_t target_hash = 0;
};

inline TrainOutcome train(const RunConfig& cfg, const fs::path& out, std::ostream& log,
                          std::optional<Checkpoint> resume = std::nullopt) {
  TrainOutcome res;
  const Tensor target = target_sample(cfg);
  res.target_hash = tensor_hash(target);
  fs::create_directories(out / "snapshots");
  RunOptions opts;
  opts.resume = std::move(resume);
  opts.on_snapshot = [&](const Snapshot& s) {
    io::write_file(out / "snapshots" / io::snapshot_name(s.iteration), io::particles_csv(s.iteration, s.points));
  };
  try {
    res.record = run(cfg, target, std::move(opts));
  } catch (const TransportFailure& e) {
    log << "error: numeric divergence: " << e.what() << "\n";
    write_run_outputs(out, e.record, res.target_hash);
    res.record = e.record;
    res.code = kDiverged;
    return res;
  }
  write_run_outputs(out, *res.record, res.target_hash);
  return res;
}

inline int cmd_train(const fs::path& config_path, const std::optional<fs::path>& out_override,
                     std::optional<std::uint64_t> seed, const std::optional<fs::path>& resume_path,
                     std::ostream& log = std::cerr) {
  RunConfig cfg;
  std::optional<Checkpoint> resume;
  try {
    cfg = io::load_config(config_path, seed);
    if (resume_path) {
      const io::CheckpointFile cp = io::load_checkpoint(*resume_path);
      resume = cp.state;
    }
  } catch (const ConfigError& e) {
    log << "error: invalid config: " << e.what() << "\n";
    return kBadConfig;
  } catch (const io::FormatError& e) {
    log << "error: " << e.what() << "\n";
    return kBadConfig;
  }
  const fs::path out = out_override ? *out_override : fs::path(cfg.output_dir);
  try {
    const TrainOutcome r = train(cfg, out, log, std::move(resume));
    if (r.code == kOk) {
      log << "trained " << r.record->method << " for " << r.record->final.iteration << " iterations; mmd2 "
          << io::format_double(r.record->initial_metrics.at("mmd2")) << " -> "
          << io::format_double(r.record->final_metrics.at("mmd2")) << "; outputs in " << out.string() << "\n";
    }
    return r.code;
  } catch (const ConfigError& e) {
    log << "error: invalid config: " << e.what() << "\n";
    return kBadConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline fs::path particle_file(const fs::path& run_dir, std::optional<std::size_t> snapshot) {
  const fs::path p = snapshot ? run_dir / "snapshots" / io::snapshot_name(*snapshot) : run_dir / "final.csv";
  if (!fs::exists(p)) throw io::FormatError("missing snapshot " + p.string());
  return p;
}

// Metric of a run's particles against a fresh draw from its target.
inline MetricReport evaluate_run(const fs::path& run_dir, const std::string& metric,
                                 std::optional<std::size_t> snapshot = std::nullopt) {
  const RunConfig cfg = io::load_config(run_dir / "config.json");
  const Tensor particles = io::load_particles(particle_file(run_dir, snapshot)).points;
  DatasetSpec spec = cfg.dataset;
  spec.n = particles.rows();
  spec.seed = ept::detail::splitmix64(cfg.dataset.seed ^ 0x6576616CULL);
  const Tensor target = sample(spec);
  MetricReport rep{metric, 0, particles.rows(), target.rows(), {}};
  if (metric == "mmd2") {
    const double h = median_heuristic(target);
    rep.params["bandwidth"] = h;
    rep.value = mmd_squared(particles, target, RbfKernel(h));
  } else if (metric == "w2") {
    rep.value = wasserstein2_exact(particles, target);
  } else {
    throw std::invalid_argument("unknown metric '" + metric + "' (expected mmd2 or w2)");
  }
  return rep;
}

inline int cmd_evaluate(const fs::path& run_dir, const std::string& metric, std::optional<std::size_t> snapshot,
                        std::ostream& out = std::cout, std::ostream& log = std::cerr) {
  try {
    const MetricReport rep = evaluate_run(run_dir, metric, snapshot);
    const json j = io::metric_report_to_json(rep);
    io::write_file(run_dir / ("metric_" + metric + ".json"), j.dump(2) + "\n");
    out << j.dump() << "\n";
    return kOk;
  } catch (const ConfigError& e) {
    log << "error: invalid config: " << e.what() << "\n";
    return kBadConfig;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline constexpr std::size_t kGrid = 100;

// Grid over the box; point (r, c) has x from column c and y from row r.
inline Tensor grid_points(const svg::Box& b) {
  Tensor g(Shape{kGrid * kGrid, 2});
  for (std::size_t r = 0; r < kGrid; ++r)
    for (std::size_t c = 0; c < kGrid; ++c) {
      g(r * kGrid + c, 0) = b.x0 + (b.x1 - b.x0) * static_cast<double>(c) / (kGrid - 1);
      g(r * kGrid + c, 1) = b.y0 + (b.y1 - b.y0) * static_cast<double>(r) / (kGrid - 1);
    }
  return g;
}

inline std::string grid_csv(const Tensor& pts, const Tensor& values) {
  std::string out = "x,y,value\n";
  for (std::size_t i = 0; i < pts.rows(); ++i)
    out += io::format_double(pts(i, 0)) + "," + io::format_double(pts(i, 1)) + "," + io::format_double(values[i]) + "\n";
  return out;
}

inline void plot_run(const fs::path& run_dir, const std::string& kind, std::optional<std::size_t> snapshot) {
  const fs::path svg_path = run_dir / ("plot_" + kind + ".svg");
  const fs::path csv_path = run_dir / ("plot_" + kind + ".csv");
  if (kind == "diagnostics") {
    const DiagnosticsTable t = io::parse_diagnostics_csv(io::read_file(run_dir / "diagnostics.csv"));
    const auto it = t.column("iter");
    std::vector<svg::Series> series{{"fit_loss", it, t.column("fit_loss")}, {"grad_norm", it, t.column("grad_norm")}};
    DiagnosticsTable sub{{"iter", "fit_loss", "grad_norm"}, {}};
    for (std::size_t i = 0; i < it.size(); ++i) sub.rows.push_back({it[i], series[0].y[i], series[1].y[i]});
    std::string csv = "iter,fit_loss,grad_norm\n";
    for (const auto& r : sub.rows)
      csv += std::to_string(static_cast<long long>(r[0])) + "," + io::format_double(r[1]) + "," + io::format_double(r[2]) + "\n";
    io::write_file(csv_path, csv);
    io::write_file(svg_path, svg::lines(series, "diagnostics"));
    return;
  }
  const io::ParticleFile pf = io::load_particles(particle_file(run_dir, snapshot));
  if (pf.points.cols() != 2) throw ShapeError("plots need 2D particles");
  const svg::Box box = svg::bounding_box(pf.points);
  if (kind == "scatter") {
    io::write_file(csv_path, io::particles_csv(pf.iteration, pf.points));
    io::write_file(svg_path, svg::scatter(pf.points, "particles, iteration " + std::to_string(pf.iteration), box));
    return;
  }
  Tensor values;
  const Tensor grid = grid_points(box);
  if (kind == "kde-heatmap") {
    values = kde_density(pf.points, grid);
  } else if (kind == "surface-ratio") {
    if (!fs::exists(run_dir / "checkpoint.json")) throw io::FormatError("surface-ratio needs checkpoint.json");
    const io::CheckpointFile cp = io::load_checkpoint(run_dir / "checkpoint.json");
    if (cp.state.net_params.empty()) throw io::FormatError("checkpoint holds no ratio network");
    const Mlp net = io::net_from_params(cp.state.net_widths, cp.state.net_params);
    values = evaluate_field(NetField{&net, cp.config.fit_objective().link()}, grid).values;
  } else {
    throw std::invalid_argument("unknown plot kind '" + kind + "'");
  }
  io::write_file(csv_path, grid_csv(grid, values));
  io::write_file(svg_path, svg::heatmap(values.reshaped(Shape{kGrid, kGrid}), kind));
}

inline int cmd_plot(const fs::path& run_dir, const std::string& kind, std::optional<std::size_t> snapshot,
                    std::ostream& log = std::cerr) {
  try {
    plot_run(run_dir, kind, snapshot);
    log << "wrote " << (run_dir / ("plot_" + kind + ".svg")).string() << "\n";
    return kOk;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kFailure;
  }
}

// "ept" (config divergence), "ept-<divergence>", "mmd-flow" or "svgd".
inline RunConfig config_for_method(RunConfig cfg, const std::string& method) {
  if (method == "mmd-flow" || method == "svgd") {
    cfg.method = method;
  } else if (method == "ept") {
    cfg.method = "ept";
  } else if (method.rfind("ept-", 0) == 0) {
    cfg.method = "ept";
    cfg.divergence = method.substr(4);
    if (cfg.divergence == "l2") cfg.objective.variant = ObjectiveKind::DensityDiff;
    else if (cfg.objective.variant == ObjectiveKind::DensityDiff) cfg.objective.variant = ObjectiveKind::Lsdr;
  } else {
    throw ConfigError("unknown method '" + method + "' in compare list");
  }
  cfg.compare.clear();
  cfg.validate();
  return cfg;
}

inline int cmd_compare(const fs::path& config_path, const std::optional<fs::path>& out_override,
                       std::optional<std::uint64_t> seed, std::ostream& log = std::cerr) {
  RunConfig base;
  std::vector<RunConfig> runs;
  try {
    base = io::load_config(config_path, seed);
    if (base.compare.size() < 2) throw ConfigError("compare needs at least two methods");
    for (const auto& m : base.compare) runs.push_back(config_for_method(base, m));
  } catch (const ConfigError& e) {
    log << "error: invalid config: " << e.what() << "\n";
    return kBadConfig;
  }
  const fs::path out = out_override ? *out_override : fs::path(base.output_dir);
  std::string table = "method,status,initial_mmd2,final_mmd2,target_hash\n";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::string& name = base.compare[i];
    std::string status = "ok", init = "nan", fin = "nan", hash;
    try {
      std::ostringstream sublog;
      const TrainOutcome r = train(runs[i], out / name, sublog);
      hash = hex(r.target_hash);
      if (r.code != kOk) status = "diverged";
      if (r.record) {
        if (r.record->initial_metrics.count("mmd2")) init = io::format_double(r.record->initial_metrics.at("mmd2"));
        if (r.record->final_metrics.count("mmd2")) fin = io::format_double(r.record->final_metrics.at("mmd2"));
      }
    } catch (const std::exception& e) {
      status = "error";
      log << "error: " << name << ": " << e.what() << "\n";
    }
    table += name + "," + status + "," + init + "," + fin + "," + hash + "\n";
  }
  io::write_file(out / "compare.csv", table);
  log << table;
  return kOk;
}

// Reference hyperparameter sets as runnable configs.
inline json presets() {
  RunConfig a2;  // 8gaussians, particles updated directly
  a2.dataset = {"8gaussians", 50000, 0, std::nullopt};
  a2.particles = 50000;
  a2.objective = {ObjectiveKind::Lsdr, 0.5, 5, 1000, 5e-4, true};
  a2.transport.step_size = 0.005;
  a2.transport.iterations = 20000;
  a2.output_dir = "runs/gaussians-particles";

  RunConfig a4 = a2;  // moons through a latent generator
  a4.dataset = {"moons", 1000, 0, std::nullopt};
  a4.particles = 1000;
  a4.objective = {ObjectiveKind::Lsdr, 0.0, 1, 1000, 5e-4, true};
  a4.transport.step_size = 0.5;
  a4.transport.outer_loops = 50;
  a4.transport.inner_loops = 20;
  a4.transport.latent_dim = 128;
  a4.output_dir = "runs/moons-latent";

  RunConfig a5 = a2;  // moons, particles updated directly
  a5.dataset = {"moons", 4000, 0, std::nullopt};
  a5.particles = 4000;
  a5.objective = {ObjectiveKind::Lsdr, 0.0, 5, 1000, 5e-4, true};
  a5.transport.step_size = 0.5;
  a5.transport.iterations = 2000;
  a5.output_dir = "runs/moons-direct";

  return {{"gaussians-particles", io::config_to_json(a2)}, {"moons-latent", io::config_to_json(a4)}, {"moons-direct", io::config_to_json(a5)}};
}

inline int cmd_presets(const std::optional<std::string>& name, std::ostream& out = std::cout,
                       std::ostream& log = std::cerr) {
  const json all = presets();
  if (!name) {
    out << all.dump(2) << "\n";
    return kOk;
  }
  if (!all.contains(*name)) {
    log << "error: unknown preset '" << *name << "' (expected gaussians-particles, moons-latent or moons-direct)\n";
    return kFailure;
  }
  out << all[*name].dump(2) << "\n";
  return kOk;
}

}  // namespace ept::cli
