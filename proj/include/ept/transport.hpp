#pragma once

// Forward-Euler particle transport: x <- x + s v(x), with v re-estimated from
// the current ensemble at every iteration. EPTv1 moves a fixed particle pool;
// EPTv2 regenerates the pool from a latent generator each outer loop and
// regresses the generator onto the transported particles.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ept/baselines.hpp"
#include "ept/config.hpp"
#include "ept/data.hpp"
#include "ept/divergences.hpp"
#include "ept/metrics.hpp"
#include "ept/nets.hpp"
#include "ept/ratio_fit.hpp"
#include "ept/rng.hpp"
#include "ept/tensor.hpp"

namespace ept {

struct ParticleEnsemble {
  Tensor points;  // (n x m)
  std::size_t iteration = 0;
  std::uint64_t seed = 0;
  std::string lineage = "reference";

  std::size_t size() const noexcept { return points.rows(); }
  std::size_t dim() const noexcept { return points.cols(); }
};

// x <- x + s v, row by row. A non-finite velocity row aborts before any update.
inline void euler_update(Tensor& x, const Tensor& v, double s) {
  if (!(s > 0) || !std::isfinite(s)) throw std::invalid_argument("step size must be positive and finite");
  require_same_shape(x, v, "euler_update");
  for (std::size_t i = 0; i < v.rows(); ++i)
    for (double c : v.row(i))
      if (!std::isfinite(c)) throw NonFiniteError("non-finite velocity at particle " + std::to_string(i));
  for (std::size_t k = 0; k < x.size(); ++k) x[k] += s * v[k];
}

inline ParticleEnsemble euler_step(const ParticleEnsemble& e, const VelocityField& v, double s) {
  ParticleEnsemble out = e;
  euler_update(out.points, v(e.points), s);
  ++out.iteration;
  return out;
}

// ---------------------------------------------------------------------------
// Velocity models: one estimate per iteration from (target, particles).

struct StepResult {
  Tensor velocity;
  DiagnosticsRow row;
};

class VelocityModel {
public:
  virtual ~VelocityModel() = default;
  virtual std::string name() const = 0;
  virtual Provenance provenance() const = 0;
  virtual StepResult step(const Tensor& target, const Tensor& particles) = 0;
};

class EptModel : public VelocityModel {
public:
  EptModel(EnergyFunctional energy, RatioFitter fitter, std::size_t steps, bool warm_start)
      : energy_(std::move(energy)), fitter_(std::move(fitter)), initial_(fitter_.net()), steps_(steps),
        warm_start_(warm_start) {
    if (steps_ == 0) throw std::invalid_argument("EPT needs T >= 1 fit steps per iteration");
  }

  std::string name() const override { return "ept-" + energy_.name(); }
  Provenance provenance() const override { return Provenance::Estimated; }
  const EnergyFunctional& energy() const noexcept { return energy_; }
  RatioFitter& fitter() noexcept { return fitter_; }
  const RatioFitter& fitter() const noexcept { return fitter_; }

  StepResult step(const Tensor& target, const Tensor& particles) override {
    if (!warm_start_) {
      fitter_.net() = initial_;
      fitter_.optimizer().set_accumulators({});
    }
    const FitReport report = fitter_.fit(target, particles, steps_);
    VelocitySample vs = velocity_from_energy(energy_, fitter_.field(), particles);
    StepResult out{std::move(vs.velocity), {}};
    out.row.fit_loss = report.final_loss;
    out.row.penalty = report.penalty.back();
    out.row.grad_norm = vs.mean_grad_norm;
    out.row.clamped = vs.clamped;
    return out;
  }

private:
  EnergyFunctional energy_;
  RatioFitter fitter_;
  Mlp initial_;
  std::size_t steps_;
  bool warm_start_;
};

class MmdFlowModel : public VelocityModel {
public:
  explicit MmdFlowModel(RbfKernel kernel) : kernel_(kernel) {}
  std::string name() const override { return "mmd-flow"; }
  Provenance provenance() const override { return Provenance::KernelBaseline; }
  StepResult step(const Tensor& target, const Tensor& particles) override {
    return {mmd_flow_velocity(kernel_, target, particles, particles), {}};
  }

private:
  RbfKernel kernel_;
};

class SvgdModel : public VelocityModel {
public:
  SvgdModel(RbfKernel kernel, ScoreFunction score) : kernel_(kernel), score_(std::move(score)) {}
  std::string name() const override { return "svgd"; }
  Provenance provenance() const override { return Provenance::KernelBaseline; }
  StepResult step(const Tensor&, const Tensor& particles) override {
    return {svgd_velocity(kernel_, score_, particles), {}};
  }

private:
  RbfKernel kernel_;
  ScoreFunction score_;
};

// A fixed field, independent of the ensemble.
class FieldModel : public VelocityModel {
public:
  explicit FieldModel(VelocityField field, std::string name = "oracle")
      : field_(std::move(field)), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  Provenance provenance() const override { return field_.provenance; }
  StepResult step(const Tensor&, const Tensor& particles) override { return {field_(particles), {}}; }

private:
  VelocityField field_;
  std::string name_;
};

inline VelocityField zero_field() {
  return {[](const Tensor& xs) { return Tensor(xs.shape(), 0.0); }, Provenance::Oracle};
}

// -f''(r) grad r with r the ratio of particle and target KDEs. Bandwidths are
// fixed on the first step (Silverman) unless given. Optionally records the
// plug-in chi^2 divergence of the ensemble it was handed.
class KdeRatioModel : public VelocityModel {
public:
  explicit KdeRatioModel(FDivergence div, bool track_chi2 = true,
                         std::optional<std::vector<double>> particle_bandwidth = std::nullopt,
                         std::optional<std::vector<double>> target_bandwidth = std::nullopt)
      : div_(std::move(div)), track_(track_chi2), hq_(std::move(particle_bandwidth)),
        hp_(std::move(target_bandwidth)) {}

  std::string name() const override { return "kde-ratio-" + div_.name; }
  Provenance provenance() const override { return Provenance::Oracle; }

  StepResult step(const Tensor& target, const Tensor& particles) override {
    if (!hq_) hq_ = silverman_bandwidth(particles);
    if (!hp_) hp_ = silverman_bandwidth(target);
    const KdeRatio r = kde_ratio_oracle(particles, target, particles, hq_, hp_);
    StepResult out{Tensor(particles.shape()), {}};
    out.row.clamped = r.floor_hits;
    double grad_norm = 0;
    for (std::size_t i = 0; i < particles.rows(); ++i) {
      double u = r.ratio[i];
      if (div_.needs_clamp) u = std::clamp(u, kRatioClampLow, kRatioClampHigh);
      const double w = -div_.f_double_prime(u);
      double g2 = 0;
      for (std::size_t j = 0; j < particles.cols(); ++j) {
        out.velocity(i, j) = w * r.gradient(i, j);
        g2 += r.gradient(i, j) * r.gradient(i, j);
      }
      grad_norm += std::sqrt(g2);
    }
    out.row.grad_norm = grad_norm / static_cast<double>(particles.rows());
    if (track_) out.row.metrics["chi2_plugin"] = chi2_plugin(particles, target, hq_, hp_);
    return out;
  }

  const std::optional<std::vector<double>>& particle_bandwidth() const noexcept { return hq_; }
  const std::optional<std::vector<double>>& target_bandwidth() const noexcept { return hp_; }

private:
  FDivergence div_;
  bool track_;
  std::optional<std::vector<double>> hq_, hp_;
};

// ---------------------------------------------------------------------------
// Run bookkeeping

struct Snapshot {
  std::size_t iteration = 0;
  Tensor points;
};

// Per-step ratio networks; applying them in order re-traces the run and
// pushes any other point set through the learned map.
struct ComposedMap {
  std::string divergence;
  OutputLink link = OutputLink::Identity;
  std::vector<std::size_t> widths;
  double step_size = 0;
  std::vector<std::vector<Tensor>> steps;

  Tensor apply(Tensor points, std::size_t first = 0, std::optional<std::size_t> last = std::nullopt) const {
    const EnergyFunctional energy = make_energy(divergence);
    const std::size_t end = last.value_or(steps.size());
    if (first > end || end > steps.size()) throw std::out_of_range("composed map step range");
    for (std::size_t k = first; k < end; ++k) {
      const Mlp net = network(k);
      const VelocitySample vs = velocity_from_energy(energy, NetField{&net, link}, points);
      euler_update(points, vs.velocity, step_size);
    }
    return points;
  }

  Mlp network(std::size_t k) const {
    const auto& p = steps.at(k);
    if (p.size() + 2 != 2 * widths.size()) throw ShapeError("composed map: parameter count mismatch");
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) layers.push_back({p[2 * l], p[2 * l + 1]});
    return Mlp(widths, std::move(layers));
  }
};

// Everything needed to continue an EPTv1 run bit-exactly.
struct Checkpoint {
  std::size_t iteration = 0;
  std::uint64_t seed = 0;
  Tensor particles;
  std::vector<std::size_t> net_widths;
  std::vector<Tensor> net_params;
  std::vector<Tensor> optimizer_state;
  std::array<std::uint64_t, 4> sampler_state{0, 0, 0, 0};
  // EPTv2 only
  std::size_t outer_loop = 0;
  std::vector<std::size_t> generator_widths;
  std::vector<Tensor> generator_params;
  std::vector<Tensor> generator_optimizer_state;
};

struct GeneratorFit {
  std::size_t outer_loop = 0;
  double loss_before = 0;
  double loss_after = 0;
};

struct RunRecord {
  RunConfig config;
  std::string method;
  std::vector<Snapshot> snapshots;
  std::vector<DiagnosticsRow> diagnostics;
  std::map<std::string, double> initial_metrics;
  std::map<std::string, double> final_metrics;
  ParticleEnsemble final;
  std::optional<Mlp> ratio_net;
  std::optional<Mlp> generator;
  std::vector<GeneratorFit> generator_fits;
  std::optional<ComposedMap> map;
  std::optional<Checkpoint> checkpoint;
  bool failed = false;
  std::string failure;
};

class TransportFailure : public std::runtime_error {
public:
  TransportFailure(const std::string& what, RunRecord partial)
      : std::runtime_error(what), record(std::move(partial)) {}
  RunRecord record;
};

inline DiagnosticsTable diagnostics_series(const RunRecord& run) { return diagnostics_table(run.diagnostics); }

// ---------------------------------------------------------------------------
// Construction from a config

inline Tensor target_sample(const RunConfig& cfg) { return sample(cfg.dataset); }

// Independent target draw for evaluation.
inline Tensor heldout_sample(const RunConfig& cfg, std::size_t n) {
  DatasetSpec spec = cfg.dataset;
  spec.n = n;
  spec.seed = detail::splitmix64(cfg.dataset.seed ^ 0x68656C646F7574ULL);
  return sample(spec);
}

inline Tensor initial_particles(const RunConfig& cfg, std::size_t dim) {
  return reference_sample(dim, cfg.particles, cfg.seed, "reference");
}

inline double kernel_bandwidth_for(const RunConfig& cfg, const Tensor& target, const Tensor& particles) {
  return cfg.kernel_bandwidth > 0 ? cfg.kernel_bandwidth : median_heuristic(target, particles);
}

inline std::unique_ptr<VelocityModel> make_velocity_model(const RunConfig& cfg, const Tensor& target,
                                                          const Tensor& particles) {
  if (cfg.method == "mmd-flow") {
    return std::make_unique<MmdFlowModel>(RbfKernel(kernel_bandwidth_for(cfg, target, particles)));
  }
  if (cfg.method == "svgd") {
    const auto mixture = analytic_target(cfg.dataset.name);
    if (!mixture) throw ConfigError("svgd needs an analytic target");
    ScoreFunction score = [mix = *mixture](const Tensor& xs) { return analytic_score(mix, xs); };
    return std::make_unique<SvgdModel>(RbfKernel(kernel_bandwidth_for(cfg, target, particles)), std::move(score));
  }
  Mlp net = init_scalar_net(target.cols(), cfg.net_widths, cfg.seed);
  RatioFitter fitter(cfg.fit_objective(), std::move(net), RmsPropOptions{cfg.objective.lr}, cfg.objective.batch,
                     cfg.seed);
  return std::make_unique<EptModel>(make_energy(cfg.divergence), std::move(fitter), cfg.objective.steps,
                                    cfg.objective.warm_start);
}

struct RunOptions {
  std::shared_ptr<VelocityModel> model;        // replaces the model built from the config
  std::optional<Tensor> initial;               // replaces the reference sample
  std::optional<Checkpoint> resume;            // continue from here
  std::optional<std::size_t> stop_after;       // stop at this iteration (for checkpointing)
  std::function<void(const Snapshot&)> on_snapshot;
};

namespace detail {

inline std::map<std::string, double> ensemble_metrics(const Tensor& particles, const Tensor& heldout,
                                                      double bandwidth) {
  const std::size_t k = std::min(particles.rows(), heldout.rows());
  const Tensor sub = slice_rows(particles, 0, k);
  return {{"mmd2", mmd_squared(sub, heldout, RbfKernel(bandwidth))}};
}

inline bool snapshot_due(std::size_t it, std::size_t every, std::size_t last) {
  return it == 0 || it == last || it % every == 0;
}

inline void capture_ept_state(VelocityModel& model, Checkpoint& cp) {
  if (auto* ept = dynamic_cast<EptModel*>(&model)) {
    const Mlp& net = ept->fitter().net();
    cp.net_widths = net.widths();
    cp.net_params.clear();
    for (const Tensor* p : net.parameters()) cp.net_params.push_back(*p);
    cp.optimizer_state = ept->fitter().optimizer().accumulators();
    cp.sampler_state = ept->fitter().sampler_state();
  }
}

inline void restore_ept_state(VelocityModel& model, const Checkpoint& cp, std::size_t target_n,
                              std::size_t particle_n) {
  auto* ept = dynamic_cast<EptModel*>(&model);
  if (!ept) return;
  if (cp.net_widths != ept->fitter().net().widths()) throw ShapeError("checkpoint network does not match config");
  auto params = ept->fitter().net().parameters();
  if (params.size() != cp.net_params.size()) throw ShapeError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], cp.net_params[i], "checkpoint parameter");
    *params[i] = cp.net_params[i];
  }
  ept->fitter().optimizer().set_accumulators(cp.optimizer_state);
  ept->fitter().set_sampler_state(cp.sampler_state, target_n, particle_n);
}

inline ComposedMap empty_map(const RunConfig& cfg, const EptModel& model) {
  return {cfg.divergence, model.fitter().objective().link(), model.fitter().net().widths(),
          cfg.transport.step_size, {}};
}

}  // namespace detail

// EPTv1 (and the kernel baselines, which share the loop).
inline RunRecord run_eptv1(const RunConfig& cfg, const Tensor& target, RunOptions opts = {}) {
  cfg.validate();
  require_matrix(target, "target data");
  if (target.rows() == 0) throw std::invalid_argument("target data must be non-empty");
  const std::size_t m = target.cols();
  const std::size_t K = cfg.transport.iterations;
  const double s = cfg.transport.step_size;

  RunRecord rec;
  rec.config = cfg;
  rec.final.seed = cfg.seed;
  rec.final.points = opts.initial ? *opts.initial : initial_particles(cfg, m);
  if (rec.final.points.cols() != m) throw ShapeError("initial particles and target differ in dimension");

  std::shared_ptr<VelocityModel> model = opts.model;
  if (!model) model = make_velocity_model(cfg, target, rec.final.points);
  rec.method = model->name();

  if (opts.resume) {
    if (opts.resume->seed != cfg.seed) throw ConfigError("checkpoint seed does not match config seed");
    if (opts.resume->iteration > K) throw ConfigError("checkpoint is past the configured iteration count");
    require_same_shape(opts.resume->particles, rec.final.points, "checkpoint particles");
    rec.final.points = opts.resume->particles;
    rec.final.iteration = opts.resume->iteration;
    detail::restore_ept_state(*model, *opts.resume, target.rows(), rec.final.points.rows());
  }
  auto* ept = dynamic_cast<EptModel*>(model.get());
  if (cfg.record_map && ept) rec.map = detail::empty_map(cfg, *ept);

  const Tensor heldout = heldout_sample(cfg, cfg.metric_samples);
  const double metric_h = median_heuristic(heldout);
  const std::size_t stop = std::min(K, opts.stop_after.value_or(K));

  auto snapshot = [&](std::size_t it) {
    rec.snapshots.push_back({it, rec.final.points});
    if (opts.on_snapshot) opts.on_snapshot(rec.snapshots.back());
  };
  auto fail = [&](const std::string& msg) {
    rec.failed = true;
    rec.failure = msg;
    rec.checkpoint.emplace();
    rec.checkpoint->iteration = rec.final.iteration;
    rec.checkpoint->seed = cfg.seed;
    rec.checkpoint->particles = rec.final.points;
    detail::capture_ept_state(*model, *rec.checkpoint);
    if (ept) rec.ratio_net = ept->fitter().net();
    throw TransportFailure(msg, std::move(rec));
  };

  rec.initial_metrics = detail::ensemble_metrics(rec.final.points, heldout, metric_h);
  for (std::size_t k = rec.final.iteration; k < stop; ++k) {
    if (detail::snapshot_due(k, cfg.snapshot_every, K)) snapshot(k);
    StepResult step;
    try {
      step = model->step(target, rec.final.points);
      if (cfg.metric_every > 0 && k % cfg.metric_every == 0) {
        for (auto& [name, v] : detail::ensemble_metrics(rec.final.points, heldout, metric_h)) step.row.metrics[name] = v;
      }
      step.row.iteration = k;
      rec.diagnostics.push_back(step.row);
      if (rec.map) {
        std::vector<Tensor> params;
        for (const Tensor* p : ept->fitter().net().parameters()) params.push_back(*p);
        rec.map->steps.push_back(std::move(params));
      }
      euler_update(rec.final.points, step.velocity, s);
    } catch (const FitDivergence& e) {
      fail(e.what());
    } catch (const NonFiniteError& e) {
      fail(e.what());
    }
    rec.final.iteration = k + 1;
  }
  if (rec.final.iteration == K && (rec.snapshots.empty() || rec.snapshots.back().iteration != K)) snapshot(K);
  else if (rec.final.iteration < K) snapshot(rec.final.iteration);
  rec.final_metrics = detail::ensemble_metrics(rec.final.points, heldout, metric_h);

  rec.checkpoint.emplace();
  rec.checkpoint->iteration = rec.final.iteration;
  rec.checkpoint->seed = cfg.seed;
  rec.checkpoint->particles = rec.final.points;
  detail::capture_ept_state(*model, *rec.checkpoint);
  if (ept) rec.ratio_net = ept->fitter().net();
  return rec;
}

// ---------------------------------------------------------------------------
// EPTv2

// Mean over rows of ||G(Z) - Y||^2.
inline double regression_loss(const Mlp& g, const Tensor& z, const Tensor& y) {
  const Tensor out = g.forward(z);
  require_same_shape(out, y, "regression_loss");
  double s = 0;
  for (std::size_t k = 0; k < out.size(); ++k) s += (out[k] - y[k]) * (out[k] - y[k]);
  return s / static_cast<double>(out.rows());
}

// Minibatch RMSProp on the regression loss; returns the loss over all pairs
// before and after.
inline GeneratorFit fit_generator(Mlp& g, RmsProp& opt, const Tensor& z, const Tensor& y, std::size_t epochs,
                                  std::size_t batch, Stream stream) {
  GeneratorFit out;
  out.loss_before = regression_loss(g, z, y);
  EpochSampler sampler(stream, z.rows(), batch);
  const std::size_t per_epoch = z.rows() / batch;
  auto params_ptr = g.parameters();
  for (std::size_t step = 0; step < epochs * per_epoch; ++step) {
    const auto idx = sampler.next();
    ad::Tape tape;
    const auto params = g.bind(tape, true);
    const ad::Var zb = tape.leaf(take_rows(z, idx), false);
    const ad::Var yb = tape.constant(take_rows(y, idx));
    const ad::Var diff = g.apply(zb, params) - yb;
    const ad::Var loss = ad::scale(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(idx.size()));
    if (!std::isfinite(loss.value().item())) throw NonFiniteError("generator regression diverged");
    opt.step(params_ptr, ad::second_order_param_grad(loss, params));
  }
  out.loss_after = regression_loss(g, z, y);
  return out;
}

inline Tensor latent_sample(const RunConfig& cfg, std::size_t outer_loop) {
  Stream s = Stream(cfg.seed, "latent").fork(outer_loop);
  return normal_matrix(cfg.particles, cfg.transport.latent_dim, s);
}

inline Tensor fresh_latent_sample(const RunConfig& cfg, std::size_t n) {
  Stream s(cfg.seed, "latent/fresh");
  return normal_matrix(n, cfg.transport.latent_dim, s);
}

inline Mlp init_generator(const RunConfig& cfg, std::size_t output_dim) {
  return init_generator_net(cfg.transport.latent_dim, output_dim, cfg.transport.generator_widths, cfg.seed);
}

// Returns the record; rec.generator holds G_theta and rec.final is
// G_theta applied to fresh latents.
inline RunRecord run_eptv2(const RunConfig& cfg, const Tensor& target, RunOptions opts = {}) {
  cfg.validate();
  if (!cfg.latent()) throw ConfigError("run_eptv2 needs transport.OL >= 1");
  if (opts.resume || opts.stop_after) throw ConfigError("resume and stop_after are not supported with outer loops");
  require_matrix(target, "target data");
  const std::size_t m = target.cols();
  const std::size_t IL = cfg.transport.inner_loops, OL = cfg.transport.outer_loops;
  const double s = cfg.transport.step_size;

  RunRecord rec;
  rec.config = cfg;
  rec.final.seed = cfg.seed;
  rec.final.lineage = "generator";
  Mlp g = init_generator(cfg, m);
  RmsProp g_opt(RmsPropOptions{cfg.transport.generator_lr});

  std::shared_ptr<VelocityModel> model = opts.model;
  Tensor particles = g.forward(latent_sample(cfg, 0));
  if (!model) model = make_velocity_model(cfg, target, particles);
  rec.method = model->name() + "-latent";
  auto* ept = dynamic_cast<EptModel*>(model.get());

  const Tensor heldout = heldout_sample(cfg, cfg.metric_samples);
  const double metric_h = median_heuristic(heldout);
  const Tensor z_fresh = fresh_latent_sample(cfg, cfg.particles);
  rec.initial_metrics = detail::ensemble_metrics(g.forward(z_fresh), heldout, metric_h);

  const std::size_t total = OL * IL;
  std::size_t it = 0;
  try {
    for (std::size_t j = 0; j < OL; ++j) {
      const Tensor z = latent_sample(cfg, j);
      particles = g.forward(z);
      for (std::size_t k = 0; k < IL; ++k, ++it) {
        if (detail::snapshot_due(it, cfg.snapshot_every, total)) {
          rec.snapshots.push_back({it, particles});
          if (opts.on_snapshot) opts.on_snapshot(rec.snapshots.back());
        }
        StepResult step = model->step(target, particles);
        step.row.iteration = it;
        if (cfg.metric_every > 0 && it % cfg.metric_every == 0) {
          for (auto& [name, v] : detail::ensemble_metrics(particles, heldout, metric_h)) step.row.metrics[name] = v;
        }
        rec.diagnostics.push_back(step.row);
        euler_update(particles, step.velocity, s);
      }
      GeneratorFit fit = fit_generator(g, g_opt, z, particles, cfg.transport.generator_epochs,
                                       cfg.transport.generator_batch, Stream(cfg.seed, "generator").fork(j));
      fit.outer_loop = j;
      rec.generator_fits.push_back(fit);
    }
  } catch (const std::exception& e) {
    if (!dynamic_cast<const FitDivergence*>(&e) && !dynamic_cast<const NonFiniteError*>(&e)) throw;
    rec.failed = true;
    rec.failure = e.what();
    rec.generator = g;
    rec.final.points = particles;
    rec.final.iteration = it;
    throw TransportFailure(e.what(), std::move(rec));
  }
  rec.snapshots.push_back({total, particles});
  if (opts.on_snapshot) opts.on_snapshot(rec.snapshots.back());

  rec.final.points = g.forward(z_fresh);
  rec.final.iteration = total;
  rec.final_metrics = detail::ensemble_metrics(rec.final.points, heldout, metric_h);
  rec.generator = g;
  rec.checkpoint.emplace();
  rec.checkpoint->iteration = total;
  rec.checkpoint->seed = cfg.seed;
  rec.checkpoint->particles = particles;
  rec.checkpoint->outer_loop = OL;
  rec.checkpoint->generator_widths = g.widths();
  for (const Tensor* p : g.parameters()) rec.checkpoint->generator_params.push_back(*p);
  rec.checkpoint->generator_optimizer_state = g_opt.accumulators();
  detail::capture_ept_state(*model, *rec.checkpoint);
  if (ept) rec.ratio_net = ept->fitter().net();
  return rec;
}

inline RunRecord run(const RunConfig& cfg, const Tensor& target, RunOptions opts = {}) {
  return cfg.latent() ? run_eptv2(cfg, target, std::move(opts)) : run_eptv1(cfg, target, std::move(opts));
}

// ---------------------------------------------------------------------------
// Discretization order

using ParticleVelocity = std::function<Tensor(const Tensor&)>;  // velocity at the particles themselves

inline Tensor integrate_euler(Tensor particles, const ParticleVelocity& v, double s, std::size_t steps) {
  for (std::size_t k = 0; k < steps; ++k) euler_update(particles, v(particles), s);
  return particles;
}

struct OrderProbe {
  std::vector<double> step_sizes;
  double reference_step = 0;
  std::vector<double> errors;            // W2(final(s), final(reference))
  std::vector<double> successive_orders; // log(e_i / e_{i+1}) / log(s_i / s_{i+1})
  double observed_order = std::numeric_limits<double>::quiet_NaN();  // endpoint slope
  bool exact = false;                    // every error at rounding level
  bool monotone = true;                  // errors decrease with s
};

inline std::size_t steps_for(double horizon, double s) {
  const double n = horizon / s;
  const double r = std::round(n);
  if (r < 1 || std::abs(n - r) > 1e-9 * r) {
    throw std::invalid_argument("horizon is not a whole number of steps of size " + std::to_string(s));
  }
  return static_cast<std::size_t>(r);
}

// Runs the flow to `horizon` at each step size and at a reference step
// (default: smallest listed step / 4) and compares final ensembles in W2.
inline OrderProbe discretization_order_probe(const Tensor& initial, const ParticleVelocity& v,
                                             std::vector<double> step_sizes, double horizon,
                                             std::optional<double> reference_step = std::nullopt) {
  if (step_sizes.size() < 2) throw std::invalid_argument("order probe needs at least two step sizes");
  std::sort(step_sizes.begin(), step_sizes.end(), std::greater<>());
  OrderProbe out;
  out.step_sizes = step_sizes;
  out.reference_step = reference_step.value_or(step_sizes.back() / 4);
  const Tensor ref = integrate_euler(initial, v, out.reference_step, steps_for(horizon, out.reference_step));
  double scale = 0;
  for (double x : ref.storage()) scale = std::max(scale, std::abs(x));
  for (double s : step_sizes) out.errors.push_back(wasserstein2_exact(integrate_euler(initial, v, s, steps_for(horizon, s)), ref));
  const double tiny = 1e-12 * (1 + scale);
  out.exact = std::all_of(out.errors.begin(), out.errors.end(), [&](double e) { return e <= tiny; });
  if (out.exact) return out;
  for (std::size_t i = 0; i + 1 < out.errors.size(); ++i) {
    if (!(out.errors[i + 1] < out.errors[i])) out.monotone = false;
    out.successive_orders.push_back(std::log(out.errors[i] / out.errors[i + 1]) /
                                    std::log(step_sizes[i] / step_sizes[i + 1]));
  }
  out.observed_order = std::log(out.errors.front() / out.errors.back()) /
                       std::log(step_sizes.front() / step_sizes.back());
  return out;
}

inline OrderProbe mmd_flow_order_probe(const Tensor& target, const Tensor& initial, const RbfKernel& kernel,
                                       std::vector<double> step_sizes, double horizon,
                                       std::optional<double> reference_step = std::nullopt) {
  const ParticleVelocity v = [&](const Tensor& y) { return mmd_flow_velocity(kernel, target, y, y); };
  return discretization_order_probe(initial, v, std::move(step_sizes), horizon, reference_step);
}

}  // namespace ept
