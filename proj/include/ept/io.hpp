#pragma once

// Files: JSON run configs and checkpoints, particle and diagnostics CSV,
// metric reports.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "ept/config.hpp"
#include "ept/metrics.hpp"
#include "ept/nets.hpp"
#include "ept/transport.hpp"

namespace ept::io {

using json = nlohmann::json;

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// %.17g: enough digits for a lossless round trip through strtod.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw FormatError("not a number: '" + s + "'");
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << content;
  if (!out) throw FormatError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Config

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    if (!ok.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

inline void read_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError("'" + std::string(key) + "' in " + where + " must be a non-negative integer");
  out = v.get<std::size_t>();
}

inline void read_sizes(const json& j, const char* key, std::vector<std::size_t>& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array()) throw ConfigError("'" + std::string(key) + "' in " + where + " must be an array");
  out.clear();
  for (const json& e : v) {
    if (!e.is_number_integer() || e.get<long long>() < 0)
      throw ConfigError("'" + std::string(key) + "' in " + where + " must hold non-negative integers");
    out.push_back(e.get<std::size_t>());
  }
}

}  // namespace detail

// Unknown keys anywhere are rejected. The dataset seed defaults to the run seed.
inline RunConfig config_from_json(const json& j, std::optional<std::uint64_t> seed_override = std::nullopt) {
  using namespace detail;
  check_keys(j, {"dataset", "reference", "method", "divergence", "objective", "transport", "net", "seed", "output",
                 "snapshot_every", "kernel_bandwidth", "metrics", "record_map", "compare"},
             "config");
  RunConfig c;
  std::optional<std::uint64_t> dataset_seed;
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("'seed' must be a non-negative integer");
    c.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    check_keys(d, {"name", "n", "seed", "noise"}, "dataset");
    read(d, "name", c.dataset.name, "dataset");
    read_size(d, "n", c.dataset.n, "dataset");
    if (d.contains("seed")) {
      if (!d["seed"].is_number_unsigned()) throw ConfigError("'seed' in dataset must be a non-negative integer");
      dataset_seed = d["seed"].get<std::uint64_t>();
    }
    if (d.contains("noise")) {
      double v = 0;
      read(d, "noise", v, "dataset");
      c.dataset.noise = v;
    }
  }
  if (j.contains("reference")) {
    check_keys(j["reference"], {"n"}, "reference");
    read_size(j["reference"], "n", c.particles, "reference");
  }
  read(j, "method", c.method, "config");
  read(j, "divergence", c.divergence, "config");
  if (j.contains("objective")) {
    const json& o = j["objective"];
    check_keys(o, {"variant", "alpha", "T", "batch", "lr", "warm_start"}, "objective");
    if (o.contains("variant")) {
      std::string v;
      read(o, "variant", v, "objective");
      try {
        c.objective.variant = parse_objective_kind(v);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    read(o, "alpha", c.objective.alpha, "objective");
    read_size(o, "T", c.objective.steps, "objective");
    read_size(o, "batch", c.objective.batch, "objective");
    read(o, "lr", c.objective.lr, "objective");
    read(o, "warm_start", c.objective.warm_start, "objective");
  }
  if (j.contains("transport")) {
    const json& t = j["transport"];
    check_keys(t, {"s", "K", "OL", "IL", "latent_dim", "generator"}, "transport");
    read(t, "s", c.transport.step_size, "transport");
    read_size(t, "K", c.transport.iterations, "transport");
    read_size(t, "OL", c.transport.outer_loops, "transport");
    read_size(t, "IL", c.transport.inner_loops, "transport");
    read_size(t, "latent_dim", c.transport.latent_dim, "transport");
    if (t.contains("generator")) {
      const json& g = t["generator"];
      check_keys(g, {"widths", "epochs", "batch", "lr"}, "transport.generator");
      read_sizes(g, "widths", c.transport.generator_widths, "transport.generator");
      read_size(g, "epochs", c.transport.generator_epochs, "transport.generator");
      read_size(g, "batch", c.transport.generator_batch, "transport.generator");
      read(g, "lr", c.transport.generator_lr, "transport.generator");
    }
  }
  if (j.contains("net")) {
    check_keys(j["net"], {"widths"}, "net");
    read_sizes(j["net"], "widths", c.net_widths, "net");
  }
  read(j, "output", c.output_dir, "config");
  read_size(j, "snapshot_every", c.snapshot_every, "config");
  read(j, "kernel_bandwidth", c.kernel_bandwidth, "config");
  if (j.contains("metrics")) {
    check_keys(j["metrics"], {"every", "samples"}, "metrics");
    read_size(j["metrics"], "every", c.metric_every, "metrics");
    read_size(j["metrics"], "samples", c.metric_samples, "metrics");
  }
  read(j, "record_map", c.record_map, "config");
  read(j, "compare", c.compare, "config");
  if (seed_override) c.seed = *seed_override;
  c.dataset.seed = dataset_seed.value_or(c.seed);
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON in ") + path.string() + ": " + e.what());
  }
  return config_from_json(j, seed_override);
}

inline json config_to_json(const RunConfig& c) {
  json d{{"name", c.dataset.name}, {"n", c.dataset.n}, {"seed", c.dataset.seed}};
  if (c.dataset.noise) d["noise"] = *c.dataset.noise;
  json t{{"s", c.transport.step_size}, {"K", c.transport.iterations}};
  if (c.latent()) {
    t["OL"] = c.transport.outer_loops;
    t["IL"] = c.transport.inner_loops;
    t["latent_dim"] = c.transport.latent_dim;
    t["generator"] = {{"widths", c.transport.generator_widths},
                      {"epochs", c.transport.generator_epochs},
                      {"batch", c.transport.generator_batch},
                      {"lr", c.transport.generator_lr}};
  }
  json j{{"dataset", d},
         {"reference", {{"n", c.particles}}},
         {"method", c.method},
         {"divergence", c.divergence},
         {"objective",
          {{"variant", to_string(c.objective.variant)},
           {"alpha", c.objective.alpha},
           {"T", c.objective.steps},
           {"batch", c.objective.batch},
           {"lr", c.objective.lr},
           {"warm_start", c.objective.warm_start}}},
         {"transport", t},
         {"net", {{"widths", c.net_widths}}},
         {"seed", c.seed},
         {"output", c.output_dir},
         {"snapshot_every", c.snapshot_every},
         {"kernel_bandwidth", c.kernel_bandwidth},
         {"metrics", {{"every", c.metric_every}, {"samples", c.metric_samples}}},
         {"record_map", c.record_map}};
  if (!c.compare.empty()) j["compare"] = c.compare;
  return j;
}

// ---------------------------------------------------------------------------
// Particle snapshots: "iter,idx,x0,...,x{m-1}"

inline std::string particles_csv(std::size_t iteration, const Tensor& points) {
  require_matrix(points, "particles_csv");
  std::string out = "iter,idx";
  for (std::size_t j = 0; j < points.cols(); ++j) out += ",x" + std::to_string(j);
  out += '\n';
  const std::string it = std::to_string(iteration);
  for (std::size_t i = 0; i < points.rows(); ++i) {
    out += it;
    out += ',';
    out += std::to_string(i);
    for (double v : points.row(i)) {
      out += ',';
      out += format_double(v);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t k = 0; k <= line.size(); ++k) {
    if (k == line.size() || line[k] == sep) {
      parts.push_back(line.substr(start, k - start));
      start = k + 1;
    }
  }
  return parts;
}

struct ParticleFile {
  std::size_t iteration = 0;
  Tensor points;
};

inline ParticleFile parse_particles_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty particle file");
  const auto header = split(line, ',');
  if (header.size() < 3 || header[0] != "iter" || header[1] != "idx") throw FormatError("bad particle header");
  const std::size_t m = header.size() - 2;
  for (std::size_t j = 0; j < m; ++j)
    if (header[j + 2] != "x" + std::to_string(j)) throw FormatError("bad particle header column " + header[j + 2]);
  std::vector<double> data;
  std::size_t rows = 0;
  ParticleFile out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != m + 2) throw FormatError("particle row " + std::to_string(rows) + " has the wrong arity");
    const auto it = static_cast<std::size_t>(std::stoull(f[0]));
    if (rows == 0) out.iteration = it;
    else if (it != out.iteration) throw FormatError("mixed iterations in one particle file");
    if (std::stoull(f[1]) != rows) throw FormatError("particle indices must be 0..n-1 in order");
    for (std::size_t j = 0; j < m; ++j) data.push_back(parse_double(f[j + 2]));
    ++rows;
  }
  out.points = Tensor(Shape{rows, m}, std::move(data));
  return out;
}

inline ParticleFile load_particles(const std::filesystem::path& path) { return parse_particles_csv(read_file(path)); }

inline std::string snapshot_name(std::size_t iteration) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "iter_%07zu.csv", iteration);
  return buf;
}

// ---------------------------------------------------------------------------
// Diagnostics CSV

inline std::string diagnostics_csv(const DiagnosticsTable& t) {
  std::string out;
  for (std::size_t c = 0; c < t.columns.size(); ++c) out += (c ? "," : "") + t.columns[c];
  out += '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out += ',';
      // iteration and clamp counts are integral
      out += (c == 0 || c == 4) ? std::to_string(static_cast<long long>(row[c])) : format_double(row[c]);
    }
    out += '\n';
  }
  return out;
}

inline DiagnosticsTable parse_diagnostics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  DiagnosticsTable t;
  if (!std::getline(in, line)) throw FormatError("empty diagnostics file");
  t.columns = split(line, ',');
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != t.columns.size()) throw FormatError("diagnostics row has the wrong arity");
    std::vector<double> row;
    for (const auto& s : f) row.push_back(parse_double(s));
    t.rows.push_back(std::move(row));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Tensors, networks, checkpoints

inline json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.storage()}}; }

inline Tensor tensor_from_json(const json& j) {
  try {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad tensor: ") + e.what());
  }
}

inline json tensors_to_json(const std::vector<Tensor>& ts) {
  json a = json::array();
  for (const auto& t : ts) a.push_back(tensor_to_json(t));
  return a;
}

inline std::vector<Tensor> tensors_from_json(const json& j) {
  std::vector<Tensor> out;
  for (const auto& e : j) out.push_back(tensor_from_json(e));
  return out;
}

inline json net_to_json(const Mlp& net) {
  json layers = json::array();
  for (const auto& l : net.layers()) layers.push_back({{"weight", tensor_to_json(l.weight)}, {"bias", tensor_to_json(l.bias)}});
  return {{"widths", net.widths()}, {"activation", "relu"}, {"layers", layers}};
}

inline Mlp net_from_json(const json& j) {
  try {
    std::vector<DenseLayer> layers;
    for (const auto& l : j.at("layers")) layers.push_back({tensor_from_json(l.at("weight")), tensor_from_json(l.at("bias"))});
    return Mlp(j.at("widths").get<std::vector<std::size_t>>(), std::move(layers));
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad network: ") + e.what());
  }
}

inline Mlp net_from_params(const std::vector<std::size_t>& widths, const std::vector<Tensor>& params) {
  if (params.size() + 2 != 2 * widths.size()) throw FormatError("parameter count does not match widths");
  std::vector<DenseLayer> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) layers.push_back({params[2 * l], params[2 * l + 1]});
  return Mlp(widths, std::move(layers));
}

struct CheckpointFile {
  RunConfig config;
  Checkpoint state;
  std::string method;
};

// Doubles are written in shortest round-trip form, so loading is bit-exact.
inline json checkpoint_to_json(const RunConfig& cfg, const std::string& method, const Checkpoint& cp) {
  json j{{"format", "ept-checkpoint-1"},
         {"config", config_to_json(cfg)},
         {"method", method},
         {"iteration", cp.iteration},
         {"seed", cp.seed},
         {"particles", tensor_to_json(cp.particles)},
         {"rng", {{"sampler_state", cp.sampler_state}}}};
  if (!cp.net_params.empty()) {
    j["net"] = net_to_json(net_from_params(cp.net_widths, cp.net_params));
    j["optimizer"] = {{"kind", "rmsprop"},
                      {"lr", cfg.objective.lr},
                      {"decay", RmsPropOptions{}.decay},
                      {"epsilon", RmsPropOptions{}.epsilon},
                      {"accumulators", tensors_to_json(cp.optimizer_state)}};
  }
  if (!cp.generator_params.empty()) {
    j["outer_loop"] = cp.outer_loop;
    j["generator"] = net_to_json(net_from_params(cp.generator_widths, cp.generator_params));
    j["generator_optimizer"] = {{"accumulators", tensors_to_json(cp.generator_optimizer_state)}};
  }
  return j;
}

inline CheckpointFile checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "ept-checkpoint-1") throw FormatError("not an ept checkpoint");
  CheckpointFile out;
  try {
    out.config = config_from_json(j.at("config"));
    out.method = j.at("method").get<std::string>();
    Checkpoint& cp = out.state;
    cp.iteration = j.at("iteration").get<std::size_t>();
    cp.seed = j.at("seed").get<std::uint64_t>();
    cp.particles = tensor_from_json(j.at("particles"));
    cp.sampler_state = j.at("rng").at("sampler_state").get<std::array<std::uint64_t, 4>>();
    if (j.contains("net")) {
      const Mlp net = net_from_json(j["net"]);
      cp.net_widths = net.widths();
      for (const Tensor* p : net.parameters()) cp.net_params.push_back(*p);
      cp.optimizer_state = tensors_from_json(j.at("optimizer").at("accumulators"));
    }
    if (j.contains("generator")) {
      const Mlp g = net_from_json(j["generator"]);
      cp.outer_loop = j.at("outer_loop").get<std::size_t>();
      cp.generator_widths = g.widths();
      for (const Tensor* p : g.parameters()) cp.generator_params.push_back(*p);
      cp.generator_optimizer_state = tensors_from_json(j.at("generator_optimizer").at("accumulators"));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint: ") + e.what());
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const std::string& method,
                            const Checkpoint& cp) {
  write_file(path, checkpoint_to_json(cfg, method, cp).dump(1) + "\n");
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(json::parse(read_file(path)));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Metric reports

inline json metric_report_to_json(const MetricReport& r) {
  return {{"metric", r.metric}, {"value", r.value}, {"n_x", r.n_x}, {"n_y", r.n_y}, {"params", r.params}};
}

}  // namespace ept::io
