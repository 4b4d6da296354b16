#ifndef FEDDWA_EXPERIMENT_HPP
#define FEDDWA_EXPERIMENT_HPP

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "feddwa/baselines.hpp"
#include "feddwa/datagen.hpp"
#include "feddwa/dwa.hpp"
#include "feddwa/errors.hpp"
#include "feddwa/fedcore.hpp"
#include "feddwa/models.hpp"
#include "json.hpp"

namespace feddwa {

using nlohmann::json;

enum class DataSource { gaussian, synth_clusters, csv };

struct DataConfig {
  DataSource source = DataSource::gaussian;
  // gaussian base set
  std::size_t samples_per_class = 300;
  std::size_t features = 20;
  std::size_t classes = 10;
  double separation = 1.0;
  // synth_clusters
  std::size_t num_groups = 4;
  std::size_t samples_per_client = 100;
  double noise = 0.0;
  double margin = 0.5;
  // csv
  std::string csv_path;
  CsvSchema csv;

  double test_fraction = 0.2;
};

struct OutputConfig {
  std::filesystem::path dir;
  bool export_weights = false;
};

struct RunConfig {
  std::size_t clients = 20;
  MethodConfig method;
  ModelSpec model;  // input_dim / num_classes are filled from the data
  DataConfig data;
  PartitionSpec partition;
  TrainingConfig train;
  OutputConfig output;
};

// Command-line values that override the config file.
struct ConfigOverrides {
  std::optional<std::string> method;
  std::optional<std::size_t> clients;
  std::optional<std::size_t> rounds;
  std::optional<double> fraction;
  std::optional<std::size_t> k;
  std::optional<double> alpha;
  std::optional<double> s;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<bool> export_weights;
  std::optional<std::string> guidance;
  std::optional<std::size_t> adapt_steps;
};

inline std::string_view to_string(MethodKind k) {
  switch (k) {
    case MethodKind::fedavg: return "fedavg";
    case MethodKind::fedprox: return "fedprox";
    case MethodKind::local: return "local";
    case MethodKind::fedavg_ft: return "fedavg_ft";
    case MethodKind::feddwa: return "feddwa";
  }
  return "?";
}

namespace detail {

// Walks a JSON object, remembering which keys were read so that leftovers
// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const json* find(std::string_view key) {
    seen_.insert(std::string(key));
    auto it = obj_.find(std::string(key));
    return it == obj_.end() ? nullptr : &*it;
  }

  template <typename T>
  void read(std::string_view key, T& out) {
    const json* v = find(key);
    if (v == nullptr) return;
    const std::string kp = key_path(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v->is_boolean()) throw ConfigError(kp, "expected true or false");
      out = v->get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v->is_string()) throw ConfigError(kp, "expected a string");
      out = v->get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v->is_number()) throw ConfigError(kp, "expected a number");
      out = v->get<T>();
    } else {
      static_assert(std::is_integral_v<T>);
      if (!v->is_number_integer() && !v->is_number_unsigned()) {
        throw ConfigError(kp, "expected an integer");
      }
      if (v->is_number_integer() && v->get<std::int64_t>() < 0) {
        throw ConfigError(kp, "must be non-negative");
      }
      out = v->get<T>();
    }
  }

  ObjectReader child(std::string_view key) {
    static const json empty = json::object();
    const json* v = find(key);
    return ObjectReader(v == nullptr ? empty : *v, key_path(key));
  }

  void reject_unknown() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key_path(it.key()), "unknown key");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum>
Enum parse_choice(const std::string& key, const std::string& value,
                  std::initializer_list<std::pair<std::string_view, Enum>> choices) {
  std::string options;
  for (const auto& [name, e] : choices) {
    if (value == name) return e;
    options += options.empty() ? std::string(name) : ", " + std::string(name);
  }
  throw ConfigError(key, concat("'", value, "' is not one of: ", options));
}

inline void apply_overrides(json& j, const ConfigOverrides& o) {
  if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  auto section = [&](const char* name) -> json& {
    if (!j.contains(name)) j[name] = json::object();
    return j[name];
  };
  if (o.method) section("method")["name"] = *o.method;
  if (o.clients) j["clients"] = *o.clients;
  if (o.rounds) section("train")["rounds"] = *o.rounds;
  if (o.fraction) section("train")["fraction"] = *o.fraction;
  if (o.k) section("method")["k"] = *o.k;
  if (o.alpha) section("partition")["alpha"] = *o.alpha;
  if (o.s) section("partition")["s"] = *o.s;
  if (o.seed) j["seed"] = *o.seed;
  if (o.out) section("output")["dir"] = *o.out;
  if (o.export_weights) section("output")["export_weights"] = *o.export_weights;
  if (o.guidance || o.adapt_steps) {
    auto& m = section("method");
    if (!m.contains("guidance")) m["guidance"] = json::object();
    if (o.guidance) m["guidance"]["mode"] = *o.guidance;
    if (o.adapt_steps) m["guidance"]["adapt_steps"] = *o.adapt_steps;
  }
}

}  // namespace detail

inline std::filesystem::path default_output_root() {
  const char* env = std::getenv("FEDDWA_OUT_ROOT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::path("runs");
}

// Builds and validates a RunConfig from a JSON document plus overrides.
inline RunConfig config_from_json(json doc, const ConfigOverrides& overrides = {}) {
  detail::apply_overrides(doc, overrides);
  RunConfig cfg;
  detail::ObjectReader top(doc, "");

  top.read("clients", cfg.clients);
  top.read("seed", cfg.train.seed);

  {
    auto m = top.child("method");
    std::string name = "feddwa";
    m.read("name", name);
    cfg.method.kind = detail::parse_choice<MethodKind>(
        m.key_path("name"), name,
        {{"fedavg", MethodKind::fedavg}, {"fedprox", MethodKind::fedprox},
         {"local", MethodKind::local}, {"fedavg_ft", MethodKind::fedavg_ft},
         {"feddwa", MethodKind::feddwa}});
    m.read("k", cfg.method.dwa.top_k);
    m.read("mu", cfg.method.mu);
    m.read("ft_epochs", cfg.method.ft_epochs);
    m.read("uniform_first_round", cfg.method.dwa.uniform_first_round);
    auto g = m.child("guidance");
    std::string mode = "onestep", batch = "full";
    g.read("mode", mode);
    g.read("adapt_steps", cfg.method.dwa.guidance.adapt_steps);
    g.read("adapt_batch", batch);
    cfg.method.dwa.guidance.mode = detail::parse_choice<GuidanceMode>(
        g.key_path("mode"), mode,
        {{"onestep", GuidanceMode::one_step_ahead}, {"last", GuidanceMode::last_iteration},
         {"current", GuidanceMode::current}});
    cfg.method.dwa.guidance.adapt_batch = detail::parse_choice<AdaptBatch>(
        g.key_path("adapt_batch"), batch, {{"full", AdaptBatch::full}, {"minibatch", AdaptBatch::minibatch}});
    g.reject_unknown();
    m.reject_unknown();
  }
  {
    auto m = top.child("model");
    std::string kind = "softmax";
    m.read("kind", kind);
    cfg.model.kind = detail::parse_choice<ModelKind>(
        m.key_path("kind"), kind, {{"softmax", ModelKind::softmax}, {"mlp", ModelKind::mlp}});
    cfg.model.hidden_dim = cfg.model.kind == ModelKind::mlp ? 32 : 0;
    m.read("hidden_dim", cfg.model.hidden_dim);
    m.read("init_scale", cfg.model.init_scale);
    m.reject_unknown();
  }
  {
    auto t = top.child("train");
    t.read("rounds", cfg.train.rounds);
    t.read("fraction", cfg.train.fraction);
    t.read("lr", cfg.train.lr);
    t.read("batch_size", cfg.train.batch_size);
    t.read("local_epochs", cfg.train.local_epochs);
    t.read("size_weighted", cfg.train.size_weighted);
    t.reject_unknown();
  }
  std::optional<std::size_t> min_client_samples;
  {
    auto d = top.child("data");
    std::string source = "gaussian";
    d.read("source", source);
    cfg.data.source = detail::parse_choice<DataSource>(
        d.key_path("source"), source,
        {{"gaussian", DataSource::gaussian}, {"synth_clusters", DataSource::synth_clusters},
         {"csv", DataSource::csv}});
    d.read("samples_per_class", cfg.data.samples_per_class);
    d.read("features", cfg.data.features);
    d.read("classes", cfg.data.classes);
    d.read("separation", cfg.data.separation);
    d.read("num_groups", cfg.data.num_groups);
    d.read("samples_per_client", cfg.data.samples_per_client);
    d.read("noise", cfg.data.noise);
    d.read("margin", cfg.data.margin);
    d.read("test_fraction", cfg.data.test_fraction);
    auto c = d.child("csv");
    c.read("path", cfg.data.csv_path);
    c.read("header", cfg.data.csv.has_header);
    c.read("scale", cfg.data.csv.scale);
    c.read("classes", cfg.data.csv.num_classes);
    c.reject_unknown();
    d.reject_unknown();
  }
  {
    auto p = top.child("partition");
    std::string setting = "dirichlet";
    p.read("setting", setting);
    cfg.partition.setting = detail::parse_choice<PartitionSetting>(
        p.key_path("setting"), setting,
        {{"pathological", PartitionSetting::pathological},
         {"dominant_class", PartitionSetting::dominant_class},
         {"dirichlet", PartitionSetting::dirichlet}});
    p.read("alpha", cfg.partition.alpha);
    p.read("s", cfg.partition.dominant_fraction);
    p.read("classes_per_client", cfg.partition.classes_per_client);
    p.read("num_groups", cfg.partition.num_groups);
    p.read("dominant_per_group", cfg.partition.dominant_per_group);
    p.read("samples_per_client", cfg.partition.samples_per_client);
    std::size_t mcs = 0;
    if (p.find("min_client_samples") != nullptr) {
      p.read("min_client_samples", mcs);
      min_client_samples = mcs;
    }
    p.reject_unknown();
  }
  {
    auto o = top.child("output");
    std::string dir;
    o.read("dir", dir);
    cfg.output.dir = dir;
    o.read("export_weights", cfg.output.export_weights);
    o.reject_unknown();
  }
  top.reject_unknown();

  // Range checks, each naming its key.
  if (cfg.clients < 1) throw ConfigError("clients", "must be at least 1");
  if (cfg.method.dwa.top_k < 1) throw ConfigError("method.k", "must be at least 1");
  if (cfg.method.dwa.top_k > cfg.clients) {
    throw ConfigError("method.k", detail::concat("K=", cfg.method.dwa.top_k, " exceeds ",
                                                 cfg.clients, " clients"));
  }
  if (!(cfg.method.mu >= 0.0)) throw ConfigError("method.mu", "must be non-negative");
  if (cfg.method.ft_epochs < 1) throw ConfigError("method.ft_epochs", "must be at least 1");
  if (cfg.method.dwa.guidance.adapt_steps < 1) {
    throw ConfigError("method.guidance.adapt_steps", "must be at least 1");
  }
  if (!(cfg.model.init_scale >= 0.0)) throw ConfigError("model.init_scale", "must be non-negative");
  if (cfg.model.kind == ModelKind::mlp && cfg.model.hidden_dim == 0) {
    throw ConfigError("model.hidden_dim", "must be positive for the mlp");
  }
  if (!(cfg.train.lr >= 0.0)) throw ConfigError("train.lr", "must be non-negative");
  cfg.train.validate();
  if (!(cfg.partition.alpha > 0.0)) throw ConfigError("partition.alpha", "alpha must be positive");
  if (!(cfg.partition.dominant_fraction > 0.0 && cfg.partition.dominant_fraction <= 1.0)) {
    throw ConfigError("partition.s", "must lie in (0, 1]");
  }
  if (!(cfg.data.test_fraction > 0.0 && cfg.data.test_fraction < 1.0)) {
    throw ConfigError("data.test_fraction", "must lie in (0, 1)");
  }
  if (!(cfg.data.noise >= 0.0 && cfg.data.noise <= 1.0)) throw ConfigError("data.noise", "must lie in [0, 1]");
  if (!(cfg.data.separation >= 0.0)) throw ConfigError("data.separation", "must be non-negative");

  switch (cfg.data.source) {
    case DataSource::synth_clusters:
      if (cfg.data.num_groups == 0 || cfg.clients % cfg.data.num_groups != 0) {
        throw ConfigError("data.num_groups", detail::concat(cfg.clients, " clients do not split into ",
                                                            cfg.data.num_groups, " equal groups"));
      }
      if (cfg.data.samples_per_client < 2) throw ConfigError("data.samples_per_client", "must be >= 2");
      if (cfg.data.features == 0) throw ConfigError("data.features", "must be positive");
      if (cfg.data.classes < 2) throw ConfigError("data.classes", "must be at least 2");
      break;
    case DataSource::gaussian:
      if (cfg.data.features == 0) throw ConfigError("data.features", "must be positive");
      if (cfg.data.classes < 2) throw ConfigError("data.classes", "must be at least 2");
      if (cfg.data.samples_per_class == 0) throw ConfigError("data.samples_per_class", "must be positive");
      break;
    case DataSource::csv:
      if (cfg.data.csv_path.empty()) throw ConfigError("data.csv.path", "required for csv data");
      if (!std::filesystem::is_regular_file(cfg.data.csv_path)) {
        throw ConfigError("data.csv.path", detail::concat("'", cfg.data.csv_path, "' does not exist"));
      }
      break;
  }
  if (cfg.data.source != DataSource::synth_clusters && cfg.clients < 2) {
    throw ConfigError("clients", "partitioned data needs at least 2 clients");
  }

  cfg.partition.num_clients = cfg.clients;
  cfg.partition.test_fraction = cfg.data.test_fraction;
  cfg.partition.seed = cfg.train.seed;
  cfg.partition.min_client_samples = min_client_samples.value_or(cfg.train.batch_size);

  if (cfg.output.dir.empty()) {
    cfg.output.dir = default_output_root() /
                     detail::concat(to_string(cfg.method.kind), "_seed", cfg.train.seed);
  }
  return cfg;
}

inline RunConfig parse_config(const std::optional<std::filesystem::path>& path,
                              const ConfigOverrides& overrides = {}) {
  json doc = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("config", detail::concat("cannot open '", path->string(), "'"));
    try {
      doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config", detail::concat(path->string(), ": ", e.what()));
    }
  }
  return config_from_json(std::move(doc), overrides);
}

inline json config_to_json(const RunConfig& cfg) {
  static constexpr std::string_view guidance_names[] = {"onestep", "last", "current"};
  json j;
  j["seed"] = cfg.train.seed;
  j["clients"] = cfg.clients;
  j["method"] = {{"name", to_string(cfg.method.kind)},
                 {"k", cfg.method.dwa.top_k},
                 {"mu", cfg.method.mu},
                 {"ft_epochs", cfg.method.ft_epochs},
                 {"uniform_first_round", cfg.method.dwa.uniform_first_round},
                 {"guidance",
                  {{"mode", guidance_names[int(cfg.method.dwa.guidance.mode)]},
                   {"adapt_steps", cfg.method.dwa.guidance.adapt_steps},
                   {"adapt_batch",
                    cfg.method.dwa.guidance.adapt_batch == AdaptBatch::full ? "full" : "minibatch"}}}};
  j["model"] = {{"kind", cfg.model.kind == ModelKind::softmax ? "softmax" : "mlp"},
                {"hidden_dim", cfg.model.hidden_dim},
                {"init_scale", cfg.model.init_scale}};
  j["train"] = {{"rounds", cfg.train.rounds},       {"fraction", cfg.train.fraction},
                {"lr", cfg.train.lr},               {"batch_size", cfg.train.batch_size},
                {"local_epochs", cfg.train.local_epochs}, {"size_weighted", cfg.train.size_weighted}};
  static constexpr std::string_view sources[] = {"gaussian", "synth_clusters", "csv"};
  j["data"] = {{"source", sources[int(cfg.data.source)]},
               {"samples_per_class", cfg.data.samples_per_class},
               {"features", cfg.data.features},
               {"classes", cfg.data.classes},
               {"separation", cfg.data.separation},
               {"num_groups", cfg.data.num_groups},
               {"samples_per_client", cfg.data.samples_per_client},
               {"noise", cfg.data.noise},
               {"margin", cfg.data.margin},
               {"test_fraction", cfg.data.test_fraction},
               {"csv",
                {{"path", cfg.data.csv_path},
                 {"header", cfg.data.csv.has_header},
                 {"scale", cfg.data.csv.scale},
                 {"classes", cfg.data.csv.num_classes}}}};
  j["partition"] = {{"setting", to_string(cfg.partition.setting)},
                    {"alpha", cfg.partition.alpha},
                    {"s", cfg.partition.dominant_fraction},
                    {"classes_per_client", cfg.partition.classes_per_client},
                    {"num_groups", cfg.partition.num_groups},
                    {"dominant_per_group", cfg.partition.dominant_per_group},
                    {"samples_per_client", cfg.partition.samples_per_client},
                    {"min_client_samples", cfg.partition.min_client_samples}};
  j["output"] = {{"dir", cfg.output.dir.string()}, {"export_weights", cfg.output.export_weights}};
  return j;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

inline FederatedData build_data(const RunConfig& cfg) {
  Rng root(cfg.train.seed);
  Rng data_rng = root.substream("data");
  Rng part_rng = root.substream("partition");
  switch (cfg.data.source) {
    case DataSource::synth_clusters: {
      ClusterTaskSpec spec;
      spec.num_groups = cfg.data.num_groups;
      spec.clients_per_group = cfg.clients / cfg.data.num_groups;
      spec.num_features = cfg.data.features;
      spec.num_classes = cfg.data.classes;
      spec.samples_per_client = cfg.data.samples_per_client;
      spec.noise = cfg.data.noise;
      spec.margin = cfg.data.margin;
      spec.test_fraction = cfg.data.test_fraction;
      return synth_clusters(spec, data_rng);
    }
    case DataSource::gaussian: {
      auto base = synth_gaussian(cfg.data.samples_per_class, cfg.data.features, cfg.data.classes,
                                 cfg.data.separation, data_rng);
      return partition(base, cfg.partition, part_rng);
    }
    case DataSource::csv: {
      auto base = load_csv(cfg.data.csv_path, cfg.data.csv);
      return partition(base, cfg.partition, part_rng);
    }
  }
  throw StructuralError("unknown data source");
}

inline ModelSpec resolved_model(const RunConfig& cfg, const FederatedData& data) {
  ModelSpec spec = cfg.model;
  spec.input_dim = data.num_features;
  spec.num_classes = data.num_classes;
  return spec;
}

// Writes `content` next to `path` and renames it into place.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure(detail::concat("cannot write '", tmp.string(), "'"));
    out << content;
    out.flush();
    if (!out) throw RuntimeFailure(detail::concat("write to '", tmp.string(), "' failed"));
  }
  std::filesystem::rename(tmp, path);
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string weights_csv(const WeightMatrix& w) {
  std::string out = "client";
  for (auto id : w.ids()) out += "," + std::to_string(id);
  out += '\n';
  for (std::size_t i = 0; i < w.size(); ++i) {
    out += std::to_string(w.ids()[i]);
    for (double v : w.row(i)) out += "," + format_number(v);
    out += '\n';
  }
  return out;
}

struct ExperimentResult {
  RunConfig config;
  RunResult run;
  std::string method_name;
  std::size_t model_bytes = 0;
  std::size_t uplink_models = 0;
  std::size_t downlink_models = 0;
  double elapsed_seconds = 0.0;
  json summary;
};

inline json summary_json(const ExperimentResult& r) {
  const auto totals = r.run.ledger.total();
  std::uint64_t participant_rounds = 0;
  for (const auto& rep : r.run.reports) participant_rounds += rep.participants.size();
  const std::uint64_t mult = r.uplink_models + r.downlink_models;
  json j;
  j["method"] = r.method_name;
  j["seed"] = r.config.train.seed;
  j["clients"] = r.config.clients;
  j["rounds"] = r.run.reports.size();
  j["best_mean_accuracy"] = r.run.best_round ? json(r.run.best_mean_accuracy) : json(nullptr);
  j["best_round"] = r.run.best_round ? json(*r.run.best_round) : json(nullptr);
  j["final_mean_accuracy"] = r.run.reports.empty() ? json(nullptr) : json(r.run.final_mean_accuracy);
  j["model_bytes"] = r.model_bytes;
  j["traffic_multiplier"] = mult;
  j["uplink_multiplier"] = r.uplink_models;
  j["downlink_multiplier"] = r.downlink_models;
  j["total_uplink_bytes"] = totals.uplink;
  j["total_downlink_bytes"] = totals.downlink;
  j["total_bytes"] = totals.uplink + totals.downlink;
  j["expected_total_bytes"] = participant_rounds * mult * r.model_bytes;
  j["server_madds"] = r.run.server_madds;
  j["elapsed_seconds"] = r.elapsed_seconds;
  return j;
}

// Runs one configuration and writes metrics.csv, summary.json, manifest.json,
// config.json and (with export_weights) weights_<t>.csv into cfg.output.dir.
inline ExperimentResult run_experiment(const RunConfig& cfg, bool write_outputs = true) {
  const auto t0 = std::chrono::steady_clock::now();
  const FederatedData data = build_data(cfg);
  const ModelSpec spec = resolved_model(cfg, data);
  Federation fed = make_federation(data, spec, cfg.train);
  auto method = make_method(cfg.method);

  ExperimentResult res;
  res.config = cfg;
  res.method_name = method->name();
  res.model_bytes = fed.model_bytes();
  res.uplink_models = method->uplink_models();
  res.downlink_models = method->downlink_models();

  if (write_outputs) {
    std::filesystem::create_directories(cfg.output.dir);
    write_atomic(cfg.output.dir / "config.json", config_to_json(cfg).dump(2) + "\n");
    write_atomic(cfg.output.dir / "manifest.json", manifest_json(data).dump(2) + "\n");
  }

  std::string metrics = "round,client,accuracy,uplink,downlink\n";
  res.run = run(fed, *method, [&](const RoundReport& rep) {
    if (!write_outputs) return;
    for (std::size_t i = 0; i < rep.accuracy.size(); ++i) {
      // ledger lookup happens after run(); per-round bytes per client are the
      // method's fixed multipliers for participants and zero otherwise
      const bool took_part =
          std::binary_search(rep.participants.begin(), rep.participants.end(), i);
      const std::uint64_t up = took_part ? res.uplink_models * res.model_bytes : 0;
      const std::uint64_t down = took_part ? res.downlink_models * res.model_bytes : 0;
      metrics += detail::concat(rep.round, ",", i, ",", format_number(rep.accuracy[i]), ",", up,
                                ",", down, "\n");
    }
    if (cfg.output.export_weights && rep.weights) {
      write_atomic(cfg.output.dir / detail::concat("weights_", rep.round, ".csv"),
                   weights_csv(*rep.weights));
    }
  });
  res.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.summary = summary_json(res);
  if (write_outputs) {
    write_atomic(cfg.output.dir / "metrics.csv", metrics);
    write_atomic(cfg.output.dir / "summary.json", res.summary.dump(2) + "\n");
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { k, alpha, adapt_steps, s };

inline SweepAxis parse_axis(const std::string& name) {
  return detail::parse_choice<SweepAxis>("axis", name,
                                         {{"K", SweepAxis::k},
                                          {"k", SweepAxis::k},
                                          {"alpha", SweepAxis::alpha},
                                          {"adapt_steps", SweepAxis::adapt_steps},
                                          {"s", SweepAxis::s}});
}

inline std::string_view to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::k: return "K";
    case SweepAxis::alpha: return "alpha";
    case SweepAxis::adapt_steps: return "adapt_steps";
    case SweepAxis::s: return "s";
  }
  return "?";
}

struct SweepRow {
  double value = 0.0;
  bool ok = false;
  std::string error;
  double best_mean_accuracy = 0.0;
  std::size_t best_round = 0;
  double final_mean_accuracy = 0.0;
  std::uint64_t total_bytes = 0;
  std::uint64_t seed = 0;
};

inline RunConfig with_axis_value(RunConfig cfg, SweepAxis axis, double value) {
  auto as_count = [&](const char* key) {
    if (!(value >= 1.0) || value != std::floor(value)) {
      throw ConfigError(key, detail::concat(value, " is not a positive integer"));
    }
    return std::size_t(value);
  };
  switch (axis) {
    case SweepAxis::k:
      cfg.method.dwa.top_k = as_count("method.k");
      if (cfg.method.dwa.top_k > cfg.clients) throw ConfigError("method.k", "exceeds the number of clients");
      break;
    case SweepAxis::alpha:
      if (!(value > 0.0)) throw ConfigError("partition.alpha", "alpha must be positive");
      cfg.partition.alpha = value;
      break;
    case SweepAxis::adapt_steps:
      cfg.method.dwa.guidance.adapt_steps = as_count("method.guidance.adapt_steps");
      break;
    case SweepAxis::s:
      if (!(value > 0.0 && value <= 1.0)) throw ConfigError("partition.s", "must lie in (0, 1]");
      cfg.partition.dominant_fraction = value;
      break;
  }
  cfg.output.dir = cfg.output.dir / detail::concat(to_string(axis), "_", format_number(value));
  return cfg;
}

inline std::string sweep_csv(SweepAxis axis, const std::vector<SweepRow>& rows) {
  std::string out = "axis,value,seed,status,best_mean_accuracy,best_round,final_mean_accuracy,total_bytes,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    for (char& c : err) {
      if (c == ',' || c == '\n') c = ';';
    }
    out += detail::concat(to_string(axis), ",", format_number(r.value), ",", r.seed, ",",
                          r.ok ? "ok" : "failed", ",",
                          r.ok ? format_number(r.best_mean_accuracy) : "", ",",
                          r.ok ? std::to_string(r.best_round) : "", ",",
                          r.ok ? format_number(r.final_mean_accuracy) : "", ",",
                          r.ok ? std::to_string(r.total_bytes) : "", ",", err, "\n");
  }
  return out;
}

// One run per value; a failing value is recorded and the sweep moves on.
// Writes sweep.csv into base.output.dir when write_outputs is set.
inline std::vector<SweepRow> sweep(const RunConfig& base, SweepAxis axis,
                                   const std::vector<double>& values, bool write_outputs = true) {
  std::vector<SweepRow> rows;
  for (double v : values) {
    SweepRow row;
    row.value = v;
    row.seed = base.train.seed;
    try {
      const RunConfig cfg = with_axis_value(base, axis, v);
      auto res = run_experiment(cfg, write_outputs);
      row.ok = true;
      row.best_mean_accuracy = res.run.best_mean_accuracy;
      row.best_round = res.run.best_round.value_or(0);
      row.final_mean_accuracy = res.run.final_mean_accuracy;
      const auto t = res.run.ledger.total();
      row.total_bytes = t.uplink + t.downlink;
    } catch (const std::exception& e) {
      row.error = e.what();
      notice(detail::concat("sweep ", to_string(axis), "=", format_number(v), " failed: ", e.what()));
    }
    rows.push_back(std::move(row));
  }
  if (write_outputs) {
    std::filesystem::create_directories(base.output.dir);
    write_atomic(base.output.dir / "sweep.csv", sweep_csv(axis, rows));
  }
  return rows;
}

}  // namespace feddwa

#endif  // FEDDWA_EXPERIMENT_HPP
