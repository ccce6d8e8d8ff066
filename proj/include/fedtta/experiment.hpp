#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include <fedtta/data.hpp>
#include <fedtta/federation.hpp>
#include <fedtta/hetero.hpp>
#include <fedtta/metrics.hpp>
#include <fedtta/serialize.hpp>

namespace fedtta {

using nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// schema helpers
// ---------------------------------------------------------------------------

namespace detail {

inline void require_keys(const json& obj, const std::string& where,
                         std::initializer_list<const char*> required,
                         std::initializer_list<const char*> optional) {
  if (!obj.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed;
  for (const char* k : required) allowed.insert(k);
  for (const char* k : optional) allowed.insert(k);
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  for (const char* k : required)
    if (!obj.contains(k)) throw ConfigError(where + ": missing key '" + k + "'");
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  return obj.contains(key) ? obj.at(key).get<T>() : fallback;
}

// 17 significant digits, enough to round-trip any double
inline std::string fmt17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

struct TaskConfig {
  std::size_t classes = 10;
  std::size_t dim = 20;
  std::size_t samples_per_client = 60;
  std::size_t train_clients = 20;
  std::size_t test_clients = 20;
  PartitionSpec partition;
  double test_data_fraction = 1.0;
  std::size_t public_samples = 0;

  static TaskConfig parse(const json& obj) {
    detail::require_keys(obj, "task",
                         {"classes", "dim", "samples_per_client", "train_clients", "test_clients",
                          "partition"},
                         {"test_data_fraction", "public_samples"});
    TaskConfig t;
    t.classes = obj.at("classes").get<std::size_t>();
    t.dim = obj.at("dim").get<std::size_t>();
    t.samples_per_client = obj.at("samples_per_client").get<std::size_t>();
    t.train_clients = obj.at("train_clients").get<std::size_t>();
    t.test_clients = obj.at("test_clients").get<std::size_t>();
    t.test_data_fraction = detail::get_or(obj, "test_data_fraction", 1.0);
    t.public_samples = detail::get_or<std::size_t>(obj, "public_samples", 0);
    if (t.test_data_fraction <= 0.0 || t.test_data_fraction > 1.0)
      throw ConfigError("task.test_data_fraction must be in (0, 1]");

    const json& part = obj.at("partition");
    if (!part.is_object() || !part.contains("scheme"))
      throw ConfigError("task.partition: missing key 'scheme'");
    const std::string scheme = part.at("scheme").get<std::string>();
    PartitionSpec& p = t.partition;
    if (scheme == "pathological") {
      detail::require_keys(part, "task.partition", {"scheme", "labels_per_client"}, {});
      p.scheme = PartitionSpec::Scheme::pathological;
      p.labels_per_client = part.at("labels_per_client").get<std::size_t>();
    } else if (scheme == "dirichlet") {
      detail::require_keys(part, "task.partition", {"scheme", "alpha"}, {"alpha_test"});
      p.scheme = PartitionSpec::Scheme::dirichlet;
      p.alpha = part.at("alpha").get<double>();
      p.alpha_test = detail::get_or(part, "alpha_test", p.alpha);
    } else if (scheme == "rotated") {
      detail::require_keys(part, "task.partition", {"scheme", "angles_train", "angles_test"}, {});
      p.scheme = PartitionSpec::Scheme::rotated;
      p.angles_train = part.at("angles_train").get<std::vector<double>>();
      p.angles_test = part.at("angles_test").get<std::vector<double>>();
    } else if (scheme == "iid") {
      detail::require_keys(part, "task.partition", {"scheme"}, {});
      p.scheme = PartitionSpec::Scheme::iid;
    } else {
      throw ConfigError("task.partition.scheme: unknown scheme '" + scheme + "'");
    }
    p.n_train_clients = t.train_clients;
    p.n_test_clients = t.test_clients;
    return t;
  }
};

struct MethodConfig {
  Method method = Method::fedtta;
  FederationConfig federation;  // prediction/adaptation specs filled against the task

  static MethodConfig parse(const json& obj, const TaskConfig& task) {
    detail::require_keys(obj, "method", {"name", "rounds", "local_iters", "batch"},
                         {"clients_per_round", "eta_inner", "eta_outer", "eta_adapt", "mu",
                          "test_steps", "patience", "prediction_hidden", "adaptation_hidden"});
    MethodConfig m;
    m.method = method_from_name(obj.at("name").get<std::string>());
    FederationConfig& f = m.federation;
    f.rounds = obj.at("rounds").get<int>();
    f.local_iters = obj.at("local_iters").get<int>();
    f.batch = obj.at("batch").get<std::size_t>();
    f.clients_per_round = detail::get_or(obj, "clients_per_round", 0);
    f.eta_inner = detail::get_or(obj, "eta_inner", 0.5);
    f.eta_outer = detail::get_or(obj, "eta_outer", 0.1);
    f.eta_adapt = detail::get_or(obj, "eta_adapt", 0.01);
    f.mu = detail::get_or(obj, "mu", 0.0);
    f.test_steps = detail::get_or(obj, "test_steps", 1);
    const int patience = detail::get_or(obj, "patience", 0);
    if (patience < 0) throw ConfigError("method.patience must be >= 0 (0 disables)");
    f.patience = patience == 0 ? std::nullopt : std::optional<int>(patience);

    std::vector<std::size_t> pred_hidden =
        detail::get_or(obj, "prediction_hidden", std::vector<std::size_t>{200, 200});
    std::vector<std::size_t> adapt_hidden =
        detail::get_or(obj, "adaptation_hidden", std::vector<std::size_t>{32, 32, 32});
    f.prediction.widths.push_back(task.dim);
    for (std::size_t w : pred_hidden) f.prediction.widths.push_back(w);
    f.prediction.widths.push_back(task.classes);
    f.adaptation.widths.push_back(task.classes);
    for (std::size_t w : adapt_hidden) f.adaptation.widths.push_back(w);
    f.adaptation.widths.push_back(1);
    f.validate();
    f.adaptation.validate();
    return m;
  }
};

struct HeteroBlockConfig {
  HeteroConfig hetero;
  std::vector<double> lambdas;
  int onboard_kd_steps = 0;  // 0: same as kd_steps

  static HeteroBlockConfig parse(const json& obj) {
    detail::require_keys(obj, "hetero", {"rounds", "kd_steps", "local_iters", "batch"},
                         {"lambda", "lambdas", "eta_inner", "eta_outer", "eta_digest", "eta_adapt",
                          "mu", "test_steps", "patience", "onboard_kd_steps"});
    HeteroBlockConfig h;
    HeteroConfig& c = h.hetero;
    c.rounds = obj.at("rounds").get<int>();
    c.kd_steps = obj.at("kd_steps").get<int>();
    c.local_iters = obj.at("local_iters").get<int>();
    c.batch = obj.at("batch").get<std::size_t>();
    c.eta_inner = detail::get_or(obj, "eta_inner", 0.1);
    c.eta_outer = detail::get_or(obj, "eta_outer", 0.1);
    c.eta_digest = detail::get_or(obj, "eta_digest", 0.3);
    c.eta_adapt = detail::get_or(obj, "eta_adapt", 0.01);
    c.mu = detail::get_or(obj, "mu", 0.0);
    c.test_steps = detail::get_or(obj, "test_steps", 1);
    const int patience = detail::get_or(obj, "patience", 0);
    c.patience = patience == 0 ? std::nullopt : std::optional<int>(patience);
    h.onboard_kd_steps = detail::get_or(obj, "onboard_kd_steps", 0);
    if (obj.contains("lambdas"))
      h.lambdas = obj.at("lambdas").get<std::vector<double>>();
    else
      h.lambdas = {detail::get_or(obj, "lambda", 0.0)};
    if (h.lambdas.empty()) throw ConfigError("hetero.lambdas must not be empty");
    c.validate();
    return h;
  }
};

struct ExperimentConfig {
  int version = 1;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
  TaskConfig task;
  std::vector<MethodConfig> methods;  // one for run, several for compare
  std::optional<HeteroBlockConfig> hetero;
  std::string config_hash;  // hex of the canonical document

  static ExperimentConfig parse(const json& doc) {
    detail::require_keys(doc, "config", {"version", "output_dir", "seeds", "task"},
                         {"method", "methods", "hetero"});
    ExperimentConfig cfg;
    cfg.version = doc.at("version").get<int>();
    if (cfg.version != 1) throw ConfigError("config.version: only version 1 is supported");
    cfg.output_dir = doc.at("output_dir").get<std::string>();
    cfg.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    if (cfg.seeds.empty()) throw ConfigError("config.seeds must not be empty");
    cfg.task = TaskConfig::parse(doc.at("task"));
    if (doc.contains("method") && doc.contains("methods"))
      throw ConfigError("config: give either 'method' or 'methods', not both");
    if (doc.contains("method")) cfg.methods.push_back(MethodConfig::parse(doc.at("method"), cfg.task));
    if (doc.contains("methods"))
      for (const json& m : doc.at("methods")) cfg.methods.push_back(MethodConfig::parse(m, cfg.task));
    if (doc.contains("hetero")) cfg.hetero = HeteroBlockConfig::parse(doc.at("hetero"));
    if (cfg.methods.empty() && !cfg.hetero)
      throw ConfigError("config: needs a 'method', 'methods' or 'hetero' block");
    // hash the experiment identity; where the outputs land is not part of it
    json canonical = doc;
    canonical.erase("output_dir");
    cfg.config_hash = detail::hex64(detail::fnv1a64(canonical.dump()));
    return cfg;
  }

  static ExperimentConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config: " + path);
    json doc;
    try {
      doc = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
    return parse(doc);
  }
};

// ---------------------------------------------------------------------------
// data construction
// ---------------------------------------------------------------------------

struct BuiltData {
  BaseTask task;
  std::vector<ClientDataset> training;
  std::vector<ClientDataset> test;
  UnlabeledDataset public_data;
  std::uint64_t partition_hash = 0;
};

namespace detail {

inline std::uint64_t hash_partition(std::span<const ClientDataset> clients) {
  std::string blob;
  for (const ClientDataset& c : clients) {
    blob += std::to_string(c.id()) + (c.role() == ClientRole::training ? "t" : "e");
    for (std::size_t count : c.label_histogram()) blob += "," + std::to_string(count);
    blob += ";";
  }
  return fnv1a64(blob);
}

}  // namespace detail

inline BuiltData build_data(const TaskConfig& task_cfg, std::uint64_t seed) {
  BuiltData out;
  const std::size_t total_clients = task_cfg.train_clients + task_cfg.test_clients;
  out.task = generate_base_task(task_cfg.classes, task_cfg.dim,
                                task_cfg.samples_per_client * total_clients,
                                mix64(seed, 0x7461736b2ULL));
  PartitionSpec spec = task_cfg.partition;
  spec.seed = mix64(seed, 0x70617274ULL);
  std::vector<ClientDataset> clients = partition_clients(out.task, spec);
  out.partition_hash = detail::hash_partition(clients);
  for (ClientDataset& c : clients) {
    if (c.role() == ClientRole::training) {
      out.training.push_back(std::move(c));
    } else if (task_cfg.test_data_fraction < 1.0) {
      out.test.push_back(reduce_client_data(c, task_cfg.test_data_fraction, mix64(seed, 0x66726163ULL)));
    } else {
      out.test.push_back(std::move(c));
    }
  }
  if (task_cfg.public_samples > 0)
    out.public_data = make_public_dataset(out.task, task_cfg.public_samples, mix64(seed, 0x7075626cULL));
  return out;
}

// ---------------------------------------------------------------------------
// output writers
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open output file: " + path.string());
  return os;
}

inline void write_rounds_csv(const std::filesystem::path& path, const std::string& config_hash,
                             std::uint64_t seed, const std::string& method,
                             const TrainResult& result, double test_accuracy, int test_round) {
  std::ofstream os = open_output(path);
  os << "# config=" << config_hash << " seed=" << seed << " method=" << method << "\n";
  os << "round,split,mean_accuracy\n";
  for (const auto& r : result.rounds)
    os << r.round << ",validation," << fmt17(r.mean_validation_accuracy) << "\n";
  os << test_round << ",test," << fmt17(test_accuracy) << "\n";
}

inline void write_clients_csv(const std::filesystem::path& path, const std::string& config_hash,
                              std::uint64_t seed, const std::string& method,
                              const TrainResult& result, std::span<const EvalRecord> test_records) {
  std::ofstream os = open_output(path);
  os << "# config=" << config_hash << " seed=" << seed << " method=" << method << "\n";
  os << "round,split,client_id,accuracy,correct,count\n";
  auto write_record = [&os](const EvalRecord& r) {
    os << r.round << "," << r.split << "," << r.client_id << "," << fmt17(r.accuracy.fraction())
       << "," << r.accuracy.correct << "," << r.accuracy.count << "\n";
  };
  for (const auto& round : result.rounds)
    for (const auto& rec : round.per_client) write_record(rec);
  for (const auto& rec : test_records) write_record(rec);
}

inline double sample_std(std::span<const double> values, double mean) {
  if (values.size() < 2) return 0.0;
  double acc = 0.0;
  for (double v : values) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

inline double mean_of(std::span<const double> values) {
  double acc = 0.0;
  for (double v : values) acc += v;
  return values.empty() ? 0.0 : acc / static_cast<double>(values.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// runners
// ---------------------------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  int best_round = 0;
  double validation_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::uint64_t partition_hash = 0;
};

struct RunSummary {
  std::string method;
  std::vector<SeedOutcome> seeds;
  double validation_mean = 0.0, validation_std = 0.0;
  double test_mean = 0.0, test_std = 0.0;

  void finalize() {
    std::vector<double> val, test;
    for (const auto& s : seeds) {
      val.push_back(s.validation_accuracy);
      test.push_back(s.test_accuracy);
    }
    validation_mean = detail::mean_of(val);
    validation_std = detail::sample_std(val, validation_mean);
    test_mean = detail::mean_of(test);
    test_std = detail::sample_std(test, test_mean);
  }

  json to_json() const {
    json seeds_json = json::array();
    for (const auto& s : seeds)
      seeds_json.push_back({{"seed", s.seed},
                            {"best_round", s.best_round},
                            {"validation_accuracy", s.validation_accuracy},
                            {"test_accuracy", s.test_accuracy},
                            {"partition_hash", detail::hex64(s.partition_hash)}});
    return {{"method", method},
            {"seeds", seeds_json},
            {"validation_mean", validation_mean},
            {"validation_std", validation_std},
            {"test_mean", test_mean},
            {"test_std", test_std}};
  }
};

// one method on one prepared dataset; reused by run, compare and the tests
inline SeedOutcome run_method_on_data(const MethodConfig& method, const BuiltData& data,
                                      std::uint64_t seed, TrainResult* result_out = nullptr,
                                      std::vector<EvalRecord>* test_records_out = nullptr) {
  FederationConfig cfg = method.federation;
  cfg.seed = seed;
  TrainResult result = run_training(method.method, cfg, data.training);
  std::vector<EvalRecord> test_records =
      evaluate_test_clients(method.method, cfg, result, data.test);

  SeedOutcome outcome;
  outcome.seed = seed;
  outcome.best_round = result.best_round;
  outcome.validation_accuracy = result.best_validation_accuracy;
  outcome.test_accuracy = mean_accuracy(test_records);
  outcome.partition_hash = data.partition_hash;
  if (result_out) *result_out = std::move(result);
  if (test_records_out) *test_records_out = std::move(test_records);
  return outcome;
}

// `run`: one method, every seed; writes per-round CSV, per-client CSV, best
// checkpoint and a summary with mean and sample standard deviation
inline RunSummary run_experiment(const ExperimentConfig& cfg) {
  if (cfg.methods.size() != 1) throw ConfigError("run: config must have exactly one method");
  const MethodConfig& method = cfg.methods.front();
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);

  RunSummary summary;
  summary.method = method_name(method.method);
  for (std::uint64_t seed : cfg.seeds) {
    BuiltData data = build_data(cfg.task, seed);
    TrainResult result;
    std::vector<EvalRecord> test_records;
    SeedOutcome outcome = run_method_on_data(method, data, seed, &result, &test_records);
    summary.seeds.push_back(outcome);

    const std::string tag = "_seed" + std::to_string(seed);
    detail::write_rounds_csv(out_dir / ("rounds" + tag + ".csv"), cfg.config_hash, seed,
                             summary.method, result, outcome.test_accuracy, outcome.best_round);
    detail::write_clients_csv(out_dir / ("clients" + tag + ".csv"), cfg.config_hash, seed,
                              summary.method, result, test_records);
    Checkpoint ck{static_cast<std::uint32_t>(result.best_round), result.best_psi, result.best_phi};
    save_checkpoint((out_dir / ("checkpoint" + tag + ".bin")).string(), ck);
  }
  summary.finalize();

  json doc = summary.to_json();
  doc["config"] = cfg.config_hash;
  std::ofstream os = detail::open_output(out_dir / "summary.json");
  os << doc.dump(2) << "\n";
  return summary;
}

// `compare`: several methods over identical data and seeds; partition hashes
// are recorded per method and must agree
inline std::vector<RunSummary> compare_experiment(const ExperimentConfig& cfg) {
  if (cfg.methods.empty()) throw ConfigError("compare: config needs a 'methods' list");
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);

  std::vector<RunSummary> summaries(cfg.methods.size());
  for (std::size_t m = 0; m < cfg.methods.size(); ++m)
    summaries[m].method = method_name(cfg.methods[m].method);

  for (std::uint64_t seed : cfg.seeds) {
    BuiltData data = build_data(cfg.task, seed);  // one partition, every method
    for (std::size_t m = 0; m < cfg.methods.size(); ++m)
      summaries[m].seeds.push_back(run_method_on_data(cfg.methods[m], data, seed));
  }
  for (auto& s : summaries) s.finalize();

  json methods_json = json::array();
  for (const auto& s : summaries) methods_json.push_back(s.to_json());
  json doc = {{"config", cfg.config_hash}, {"methods", methods_json}};
  std::ofstream os = detail::open_output(out_dir / "compare_summary.json");
  os << doc.dump(2) << "\n";

  std::ofstream table = detail::open_output(out_dir / "compare_table.csv");
  table << "# config=" << cfg.config_hash << "\n";
  table << "method,validation_mean,validation_std,test_mean,test_std\n";
  for (const auto& s : summaries)
    table << s.method << "," << detail::fmt17(s.validation_mean) << ","
          << detail::fmt17(s.validation_std) << "," << detail::fmt17(s.test_mean) << ","
          << detail::fmt17(s.test_std) << "\n";
  return summaries;
}

// `adapt-curve`: full-length adaptation trace of one client under a saved
// checkpoint, early stopping disabled; the would-be stop and selection under
// the given patience are reported alongside
struct CurveOutput {
  std::vector<MismatchRow> rows;
  int selected_step = 0;
  int would_stop_step = 0;
};

inline CurveOutput adapt_curve(const Checkpoint& checkpoint, const ClientDataset& client,
                               double eta_inner, int steps, std::optional<int> patience) {
  if (!checkpoint.phi)
    throw ConfigError("adapt-curve: checkpoint has no adaptation model");
  AdaptConfig ac{eta_inner, steps, std::nullopt};
  EvalLabelScope scope;  // the curve decorates each step with accuracy
  std::span<const int> labels = client.role() == ClientRole::test
                                    ? client.all_labels()
                                    : client.validation_labels();
  const Tensor& x =
      client.role() == ClientRole::test ? client.features() : client.validation_features();
  AdaptResult result = test_adapt(checkpoint.psi, *checkpoint.phi, x, ac, labels);

  CurveOutput out;
  out.rows = mismatch_curve(result.trace);
  std::vector<double> entropies;
  for (const auto& t : result.trace) entropies.push_back(t.mean_entropy);
  StopAnalysis analysis = analyze_entropy_trace(entropies, patience);
  out.selected_step = analysis.selected_step;
  out.would_stop_step = analysis.stop_step;
  return out;
}

inline void write_curve_csv(const std::filesystem::path& path, const std::string& config_hash,
                            std::uint64_t seed, const CurveOutput& curve) {
  std::ofstream os = detail::open_output(path);
  os << "# config=" << config_hash << " seed=" << seed << " selected_step=" << curve.selected_step
     << " would_stop_step=" << curve.would_stop_step << "\n";
  os << "step,accuracy,per_loss,entropy\n";
  for (const auto& row : curve.rows)
    os << row.step << "," << (row.accuracy ? detail::fmt17(*row.accuracy) : "") << ","
       << detail::fmt17(row.per_loss) << "," << detail::fmt17(row.entropy) << "\n";
}

// `partition`: per-client composition dump for inspection
inline void write_partition_csv(const std::filesystem::path& path, const std::string& config_hash,
                                std::uint64_t seed, const BuiltData& data) {
  std::ofstream os = detail::open_output(path);
  os << "# config=" << config_hash << " seed=" << seed << " partition="
     << detail::hex64(data.partition_hash) << "\n";
  os << "client_id,role,samples";
  const std::size_t classes = data.task.classes();
  for (std::size_t c = 0; c < classes; ++c) os << ",label_" << c;
  os << "\n";
  auto write_client = [&](const ClientDataset& c) {
    os << c.id() << "," << (c.role() == ClientRole::training ? "training" : "test") << ","
       << c.size();
    for (std::size_t cls = 0; cls < classes; ++cls) os << "," << c.label_histogram()[cls];
    os << "\n";
  };
  for (const auto& c : data.training) write_client(c);
  for (const auto& c : data.test) write_client(c);
}

// ---------------------------------------------------------------------------
// hetero runner
// ---------------------------------------------------------------------------

struct HeteroSeedOutcome {
  std::uint64_t seed = 0;
  double validation_accuracy = 0.0;  // final round, training clients
  double test_accuracy = 0.0;        // onboarded test clients
};

struct HeteroLambdaSummary {
  double lambda = 0.0;
  std::vector<HeteroSeedOutcome> seeds;
  double test_mean = 0.0, test_std = 0.0;

  void finalize() {
    std::vector<double> test;
    for (const auto& s : seeds) test.push_back(s.test_accuracy);
    test_mean = detail::mean_of(test);
    test_std = detail::sample_std(test, test_mean);
  }
};

inline FamilyKind pick_family(std::uint64_t seed, int client_id) {
  Rng rng(mix64(seed, 0x66616d69, static_cast<std::uint64_t>(client_id)));
  switch (rng.uniform_int(3)) {
    case 0: return FamilyKind::small;
    case 1: return FamilyKind::medium;
    default: return FamilyKind::big;
  }
}

// Ensemble-distillation run for one lambda and one seed; test clients join as
// new clients through Digest + adaptation
inline HeteroSeedOutcome run_hetero_seed(const TaskConfig& task_cfg,
                                         const HeteroBlockConfig& block, double lambda,
                                         std::uint64_t seed, EnsembleKnowledge* knowledge_out,
                                         std::vector<HeteroRoundMetrics>* rounds_out) {
  if (task_cfg.public_samples == 0)
    throw ConfigError("hetero: task.public_samples must be positive");
  BuiltData data = build_data(task_cfg, seed);

  HeteroConfig cfg = block.hetero;
  cfg.lambda = lambda;
  cfg.seed = seed;

  std::vector<HeteroClient> clients;
  for (const ClientDataset& c : data.training) {
    ModelFamily family =
        ModelFamily::make(pick_family(seed, c.id()), task_cfg.dim, task_cfg.classes);
    clients.push_back(make_hetero_client(c.id(), family, c, seed));
  }
  HeteroResult trained = run_hetero_training(clients, data.public_data, cfg);

  HeteroConfig onboard_cfg = cfg;
  if (block.onboard_kd_steps > 0) onboard_cfg.kd_steps = block.onboard_kd_steps;

  const unsigned workers = worker_count();
  std::vector<double> accs(data.test.size(), 0.0);
  parallel_for(data.test.size(), workers, [&](std::size_t i) {
    const ClientDataset& c = data.test[i];
    ModelFamily family =
        ModelFamily::make(pick_family(seed, c.id()), task_cfg.dim, task_cfg.classes);
    OnboardResult ob = new_client_onboard(family, c.features(), data.public_data,
                                          trained.knowledge, onboard_cfg,
                                          mix64(seed, static_cast<std::uint64_t>(c.id())));
    EvalLabelScope scope;
    accs[i] = top1_accuracy(ob.predictions, c.all_labels()).fraction();
  });

  HeteroSeedOutcome outcome;
  outcome.seed = seed;
  outcome.test_accuracy = detail::mean_of(accs);
  outcome.validation_accuracy =
      trained.rounds.empty() ? 0.0 : trained.rounds.back().mean_validation_accuracy;
  if (knowledge_out) *knowledge_out = trained.knowledge;
  if (rounds_out) *rounds_out = trained.rounds;
  return outcome;
}

inline std::vector<HeteroLambdaSummary> run_hetero_experiment(const ExperimentConfig& cfg) {
  if (!cfg.hetero) throw ConfigError("hetero: config needs a 'hetero' block");
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);

  std::vector<HeteroLambdaSummary> summaries;
  for (double lambda : cfg.hetero->lambdas) {
    HeteroLambdaSummary s;
    s.lambda = lambda;
    for (std::uint64_t seed : cfg.seeds) {
      EnsembleKnowledge knowledge;
      std::vector<HeteroRoundMetrics> rounds;
      s.seeds.push_back(run_hetero_seed(cfg.task, *cfg.hetero, lambda, seed, &knowledge, &rounds));

      char lambda_tag[32];
      std::snprintf(lambda_tag, sizeof(lambda_tag), "%g", lambda);
      const std::string tag =
          "_lambda" + std::string(lambda_tag) + "_seed" + std::to_string(seed);
      save_knowledge((out_dir / ("knowledge" + tag + ".bin")).string(), knowledge);
      std::ofstream os = detail::open_output(out_dir / ("hetero_rounds" + tag + ".csv"));
      os << "# config=" << cfg.config_hash << " seed=" << seed << " lambda=" << detail::fmt17(lambda)
         << "\n";
      os << "round,mean_validation_accuracy\n";
      for (const auto& r : rounds)
        os << r.round << "," << detail::fmt17(r.mean_validation_accuracy) << "\n";
    }
    s.finalize();
    summaries.push_back(std::move(s));
  }

  json lambdas_json = json::array();
  for (const auto& s : summaries) {
    json seeds_json = json::array();
    for (const auto& o : s.seeds)
      seeds_json.push_back({{"seed", o.seed},
                            {"validation_accuracy", o.validation_accuracy},
                            {"test_accuracy", o.test_accuracy}});
    lambdas_json.push_back({{"lambda", s.lambda},
                            {"seeds", seeds_json},
                            {"test_mean", s.test_mean},
                            {"test_std", s.test_std}});
  }
  json doc = {{"config", cfg.config_hash}, {"lambdas", lambdas_json}};
  std::ofstream os = detail::open_output(out_dir / "hetero_summary.json");
  os << doc.dump(2) << "\n";
  return summaries;
}

}  // namespace fedtta
