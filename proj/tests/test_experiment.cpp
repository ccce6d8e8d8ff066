#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <fedtta/experiment.hpp>
#include <fedtta/serialize.hpp>

#include "test_util.hpp"

using namespace fedtta;
using testutil::tensors_bitwise_equal;

namespace {

std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

json small_run_config(const std::string& out_dir) {
  return json{
      {"version", 1},
      {"output_dir", out_dir},
      {"seeds", {1, 2}},
      {"task",
       {{"classes", 4},
        {"dim", 5},
        {"samples_per_client", 40},
        {"train_clients", 4},
        {"test_clients", 2},
        {"partition", {{"scheme", "pathological"}, {"labels_per_client", 2}}}}},
      {"method",
       {{"name", "fedtta_pp"},
        {"rounds", 2},
        {"local_iters", 2},
        {"batch", 16},
        {"eta_inner", 0.1},
        {"eta_outer", 0.1},
        {"eta_adapt", 0.01},
        {"mu", 0.01},
        {"test_steps", 4},
        {"patience", 2},
        {"prediction_hidden", {8}},
        {"adaptation_hidden", {6}}}}};
}

}  // namespace

TEST_SUITE_BEGIN("serialization");

TEST_CASE("model params round-trip exactly") {
  ModelParams p = ModelParams::init(MlpSpec{{3, 7, 2}}, 99);
  std::stringstream ss;
  write_model_params(ss, p);
  ModelParams q = read_model_params(ss);
  CHECK(q.spec == p.spec);
  CHECK(params_bitwise_equal(p, q));
}

TEST_CASE("checkpoint round-trip with and without an adaptation model") {
  Checkpoint a{7, ModelParams::init(MlpSpec{{3, 4, 2}}, 1),
               ModelParams::init(MlpSpec{{2, 5, 1}}, 2)};
  std::stringstream ss;
  write_checkpoint(ss, a);
  Checkpoint b = read_checkpoint(ss);
  CHECK(b.round == 7);
  CHECK(params_bitwise_equal(a.psi, b.psi));
  REQUIRE(b.phi.has_value());
  CHECK(params_bitwise_equal(*a.phi, *b.phi));

  Checkpoint bare{3, ModelParams::init(MlpSpec{{3, 2}}, 5), std::nullopt};
  std::stringstream ss2;
  write_checkpoint(ss2, bare);
  Checkpoint c = read_checkpoint(ss2);
  CHECK_FALSE(c.phi.has_value());
}

TEST_CASE("dataset round-trip is exact") {
  BaseTask task = generate_base_task(3, 4, 50, 7);
  std::stringstream ss;
  write_dataset(ss, task.data);
  LabeledDataset ds = read_dataset(ss);
  CHECK(ds.classes == 3);
  CHECK(ds.labels == task.data.labels);
  CHECK(tensors_bitwise_equal(ds.features, task.data.features));
}

TEST_CASE("knowledge round-trip is exact") {
  Rng rng(5);
  EnsembleKnowledge k{testutil::random_tensor(rng, {11, 3}), testutil::random_tensor(rng, {11, 3})};
  std::stringstream ss;
  write_knowledge(ss, k);
  EnsembleKnowledge k2 = read_knowledge(ss);
  CHECK(tensors_bitwise_equal(k.f_base, k2.f_base));
  CHECK(tensors_bitwise_equal(k.f_per, k2.f_per));
}

TEST_CASE("corrupt streams are rejected") {
  std::stringstream ss("not a real file");
  CHECK_THROWS_AS(read_model_params(ss), SerializeError);
  std::stringstream truncated;
  truncated.write("FTDS", 4);
  CHECK_THROWS_AS(read_dataset(truncated), SerializeError);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("cli_harness");

TEST_CASE("config schema validation") {
  json doc = small_run_config("/tmp/fedtta_test_none");

  SUBCASE("valid config parses") {
    ExperimentConfig cfg = ExperimentConfig::parse(doc);
    CHECK(cfg.methods.size() == 1);
    CHECK(cfg.methods[0].method == Method::fedtta_pp);
    CHECK(cfg.methods[0].federation.patience == 2);
    CHECK(cfg.methods[0].federation.prediction.widths == std::vector<std::size_t>{5, 8, 4});
    CHECK(cfg.config_hash.size() == 16);
  }

  SUBCASE("unknown keys are rejected everywhere") {
    json bad = doc;
    bad["surprise"] = 1;
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse(bad), doctest::Contains("surprise"), ConfigError);

    bad = doc;
    bad["task"]["extra"] = 1;
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse(bad), doctest::Contains("extra"), ConfigError);

    bad = doc;
    bad["method"]["learning_rate"] = 0.1;
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse(bad), doctest::Contains("learning_rate"),
                         ConfigError);

    bad = doc;
    bad["task"]["partition"]["alpha"] = 0.5;  // not a pathological key
    CHECK_THROWS_AS(ExperimentConfig::parse(bad), ConfigError);
  }

  SUBCASE("missing required keys are named") {
    json bad = doc;
    bad["task"].erase("classes");
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse(bad), doctest::Contains("classes"), ConfigError);
  }

  SUBCASE("partition scheme variants parse") {
    json d = doc;
    d["task"]["partition"] = {{"scheme", "dirichlet"}, {"alpha", 0.1}, {"alpha_test", 0.5}};
    CHECK(ExperimentConfig::parse(d).task.partition.alpha_test == 0.5);
    d["task"]["partition"] = {{"scheme", "rotated"},
                              {"angles_train", {0.0, 30.0, 60.0}},
                              {"angles_test", {15.0, 45.0}}};
    CHECK(ExperimentConfig::parse(d).task.partition.angles_test ==
          std::vector<double>{15.0, 45.0});
    d["task"]["partition"] = {{"scheme", "iid"}};
    CHECK(ExperimentConfig::parse(d).task.partition.scheme == PartitionSpec::Scheme::iid);
    d["task"]["partition"] = {{"scheme", "sorted"}};
    CHECK_THROWS_AS(ExperimentConfig::parse(d), ConfigError);
  }
}

TEST_CASE("run_experiment writes reproducible artifacts") {
  const std::filesystem::path out_a = "/tmp/fedtta_test_run_a";
  const std::filesystem::path out_b = "/tmp/fedtta_test_run_b";
  std::filesystem::remove_all(out_a);
  std::filesystem::remove_all(out_b);

  ExperimentConfig cfg_a = ExperimentConfig::parse(small_run_config(out_a.string()));
  RunSummary summary = run_experiment(cfg_a);
  CHECK(summary.seeds.size() == 2);
  CHECK(summary.method == "fedtta_pp");
  for (const auto& s : summary.seeds) {
    CHECK(s.test_accuracy >= 0.0);
    CHECK(s.test_accuracy <= 1.0);
  }

  // expected artifacts exist
  for (const char* name : {"rounds_seed1.csv", "rounds_seed2.csv", "clients_seed1.csv",
                           "checkpoint_seed1.bin", "summary.json"})
    CHECK(std::filesystem::exists(out_a / name));

  // the per-round csv embeds the config hash and has R+1 data rows
  const std::string rounds = slurp(out_a / "rounds_seed1.csv");
  CHECK(rounds.find("# config=" + cfg_a.config_hash) == 0);
  CHECK(std::count(rounds.begin(), rounds.end(), '\n') == 2 + 2 + 1);  // header x2, R rounds, test

  // a rerun into another directory is byte-identical
  json doc_b = small_run_config(out_b.string());
  ExperimentConfig cfg_b = ExperimentConfig::parse(doc_b);
  run_experiment(cfg_b);
  for (const char* name : {"rounds_seed1.csv", "rounds_seed2.csv", "clients_seed1.csv",
                           "clients_seed2.csv", "checkpoint_seed1.bin", "checkpoint_seed2.bin"})
    CHECK(slurp(out_a / name) == slurp(out_b / name));

  // the checkpoint carries both models and reloads
  Checkpoint ck = load_checkpoint((out_a / "checkpoint_seed1.bin").string());
  CHECK(ck.phi.has_value());

  std::filesystem::remove_all(out_a);
  std::filesystem::remove_all(out_b);
}

TEST_CASE("compare runs every method on identical partitions") {
  const std::filesystem::path out = "/tmp/fedtta_test_compare";
  std::filesystem::remove_all(out);

  json doc = small_run_config(out.string());
  json method = doc["method"];
  doc.erase("method");
  json avg = {{"name", "fedavg"}, {"rounds", 2}, {"local_iters", 2},
              {"batch", 16},      {"eta_outer", 0.1}, {"prediction_hidden", {8}}};
  doc["methods"] = json::array({method, avg});
  doc["seeds"] = {5};

  ExperimentConfig cfg = ExperimentConfig::parse(doc);
  auto summaries = compare_experiment(cfg);
  REQUIRE(summaries.size() == 2);
  CHECK(summaries[0].method == "fedtta_pp");
  CHECK(summaries[1].method == "fedavg");
  CHECK(summaries[0].seeds[0].partition_hash == summaries[1].seeds[0].partition_hash);
  CHECK(std::filesystem::exists(out / "compare_summary.json"));
  CHECK(std::filesystem::exists(out / "compare_table.csv"));

  std::filesystem::remove_all(out);
}

TEST_CASE("adapt_curve emits one row per step plus the unadapted row") {
  json doc = small_run_config("/tmp/fedtta_unused");
  ExperimentConfig cfg = ExperimentConfig::parse(doc);
  BuiltData data = build_data(cfg.task, 1);

  FederationConfig fed = cfg.methods[0].federation;
  fed.seed = 1;
  TrainResult trained = run_training(Method::fedtta_pp, fed, data.training);
  Checkpoint ck{static_cast<std::uint32_t>(trained.best_round), trained.best_psi,
                trained.best_phi};

  CurveOutput curve = adapt_curve(ck, data.test.front(), fed.eta_inner, 12, 3);
  CHECK(curve.rows.size() == 13);
  for (const auto& row : curve.rows) {
    CHECK(row.accuracy.has_value());
    CHECK(row.entropy >= 0.0);
  }
  // the selected step is the entropy argmin of the full curve
  std::size_t argmin = 0;
  for (std::size_t i = 1; i < curve.rows.size(); ++i)
    if (curve.rows[i].entropy < curve.rows[argmin].entropy) argmin = i;
  CHECK(curve.selected_step == static_cast<int>(argmin));
  CHECK(curve.would_stop_step <= 12);

  const std::filesystem::path path = "/tmp/fedtta_test_curve.csv";
  write_curve_csv(path, cfg.config_hash, 1, curve);
  const std::string text = slurp(path);
  CHECK(text.find("selected_step=") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2 + 13);
  std::filesystem::remove(path);
}

TEST_CASE("partition dump lists every client with its label histogram") {
  json doc = small_run_config("/tmp/fedtta_unused2");
  ExperimentConfig cfg = ExperimentConfig::parse(doc);
  BuiltData data = build_data(cfg.task, 3);
  const std::filesystem::path path = "/tmp/fedtta_test_partition.csv";
  write_partition_csv(path, cfg.config_hash, 3, data);
  const std::string text = slurp(path);
  CHECK(std::count(text.begin(), text.end(), '\n') == 2 + 6);  // comment, header, 6 clients
  CHECK(text.find("label_3") != std::string::npos);
  std::filesystem::remove(path);
}

TEST_CASE("hetero experiment sweeps lambda and saves knowledge") {
  const std::filesystem::path out = "/tmp/fedtta_test_hetero";
  std::filesystem::remove_all(out);

  json doc = small_run_config(out.string());
  doc.erase("method");
  doc["seeds"] = {2};
  doc["task"]["public_samples"] = 24;
  doc["task"]["train_clients"] = 2;
  doc["task"]["test_clients"] = 1;
  doc["task"]["partition"] = {{"scheme", "iid"}};
  doc["hetero"] = {{"rounds", 1},    {"kd_steps", 3},    {"local_iters", 2},
                   {"batch", 16},    {"lambdas", {0.0, 0.8}}, {"eta_inner", 0.1},
                   {"eta_outer", 0.1}, {"eta_digest", 0.3}, {"eta_adapt", 0.01}};

  ExperimentConfig cfg = ExperimentConfig::parse(doc);
  auto summaries = run_hetero_experiment(cfg);
  REQUIRE(summaries.size() == 2);
  CHECK(summaries[0].lambda == 0.0);
  CHECK(summaries[1].lambda == 0.8);
  CHECK(std::filesystem::exists(out / "hetero_summary.json"));
  CHECK(std::filesystem::exists(out / "knowledge_lambda0_seed2.bin"));
  EnsembleKnowledge k = load_knowledge((out / "knowledge_lambda0_seed2.bin").string());
  CHECK(k.f_base.shape() == Shape{24, 4});

  std::filesystem::remove_all(out);
}

TEST_SUITE_END();
