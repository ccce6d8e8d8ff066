// Experiment driver for the federation simulator. Subcommands:
//   run          one method over the configured seeds
//   compare      several methods on identical partitions
//   adapt-curve  full adaptation trace of one client from a checkpoint
//   partition    dump a partition's per-client composition
//   hetero       ensemble-distillation training with a lambda sweep
//
// FEDTTA_WORKERS controls how many worker threads execute clients within a
// round; results are identical for any worker count.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include <fedtta/experiment.hpp>

namespace {

int cmd_run(const std::string& config_path) {
  fedtta::ExperimentConfig cfg = fedtta::ExperimentConfig::load(config_path);
  fedtta::RunSummary summary = fedtta::run_experiment(cfg);
  std::printf("method %s: validation %.4f +/- %.4f, test %.4f +/- %.4f (%zu seeds)\n",
              summary.method.c_str(), summary.validation_mean, summary.validation_std,
              summary.test_mean, summary.test_std, summary.seeds.size());
  std::printf("outputs in %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_compare(const std::string& config_path) {
  fedtta::ExperimentConfig cfg = fedtta::ExperimentConfig::load(config_path);
  auto summaries = fedtta::compare_experiment(cfg);
  std::printf("%-14s %-22s %s\n", "method", "validation", "test");
  for (const auto& s : summaries)
    std::printf("%-14s %.4f +/- %.4f      %.4f +/- %.4f\n", s.method.c_str(), s.validation_mean,
                s.validation_std, s.test_mean, s.test_std);
  std::printf("outputs in %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_adapt_curve(const std::string& config_path, const std::string& checkpoint_path,
                    std::uint64_t seed, int client_id, int steps, int patience,
                    const std::string& output_path) {
  fedtta::ExperimentConfig cfg = fedtta::ExperimentConfig::load(config_path);
  fedtta::Checkpoint checkpoint = fedtta::load_checkpoint(checkpoint_path);
  fedtta::BuiltData data = fedtta::build_data(cfg.task, seed);

  const fedtta::ClientDataset* client = nullptr;
  for (const auto& c : data.test)
    if (c.id() == client_id) client = &c;
  for (const auto& c : data.training)
    if (c.id() == client_id) client = &c;
  if (!client) {
    std::fprintf(stderr, "no client with id %d\n", client_id);
    return 1;
  }

  const double eta_inner =
      cfg.methods.empty() ? 0.5 : cfg.methods.front().federation.eta_inner;
  std::optional<int> patience_opt = patience > 0 ? std::optional<int>(patience) : std::nullopt;
  fedtta::CurveOutput curve =
      fedtta::adapt_curve(checkpoint, *client, eta_inner, steps, patience_opt);
  fedtta::write_curve_csv(output_path, cfg.config_hash, seed, curve);
  std::printf("curve with %zu rows, selected step %d, would stop at %d -> %s\n",
              curve.rows.size(), curve.selected_step, curve.would_stop_step,
              output_path.c_str());
  return 0;
}

int cmd_partition(const std::string& config_path, const std::string& output_path) {
  fedtta::ExperimentConfig cfg = fedtta::ExperimentConfig::load(config_path);
  for (std::uint64_t seed : cfg.seeds) {
    fedtta::BuiltData data = fedtta::build_data(cfg.task, seed);
    std::string path = output_path;
    const std::string placeholder = "{seed}";
    if (auto pos = path.find(placeholder); pos != std::string::npos)
      path.replace(pos, placeholder.size(), std::to_string(seed));
    else if (cfg.seeds.size() > 1)
      path += "." + std::to_string(seed);
    fedtta::write_partition_csv(path, cfg.config_hash, seed, data);
    std::printf("partition for seed %llu -> %s\n", static_cast<unsigned long long>(seed),
                path.c_str());
  }
  return 0;
}

int cmd_hetero(const std::string& config_path, const std::string& lambda_list) {
  fedtta::ExperimentConfig cfg = fedtta::ExperimentConfig::load(config_path);
  if (!lambda_list.empty()) {
    if (!cfg.hetero) throw fedtta::ConfigError("hetero: config needs a 'hetero' block");
    cfg.hetero->lambdas.clear();
    std::size_t pos = 0;
    while (pos < lambda_list.size()) {
      std::size_t next = lambda_list.find(',', pos);
      if (next == std::string::npos) next = lambda_list.size();
      cfg.hetero->lambdas.push_back(std::stod(lambda_list.substr(pos, next - pos)));
      pos = next + 1;
    }
  }
  auto summaries = fedtta::run_hetero_experiment(cfg);
  std::printf("%-8s %s\n", "lambda", "test");
  for (const auto& s : summaries)
    std::printf("%-8.2f %.4f +/- %.4f\n", s.lambda, s.test_mean, s.test_std);
  std::printf("outputs in %s\n", cfg.output_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated test-time adaptation simulator"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, output_path, lambda_list;
  std::uint64_t seed = 1;
  int client_id = 0, steps = 50, patience = 0;

  CLI::App* run = app.add_subcommand("run", "train and evaluate one method");
  run->add_option("-c,--config", config_path, "experiment config (json)")->required();

  CLI::App* compare = app.add_subcommand("compare", "run several methods on identical data");
  compare->add_option("-c,--config", config_path, "experiment config (json)")->required();

  CLI::App* curve = app.add_subcommand("adapt-curve", "adaptation trace from a checkpoint");
  curve->add_option("-c,--config", config_path, "experiment config (json)")->required();
  curve->add_option("-k,--checkpoint", checkpoint_path, "checkpoint file")->required();
  curve->add_option("-o,--output", output_path, "curve csv path")->required();
  curve->add_option("-s,--seed", seed, "data seed (default 1)");
  curve->add_option("--client", client_id, "client id (default 0)");
  curve->add_option("--steps", steps, "adaptation steps (default 50)");
  curve->add_option("--patience", patience, "patience for the would-be stop (0 = none)");

  CLI::App* partition = app.add_subcommand("partition", "dump partition composition");
  partition->add_option("-c,--config", config_path, "experiment config (json)")->required();
  partition->add_option("-o,--output", output_path, "csv path ({seed} expands)")->required();

  CLI::App* hetero = app.add_subcommand("hetero", "heterogeneous distillation run");
  hetero->add_option("-c,--config", config_path, "experiment config (json)")->required();
  hetero->add_option("--lambda", lambda_list, "comma-separated lambda sweep override");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path);
    if (compare->parsed()) return cmd_compare(config_path);
    if (curve->parsed())
      return cmd_adapt_curve(config_path, checkpoint_path, seed, client_id, steps, patience,
                             output_path);
    if (partition->parsed()) return cmd_partition(config_path, output_path);
    if (hetero->parsed()) return cmd_hetero(config_path, lambda_list);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
