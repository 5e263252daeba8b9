// Command-line front end: simulate fields, train and evaluate single models,
// run experiment bundles, and validate forecast files. Exit codes: 0 success,
// 1 invalid input or configuration, 2 runtime failure, 3 acceptance-criterion
// failure (experiment mode only).
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "geoformer/baselines.hpp"
#include "geoformer/experiments.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace geoformer;

namespace {

struct GlobalFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  bool desk_scale = false;
  std::optional<int> jobs;
  bool emit_svg = false;
};

/// Assembles the run configuration. Precedence, lowest to highest: built-in
/// defaults, --config document, --desk-scale preset, --seed, --set overrides.
/// GEOFORMER_OUTPUT_DIR fills output_dir only when nothing else names it.
ExperimentConfig assemble_config(const GlobalFlags& flags) {
  json doc = json::object();
  if (!flags.config_path.empty()) {
    doc = read_json_file(flags.config_path);
    if (!doc.is_object())
      throw std::invalid_argument(flags.config_path + ": config must be a JSON object");
  }
  ExperimentConfig cfg = doc.get<ExperimentConfig>();
  if (flags.desk_scale) cfg.apply_desk_scale();
  if (flags.seed) {
    cfg.seed = *flags.seed;
    cfg.sim.seed = static_cast<unsigned int>(*flags.seed);
  }
  if (flags.jobs) cfg.jobs = *flags.jobs;
  if (flags.emit_svg) cfg.emit_svg = true;

  json merged = cfg;
  for (const std::string& assignment : flags.sets) apply_dotted_override(merged, assignment);
  cfg = merged.get<ExperimentConfig>();

  bool output_dir_named = doc.contains("output_dir");
  for (const std::string& assignment : flags.sets)
    if (assignment.rfind("output_dir=", 0) == 0) output_dir_named = true;
  if (!output_dir_named) {
    if (const char* env = std::getenv("GEOFORMER_OUTPUT_DIR"); env != nullptr && *env != '\0')
      cfg.output_dir = env;
  }
  return cfg;
}

int cmd_simulate(const ExperimentConfig& cfg) {
  cfg.validate();
  const fs::path dir = cfg.output_dir / "data";
  for (int r = 0; r < cfg.sim.n_replicates; ++r) {
    const StDataset ds = simulate_replicate(cfg.sim, r);
    save_dataset(ds, dir / ("rep" + std::to_string(r)));
  }
  std::cout << cfg.sim.n_replicates << " replicate(s) written under " << dir.string()
            << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& variant_name, int replicate) {
  const ModelVariant variant = model_variant_from_string(variant_name);
  ExperimentRunner runner(cfg);
  const TrainedCell& cell = runner.trained(replicate, variant, cfg.t_train);
  if (!cell.ok()) throw std::runtime_error("training failed: " + cell.error);

  const fs::path dir = cfg.output_dir / "train";
  fs::create_directories(dir);
  write_train_log(dir / "trainlog.csv", cell.result.log, variant);
  const fs::path ckpt = dir / "checkpoint";
  save_checkpoint(ckpt, *cell.model, cell.result.best_epoch,
                  "seed:" + std::to_string(cfg.seed));

  std::cout << "variant=" << variant_name << " replicate=" << replicate
            << " t_train=" << cfg.t_train << " best_epoch=" << cell.result.best_epoch
            << " best_val_mse=" << format_double(cell.result.best_val_mse);
  if (variant == ModelVariant::Geo)
    std::cout << " rho=" << format_double(cell.model->rho())
              << " lambda=" << format_double(cell.model->lambda());
  std::cout << "\n" << ckpt.string() << "\n";
  return 0;
}

int cmd_evaluate(const ExperimentConfig& cfg, const std::string& checkpoint,
                 const std::string& model_name, int horizon, int replicate) {
  if (checkpoint.empty() == model_name.empty())
    throw std::invalid_argument(
        "evaluate needs exactly one of --checkpoint PATH or --model NAME");
  ExperimentRunner runner(cfg);
  const StDataset& ds = runner.dataset(replicate);
  const int t_start = cfg.sim.t_steps - cfg.t_test;
  const SpatialWeights weights = SpatialWeights::inverse_distance(ds.grid);

  ForecastResult fr;
  std::optional<double> mc_crps;
  if (!checkpoint.empty()) {
    const LoadedCheckpoint lc = load_checkpoint(checkpoint);
    if (lc.model.n_sites() != ds.grid.n())
      throw std::invalid_argument("checkpoint covers " + std::to_string(lc.model.n_sites()) +
                                  " sensors but the configured grid has " +
                                  std::to_string(ds.grid.n()));
    const ModelVariant variant = lc.model.config().variant;
    const std::string name = to_string(variant) == "geo" ? "geoformer" : "vanilla";
    fr = horizon == 1 ? runner.one_step_forecast(lc.model, replicate, name)
                      : runner.horizon_forecast(lc.model, replicate, horizon, name);
    if (horizon == 1) {
      const ForecastResult mc =
          runner.mc_forecast(lc.model, replicate, cfg.t_train, variant, name + "_mc");
      mc_crps = crps_mean(mc);
    }
  } else if (model_name == "kriging_oracle" || model_name == "kriging") {
    if (horizon != 1)
      throw std::invalid_argument("the kriging oracle evaluates one-step forecasts only");
    const KrigingOracle oracle(ds.grid, ds.config);
    fr = oracle.forecast(ds, t_start, cfg.t_test);
  } else if (model_name == "historical_average" || model_name == "hist_average") {
    fr = historical_average_forecast(
        ds.observations.middleRows(t_start - cfg.t_train, cfg.t_train), ds, t_start,
        cfg.t_test);
    fr.horizon = horizon;  // the constant forecast is horizon-free
  } else {
    throw std::invalid_argument("unknown baseline '" + model_name +
                                "' (expected kriging_oracle or historical_average)");
  }

  const fs::path dir = cfg.output_dir / "evaluate";
  fs::create_directories(dir);
  write_forecast(dir / "forecast.csv", fr, t_start);
  json metrics = metrics_json(fr, weights);
  if (mc_crps) metrics["crps"] = *mc_crps;  // MC-dropout predictive CRPS
  write_json_file(dir / "metrics.json", metrics);
  std::cout << metrics.dump(2) << "\n" << (dir / "metrics.json").string() << "\n";
  return 0;
}

int cmd_experiment(const ExperimentConfig& cfg, const std::string& kind_name) {
  const ExperimentKind kind =
      kind_name.empty() ? cfg.experiment : experiment_kind_from_string(kind_name);
  ExperimentRunner runner(cfg);
  json summary;
  if (kind == ExperimentKind::FullSuite) {
    summary = runner.run(kind);
  } else {
    const json frag = runner.run(kind);
    summary["schema"] = "geoformer-summary-v1";
    summary["config"] = runner.config();
    summary["experiments"] = json{{to_string(kind), frag}};
    summary["acceptance"] = frag.contains("criteria") ? frag.at("criteria") : json::array();
    write_json_file(cfg.output_dir / "summary.json", summary);
  }
  for (const auto& verdict : summary.at("acceptance"))
    std::cout << "criterion " << verdict.at("id").get<int>() << " ("
              << verdict.at("key").get<std::string>()
              << "): " << verdict.at("status").get<std::string>() << "\n";
  std::cout << (cfg.output_dir / "summary.json").string() << "\n";
  return ExperimentRunner::all_criteria_pass(summary) ? 0 : 3;
}

Eigen::VectorXd spatial_rms_per_step(const ForecastResult& fr) {
  const Eigen::MatrixXd res = fr.residuals();
  Eigen::VectorXd e(res.rows());
  for (Eigen::Index t = 0; t < res.rows(); ++t)
    e[t] = std::sqrt(res.row(t).squaredNorm() / static_cast<double>(res.cols()));
  return e;
}

int cmd_validate(const ExperimentConfig& cfg, const std::vector<std::string>& files,
                 const std::string& locations_path) {
  std::optional<SpatialWeights> weights;
  if (!locations_path.empty()) {
    const CsvTable loc = read_csv(locations_path);
    const int xc = loc.column("x"), yc = loc.column("y");
    if (xc < 0 || yc < 0)
      throw std::invalid_argument(locations_path + ": needs x and y columns");
    std::vector<std::array<double, 2>> points;
    points.reserve(loc.rows.size());
    for (const auto& row : loc.rows) points.push_back({row[xc], row[yc]});
    weights = SpatialWeights::inverse_distance(SensorGrid::from_locations(points));
  }

  std::vector<LoadedForecast> loaded;
  loaded.reserve(files.size());
  for (const std::string& f : files) loaded.push_back(read_forecast(f));

  json report;
  report["forecasts"] = json::array();
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    const ForecastResult& fr = loaded[i].result;
    if (weights && weights->w.rows() != fr.targets.cols())
      throw std::invalid_argument("locations file covers " +
                                  std::to_string(weights->w.rows()) +
                                  " sites but the forecast has " +
                                  std::to_string(fr.targets.cols()));
    json entry;
    entry["file"] = files[i];
    entry["model"] = fr.model_name;
    entry["horizon"] = fr.horizon;
    entry["t_start"] = loaded[i].t_start;
    entry["rmse"] = rmse(fr);
    entry["mae"] = mae(fr);
    entry["crps"] = fr.has_variances() ? json(crps_mean(fr)) : json();
    entry["morans_i"] =
        weights ? json(mean_morans_i(fr.residuals(), *weights)) : json();
    if (fr.has_variances()) {
      const PitSummary ps = pit_uniformity(pit_values(fr), 10);
      entry["pit"] = json{{"histogram", ps.histogram}, {"ks", ps.ks}};
    }
    report["forecasts"].push_back(entry);
  }

  if (loaded.size() == 2) {
    const ForecastResult& a = loaded[0].result;
    const ForecastResult& b = loaded[1].result;
    if (a.targets.rows() != b.targets.rows() || a.targets.cols() != b.targets.cols())
      throw std::invalid_argument("the two forecasts have different shapes");
    if (a.targets != b.targets)
      throw std::invalid_argument("the two forecasts target different series");
    const int lag = std::max(a.horizon, b.horizon) - 1;
    const DMResult dm =
        diebold_mariano(spatial_rms_per_step(a), spatial_rms_per_step(b), lag);
    report["dm"] = json{{"first", a.model_name},   {"second", b.model_name},
                        {"statistic", dm.statistic}, {"p_one_sided", dm.p_one_sided},
                        {"p_two_sided", dm.p_two_sided}, {"lag", dm.lag}};
  }

  const fs::path dir = cfg.output_dir / "validate";
  fs::create_directories(dir);
  write_json_file(dir / "report.json", report);
  std::cout << report.dump(2) << "\n" << (dir / "report.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatially-informed transformer: simulation, training and experiments"};
  app.require_subcommand(1);

  GlobalFlags flags;
  std::uint64_t seed_value = 0;
  int jobs_value = 1;
  app.add_option("--config", flags.config_path, "JSON configuration document");
  app.add_option("--set", flags.sets,
                 "dotted-path override, e.g. --set sim.rho_true=0.3 (repeatable)");
  auto* seed_opt = app.add_option("--seed", seed_value, "master seed (also reseeds the simulator)");
  app.add_flag("--desk-scale", flags.desk_scale,
               "laptop preset: 10x10 grid, 600 steps, 5 replicates");
  auto* jobs_opt = app.add_option("--jobs", jobs_value, "parallel training jobs");
  app.add_flag("--emit-svg", flags.emit_svg, "also write minimal SVG plots");

  auto* sim_cmd = app.add_subcommand("simulate", "write simulated replicates to disk");
  sim_cmd->fallthrough();

  auto* train_cmd = app.add_subcommand("train", "train one model and save a checkpoint");
  train_cmd->fallthrough();
  std::string variant_name = "geo";
  int train_replicate = 0;
  train_cmd->add_option("--variant", variant_name, "geo | vanilla")
      ->check(CLI::IsMember({"geo", "vanilla"}));
  train_cmd->add_option("--replicate", train_replicate, "replicate index (default 0)");

  auto* eval_cmd = app.add_subcommand("evaluate", "forecast the test block and report metrics");
  eval_cmd->fallthrough();
  std::string checkpoint, baseline;
  int horizon = 1, eval_replicate = 0;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory from `train`");
  eval_cmd->add_option("--model", baseline, "kriging_oracle | historical_average");
  eval_cmd->add_option("--horizon", horizon, "forecast horizon (recursive when > 1)")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--replicate", eval_replicate, "replicate index (default 0)");

  auto* exp_cmd = app.add_subcommand("experiment", "run an experiment bundle");
  exp_cmd->fallthrough();
  std::string kind_name;
  exp_cmd->add_option("kind", kind_name,
                      "variography | sample_efficiency | horizon_decay | "
                      "residual_whitening | calibration | full_table | full_suite");

  auto* val_cmd = app.add_subcommand("validate", "statistics for saved forecast files");
  val_cmd->fallthrough();
  std::vector<std::string> forecast_files;
  std::string locations_path;
  val_cmd->add_option("forecasts", forecast_files, "one or two forecast CSV files")
      ->expected(1, 2)
      ->required();
  val_cmd->add_option("--locations", locations_path,
                      "locations CSV (site,x,y) enabling Moran's I");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  if (*seed_opt) flags.seed = seed_value;
  if (*jobs_opt) flags.jobs = jobs_value;

  ExperimentConfig cfg;
  try {
    cfg = assemble_config(flags);
  } catch (const std::exception& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 1;
  }

  try {
    if (sim_cmd->parsed()) return cmd_simulate(cfg);
    if (train_cmd->parsed()) return cmd_train(cfg, variant_name, train_replicate);
    if (eval_cmd->parsed())
      return cmd_evaluate(cfg, checkpoint, baseline, horizon, eval_replicate);
    if (exp_cmd->parsed()) return cmd_experiment(cfg, kind_name);
    if (val_cmd->parsed()) return cmd_validate(cfg, forecast_files, locations_path);
    std::cerr << "invalid input: no subcommand\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
}
