#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoformer/io.hpp"

namespace geoformer {

enum class ExperimentKind {
  Variography,
  SampleEfficiency,
  HorizonDecay,
  ResidualWhitening,
  Calibration,
  FullTable,
  FullSuite,  // all six plus the numerics checks
};

std::string to_string(ExperimentKind kind);
ExperimentKind experiment_kind_from_string(const std::string& name);

/// Everything one run needs. Full-scale defaults; apply_desk_scale shrinks
/// to the laptop preset (10x10 grid, T=600, 5 replicates, shorter budgets).
/// Flag overrides are applied after the preset, so --set always wins.
struct ExperimentConfig {
  SimConfig sim;
  ModelConfig model_geo;           // comparative experiments, Geo variant
  ModelConfig model_vanilla;       // comparative experiments, Vanilla variant
  ModelConfig variography_model;   // lean recovery model (see design notes)
  TrainConfig train;
  TrainConfig variography_train;
  ExperimentKind experiment = ExperimentKind::FullSuite;
  int t_train = 500;               // single train/evaluate commands
  int t_test = 500;                // fixed chronological test block
  std::vector<int> sample_sizes;   // empty -> scale default
  int horizon_max = 4;
  int n_mc = 50;                   // MC-dropout samples for calibration
  std::filesystem::path output_dir = "out";
  bool desk_scale = false;
  bool emit_svg = false;
  int jobs = 1;
  std::uint64_t seed = 0;          // master seed for init draws and training

  ExperimentConfig();

  void apply_desk_scale();
  std::vector<int> effective_sample_sizes() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& config);
void from_json(const nlohmann::json& j, ExperimentConfig& config);

/// Applies one dotted-path override (e.g. "sim.rho_true=0.3") to a config
/// JSON document. Throws std::invalid_argument on malformed input. Values
/// parse as JSON when possible (numbers, booleans) and as strings otherwise.
void apply_dotted_override(nlohmann::json& config, const std::string& assignment);

/// One memoized training cell: the trained model plus its training record.
struct TrainedCell {
  std::shared_ptr<GeoformerModel> model;
  TrainResult result;
  double rho_init = 0.0;   // effective rho drawn before training (Geo only)
  double seconds = 0.0;
  std::string error;       // non-empty when the cell failed

  bool ok() const { return error.empty() && model != nullptr; }
};

/// Runs the experiment suite with per-(replicate, variant, size) training
/// cells memoized across experiments, so one process never trains the same
/// model twice. Thread-safe for the configured job count.
class ExperimentRunner {
 public:
  explicit ExperimentRunner(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }

  /// Runs one experiment, writes its artifact bundle under
  /// output_dir/<name>/ and returns the summary fragment (with any
  /// acceptance verdicts it owns). FullSuite runs everything, writes
  /// output_dir/summary.json and returns the combined document.
  nlohmann::json run(ExperimentKind kind);

  /// Fast closed-form and oracle cross-checks (the exactness criterion).
  nlohmann::json run_numerics();

  /// True when every acceptance verdict in a summary fragment passes.
  static bool all_criteria_pass(const nlohmann::json& summary);

  /// Datasets and training cells (exposed for the CLI's single-run paths).
  const StDataset& dataset(int replicate);
  const TrainedCell& trained(int replicate, ModelVariant variant, int t_train);

  /// Eval-mode one-step forecasts over the fixed test block.
  ForecastResult one_step_forecast(const GeoformerModel& model, int replicate,
                                   const std::string& name);
  /// Recursive h-step forecasts aligned with the same test targets.
  ForecastResult horizon_forecast(const GeoformerModel& model, int replicate, int horizon,
                                  const std::string& name);
  /// MC-dropout probabilistic forecast over the test block.
  ForecastResult mc_forecast(const GeoformerModel& model, int replicate, int t_train,
                             ModelVariant variant, const std::string& name);

 private:
  nlohmann::json run_variography();
  nlohmann::json run_sample_efficiency();
  nlohmann::json run_horizon_decay();
  nlohmann::json run_residual_whitening();
  nlohmann::json run_calibration();
  nlohmann::json run_full_table();

  /// Trains every requested (replicate, variant, size) cell that is not
  /// already memoized, using the configured job pool.
  void prewarm(const std::vector<std::tuple<int, ModelVariant, int>>& cells);

  WindowSet train_windows(int replicate, int t_train);

  TrainedCell train_cell(int replicate, ModelVariant variant, int t_train,
                         const ModelConfig& arch, const TrainConfig& tc);

  ExperimentConfig config_;
  std::mutex mu_;
  std::map<int, StDataset> datasets_;
  std::map<std::tuple<int, int, int>, TrainedCell> cells_;  // (rep, variant, t_train)
};

}  // namespace geoformer
