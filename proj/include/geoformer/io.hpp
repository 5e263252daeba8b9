#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "geoformer/baselines.hpp"
#include "geoformer/grf.hpp"
#include "geoformer/model.hpp"
#include "geoformer/stats.hpp"
#include "geoformer/train.hpp"

namespace geoformer {

/// Shortest exact decimal form: parses back to the identical double.
std::string format_double(double v);

/// Numeric table with a string header row. All persistence below goes
/// through write_csv, which re-reads the file after writing and verifies
/// header, row count and bit-exact values (the schema self-check).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

void write_csv(const std::filesystem::path& path, const CsvTable& table);
CsvTable read_csv(const std::filesystem::path& path);

/// Square matrix helper: header col0..col{n-1}, one row per matrix row.
void write_matrix_csv(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix_csv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// JSON serializers (nlohmann ADL). Raw kernel parameters round-trip exactly.
// ---------------------------------------------------------------------------
void to_json(nlohmann::json& j, const KernelSpec& spec);
void from_json(const nlohmann::json& j, KernelSpec& spec);
void to_json(nlohmann::json& j, const SimConfig& config);
void from_json(const nlohmann::json& j, SimConfig& config);
void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);
void to_json(nlohmann::json& j, const TrainConfig& config);
void from_json(const nlohmann::json& j, TrainConfig& config);

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Dataset persistence: observations.csv + locations.csv + meta.json in one
// directory. Deterministic formatting makes a same-seed rerun byte-identical.
// The nugget-free latent field is not persisted; a loaded dataset carries an
// empty latent matrix.
// ---------------------------------------------------------------------------
void save_dataset(const StDataset& dataset, const std::filesystem::path& dir);
StDataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Training log. The Geo schema is epoch,train_mse,val_mse,lr,rho,lambda,
// geo_bias_share,seconds; the Vanilla schema omits the three kernel
// diagnostics. read_train_log keys on the header.
// ---------------------------------------------------------------------------
void write_train_log(const std::filesystem::path& path, const TrainLog& log,
                     ModelVariant variant);
TrainLog read_train_log(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Forecast persistence: long-format CSV (t,site,target,prediction[,variance])
// plus a JSON sidecar (same path, .json extension) naming the model and
// horizon. Row i covers target time t_start + i.
// ---------------------------------------------------------------------------
void write_forecast(const std::filesystem::path& csv_path, const ForecastResult& result,
                    int t_start);

struct LoadedForecast {
  ForecastResult result;
  int t_start = 0;
};
LoadedForecast read_forecast(const std::filesystem::path& csv_path);

/// Metric block for one forecast: rmse, mae, crps (null without variances),
/// morans_i of the mean residual field, plus model name and horizon.
nlohmann::json metrics_json(const ForecastResult& result, const SpatialWeights& weights);

// ---------------------------------------------------------------------------
// Checkpoints: directory with manifest.json (model config, sensor locations,
// step, rng state, learned rho/lambda, parameter name -> byte offset ->
// shape) and params.bin (flat little-endian doubles in manifest order).
// ---------------------------------------------------------------------------
void save_checkpoint(const std::filesystem::path& dir, const GeoformerModel& model,
                     int step, const std::string& rng_state);

struct LoadedCheckpoint {
  GeoformerModel model;
  int step = 0;
  std::string rng_state;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Attention-map export for one window: attention_l{layer}_h{head}.csv per
// head plus kernel_bias.csv (the lambda*Psi matrix; Geo only).
// ---------------------------------------------------------------------------
void export_attention_maps(const std::filesystem::path& dir, const GeoformerModel& model,
                           const Eigen::MatrixXd& window);

// ---------------------------------------------------------------------------
// Minimal self-contained SVG plots (optional artifacts; CSV stays the
// canonical output).
// ---------------------------------------------------------------------------
struct SvgSeries {
  std::string name;
  std::vector<double> x, y;
};
void write_svg_lines(const std::filesystem::path& path, const std::string& title,
                     const std::vector<SvgSeries>& series);
void write_svg_histogram(const std::filesystem::path& path, const std::string& title,
                         const std::vector<double>& mass, double reference);

}  // namespace geoformer
