#include "geoformer/io.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace geoformer {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Trim to the shortest form that still parses back exactly; keeps the
  // files readable and the round trip bit-exact.
  for (int prec = 1; prec < 17; ++prec) {
    char probe[40];
    std::snprintf(probe, sizeof probe, "%.*g", prec, v);
    if (std::strtod(probe, nullptr) == v) return probe;
  }
  return buf;
}

static void fail(const fs::path& path, const std::string& what) {
  throw std::runtime_error(path.string() + ": " + what);
}

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

static std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(path, "cannot open for reading");
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) fail(path, "missing header row");
  table.header = split_line(line);
  std::size_t row_no = 1;
  while (std::getline(in, line)) {
    ++row_no;
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != table.header.size())
      fail(path, "row " + std::to_string(row_no) + " has " + std::to_string(cells.size()) +
                     " cells, header has " + std::to_string(table.header.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& cell : cells) {
      char* end = nullptr;
      errno = 0;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0' || errno == ERANGE)
        fail(path, "row " + std::to_string(row_no) + ": unparsable cell '" + cell + "'");
      row.push_back(v);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

void write_csv(const fs::path& path, const CsvTable& table) {
  if (table.header.empty()) fail(path, "refusing to write a table without a header");
  for (const auto& row : table.rows)
    if (row.size() != table.header.size())
      fail(path, "row width does not match header width");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(path, "cannot open for writing");
    for (std::size_t i = 0; i < table.header.size(); ++i)
      out << (i ? "," : "") << table.header[i];
    out << "\n";
    for (const auto& row : table.rows) {
      for (std::size_t i = 0; i < row.size(); ++i)
        out << (i ? "," : "") << format_double(row[i]);
      out << "\n";
    }
    if (!out) fail(path, "write failed");
  }
  // Schema self-check: the file must parse back to the exact same table.
  const CsvTable echo = read_csv(path);
  if (echo.header != table.header) fail(path, "self-check: header mismatch after write");
  if (echo.rows.size() != table.rows.size())
    fail(path, "self-check: row count mismatch after write");
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    for (std::size_t c = 0; c < table.rows[r].size(); ++c)
      if (echo.rows[r][c] != table.rows[r][c] &&
          !(std::isnan(echo.rows[r][c]) && std::isnan(table.rows[r][c])))
        fail(path, "self-check: value drift at row " + std::to_string(r));
}

void write_matrix_csv(const fs::path& path, const Eigen::MatrixXd& m) {
  CsvTable table;
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    table.header.push_back("col" + std::to_string(c));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    table.rows.push_back(std::move(row));
  }
  write_csv(path, table);
}

Eigen::MatrixXd read_matrix_csv(const fs::path& path) {
  const CsvTable table = read_csv(path);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(table.rows.size()),
                    static_cast<Eigen::Index>(table.header.size()));
  for (std::size_t r = 0; r < table.rows.size(); ++r)
    for (std::size_t c = 0; c < table.header.size(); ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = table.rows[r][c];
  return m;
}

// ---------------------------------------------------------------------------
// JSON serializers
// ---------------------------------------------------------------------------

void to_json(json& j, const KernelSpec& spec) {
  j = json{{"family", to_string(spec.family)},
           {"theta_rho", spec.theta_rho},
           {"theta_lambda", spec.theta_lambda},
           {"sigma2", spec.sigma2}};
}

void from_json(const json& j, KernelSpec& spec) {
  spec = KernelSpec{};
  if (j.contains("family")) spec.family = kernel_family_from_string(j.at("family"));
  if (j.contains("theta_rho")) spec.theta_rho = j.at("theta_rho");
  if (j.contains("theta_lambda")) spec.theta_lambda = j.at("theta_lambda");
  if (j.contains("sigma2")) spec.sigma2 = j.at("sigma2");
}

void to_json(json& j, const SimConfig& config) {
  j = json{{"grid_side", config.grid_side}, {"nu", config.nu},
           {"rho_true", config.rho_true},   {"sigma2", config.sigma2},
           {"phi_t", config.phi_t},         {"nugget", config.nugget},
           {"t_steps", config.t_steps},     {"n_replicates", config.n_replicates},
           {"seed", config.seed}};
}

void from_json(const json& j, SimConfig& config) {
  config = SimConfig{};
  if (j.contains("grid_side")) config.grid_side = j.at("grid_side");
  if (j.contains("nu")) config.nu = j.at("nu");
  if (j.contains("rho_true")) config.rho_true = j.at("rho_true");
  if (j.contains("sigma2")) config.sigma2 = j.at("sigma2");
  if (j.contains("phi_t")) config.phi_t = j.at("phi_t");
  if (j.contains("nugget")) config.nugget = j.at("nugget");
  if (j.contains("t_steps")) config.t_steps = j.at("t_steps");
  if (j.contains("n_replicates")) config.n_replicates = j.at("n_replicates");
  if (j.contains("seed")) config.seed = j.at("seed");
}

void to_json(json& j, const ModelConfig& config) {
  j = json{{"d_model", config.d_model},
           {"n_heads", config.n_heads},
           {"n_layers", config.n_layers},
           {"lookback", config.lookback},
           {"dropout_p", config.dropout_p},
           {"variant", to_string(config.variant)},
           {"share_kernel_across_heads", config.share_kernel_across_heads},
           {"kernel", config.kernel}};
}

void from_json(const json& j, ModelConfig& config) {
  config = ModelConfig{};
  if (j.contains("d_model")) config.d_model = j.at("d_model");
  if (j.contains("n_heads")) config.n_heads = j.at("n_heads");
  if (j.contains("n_layers")) config.n_layers = j.at("n_layers");
  if (j.contains("lookback")) config.lookback = j.at("lookback");
  if (j.contains("dropout_p")) config.dropout_p = j.at("dropout_p");
  if (j.contains("variant")) config.variant = model_variant_from_string(j.at("variant"));
  if (j.contains("share_kernel_across_heads"))
    config.share_kernel_across_heads = j.at("share_kernel_across_heads");
  if (j.contains("kernel")) config.kernel = j.at("kernel").get<KernelSpec>();
}

void to_json(json& j, const TrainConfig& config) {
  j = json{{"lr", config.lr},
           {"weight_decay", config.weight_decay},
           {"batch_size", config.batch_size},
           {"max_epochs", config.max_epochs},
           {"plateau_patience", config.plateau_patience},
           {"plateau_factor", config.plateau_factor},
           {"min_lr", config.min_lr},
           {"val_fraction", config.val_fraction},
           {"clip_norm", config.clip_norm},
           {"kernel_lr_mult", config.kernel_lr_mult},
           {"seed", config.seed}};
}

void from_json(const json& j, TrainConfig& config) {
  config = TrainConfig{};
  if (j.contains("lr")) config.lr = j.at("lr");
  if (j.contains("weight_decay")) config.weight_decay = j.at("weight_decay");
  if (j.contains("batch_size")) config.batch_size = j.at("batch_size");
  if (j.contains("max_epochs")) config.max_epochs = j.at("max_epochs");
  if (j.contains("plateau_patience")) config.plateau_patience = j.at("plateau_patience");
  if (j.contains("plateau_factor")) config.plateau_factor = j.at("plateau_factor");
  if (j.contains("min_lr")) config.min_lr = j.at("min_lr");
  if (j.contains("val_fraction")) config.val_fraction = j.at("val_fraction");
  if (j.contains("clip_norm")) config.clip_norm = j.at("clip_norm");
  if (j.contains("kernel_lr_mult")) config.kernel_lr_mult = j.at("kernel_lr_mult");
  if (j.contains("seed")) config.seed = j.at("seed");
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out << j.dump(2) << "\n";
  if (!out) fail(path, "write failed");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) fail(path, "cannot open for reading");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    fail(path, std::string("json parse error: ") + e.what());
  }
  return j;
}

// ---------------------------------------------------------------------------
// Dataset persistence
// ---------------------------------------------------------------------------

void save_dataset(const StDataset& dataset, const fs::path& dir) {
  fs::create_directories(dir);
  const int n = dataset.grid.n();

  CsvTable obs;
  obs.header.emplace_back("t");
  for (int i = 0; i < n; ++i) obs.header.push_back("site" + std::to_string(i));
  for (Eigen::Index t = 0; t < dataset.observations.rows(); ++t) {
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(n) + 1);
    row.push_back(static_cast<double>(t));
    for (int i = 0; i < n; ++i) row.push_back(dataset.observations(t, i));
    obs.rows.push_back(std::move(row));
  }
  write_csv(dir / "observations.csv", obs);

  CsvTable loc;
  loc.header = {"site", "x", "y"};
  for (int i = 0; i < n; ++i)
    loc.rows.push_back({static_cast<double>(i), dataset.grid.locations[i][0],
                        dataset.grid.locations[i][1]});
  write_csv(dir / "locations.csv", loc);

  json meta;
  meta["config"] = dataset.config;
  meta["replicate_id"] = dataset.replicate_id;
  meta["n_sites"] = n;
  meta["t_steps"] = static_cast<int>(dataset.observations.rows());
  write_json_file(dir / "meta.json", meta);
}

StDataset load_dataset(const fs::path& dir) {
  const json meta = read_json_file(dir / "meta.json");
  StDataset ds;
  ds.config = meta.at("config").get<SimConfig>();
  ds.replicate_id = meta.at("replicate_id");

  const CsvTable loc = read_csv(dir / "locations.csv");
  if (loc.header != std::vector<std::string>{"site", "x", "y"})
    fail(dir / "locations.csv", "unexpected header");
  std::vector<std::array<double, 2>> points(loc.rows.size());
  for (const auto& row : loc.rows) {
    const auto i = static_cast<std::size_t>(row[0]);
    if (i >= points.size()) fail(dir / "locations.csv", "site index out of range");
    points[i] = {row[1], row[2]};
  }
  ds.grid = SensorGrid::from_locations(std::move(points));

  const CsvTable obs = read_csv(dir / "observations.csv");
  const int n = ds.grid.n();
  if (static_cast<int>(obs.header.size()) != n + 1)
    fail(dir / "observations.csv", "column count does not match locations.csv");
  ds.observations.resize(static_cast<Eigen::Index>(obs.rows.size()), n);
  for (std::size_t r = 0; r < obs.rows.size(); ++r) {
    if (obs.rows[r][0] != static_cast<double>(r))
      fail(dir / "observations.csv", "t column must be 0..T-1 in order");
    for (int i = 0; i < n; ++i)
      ds.observations(static_cast<Eigen::Index>(r), i) = obs.rows[r][static_cast<std::size_t>(i) + 1];
  }
  if (static_cast<int>(obs.rows.size()) != meta.at("t_steps").get<int>())
    fail(dir / "observations.csv", "row count disagrees with meta.json");
  return ds;
}

// ---------------------------------------------------------------------------
// Training log
// ---------------------------------------------------------------------------

void write_train_log(const fs::path& path, const TrainLog& log, ModelVariant variant) {
  const bool geo = variant == ModelVariant::Geo;
  CsvTable table;
  table.header = {"epoch", "train_mse", "val_mse", "lr"};
  if (geo) {
    table.header.push_back("rho");
    table.header.push_back("lambda");
    table.header.push_back("geo_bias_share");
  }
  table.header.push_back("seconds");
  for (const auto& e : log.epochs) {
    std::vector<double> row = {static_cast<double>(e.epoch), e.train_mse, e.val_mse, e.lr};
    if (geo) {
      row.push_back(e.rho);
      row.push_back(e.lambda);
      row.push_back(e.geo_bias_share);
    }
    row.push_back(e.seconds);
    table.rows.push_back(std::move(row));
  }
  write_csv(path, table);
}

TrainLog read_train_log(const fs::path& path) {
  const CsvTable table = read_csv(path);
  const int c_epoch = table.column("epoch");
  const int c_train = table.column("train_mse");
  const int c_val = table.column("val_mse");
  const int c_lr = table.column("lr");
  const int c_secs = table.column("seconds");
  if (c_epoch < 0 || c_train < 0 || c_val < 0 || c_lr < 0 || c_secs < 0)
    fail(path, "missing a required train-log column");
  const int c_rho = table.column("rho");
  const int c_lambda = table.column("lambda");
  const int c_share = table.column("geo_bias_share");
  TrainLog log;
  for (const auto& row : table.rows) {
    EpochRecord e;
    e.epoch = static_cast<int>(row[static_cast<std::size_t>(c_epoch)]);
    e.train_mse = row[static_cast<std::size_t>(c_train)];
    e.val_mse = row[static_cast<std::size_t>(c_val)];
    e.lr = row[static_cast<std::size_t>(c_lr)];
    e.seconds = row[static_cast<std::size_t>(c_secs)];
    if (c_rho >= 0) e.rho = row[static_cast<std::size_t>(c_rho)];
    if (c_lambda >= 0) e.lambda = row[static_cast<std::size_t>(c_lambda)];
    if (c_share >= 0) e.geo_bias_share = row[static_cast<std::size_t>(c_share)];
    log.epochs.push_back(e);
  }
  return log;
}

// ---------------------------------------------------------------------------
// Forecast persistence
// ---------------------------------------------------------------------------

static fs::path sidecar_path(const fs::path& csv_path) {
  fs::path p = csv_path;
  p.replace_extension(".json");
  return p;
}

void write_forecast(const fs::path& csv_path, const ForecastResult& result, int t_start) {
  result.validate();
  const bool with_var = result.has_variances();
  CsvTable table;
  table.header = {"t", "site", "target", "prediction"};
  if (with_var) table.header.push_back("variance");
  for (Eigen::Index r = 0; r < result.predictions.rows(); ++r)
    for (Eigen::Index s = 0; s < result.predictions.cols(); ++s) {
      std::vector<double> row = {static_cast<double>(t_start + r), static_cast<double>(s),
                                 result.targets(r, s), result.predictions(r, s)};
      if (with_var) row.push_back(result.variances(r, s));
      table.rows.push_back(std::move(row));
    }
  write_csv(csv_path, table);

  json side;
  side["model"] = result.model_name;
  side["horizon"] = result.horizon;
  side["t_start"] = t_start;
  side["rows"] = static_cast<int>(result.predictions.rows());
  side["sites"] = static_cast<int>(result.predictions.cols());
  side["has_variance"] = with_var;
  write_json_file(sidecar_path(csv_path), side);
}

LoadedForecast read_forecast(const fs::path& csv_path) {
  const json side = read_json_file(sidecar_path(csv_path));
  const CsvTable table = read_csv(csv_path);
  const int rows = side.at("rows");
  const int sites = side.at("sites");
  const bool with_var = side.at("has_variance");
  if (static_cast<int>(table.rows.size()) != rows * sites)
    fail(csv_path, "row count disagrees with sidecar");

  LoadedForecast out;
  out.t_start = side.at("t_start");
  out.result.model_name = side.at("model");
  out.result.horizon = side.at("horizon");
  out.result.predictions.resize(rows, sites);
  out.result.targets.resize(rows, sites);
  if (with_var) out.result.variances.resize(rows, sites);

  const int c_t = table.column("t");
  const int c_site = table.column("site");
  const int c_target = table.column("target");
  const int c_pred = table.column("prediction");
  const int c_var = table.column("variance");
  if (c_t < 0 || c_site < 0 || c_target < 0 || c_pred < 0 || (with_var && c_var < 0))
    fail(csv_path, "missing a required forecast column");
  for (const auto& row : table.rows) {
    const int r = static_cast<int>(row[static_cast<std::size_t>(c_t)]) - out.t_start;
    const int s = static_cast<int>(row[static_cast<std::size_t>(c_site)]);
    if (r < 0 || r >= rows || s < 0 || s >= sites) fail(csv_path, "index out of range");
    out.result.targets(r, s) = row[static_cast<std::size_t>(c_target)];
    out.result.predictions(r, s) = row[static_cast<std::size_t>(c_pred)];
    if (with_var) out.result.variances(r, s) = row[static_cast<std::size_t>(c_var)];
  }
  out.result.validate();
  return out;
}

nlohmann::json metrics_json(const ForecastResult& result, const SpatialWeights& weights) {
  result.validate();
  json j;
  j["model"] = result.model_name;
  j["horizon"] = result.horizon;
  j["rmse"] = rmse(result);
  j["mae"] = mae(result);
  if (result.has_variances())
    j["crps"] = crps_mean(result);
  else
    j["crps"] = nullptr;
  j["morans_i"] = mean_morans_i(result.residuals(), weights);
  return j;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const fs::path& dir, const GeoformerModel& model, int step,
                     const std::string& rng_state) {
  fs::create_directories(dir);

  json manifest;
  manifest["format"] = "geoformer-checkpoint-v1";
  manifest["byte_order"] = "little";
  manifest["step"] = step;
  manifest["rng_state"] = rng_state;
  manifest["model"] = model.config();
  manifest["noise_floor"] = model.noise_floor();
  manifest["rho"] = model.rho();
  manifest["lambda"] = model.lambda();

  json locations = json::array();
  for (const auto& p : model.grid().locations) locations.push_back({p[0], p[1]});
  manifest["locations"] = std::move(locations);

  json params = json::array();
  std::size_t offset = 0;
  for (const auto& p : model.parameters()) {
    json entry;
    entry["name"] = p.name;
    entry["offset"] = offset;
    entry["shape"] = p.value.shape();
    params.push_back(std::move(entry));
    offset += static_cast<std::size_t>(p.value.data().size()) * sizeof(double);
  }
  manifest["parameters"] = std::move(params);
  write_json_file(dir / "manifest.json", manifest);

  std::ofstream blob(dir / "params.bin", std::ios::trunc | std::ios::binary);
  if (!blob) fail(dir / "params.bin", "cannot open for writing");
  for (const auto& p : model.parameters())
    blob.write(reinterpret_cast<const char*>(p.value.data().data()),
               static_cast<std::streamsize>(
                   static_cast<std::size_t>(p.value.data().size()) * sizeof(double)));
  if (!blob) fail(dir / "params.bin", "write failed");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != "geoformer-checkpoint-v1")
    fail(dir / "manifest.json", "unknown checkpoint format");
  if (manifest.value("byte_order", "little") != "little")
    fail(dir / "manifest.json", "unsupported byte order");

  const ModelConfig config = manifest.at("model").get<ModelConfig>();
  std::vector<std::array<double, 2>> points;
  for (const auto& p : manifest.at("locations")) points.push_back({p.at(0), p.at(1)});
  const SensorGrid grid = SensorGrid::from_locations(std::move(points));

  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) fail(dir / "params.bin", "cannot open for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)),
                          std::istreambuf_iterator<char>());

  LoadedCheckpoint out{GeoformerModel(config, grid, 0), manifest.at("step"),
                       manifest.at("rng_state")};

  std::size_t named = 0;
  for (const auto& entry : manifest.at("parameters")) {
    const std::string name = entry.at("name");
    Parameter* p = out.model.find_parameter(name);
    if (p == nullptr) fail(dir / "manifest.json", "unknown parameter '" + name + "'");
    const std::vector<int> shape = entry.at("shape");
    if (shape != p->value.shape())
      fail(dir / "manifest.json", "shape mismatch for '" + name + "'");
    const std::size_t offset = entry.at("offset");
    const std::size_t len = static_cast<std::size_t>(p->value.data().size()) * sizeof(double);
    if (offset + len > bytes.size()) fail(dir / "params.bin", "blob too short for '" + name + "'");
    std::memcpy(p->value.mutable_data().data(), bytes.data() + offset, len);
    ++named;
  }
  if (named != out.model.parameters().size())
    fail(dir / "manifest.json", "manifest does not cover every model parameter");
  const std::size_t expect =
      [&] {
        std::size_t total = 0;
        for (const auto& p : out.model.parameters())
          total += static_cast<std::size_t>(p.value.data().size());
        return total;
      }() *
      sizeof(double);
  if (bytes.size() != expect) fail(dir / "params.bin", "blob size disagrees with manifest");

  out.model.set_noise_floor(manifest.value("noise_floor", 0.0));
  return out;
}

// ---------------------------------------------------------------------------
// Attention maps
// ---------------------------------------------------------------------------

void export_attention_maps(const fs::path& dir, const GeoformerModel& model,
                           const Eigen::MatrixXd& window) {
  fs::create_directories(dir);
  const auto records = model.attention_records(window);
  for (std::size_t li = 0; li < records.size(); ++li)
    for (std::size_t h = 0; h < records[li].weights.size(); ++h)
      write_matrix_csv(dir / ("attention_l" + std::to_string(li) + "_h" + std::to_string(h) +
                              ".csv"),
                       records[li].weights[h]);
  if (model.config().variant == ModelVariant::Geo)
    write_matrix_csv(dir / "kernel_bias.csv", model.kernel_bias_matrix_now());
}

// ---------------------------------------------------------------------------
// SVG plots
// ---------------------------------------------------------------------------

namespace {

constexpr double kW = 640, kH = 400, kPad = 48;

std::string svg_open(const std::string& title) {
  std::ostringstream ss;
  ss << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\""
     << " font-size=\"14\">" << title << "</text>\n";
  return ss.str();
}

const char* kPalette[] = {"#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#e67e22", "#16a085"};

void write_text_file(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(path, "cannot open for writing");
  out << body;
  if (!out) fail(path, "write failed");
}

}  // namespace

void write_svg_lines(const fs::path& path, const std::string& title,
                     const std::vector<SvgSeries>& series) {
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool first = true;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (first) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        first = false;
      }
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  if (xmax <= xmin) xmax = xmin + 1;
  if (ymax <= ymin) ymax = ymin + 1;
  const auto px = [&](double x) { return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad); };
  const auto py = [&](double y) {
    return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad);
  };

  std::ostringstream ss;
  ss << svg_open(title);
  ss << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  ss << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  ss << "<text x=\"" << kPad << "\" y=\"" << kH - kPad + 16
     << "\" font-family=\"sans-serif\" font-size=\"10\">" << format_double(xmin) << "</text>\n";
  ss << "<text x=\"" << kW - kPad << "\" y=\"" << kH - kPad + 16
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
     << format_double(xmax) << "</text>\n";
  ss << "<text x=\"" << kPad - 4 << "\" y=\"" << kH - kPad
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
     << format_double(ymin) << "</text>\n";
  ss << "<text x=\"" << kPad - 4 << "\" y=\"" << kPad + 4
     << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
     << format_double(ymax) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = kPalette[k % (sizeof kPalette / sizeof *kPalette)];
    ss << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size() && i < s.y.size(); ++i)
      ss << px(s.x[i]) << "," << py(s.y[i]) << " ";
    ss << "\"/>\n";
    ss << "<text x=\"" << kW - kPad - 4 << "\" y=\"" << kPad + 14 * (k + 1)
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << color
       << "\">" << s.name << "</text>\n";
  }
  ss << "</svg>\n";
  write_text_file(path, ss.str());
}

void write_svg_histogram(const fs::path& path, const std::string& title,
                         const std::vector<double>& mass, double reference) {
  double ymax = reference;
  for (double m : mass) ymax = std::max(ymax, m);
  if (ymax <= 0) ymax = 1;
  ymax *= 1.1;
  const std::size_t n = std::max<std::size_t>(mass.size(), 1);
  const double bw = (kW - 2 * kPad) / static_cast<double>(n);

  std::ostringstream ss;
  ss << svg_open(title);
  ss << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < mass.size(); ++i) {
    const double h = mass[i] / ymax * (kH - 2 * kPad);
    ss << "<rect x=\"" << kPad + bw * static_cast<double>(i) << "\" y=\"" << kH - kPad - h
       << "\" width=\"" << bw * 0.92 << "\" height=\"" << h
       << "\" fill=\"#1b6ca8\" fill-opacity=\"0.7\"/>\n";
  }
  const double ry = kH - kPad - reference / ymax * (kH - 2 * kPad);
  ss << "<line x1=\"" << kPad << "\" y1=\"" << ry << "\" x2=\"" << kW - kPad << "\" y2=\"" << ry
     << "\" stroke=\"#c0392b\" stroke-dasharray=\"4 3\"/>\n";
  ss << "</svg>\n";
  write_text_file(path, ss.str());
}

}  // namespace geoformer
