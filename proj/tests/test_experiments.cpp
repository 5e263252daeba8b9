#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "geoformer/experiments.hpp"

using namespace geoformer;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / ("geoformer_exp_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

/// Small end-to-end configuration: 16 sensors, short series, tiny models.
ExperimentConfig tiny_config(const fs::path& out, int jobs) {
  ExperimentConfig cfg;
  cfg.sim.grid_side = 4;
  cfg.sim.t_steps = 120;
  cfg.sim.n_replicates = 3;
  cfg.model_geo.d_model = 8;
  cfg.model_geo.n_heads = 2;
  cfg.model_geo.n_layers = 1;
  cfg.model_geo.lookback = 4;
  cfg.model_vanilla = cfg.model_geo;
  cfg.model_vanilla.variant = ModelVariant::Vanilla;
  cfg.variography_model = cfg.model_geo;
  cfg.train.max_epochs = 2;
  cfg.train.batch_size = 16;
  cfg.variography_train = cfg.train;
  cfg.variography_train.max_epochs = 3;
  cfg.t_train = 60;
  cfg.t_test = 20;
  cfg.sample_sizes = {40, 60};
  cfg.horizon_max = 2;
  cfg.n_mc = 4;
  cfg.output_dir = out;
  cfg.jobs = jobs;
  cfg.seed = 7;
  return cfg;
}

}  // namespace

TEST_CASE("experiment kinds round-trip through their names") {
  for (ExperimentKind kind :
       {ExperimentKind::Variography, ExperimentKind::SampleEfficiency,
        ExperimentKind::HorizonDecay, ExperimentKind::ResidualWhitening,
        ExperimentKind::Calibration, ExperimentKind::FullTable, ExperimentKind::FullSuite})
    CHECK(experiment_kind_from_string(to_string(kind)) == kind);
  CHECK_THROWS_AS(experiment_kind_from_string("variogram"), std::invalid_argument);
}

TEST_CASE("dotted overrides parse values and build nested objects") {
  json doc = json::object();
  apply_dotted_override(doc, "sim.rho_true=0.35");
  apply_dotted_override(doc, "sim.grid_side=8");
  apply_dotted_override(doc, "emit_svg=true");
  apply_dotted_override(doc, "output_dir=runs/a b");
  CHECK(doc["sim"]["rho_true"].get<double>() == 0.35);
  CHECK(doc["sim"]["grid_side"].get<int>() == 8);
  CHECK(doc["emit_svg"].get<bool>() == true);
  CHECK(doc["output_dir"].get<std::string>() == "runs/a b");  // not valid JSON -> string

  // overrides replace earlier values
  apply_dotted_override(doc, "sim.rho_true=0.5");
  CHECK(doc["sim"]["rho_true"].get<double>() == 0.5);

  CHECK_THROWS_AS(apply_dotted_override(doc, "no_equals"), std::invalid_argument);
  CHECK_THROWS_AS(apply_dotted_override(doc, "=5"), std::invalid_argument);
  CHECK_THROWS_AS(apply_dotted_override(doc, "sim..x=1"), std::invalid_argument);
  // crossing a scalar is an error, not a silent replacement
  CHECK_THROWS_AS(apply_dotted_override(doc, "emit_svg.inner=1"), std::invalid_argument);
}

TEST_CASE("desk preset shrinks the run and flag overrides still win") {
  ExperimentConfig cfg;
  CHECK(cfg.effective_sample_sizes() == std::vector<int>{100, 500, 1500});
  cfg.apply_desk_scale();
  CHECK(cfg.sim.grid_side == 10);
  CHECK(cfg.sim.t_steps == 600);
  CHECK(cfg.sim.n_replicates == 5);
  CHECK(cfg.t_test == 100);
  CHECK(cfg.t_train == 500);
  CHECK(cfg.train.max_epochs == 30);
  CHECK(cfg.train.plateau_patience == 8);
  CHECK(cfg.variography_train.max_epochs == 80);
  CHECK(cfg.variography_train.plateau_patience == 10);
  CHECK(cfg.effective_sample_sizes() == std::vector<int>{100, 250, 500});
  cfg.validate();

  // preset first, then --set semantics on the JSON document
  json doc = cfg;
  apply_dotted_override(doc, "sim.grid_side=8");
  ExperimentConfig merged = doc.get<ExperimentConfig>();
  CHECK(merged.sim.grid_side == 8);
  CHECK(merged.sim.t_steps == 600);
  CHECK(merged.desk_scale == true);

  cfg.sample_sizes = {64, 128};
  CHECK(cfg.effective_sample_sizes() == std::vector<int>{64, 128});
}

TEST_CASE("experiment config json round-trips and accepts the model alias") {
  ExperimentConfig cfg;
  cfg.apply_desk_scale();
  cfg.experiment = ExperimentKind::HorizonDecay;
  cfg.sample_sizes = {100, 200};
  cfg.horizon_max = 3;
  cfg.n_mc = 17;
  cfg.output_dir = "some/dir";
  cfg.emit_svg = true;
  cfg.jobs = 4;
  cfg.seed = 99;
  cfg.model_geo.d_model = 32;
  cfg.model_geo.kernel.family = KernelFamily::Gaussian;
  cfg.variography_train.lr = 0.5;

  const json j = cfg;
  const ExperimentConfig back = j.get<ExperimentConfig>();
  CHECK(back.sim.grid_side == 10);
  CHECK(back.experiment == ExperimentKind::HorizonDecay);
  CHECK(back.sample_sizes == std::vector<int>{100, 200});
  CHECK(back.horizon_max == 3);
  CHECK(back.n_mc == 17);
  CHECK(back.output_dir == fs::path("some/dir"));
  CHECK(back.emit_svg == true);
  CHECK(back.jobs == 4);
  CHECK(back.seed == 99);
  CHECK(back.model_geo.d_model == 32);
  CHECK(back.model_geo.kernel.family == KernelFamily::Gaussian);
  CHECK(back.model_vanilla.d_model == 64);  // set explicitly, not via the alias
  CHECK(back.variography_train.lr == 0.5);
  CHECK(back.train.max_epochs == 30);

  // one "model" block configures both comparative variants
  json alias = json{{"model", {{"d_model", 16}, {"n_heads", 2}}}};
  const ExperimentConfig both = alias.get<ExperimentConfig>();
  CHECK(both.model_geo.d_model == 16);
  CHECK(both.model_geo.variant == ModelVariant::Geo);
  CHECK(both.model_vanilla.d_model == 16);
  CHECK(both.model_vanilla.variant == ModelVariant::Vanilla);

  // sparse documents keep constructor defaults elsewhere
  const ExperimentConfig sparse = json{{"t_train", 400}}.get<ExperimentConfig>();
  CHECK(sparse.t_train == 400);
  CHECK(sparse.variography_model.d_model == 32);
  CHECK(sparse.variography_model.n_layers == 1);
  CHECK(sparse.variography_train.max_epochs == 80);
}

TEST_CASE("experiment config validation names the violated invariant") {
  ExperimentConfig cfg = tiny_config(fs::temp_directory_path(), 1);
  cfg.validate();

  ExperimentConfig bad = cfg;
  bad.model_geo.variant = ModelVariant::Vanilla;
  CHECK_THROWS_WITH_AS(bad.validate(), "model_geo must use the Geo variant",
                       std::invalid_argument);

  bad = cfg;
  bad.model_vanilla.lookback = 6;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.t_test = 5;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.sample_sizes = {110};  // 110 + 20 > 120
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.jobs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

  bad = cfg;
  bad.n_mc = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("all_criteria_pass requires a non-empty all-pass list") {
  CHECK_FALSE(ExperimentRunner::all_criteria_pass(json::object()));
  CHECK_FALSE(ExperimentRunner::all_criteria_pass(json{{"acceptance", json::array()}}));
  json ok = json{{"acceptance", json::array({json{{"id", 1}, {"status", "pass"}}})}};
  CHECK(ExperimentRunner::all_criteria_pass(ok));
  json mixed = json{{"acceptance", json::array({json{{"id", 1}, {"status", "pass"}},
                                                json{{"id", 2}, {"status", "fail"}}})}};
  CHECK_FALSE(ExperimentRunner::all_criteria_pass(mixed));
  json indet = json{{"criteria", json::array({json{{"id", 4}, {"status", "indeterminate"}}})}};
  CHECK_FALSE(ExperimentRunner::all_criteria_pass(indet));
  json frag = json{{"criteria", json::array({json{{"id", 5}, {"status", "pass"}}})}};
  CHECK(ExperimentRunner::all_criteria_pass(frag));
}

TEST_CASE("training cells are memoized and replicate datasets are stable") {
  ExperimentRunner runner(tiny_config(fresh_dir("memo"), 1));
  const StDataset& d0 = runner.dataset(0);
  const StDataset& d0_again = runner.dataset(0);
  CHECK(&d0 == &d0_again);
  CHECK(d0.replicate_id == 0);
  CHECK_THROWS_AS(runner.dataset(99), std::invalid_argument);

  const TrainedCell& cell = runner.trained(0, ModelVariant::Geo, 60);
  REQUIRE(cell.ok());
  CHECK(cell.rho_init >= 0.01);
  CHECK(cell.rho_init <= 0.5);
  CHECK(cell.model->config().variant == ModelVariant::Geo);
  const TrainedCell& cell_again = runner.trained(0, ModelVariant::Geo, 60);
  CHECK(&cell == &cell_again);  // no second training run

  const TrainedCell& vcell = runner.trained(0, ModelVariant::Vanilla, 60);
  REQUIRE(vcell.ok());
  CHECK(vcell.rho_init == 0.0);
  CHECK(vcell.model->config().variant == ModelVariant::Vanilla);
}

TEST_CASE("sample efficiency artifacts are identical for one and two jobs") {
  const fs::path out1 = fresh_dir("jobs1");
  const fs::path out2 = fresh_dir("jobs2");
  ExperimentRunner r1(tiny_config(out1, 1));
  ExperimentRunner r2(tiny_config(out2, 2));
  const json f1 = r1.run(ExperimentKind::SampleEfficiency);
  const json f2 = r2.run(ExperimentKind::SampleEfficiency);

  // numeric artifacts must be bit-identical regardless of the job pool
  CHECK(slurp(out1 / "sample_efficiency" / "rmse_table.csv") ==
        slurp(out2 / "sample_efficiency" / "rmse_table.csv"));
  CHECK(slurp(out1 / "sample_efficiency" / "improvement.csv") ==
        slurp(out2 / "sample_efficiency" / "improvement.csv"));

  CHECK(f1.at("name") == "sample_efficiency");
  CHECK(f1.at("failures").empty());
  const json& crit = f1.at("criteria").at(0);
  CHECK(crit.at("id") == 4);
  // the tiny run has no 100/500 cells, so the verdict stays open
  CHECK(crit.at("status") == "indeterminate");
  CHECK(f1.at("table").size() == 2);

  const CsvTable table = read_csv(out1 / "sample_efficiency" / "rmse_table.csv");
  CHECK(table.header ==
        std::vector<std::string>{"t_train", "replicate", "rmse_geo", "rmse_vanilla"});
  CHECK(table.rows.size() == 6);  // 2 sizes x 3 replicates
  for (const auto& row : table.rows) {
    CHECK(row[2] > 0.0);
    CHECK(row[3] > 0.0);
  }
}

TEST_CASE("variography bundle reports recovery per replicate") {
  const fs::path out = fresh_dir("vario");
  ExperimentConfig cfg = tiny_config(out, 2);
  ExperimentRunner runner(cfg);
  const json frag = runner.run(ExperimentKind::Variography);

  CHECK(frag.at("name") == "variography");
  CHECK(frag.at("succeeded") == 3);
  CHECK(frag.at("criteria").at(0).at("id") == 1);
  const json detail = frag.at("criteria").at(0).at("detail");
  CHECK(detail.contains("mean_final_rho"));
  CHECK(detail.at("budget_seconds") == 900.0);

  const CsvTable summary = read_csv(out / "variography" / "variography_summary.csv");
  CHECK(summary.rows.size() == 3);
  const int rho_col = summary.column("rho_final");
  REQUIRE(rho_col >= 0);
  for (const auto& row : summary.rows) CHECK(row[rho_col] > 0.0);

  const CsvTable traj = read_csv(out / "variography" / "rho_trajectory.csv");
  // 3 replicates x 3 epochs of the tiny schedule
  CHECK(traj.rows.size() == 9);
  CHECK(fs::exists(out / "variography" / "rep0_trainlog.csv"));
  const TrainLog log = read_train_log(out / "variography" / "rep0_trainlog.csv");
  CHECK(log.epochs.size() == 3);
  CHECK(log.epochs[0].rho > 0.0);
}

TEST_CASE("full suite writes a combined summary with all eight verdicts") {
  const fs::path out = fresh_dir("suite");
  ExperimentConfig cfg = tiny_config(out, 2);
  cfg.emit_svg = true;
  ExperimentRunner runner(cfg);
  const json doc = runner.run(ExperimentKind::FullSuite);

  CHECK(doc.at("schema") == "geoformer-summary-v1");
  REQUIRE(doc.contains("acceptance"));
  const json& acc = doc.at("acceptance");
  REQUIRE(acc.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(acc.at(i).at("id") == i + 1);
    const std::string status = acc.at(i).at("status");
    CHECK((status == "pass" || status == "fail" || status == "indeterminate"));
  }
  // at this toy scale the exactness checks still must pass outright
  CHECK(acc.at(7).at("key") == "numerics_exactness");
  CHECK(acc.at(7).at("status") == "pass");

  // the summary on disk is the returned document
  const json from_disk = read_json_file(out / "summary.json");
  CHECK(from_disk.at("acceptance") == doc.at("acceptance"));
  CHECK(from_disk.contains("config"));
  CHECK(from_disk.at("experiments").size() == 6);

  // spot-check the artifact bundles of the remaining experiments
  CHECK(fs::exists(out / "horizon_decay" / "horizon_rmse.csv"));
  CHECK(fs::exists(out / "horizon_decay" / "horizon_ratio.csv"));
  CHECK(fs::exists(out / "residual_whitening" / "morans_i.csv"));
  CHECK(fs::exists(out / "residual_whitening" / "residual_snapshot_geo.csv"));
  CHECK(fs::exists(out / "residual_whitening" / "residual_snapshot_vanilla.csv"));
  CHECK(fs::exists(out / "calibration" / "pit_values_geo.csv"));
  CHECK(fs::exists(out / "calibration" / "pit_hist_vanilla.csv"));
  CHECK(fs::exists(out / "calibration" / "calibration_summary.csv"));
  CHECK(fs::exists(out / "full_table" / "full_table.csv"));
  CHECK(fs::exists(out / "full_table" / "metrics.json"));
  CHECK(fs::exists(out / "full_table" / "dm_series.csv"));
  CHECK(fs::exists(out / "full_table" / "metrics_geoformer.csv"));
  CHECK(fs::exists(out / "full_table" / "forecasts" / "rep0_kriging_oracle.csv"));
  CHECK(fs::exists(out / "variography" / "rho_trajectory.svg"));
  CHECK(fs::exists(out / "calibration" / "pit_geo.svg"));

  // PIT pool covers every replicate, test step and sensor
  const CsvTable pit = read_csv(out / "calibration" / "pit_values_geo.csv");
  CHECK(pit.rows.size() == 3u * 20u * 16u);

  // the dm series pools the per-step spatial RMS errors of all replicates
  const CsvTable dm = read_csv(out / "full_table" / "dm_series.csv");
  CHECK(dm.rows.size() == 3u * 20u);
  const json metrics = read_json_file(out / "full_table" / "metrics.json");
  CHECK(metrics.at("models").size() == 4);
  CHECK(metrics.at("dm").contains("p_one_sided"));

  // horizon table: 2 horizons x 3 replicates
  const CsvTable hz = read_csv(out / "horizon_decay" / "horizon_rmse.csv");
  CHECK(hz.rows.size() == 6);
}
