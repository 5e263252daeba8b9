// Acceptance gate: runs the numerics checks, then the full desk-scale
// experiment suite, and prints one verdict line per acceptance criterion.
// Exits 0 only when every criterion passes. Numerics run first so that a
// broken gradient or statistic fails in seconds, not after the hour-long
// suite.
#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <string>
#include <thread>

#include "geoformer/experiments.hpp"

using nlohmann::json;
using namespace geoformer;

namespace {

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

/// Prints "criterion <id> (<key>): PASS|FAIL|INDETERMINATE" plus the detail
/// block for anything that did not pass.
bool print_verdict(const json& c) {
  const std::string status = c.at("status").get<std::string>();
  std::cout << "criterion " << c.at("id").get<int>() << " ("
            << c.at("key").get<std::string>() << "): " << upper(status) << "\n";
  if (status != "pass" && c.contains("detail"))
    std::cout << "  detail: " << c.at("detail").dump() << "\n";
  return status == "pass";
}

}  // namespace

int main() {
  ExperimentConfig cfg;
  cfg.apply_desk_scale();
  cfg.emit_svg = true;
  const unsigned hc = std::max(1u, std::thread::hardware_concurrency());
  cfg.jobs = static_cast<int>(std::min(hc, 4u));
  if (const char* env = std::getenv("GEOFORMER_OUTPUT_DIR"); env != nullptr && *env != '\0')
    cfg.output_dir = env;
  else
    cfg.output_dir = "acceptance_out";

  try {
    ExperimentRunner runner(cfg);

    const json numerics = runner.run_numerics();
    const json& gate = numerics.at("criteria").at(0);
    if (gate.at("status").get<std::string>() != "pass") {
      std::cout << "numerics gate failed; skipping the experiment suite\n";
      print_verdict(gate);
      return 1;
    }
    std::cout << "numerics gate passed (" << numerics.at("checks").size()
              << " checks); running the desk-scale suite with jobs=" << cfg.jobs << "\n";

    const json summary = runner.run(ExperimentKind::FullSuite);
    int passed = 0;
    for (const auto& c : summary.at("acceptance")) passed += print_verdict(c) ? 1 : 0;
    std::cout << passed << "/" << summary.at("acceptance").size()
              << " criteria passed; elapsed "
              << summary.at("elapsed_seconds").get<double>() << "s; summary at "
              << (cfg.output_dir / "summary.json").string() << "\n";
    return ExperimentRunner::all_criteria_pass(summary) ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << "\n";
    return 2;
  }
}
