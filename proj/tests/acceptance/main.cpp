// Runs the acceptance criteria and prints one PASS/FAIL line for each.
//
//   acceptance [--only 1,5] [--report results.json] [--strict]
//
// Exit status is 0 when every selected criterion ran to completion, whatever
// its verdict; --strict also turns a FAIL verdict into exit status 1.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <set>

#include "acceptance.hpp"

using namespace circuitlab::acceptance;

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string report_path;
  bool strict = false;
  app.add_option("--only", only, "criterion numbers to run")->delimiter(',');
  app.add_option("--report", report_path, "write verdicts as JSON");
  app.add_flag("--strict", strict, "exit 1 when a criterion fails");
  CLI11_PARSE(app, argc, argv);

  struct Criterion {
    int number;
    const char* title;
    Outcome (*run)();
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradient_correctness},
      {2, "inner-max fidelity", inner_max_fidelity},
      {3, "oracle equivalence", oracle_equivalence},
      {4, "circuit identity and monotonicity", circuit_identity},
      {5, "ProxPulse end-to-end", proxpulse_end_to_end},
      {6, "ProxPulse circuit robustness", proxpulse_circuit_robustness},
      {7, "CircuitBreaker end-to-end", circuitbreaker_end_to_end},
      {8, "determinism", determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  nlohmann::json report = nlohmann::json::array();
  bool completed = true, all_pass = true;
  for (const Criterion& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("aborted: ") + e.what()};
      completed = false;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    all_pass = all_pass && o.pass;
    std::cout << "criterion " << c.number << " " << (o.pass ? "PASS" : "FAIL") << ": " << c.title << " ["
              << static_cast<int>(seconds) << " s] " << o.detail << std::endl;
    report.push_back({{"criterion", c.number},
                      {"title", c.title},
                      {"pass", o.pass},
                      {"detail", o.detail},
                      {"seconds", seconds}});
  }
  if (!report_path.empty()) std::ofstream(report_path) << report.dump(2) << "\n";
  if (!completed) return 2;
  return strict && !all_pass ? 1 : 0;
}
