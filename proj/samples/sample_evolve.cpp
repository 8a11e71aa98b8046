// End-to-end evolution on the generated sim suite, in process: make the
// suite, run a short evolution with the mock mutator, print per-kernel
// speedups against the exhaustive oracle.

#include <filesystem>
#include <iostream>

#include "r3/r3.hpp"

int main() {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "r3-sample-suite";
  r3::SuiteOracle oracle = r3::make_benchmark_suite(dir, 7);

  r3::ServiceConfig scfg;
  scfg.workers = 2;
  r3::ReplayService service(r3::UnitDatabase::load(dir), scfg);
  r3::InProcessEndpoint endpoint(&service);

  r3::JobConfig job;
  job.db_dir = dir.string();
  job.iterations = 60;
  job.islands = 2;
  job.migration_interval = 20;
  job.tune_budget = 20;
  job.out_dir = (fs::temp_directory_path() / "r3-sample-run").string();

  r3::EvolutionReport report = r3::run_evolution(job, 1, endpoint);
  for (const auto& [kernel, outcome] : report.kernels) {
    double best = outcome.final_eval.median_runtime_s;
    double opt = oracle.kernels.at(kernel).best_runtime_s;
    std::cout << kernel << ": best " << best << " s, oracle " << opt << " s, speedup "
              << outcome.final_eval.speedup.value_or(0.0) << "\n";
  }
  return 0;
}
