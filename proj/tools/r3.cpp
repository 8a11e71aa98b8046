// r3 command-line entry point.
//
// Subcommands:
//   serve            run the persistent replay server
//   evolve           hierarchical evolution against a replay server
//   bo               record-replay + BO baseline (no source changes)
//   tune             one TPE run over a space JSON
//   report           render a finished run directory
//   bench-scheduler  discrete-event comparison of selection policies
//   make-suite       emit the 4-kernel sim benchmark suite + oracle
//
// Exit codes: 0 success, 2 config/usage error, 3 server unreachable.

#include <csignal>
#include <thread>
#include <iostream>

#include <CLI11.hpp>

#include "r3/r3.hpp"

namespace {

volatile std::sig_atomic_t g_stop_requested = 0;

void handle_signal(int) { g_stop_requested = 1; }

std::unique_ptr<r3::EvalEndpoint> connect_endpoint(const r3::JobConfig& job,
                                                   std::unique_ptr<r3::ReplayService>& service) {
  if (job.server == "inproc") {
    if (job.db_dir.empty())
      throw r3::ConfigError("inproc server needs \"db\" in the config");
    r3::ServiceConfig cfg;
    cfg.backend = job.backend;
    cfg.workers = job.workers;
    service = std::make_unique<r3::ReplayService>(r3::UnitDatabase::load(job.db_dir), cfg);
    return std::make_unique<r3::InProcessEndpoint>(service.get());
  }
  return std::make_unique<r3::RemoteEndpoint>(job.server);
}

int cmd_serve(const std::string& listen, const std::string& db_dir, const std::string& backend,
              int workers, const std::string& command) {
  r3::ServiceConfig cfg;
  cfg.backend = backend;
  cfg.workers = workers;
  cfg.subprocess_command = command;
  r3::ReplayService service(r3::UnitDatabase::load(db_dir), cfg);
  r3::ReplayServer server(service, listen);
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  server.start();
  std::cerr << "r3 serve: listening on " << server.address() << ", "
            << service.db().kernels.size() << " kernels, " << workers << " workers\n";
  while (!g_stop_requested)
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();  // graceful: in-flight requests finish first
  std::cerr << "r3 serve: shut down\n";
  return 0;
}

int cmd_evolve(const std::string& config_path, uint64_t seed, bool resume, bool bo_mode) {
  r3::JobConfig job = r3::JobConfig::load(config_path);
  std::unique_ptr<r3::ReplayService> service;
  auto endpoint = connect_endpoint(job, service);
  r3::EvolutionReport report = bo_mode ? r3::run_bo_only(job, seed, *endpoint)
                                       : r3::run_evolution(job, seed, *endpoint, resume);
  std::cout << r3::render_report(job.out_dir, "markdown");
  std::cerr << "run artifacts in " << job.out_dir << "\n";
  return 0;
}

int cmd_tune(const std::string& space_path, int budget, uint64_t seed,
             const std::string& server, const std::string& kernel,
             const std::string& source_path, const std::string& objective,
             const std::string& out_path) {
  r3::TuneSpace space = r3::TuneSpace::from_json(r3::json::parse(r3::read_file(space_path)));

  r3::EvaluateFn evaluate;
  std::unique_ptr<r3::ReplayClient> client;
  if (!server.empty()) {
    if (kernel.empty() || source_path.empty())
      throw r3::ConfigError("--server mode needs --kernel and --source");
    client = std::make_unique<r3::ReplayClient>(server);
    std::string source = r3::read_file(source_path);
    evaluate = [&, source](const r3::TunePoint& p) -> r3::Trial {
      r3::ReplayRequest req;
      req.kind = "replay";
      req.kernel_name = kernel;
      req.candidate_source = source;
      req.point = r3::tune_point_to_json(space, p);
      try {
        r3::EvalResult res = client->replay(req);
        return res.correct ? r3::Trial::success(p, res.median_runtime_s)
                           : r3::Trial::incorrect(p);
      } catch (const r3::Error& e) {
        if (e.code() == "BACKEND_FAILURE") return r3::Trial::failed(p);
        throw;
      }
    };
  } else {
    // offline objective: "quadratic:PARAM=TARGET" on an int_range parameter
    size_t colon = objective.find(':');
    size_t eq = objective.find('=');
    if (objective.rfind("quadratic:", 0) != 0 || eq == std::string::npos)
      throw r3::ConfigError("objective must look like quadratic:PARAM=TARGET");
    std::string param = objective.substr(colon + 1, eq - colon - 1);
    double target = std::stod(objective.substr(eq + 1));
    evaluate = [param, target](const r3::TunePoint& p) -> r3::Trial {
      double x = static_cast<double>(std::get<int64_t>(p.assignment.at(param)));
      return r3::Trial::success(p, (x - target) * (x - target) + 1.0);
    };
  }

  r3::TuneResult result = r3::tune(space, evaluate, budget, 1, seed);
  r3::json out = result.to_json(space);
  if (out_path.empty())
    std::cout << out.dump(2) << "\n";
  else
    r3::write_file_atomic(out_path, out.dump(2) + "\n");
  return 0;
}

int cmd_report(const std::string& dir, const std::string& format) {
  std::cout << r3::render_report(dir, format);
  return 0;
}

int cmd_bench_scheduler(const std::string& workload_path, const std::string& out_csv) {
  r3::json wj = r3::json::parse(r3::read_file(workload_path));
  r3::WorkloadSpec base = r3::WorkloadSpec::from_json(wj);
  double horizon = wj.value("horizon_s", 3600.0);
  std::vector<uint64_t> seeds = wj.value("seeds", std::vector<uint64_t>{1, 2, 3});
  std::vector<int> p_grid = wj.value("controllers_grid", std::vector<int>{base.controllers});
  std::vector<int> g_grid = wj.value("workers_grid", std::vector<int>{base.workers});

  std::string csv = r3::SimReport::csv_header() + "\n";
  for (int p : p_grid) {
    for (int g : g_grid) {
      r3::WorkloadSpec w = base;
      w.controllers = p;
      w.workers = g;
      for (bool backfill : {false, true}) {
        r3::SchedulerConfig cfg;
        cfg.backfill = backfill;
        double eph = 0, util = 0, stale = 0;
        for (uint64_t s : seeds) {
          r3::SimReport rep = r3::simulate(cfg, w, horizon, s);
          eph += rep.evals_per_hour;
          util += rep.utilization;
          stale += rep.stale_fraction;
        }
        r3::SimReport mean;
        mean.policy = backfill ? "backfill" : "base";
        mean.controllers = p;
        mean.workers = g;
        mean.evals_per_hour = eph / static_cast<double>(seeds.size());
        mean.utilization = util / static_cast<double>(seeds.size());
        mean.stale_fraction = stale / static_cast<double>(seeds.size());
        csv += mean.csv_row() + "\n";
      }
    }
  }
  if (out_csv.empty())
    std::cout << csv;
  else
    r3::write_file_atomic(out_csv, csv);
  return 0;
}

int cmd_make_suite(const std::string& out_dir, uint64_t seed) {
  r3::SuiteOracle oracle = r3::make_benchmark_suite(out_dir, seed);
  std::cerr << "suite written to " << out_dir << " (" << oracle.kernels.size()
            << " kernels, oracle.json alongside)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical GPU-kernel optimization over record-replay"};
  app.require_subcommand(1);

  // serve
  auto* serve = app.add_subcommand("serve", "run the persistent replay server");
  std::string listen = "127.0.0.1:8700", db_dir, backend = "sim", backend_cmd;
  int workers = 2;
  serve->add_option("--listen", listen, "HOST:PORT to listen on");
  serve->add_option("--db", db_dir, "replay-unit database directory")->required();
  serve->add_option("--backend", backend, "sim | subprocess");
  serve->add_option("--workers", workers, "replay worker count");
  serve->add_option("--command", backend_cmd, "subprocess backend command");

  // evolve / bo
  auto* evolve = app.add_subcommand("evolve", "run hierarchical evolution");
  std::string config_path;
  uint64_t seed = 1;
  bool resume = false;
  evolve->add_option("--config", config_path, "job config JSON")->required();
  evolve->add_option("--seed", seed, "run seed");
  evolve->add_flag("--resume", resume, "resume from checkpoints in out_dir");

  auto* bo = app.add_subcommand("bo", "record-replay + BO baseline");
  std::string bo_config;
  uint64_t bo_seed = 1;
  bo->add_option("--config", bo_config, "job config JSON")->required();
  bo->add_option("--seed", bo_seed, "run seed");

  // tune
  auto* tune = app.add_subcommand("tune", "one TPE run over a space JSON");
  std::string space_path, tune_server, tune_kernel, tune_source, tune_out;
  std::string objective = "quadratic:x=20";
  int budget = 30;
  uint64_t tune_seed = 1;
  tune->add_option("--space", space_path, "tune space JSON")->required();
  tune->add_option("--budget", budget, "evaluation budget");
  tune->add_option("--seed", tune_seed, "seed");
  tune->add_option("--server", tune_server, "replay server HOST:PORT");
  tune->add_option("--kernel", tune_kernel, "kernel name (server mode)");
  tune->add_option("--source", tune_source, "candidate source file (server mode)");
  tune->add_option("--objective", objective, "offline objective, quadratic:PARAM=TARGET");
  tune->add_option("--out", tune_out, "result JSON path (default stdout)");

  // report
  auto* report = app.add_subcommand("report", "render a run directory");
  std::string report_dir, format = "markdown";
  report->add_option("dir", report_dir, "run output directory")->required();
  report->add_option("--format", format, "json | csv | markdown");

  // bench-scheduler
  auto* bench = app.add_subcommand("bench-scheduler", "simulate selection policies");
  std::string workload_path, bench_out;
  bench->add_option("--workload", workload_path, "workload spec JSON")->required();
  bench->add_option("--out", bench_out, "CSV output path (default stdout)");

  // make-suite
  auto* mk = app.add_subcommand("make-suite", "emit the sim benchmark suite");
  std::string suite_out;
  uint64_t suite_seed = 7;
  mk->add_option("--out", suite_out, "output directory")->required();
  mk->add_option("--seed", suite_seed, "suite seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (serve->parsed()) return cmd_serve(listen, db_dir, backend, workers, backend_cmd);
    if (evolve->parsed()) return cmd_evolve(config_path, seed, resume, false);
    if (bo->parsed()) return cmd_evolve(bo_config, bo_seed, false, true);
    if (tune->parsed())
      return cmd_tune(space_path, budget, tune_seed, tune_server, tune_kernel, tune_source,
                      objective, tune_out);
    if (report->parsed()) return cmd_report(report_dir, format);
    if (bench->parsed()) return cmd_bench_scheduler(workload_path, bench_out);
    if (mk->parsed()) return cmd_make_suite(suite_out, suite_seed);
  } catch (const r3::ConnectError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const r3::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
