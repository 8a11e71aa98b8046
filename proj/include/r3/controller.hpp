#pragma once

// Orchestrates the outer loop per kernel: sample parent and inspirations,
// build the prompt, pick a model, generate, apply the diff, tune through the
// replay endpoint, insert into the island database, migrate on cadence.
// Per-kernel jobs are fully independent. Also provides the BO-only baseline
// mode and run reporting.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "r3/elites.hpp"
#include "r3/mutation.hpp"
#include "r3/prompt.hpp"
#include "r3/replay_server.hpp"
#include "r3/scheduler.hpp"
#include "r3/tuner.hpp"
#include "r3/util.hpp"

namespace r3 {

struct StopRule {
  std::optional<int> max_iterations;
  std::optional<double> max_wallclock_s;
  std::optional<int> patience_iterations;  // stop after this many non-improving iterations

  static StopRule from_json(const json& j) {
    StopRule s;
    if (j.contains("max_iterations") && !j.at("max_iterations").is_null())
      s.max_iterations = j.at("max_iterations").get<int>();
    if (j.contains("max_wallclock_s") && !j.at("max_wallclock_s").is_null())
      s.max_wallclock_s = j.at("max_wallclock_s").get<double>();
    if (j.contains("patience_iterations") && !j.at("patience_iterations").is_null())
      s.patience_iterations = j.at("patience_iterations").get<int>();
    return s;
  }

  json to_json() const {
    json j = json::object();
    if (max_iterations) j["max_iterations"] = *max_iterations;
    if (max_wallclock_s) j["max_wallclock_s"] = *max_wallclock_s;
    if (patience_iterations) j["patience_iterations"] = *patience_iterations;
    return j;
  }
};

struct PromptSettings {
  std::string task_text =
      "Optimize the GPU kernel for lower runtime. The replay harness checks the\n"
      "output state bit-for-bit against the recorded run (annotated regions may\n"
      "use their stated tolerances), so only behavior-preserving changes count.";
  std::optional<std::string> template_path;
  size_t token_budget = 48000;
  size_t history_capacity = 32;
  int n_good = 3;
  int n_diverse = 2;
  bool prefix_aware = true;

  static PromptSettings from_json(const json& j) {
    PromptSettings p;
    if (j.contains("task_text")) p.task_text = j.at("task_text").get<std::string>();
    if (j.contains("template_path") && !j.at("template_path").is_null())
      p.template_path = j.at("template_path").get<std::string>();
    p.token_budget = j.value("token_budget", size_t{48000});
    p.history_capacity = j.value("history_capacity", size_t{32});
    p.n_good = j.value("n_good", 3);
    p.n_diverse = j.value("n_diverse", 2);
    p.prefix_aware = j.value("prefix_aware", true);
    return p;
  }
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("BAD_CONFIG", msg) {}
};

struct JobConfig {
  std::string db_dir;
  std::string server = "inproc";  // "inproc" or "HOST:PORT"
  std::string backend = "sim";
  int workers = 2;

  int iterations = 200;
  int islands = 4;
  int population_cap = 20;
  int migration_interval = 20;
  int controllers = 1;  // parallel controllers per kernel job
  StopRule stop;
  int tune_budget = 30;
  int tune_parallelism = 1;
  int grid_bins = 10;
  double complexity_range_mult = 4.0;  // complexity range [1, mult * seed LOC]
  std::vector<ModelSpec> ensemble;
  std::vector<std::string> kernels;  // empty = every kernel in the database
  PromptSettings prompt;
  SchedulerConfig scheduler;
  double generation_timeout_s = 120.0;
  int checkpoint_interval = 50;
  std::string out_dir = "r3-out";

  static JobConfig from_json(const json& j) {
    JobConfig c;
    c.db_dir = j.value("db", std::string{});
    c.server = j.value("server", std::string{"inproc"});
    c.backend = j.value("backend", std::string{"sim"});
    c.workers = j.value("workers", 2);
    c.iterations = j.value("iterations", 200);
    c.islands = j.value("islands", 4);
    c.population_cap = j.value("population_cap", 20);
    c.migration_interval = j.value("migration_interval", 20);
    c.controllers = j.value("controllers", 1);
    if (j.contains("stop")) c.stop = StopRule::from_json(j.at("stop"));
    c.tune_budget = j.value("tune_budget", 30);
    c.tune_parallelism = j.value("tune_parallelism", 1);
    c.grid_bins = j.value("grid_bins", 10);
    c.complexity_range_mult = j.value("complexity_range_mult", 4.0);
    if (j.contains("ensemble"))
      for (const auto& mj : j.at("ensemble")) c.ensemble.push_back(ModelSpec::from_json(mj));
    if (j.contains("kernels")) c.kernels = j.at("kernels").get<std::vector<std::string>>();
    if (j.contains("prompt")) c.prompt = PromptSettings::from_json(j.at("prompt"));
    if (j.contains("scheduler")) {
      const json& s = j.at("scheduler");
      c.scheduler.backfill = s.value("backfill", true);
      c.scheduler.safety_margin = s.value("safety_margin", 0.10);
      std::string mode = s.value("slack_mode", "max");
      c.scheduler.slack_mode =
          mode == "min" ? SlackMode::min_remaining : SlackMode::max_remaining;
    }
    c.generation_timeout_s = j.value("generation_timeout_s", 120.0);
    c.checkpoint_interval = j.value("checkpoint_interval", 50);
    c.out_dir = j.value("out_dir", std::string{"r3-out"});
    c.validate();
    return c;
  }

  void validate() const {
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (islands < 1) throw ConfigError("islands must be >= 1");
    if (population_cap < 1) throw ConfigError("population_cap must be >= 1");
    if (migration_interval < 1) throw ConfigError("migration_interval must be >= 1");
    if (controllers < 1) throw ConfigError("controllers must be >= 1");
    if (tune_budget < 1) throw ConfigError("tune_budget must be >= 1");
    if (grid_bins < 1) throw ConfigError("grid_bins must be >= 1");
    if (!ensemble.empty()) {
      try {
        validate_ensemble(ensemble);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
    }
  }

  std::vector<ModelSpec> effective_ensemble() const {
    if (!ensemble.empty()) return ensemble;
    ModelSpec mock;
    mock.name = "mock-small";
    mock.endpoint = "mock:";
    mock.base_probability = 1.0;
    mock.latency_prior_s = 0.01;
    return {mock};
  }

  static JobConfig load(const std::filesystem::path& path) {
    try {
      return from_json(json::parse(read_file(path)));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config does not parse: ") + e.what());
    }
  }
};

// ---------------------------------------------------------------------------
// Evaluation endpoints (in-process service or remote socket client)

class EvalEndpoint {
 public:
  virtual ~EvalEndpoint() = default;
  virtual json status() = 0;
  virtual EvalResult tune_candidate(const std::string& kernel, const std::string& source,
                                    const TuneSpace& space, int budget, int parallelism,
                                    uint64_t seed) = 0;
  virtual EvalResult replay(const std::string& kernel, const std::string& source,
                            const json& point, int reps, uint64_t seed) = 0;
  virtual EvalResult validate(const std::string& kernel, const std::string& source,
                              const json& point, uint64_t seed) = 0;
  virtual std::unique_ptr<EvalEndpoint> clone() = 0;  // per-controller connection
};

class InProcessEndpoint : public EvalEndpoint {
 public:
  explicit InProcessEndpoint(ReplayService* service) : service_(service) {}

  json status() override { return service_->status(); }

  EvalResult tune_candidate(const std::string& kernel, const std::string& source,
                            const TuneSpace& space, int budget, int parallelism,
                            uint64_t seed) override {
    ReplayRequest req;
    req.kind = "tune";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.tune_space = space;
    req.budget = budget;
    req.parallelism = parallelism;
    req.seed = seed;
    return service_->tune(req);
  }

  EvalResult replay(const std::string& kernel, const std::string& source, const json& point,
                    int reps, uint64_t seed) override {
    ReplayRequest req;
    req.kind = "replay";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.point = point;
    req.reps = reps;
    req.seed = seed;
    return service_->replay(req);
  }

  EvalResult validate(const std::string& kernel, const std::string& source, const json& point,
                      uint64_t seed) override {
    ReplayRequest req;
    req.kind = "validate";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.point = point;
    req.reps = 10;
    req.seed = seed;
    return service_->validate(req);
  }

  std::unique_ptr<EvalEndpoint> clone() override {
    return std::make_unique<InProcessEndpoint>(service_);
  }

 private:
  ReplayService* service_;
};

class RemoteEndpoint : public EvalEndpoint {
 public:
  explicit RemoteEndpoint(std::string address)
      : address_(std::move(address)), client_(address_) {}

  json status() override { return client_.status(); }

  EvalResult tune_candidate(const std::string& kernel, const std::string& source,
                            const TuneSpace& space, int budget, int parallelism,
                            uint64_t seed) override {
    ReplayRequest req;
    req.kind = "tune";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.tune_space = space;
    req.budget = budget;
    req.parallelism = parallelism;
    req.seed = seed;
    return EvalResult::from_json(client_.call(req.to_json()));
  }

  EvalResult replay(const std::string& kernel, const std::string& source, const json& point,
                    int reps, uint64_t seed) override {
    ReplayRequest req;
    req.kind = "replay";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.point = point;
    req.reps = reps;
    req.seed = seed;
    return client_.replay(req);
  }

  EvalResult validate(const std::string& kernel, const std::string& source, const json& point,
                      uint64_t seed) override {
    ReplayRequest req;
    req.kind = "validate";
    req.kernel_name = kernel;
    req.candidate_source = source;
    req.point = point;
    req.reps = 10;
    req.seed = seed;
    return EvalResult::from_json(client_.call(req.to_json()));
  }

  std::unique_ptr<EvalEndpoint> clone() override {
    return std::make_unique<RemoteEndpoint>(address_);
  }

 private:
  std::string address_;
  ReplayClient client_;
};

// ---------------------------------------------------------------------------
// Run state and reporting

struct RunMetrics {
  int iterations_done = 0;
  int inserts = 0;  // added + replaced
  int rejects = 0;  // rejected_worse + rejected_incorrect
  std::map<std::string, int> failures;
  int stale_read_count = 0;
  int migrations = 0;
  double evals_per_hour = 0;
  double worker_utilization = 0;
  std::vector<std::pair<int, double>> best_fitness_trace;

  int failure_total() const {
    int n = 0;
    for (const auto& [k, v] : failures) n += v;
    return n;
  }

  json to_json() const {
    json trace = json::array();
    for (const auto& [it, f] : best_fitness_trace) trace.push_back(json::array({it, f}));
    return json{{"iterations_done", iterations_done},
                {"inserts", inserts},
                {"rejects", rejects},
                {"failures", failures},
                {"stale_read_count", stale_read_count},
                {"migrations", migrations},
                {"evals_per_hour", evals_per_hour},
                {"worker_utilization", worker_utilization},
                {"best_fitness_trace", trace}};
  }

  static RunMetrics from_json(const json& j) {
    RunMetrics m;
    m.iterations_done = j.value("iterations_done", 0);
    m.inserts = j.value("inserts", 0);
    m.rejects = j.value("rejects", 0);
    if (j.contains("failures")) m.failures = j.at("failures").get<std::map<std::string, int>>();
    m.stale_read_count = j.value("stale_read_count", 0);
    m.migrations = j.value("migrations", 0);
    m.evals_per_hour = j.value("evals_per_hour", 0.0);
    m.worker_utilization = j.value("worker_utilization", 0.0);
    for (const auto& e : j.value("best_fitness_trace", json::array()))
      m.best_fitness_trace.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
    return m;
  }
};

struct KernelOutcome {
  std::string kernel;
  double baseline_runtime_s = 0;
  std::optional<Candidate> best;
  EvalResult final_eval;       // 10-rep confirmation of the best candidate
  bool validated = false;      // all-instance validation verdict
  RunMetrics metrics;

  json to_json() const {
    json j{{"kernel", kernel},
           {"baseline_runtime_s", baseline_runtime_s},
           {"validated", validated},
           {"final_eval", final_eval.to_json()},
           {"metrics", metrics.to_json()}};
    if (best) {
      j["best_fitness"] = best->fitness.value_or(0.0);
      j["best_source"] = best->source;
    }
    return j;
  }
};

struct EvolutionReport {
  std::string mode = "evolve";
  uint64_t seed = 0;
  std::map<std::string, KernelOutcome> kernels;
  std::string deployment_path;
  std::string report_path;

  json to_json() const {
    json k = json::object();
    for (const auto& [name, o] : kernels) k[name] = o.to_json();
    return json{{"mode", mode}, {"seed", seed}, {"kernels", k},
                {"deployment", deployment_path}};
  }
};

// ---------------------------------------------------------------------------
// Kernel description pulled from the endpoint's status frame

struct KernelInfo {
  std::string name;
  TuneSpace tune_space;
  json recorded_point;
  std::string seed_source;
  json launch;
  double baseline_runtime_s = 0;
  std::vector<FeatureDef> feature_defs;  // present for sim-backed kernels
};

inline std::map<std::string, KernelInfo> kernel_infos_from_status(const json& status) {
  std::map<std::string, KernelInfo> out;
  for (const auto& kj : status.at("kernels")) {
    KernelInfo info;
    info.name = kj.at("name").get<std::string>();
    info.tune_space = TuneSpace::from_json(kj.at("tune_space"));
    info.recorded_point = kj.value("recorded_point", json::object());
    info.seed_source = kj.value("seed_source", std::string{});
    info.launch = kj.value("launch", json::object());
    info.baseline_runtime_s = kj.value("baseline_runtime_s", 0.0);
    for (const auto& dj : kj.value("features", json::array()))
      info.feature_defs.push_back(FeatureDef::from_json(dj));
    out[info.name] = info;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evolution driver

namespace controller_detail {

struct KernelJobState {
  std::unique_ptr<IslandSet> islands;
  std::vector<OrderingHistory> histories;  // one per island
  std::vector<std::unique_ptr<std::mutex>> history_locks;
  LatencyEstimator estimator;
  InFlightTable inflight;
  WorkerForecast forecast;
  std::mutex scheduler_mu;  // guards estimator/inflight/forecast

  std::mutex metrics_mu;
  RunMetrics metrics;
  double best_fitness = 0;
  int since_improvement = 0;
  int migrations_done = 0;
  EvalResult baseline_eval;

  std::atomic<int> next_iteration{0};
  std::atomic<bool> stop_flag{false};
  double started_at = 0;
  uint64_t request_counter = 0;
};

inline json state_checkpoint(const KernelJobState& st, const std::string& kernel) {
  json histories = json::array();
  for (const auto& h : st.histories) histories.push_back(h.to_json());
  return json{{"kernel", kernel},
              {"next_iteration", st.metrics.iterations_done},
              {"islands", st.islands->to_json()},
              {"histories", histories},
              {"estimator", st.estimator.to_json()},
              {"metrics", st.metrics.to_json()},
              {"best_fitness", st.best_fitness},
              {"since_improvement", st.since_improvement},
              {"migrations_done", st.migrations_done},
              {"baseline_eval", st.baseline_eval.to_json()}};
}

inline void restore_state(KernelJobState& st, const json& j) {
  st.islands = std::make_unique<IslandSet>(IslandSet::from_json(j.at("islands")));
  st.histories.clear();
  st.history_locks.clear();
  for (const auto& hj : j.at("histories")) {
    st.histories.push_back(OrderingHistory::from_json(hj));
    st.history_locks.push_back(std::make_unique<std::mutex>());
  }
  st.estimator = LatencyEstimator::from_json(j.at("estimator"));
  st.metrics = RunMetrics::from_json(j.at("metrics"));
  st.best_fitness = j.value("best_fitness", 0.0);
  st.since_improvement = j.value("since_improvement", 0);
  st.migrations_done = j.value("migrations_done", 0);
  st.baseline_eval = EvalResult::from_json(j.at("baseline_eval"));
  st.next_iteration = j.value("next_iteration", 0);
}

inline FeatureVector candidate_features(const std::string& source, const IslandSet& islands,
                                        size_t island_idx, uint64_t seed) {
  FeatureVector f;
  f.complexity = std::max<size_t>(1, count_loc(source));
  auto peers = islands.sample_sources(island_idx, 16, seed);
  if (!peers.empty()) {
    double total = 0;
    for (const auto& p : peers) total += normalized_levenshtein(source, p);
    f.diversity = total / static_cast<double>(peers.size());
  }
  return f;
}

}  // namespace controller_detail

class ServerLostError : public Error {
 public:
  explicit ServerLostError(const std::string& msg) : Error("SERVER_LOST", msg) {}
};

// Full R3 evolution for every selected kernel. Kernels run one after the
// other; `controllers` threads share the iteration budget within one kernel
// job. With controllers=1 the run is fully deterministic for a fixed seed.
inline EvolutionReport run_evolution(const JobConfig& job, uint64_t seed,
                                     EvalEndpoint& endpoint, bool resume = false) {
  namespace fs = std::filesystem;
  using controller_detail::KernelJobState;

  auto ensemble = job.effective_ensemble();
  validate_ensemble(ensemble);
  auto infos = kernel_infos_from_status(endpoint.status());

  std::vector<std::string> kernel_names;
  if (job.kernels.empty()) {
    for (const auto& [name, info] : infos) kernel_names.push_back(name);
  } else {
    for (const auto& name : job.kernels) {
      if (!infos.count(name)) throw ConfigError("kernel '" + name + "' not in database");
      kernel_names.push_back(name);
    }
  }

  EvolutionReport report;
  report.mode = "evolve";
  report.seed = seed;
  fs::create_directories(job.out_dir);

  std::map<std::string, DeploymentEntry> deployment;

  for (const auto& kernel : kernel_names) {
    const KernelInfo& info = infos.at(kernel);
    if (info.seed_source.empty()) throw ConfigError(kernel + ": no seed source available");
    const uint64_t kernel_seed = mix_seed({seed, hash_str(kernel)});
    fs::path kernel_dir = fs::path(job.out_dir) / kernel;
    fs::create_directories(kernel_dir);
    fs::path ckpt_path = kernel_dir / "checkpoint.json";

    EngineRouter engine(info.feature_defs);
    KernelJobState st;
    st.started_at = mono_s();
    st.estimator.prime(ensemble);

    json status0 = endpoint.status();
    double busy0 = status0.value("busy_seconds", 0.0);
    double uptime0 = status0.value("uptime_s", 0.0);
    int server_workers = status0.value("workers", 1);
    st.forecast.next_free_time.assign(static_cast<size_t>(server_workers), 0.0);

    if (resume && fs::exists(ckpt_path)) {
      controller_detail::restore_state(st, json::parse(read_file(ckpt_path)));
    } else {
      // seed fitness comes from a baseline tune of the initial implementation
      st.baseline_eval = endpoint.tune_candidate(kernel, info.seed_source, info.tune_space,
                                                 job.tune_budget, job.tune_parallelism,
                                                 mix_seed({kernel_seed, hash_str("seed-tune")}));
      if (!st.baseline_eval.correct)
        throw Error("BACKEND_FAILURE", kernel + ": seed implementation does not validate");

      GridConfig grid;
      grid.bins_per_dim = job.grid_bins;
      grid.complexity_lo = 1.0;
      grid.complexity_hi = std::max(
          2.0, job.complexity_range_mult * static_cast<double>(count_loc(info.seed_source)));
      st.islands = std::make_unique<IslandSet>(job.islands, grid,
                                               static_cast<size_t>(job.population_cap));
      for (int i = 0; i < job.islands; ++i) {
        st.histories.emplace_back();
        st.histories.back().capacity = job.prompt.history_capacity;
        st.history_locks.push_back(std::make_unique<std::mutex>());
        Candidate c;
        c.id = "seed-" + to_hex(mix_seed({kernel_seed, static_cast<uint64_t>(i)}), 8);
        c.source = info.seed_source;
        c.generation = 0;
        c.features = FeatureVector{std::max<size_t>(1, count_loc(info.seed_source)), 0.0};
        c.eval = st.baseline_eval;
        c.fitness = st.baseline_eval.speedup;
        c.created_at = wall_s();
        st.islands->insert(static_cast<size_t>(i), std::move(c));
      }
      st.best_fitness = st.baseline_eval.speedup.value_or(0.0);
      st.metrics.best_fitness_trace.emplace_back(0, st.best_fitness);
    }

    TaskConfig task_cfg;
    task_cfg.task_text = job.prompt.task_text + "\nKernel: " + kernel;
    if (job.prompt.template_path) task_cfg.template_text = read_file(*job.prompt.template_path);
    task_cfg.token_budget = job.prompt.token_budget;
    task_cfg.prefix_aware = job.prompt.prefix_aware;
    prompt_detail::split_template(task_cfg);  // reject bad templates before any work

    const int max_iterations =
        std::min(job.iterations, job.stop.max_iterations.value_or(job.iterations));

    auto run_iteration = [&](EvalEndpoint& ep, int iter) -> bool {
      const uint64_t s = mix_seed({kernel_seed, static_cast<uint64_t>(iter), hash_str("iter")});
      const size_t island_idx = static_cast<size_t>(iter) % st.islands->size();

      SampleResult sampled =
          st.islands->sample(island_idx, job.prompt.n_good, job.prompt.n_diverse, mix_seed({s, 1}));

      PromptParts prompt;
      {
        std::lock_guard hl(*st.history_locks[island_idx]);
        std::vector<Candidate> insp = sampled.inspirations;
        while (true) {
          try {
            prompt = build_prompt(sampled.parent, insp, st.histories[island_idx], task_cfg);
            break;
          } catch (const PromptTooLargeError&) {
            if (insp.empty()) throw;
            size_t worst = 0;
            for (size_t k = 1; k < insp.size(); ++k)
              if (insp[k].fitness.value_or(0) < insp[worst].fitness.value_or(0)) worst = k;
            insp.erase(insp.begin() + static_cast<long>(worst));
          }
        }
      }

      // model selection + generation
      std::string model_name;
      GenerationResult gen;
      uint64_t req_id;
      {
        std::unique_lock sched(st.scheduler_mu);
        double now = mono_s() - st.started_at;
        const ModelSpec& model = select_model(now, ensemble, st.estimator, st.inflight,
                                              st.forecast, mix_seed({s, 2}), job.scheduler);
        model_name = model.name;
        req_id = ++st.request_counter;
        st.inflight.add(req_id, model.name, now, st.estimator.latency(model.name));
        sched.unlock();

        GenerateOptions opts;
        opts.timeout_s = job.generation_timeout_s;
        opts.seed = mix_seed({s, 3});
        try {
          gen = engine.generate(prompt, model, opts);
        } catch (const Error& e) {
          std::lock_guard lock(st.scheduler_mu);
          st.inflight.take(req_id);
          std::lock_guard m(st.metrics_mu);
          st.metrics.failures[e.code() == "GENERATION_TIMEOUT" ? "generation_timeout"
                                                               : "generation_error"]++;
          return false;
        }
        std::lock_guard relock(st.scheduler_mu);
        record_completion(req_id, gen.latency_s, st.estimator, st.inflight);
      }

      std::string child_source;
      try {
        Diff diff = parse_diff(gen.raw_output);
        child_source = apply_diff(sampled.parent.source, diff);
      } catch (const Error& e) {
        std::lock_guard m(st.metrics_mu);
        st.metrics.failures[e.code() == "MALFORMED_DIFF" ? "malformed_diff" : "apply_failed"]++;
        return false;
      }

      FeatureVector features = controller_detail::candidate_features(
          child_source, *st.islands, island_idx, mix_seed({s, 4}));

      double eval_started = mono_s();
      EvalResult eval;
      try {
        eval = ep.tune_candidate(kernel, child_source, info.tune_space, job.tune_budget,
                                 job.tune_parallelism, mix_seed({s, 5}));
      } catch (const ConnectError&) {
        throw;  // unrecoverable server loss aborts the run
      } catch (const Error& e) {
        std::lock_guard m(st.metrics_mu);
        st.metrics.failures["eval_" + e.code()]++;
        return false;
      }
      {
        std::lock_guard sched(st.scheduler_mu);
        st.estimator.update_eval(mono_s() - eval_started);
        if (!st.forecast.next_free_time.empty()) {
          size_t w = 0;
          for (size_t k = 1; k < st.forecast.next_free_time.size(); ++k)
            if (st.forecast.next_free_time[k] < st.forecast.next_free_time[w]) w = k;
          st.forecast.next_free_time[w] = mono_s() - st.started_at;
        }
      }

      Candidate child;
      child.id = "c-" + to_hex(s, 12);
      child.source = child_source;
      child.parent_id = sampled.parent.id;
      child.generation = sampled.parent.generation + 1;
      child.features = features;
      child.eval = eval;
      if (eval.correct) child.fitness = eval.speedup;
      child.model_used = model_name;
      child.created_at = wall_s();

      bool stale = st.islands->version(island_idx) != sampled.island_version;
      InsertOutcome outcome = st.islands->insert(island_idx, std::move(child));

      std::lock_guard m(st.metrics_mu);
      if (stale) ++st.metrics.stale_read_count;
      if (outcome == InsertOutcome::added || outcome == InsertOutcome::replaced)
        ++st.metrics.inserts;
      else
        ++st.metrics.rejects;
      double fitness = eval.correct ? eval.speedup.value_or(0.0) : 0.0;
      if (eval.correct && fitness > st.best_fitness) {
        st.best_fitness = fitness;
        st.metrics.best_fitness_trace.emplace_back(iter + 1, fitness);
        return true;
      }
      return false;
    };

    // iteration dispatch: shared budget, optional parallel controllers
    auto worker = [&](EvalEndpoint& ep) {
      while (!st.stop_flag) {
        int iter = st.next_iteration.fetch_add(1);
        if (iter >= max_iterations) {
          st.stop_flag = true;
          break;
        }
        bool improved = false;
        try {
          improved = run_iteration(ep, iter);
        } catch (const ConnectError&) {
          st.stop_flag = true;
          throw;
        } catch (const Error& e) {
          std::lock_guard m(st.metrics_mu);
          st.metrics.failures["eval_" + e.code()]++;
        }
        {
          std::lock_guard m(st.metrics_mu);
          ++st.metrics.iterations_done;
          st.since_improvement = improved ? 0 : st.since_improvement + 1;
          if (job.stop.patience_iterations &&
              st.since_improvement >= *job.stop.patience_iterations)
            st.stop_flag = true;
        }
        if (job.stop.max_wallclock_s && mono_s() - st.started_at > *job.stop.max_wallclock_s)
          st.stop_flag = true;

        bool should_migrate = false, should_checkpoint = false;
        int done;
        {
          std::lock_guard m(st.metrics_mu);
          done = st.metrics.iterations_done;
          if (st.islands->size() > 1 && done > 0 && done % job.migration_interval == 0 &&
              st.migrations_done < done / job.migration_interval) {
            ++st.migrations_done;
            ++st.metrics.migrations;
            should_migrate = true;
          }
          should_checkpoint =
              job.checkpoint_interval > 0 && done > 0 && done % job.checkpoint_interval == 0;
        }
        if (should_migrate)
          st.islands->migrate(
              mix_seed({kernel_seed, hash_str("migrate"), static_cast<uint64_t>(done)}));
        if (should_checkpoint) {
          std::lock_guard m(st.metrics_mu);
          write_file_atomic(ckpt_path,
                            controller_detail::state_checkpoint(st, kernel).dump() + "\n");
        }
      }
    };

    if (job.controllers == 1) {
      worker(endpoint);
    } else {
      std::vector<std::unique_ptr<EvalEndpoint>> eps;
      std::vector<std::thread> threads;
      for (int c = 0; c < job.controllers; ++c) eps.push_back(endpoint.clone());
      for (int c = 0; c < job.controllers; ++c)
        threads.emplace_back([&, c] { worker(*eps[static_cast<size_t>(c)]); });
      for (auto& t : threads) t.join();
    }

    // final confirmation and cross-instance validation of the kernel's best
    KernelOutcome outcome;
    outcome.kernel = kernel;
    outcome.baseline_runtime_s = info.baseline_runtime_s;
    outcome.best = st.islands->best();
    if (outcome.best && outcome.best->eval && outcome.best->eval->best_point) {
      outcome.final_eval =
          endpoint.replay(kernel, outcome.best->source, *outcome.best->eval->best_point, 10,
                          mix_seed({kernel_seed, hash_str("final")}));
      EvalResult validation =
          endpoint.validate(kernel, outcome.best->source, *outcome.best->eval->best_point,
                            mix_seed({kernel_seed, hash_str("validate")}));
      outcome.validated = validation.correct;
      if (outcome.final_eval.correct && outcome.validated)
        deployment[kernel] = DeploymentEntry{outcome.best->source, outcome.final_eval,
                                             info.launch};
    }

    double elapsed = mono_s() - st.started_at;
    json status1 = endpoint.status();
    double busy1 = status1.value("busy_seconds", 0.0);
    double uptime1 = status1.value("uptime_s", 0.0);
    st.metrics.evals_per_hour =
        elapsed > 0 ? static_cast<double>(st.metrics.iterations_done) / (elapsed / 3600.0) : 0;
    double span = std::max(1e-9, uptime1 - uptime0);
    st.metrics.worker_utilization =
        std::clamp((busy1 - busy0) / (static_cast<double>(server_workers) * span), 0.0, 1.0);
    outcome.metrics = st.metrics;

    write_file_atomic(ckpt_path, controller_detail::state_checkpoint(st, kernel).dump() + "\n");
    report.kernels[kernel] = std::move(outcome);
  }

  if (!deployment.empty()) {
    fs::path dep = fs::path(job.out_dir) / "deployment.json";
    export_deployment(deployment, dep);
    report.deployment_path = dep.string();
  }
  fs::path rp = fs::path(job.out_dir) / "run_report.json";
  write_file_atomic(rp, report.to_json().dump(2) + "\n");
  report.report_path = rp.string();
  return report;
}

// The record-replay + BO baseline: a single 200-iteration tune of the seed
// implementation per kernel; candidate source is never modified.
inline EvolutionReport run_bo_only(const JobConfig& job, uint64_t seed, EvalEndpoint& endpoint) {
  namespace fs = std::filesystem;
  auto infos = kernel_infos_from_status(endpoint.status());
  std::vector<std::string> kernel_names;
  if (job.kernels.empty()) {
    for (const auto& [name, info] : infos) kernel_names.push_back(name);
  } else {
    for (const auto& name : job.kernels) {
      if (!infos.count(name)) throw ConfigError("kernel '" + name + "' not in database");
      kernel_names.push_back(name);
    }
  }

  EvolutionReport report;
  report.mode = "bo";
  report.seed = seed;
  fs::create_directories(job.out_dir);
  std::map<std::string, DeploymentEntry> deployment;

  for (const auto& kernel : kernel_names) {
    const KernelInfo& info = infos.at(kernel);
    double started = mono_s();
    EvalResult eval =
        endpoint.tune_candidate(kernel, info.seed_source, info.tune_space, job.iterations, 1,
                                mix_seed({seed, hash_str(kernel), hash_str("bo")}));
    KernelOutcome outcome;
    outcome.kernel = kernel;
    outcome.baseline_runtime_s = info.baseline_runtime_s;
    outcome.final_eval = eval;
    outcome.metrics.iterations_done = job.iterations;
    outcome.metrics.evals_per_hour =
        static_cast<double>(job.iterations) / std::max(1e-9, (mono_s() - started) / 3600.0);
    if (eval.correct) {
      Candidate c;
      c.id = "bo-best";
      c.source = info.seed_source;  // baseline purity: source untouched
      c.eval = eval;
      c.fitness = eval.speedup;
      outcome.best = c;
      outcome.validated = true;
      deployment[kernel] = DeploymentEntry{info.seed_source, eval, info.launch};
      outcome.metrics.best_fitness_trace.emplace_back(job.iterations,
                                                      eval.speedup.value_or(0.0));
    }
    report.kernels[kernel] = std::move(outcome);
  }

  if (!deployment.empty()) {
    fs::path dep = fs::path(job.out_dir) / "deployment.json";
    export_deployment(deployment, dep);
    report.deployment_path = dep.string();
  }
  fs::path rp = fs::path(job.out_dir) / "run_report.json";
  write_file_atomic(rp, report.to_json().dump(2) + "\n");
  report.report_path = rp.string();
  return report;
}

// ---------------------------------------------------------------------------
// Report rendering

inline std::string render_report(const std::filesystem::path& run_dir, const std::string& format) {
  json report = json::parse(read_file(run_dir / "run_report.json"));
  if (format == "json") return report.dump(2) + "\n";

  struct Row {
    std::string kernel;
    double baseline, runtime, speedup, util;
    int iterations, stale;
  };
  std::vector<Row> rows;
  for (const auto& [name, kj] : report.at("kernels").items()) {
    Row r;
    r.kernel = name;
    r.baseline = kj.value("baseline_runtime_s", 0.0);
    const json& fe = kj.at("final_eval");
    r.runtime = fe.value("median_runtime_s", 0.0);
    r.speedup = fe.value("speedup", 0.0);
    const json& m = kj.at("metrics");
    r.iterations = m.value("iterations_done", 0);
    r.stale = m.value("stale_read_count", 0);
    r.util = m.value("worker_utilization", 0.0);
    rows.push_back(r);
  }

  std::string out;
  if (format == "csv") {
    out = "kernel,baseline_runtime_s,best_runtime_s,speedup,iterations,stale_reads,utilization\n";
    for (const auto& r : rows)
      out += r.kernel + "," + format_double(r.baseline, "%.9g") + "," +
             format_double(r.runtime, "%.9g") + "," + format_double(r.speedup, "%.4f") + "," +
             std::to_string(r.iterations) + "," + std::to_string(r.stale) + "," +
             format_double(r.util, "%.4f") + "\n";
    return out;
  }
  if (format == "markdown") {
    out = "| kernel | baseline (s) | best (s) | speedup | iterations | stale reads |\n";
    out += "|---|---|---|---|---|---|\n";
    for (const auto& r : rows)
      out += "| " + r.kernel + " | " + format_double(r.baseline, "%.3e") + " | " +
             format_double(r.runtime, "%.3e") + " | " + format_double(r.speedup, "%.3f") +
             " | " + std::to_string(r.iterations) + " | " + std::to_string(r.stale) + " |\n";
    return out;
  }
  throw ConfigError("unknown report format '" + format + "'");
}

}  // namespace r3
