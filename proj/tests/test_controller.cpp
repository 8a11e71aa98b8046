#include <gtest/gtest.h>

#include <filesystem>

#include "r3/controller.hpp"
#include "r3/kernel_sim.hpp"

using namespace r3;
namespace fs = std::filesystem;

namespace {

struct SuiteFixture {
  fs::path dir;
  SuiteOracle oracle;
  std::unique_ptr<ReplayService> service;

  explicit SuiteFixture(int workers = 2) {
    dir = fs::temp_directory_path() / "r3-ctl-suite";
    fs::remove_all(dir);
    oracle = make_benchmark_suite(dir, 7);
    ServiceConfig cfg;
    cfg.workers = workers;
    service = std::make_unique<ReplayService>(UnitDatabase::load(dir), cfg);
  }
  ~SuiteFixture() { fs::remove_all(dir); }
};

JobConfig short_job(const fs::path& out_dir) {
  JobConfig job;
  job.iterations = 40;
  job.islands = 2;
  job.population_cap = 20;
  job.migration_interval = 10;
  job.tune_budget = 16;
  job.checkpoint_interval = 20;
  job.out_dir = out_dir.string();
  return job;
}

// A one-knob kernel whose cost never changes: fitness is flat at 1.0.
UnitDatabase flat_db() {
  SimKernelSpec spec;
  spec.kernel_name = "flat";
  spec.feature_defs = {FeatureDef{"knob", {"a", "b"}}};
  spec.cost_model.base_s = 1e-3;

  KernelRecord rec;
  rec.name = "flat";
  rec.tune_space.params = {ParamDef::boolean("toggle")};
  rec.recorded_point = json{{"toggle", false}};
  rec.seed_source = "knob=a;\n";
  rec.sim_spec = spec.to_json();

  ReplayUnit unit;
  unit.kernel_name = "flat";
  unit.instance_id = 0;
  unit.launch = LaunchConfig{{8, 1, 1}, {32, 1, 1}};
  Buffer buf{0, {1, 2, 3, 4, 5, 6, 7, 8}};
  unit.prologue.buffers = {buf};
  unit.epilogue.buffers = {buf};
  unit.baseline_runtime_s = 1e-3;
  rec.instances = {unit};

  UnitDatabase db;
  db.kernels.emplace("flat", std::move(rec));
  return db;
}

}  // namespace

TEST(JobConfig, DefaultsMatchTheStandardSetup) {
  JobConfig job = JobConfig::from_json(json::object());
  EXPECT_EQ(job.iterations, 200);
  EXPECT_EQ(job.islands, 4);
  EXPECT_EQ(job.population_cap, 20);
  EXPECT_EQ(job.migration_interval, 20);
  EXPECT_EQ(job.tune_budget, 30);
}

TEST(JobConfig, ValidationAndErrors) {
  EXPECT_THROW(JobConfig::from_json(json{{"iterations", 0}}), ConfigError);
  EXPECT_THROW(JobConfig::from_json(json{{"islands", -1}}), ConfigError);
  json bad_ensemble{{"ensemble", json::array({json{{"name", "a"},
                                                   {"endpoint", "mock:"},
                                                   {"base_probability", 0.5}}})}};
  EXPECT_THROW(JobConfig::from_json(bad_ensemble), ConfigError);
}

TEST(Evolution, ShortRunConvergesAndAccountsIterations) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-run");
  job.kernels = {"axpy"};
  EvolutionReport report = run_evolution(job, 11, endpoint);

  ASSERT_TRUE(report.kernels.count("axpy"));
  const KernelOutcome& out = report.kernels.at("axpy");
  const RunMetrics& m = out.metrics;
  EXPECT_EQ(m.iterations_done, 40);
  // accounting identity: every iteration ends as insert, reject, or failure
  EXPECT_EQ(m.iterations_done, m.inserts + m.rejects + m.failure_total());

  // nondecreasing fitness trace starting from the seeded baseline
  ASSERT_FALSE(m.best_fitness_trace.empty());
  for (size_t i = 1; i < m.best_fitness_trace.size(); ++i)
    EXPECT_GE(m.best_fitness_trace[i].second, m.best_fitness_trace[i - 1].second);

  ASSERT_TRUE(out.best.has_value());
  EXPECT_TRUE(out.final_eval.correct);
  EXPECT_TRUE(out.validated);
  EXPECT_GE(out.final_eval.speedup.value_or(0.0), 1.0);

  // artifacts
  EXPECT_TRUE(fs::exists(fs::path(job.out_dir) / "run_report.json"));
  EXPECT_TRUE(fs::exists(fs::path(job.out_dir) / "deployment.json"));
  EXPECT_TRUE(fs::exists(fs::path(job.out_dir) / "axpy" / "checkpoint.json"));

  // report renders in all three formats
  EXPECT_NO_THROW(render_report(job.out_dir, "json"));
  std::string csv = render_report(job.out_dir, "csv");
  EXPECT_NE(csv.find("axpy"), std::string::npos);
  std::string md = render_report(job.out_dir, "markdown");
  EXPECT_NE(md.find("| axpy |"), std::string::npos);
  EXPECT_THROW(render_report(job.out_dir, "yaml"), ConfigError);
  fs::remove_all(job.out_dir);
}

TEST(Evolution, SingleIslandNeverMigrates) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-one-island");
  job.islands = 1;
  job.iterations = 15;
  job.kernels = {"gated"};
  EvolutionReport report = run_evolution(job, 3, endpoint);
  EXPECT_EQ(report.kernels.at("gated").metrics.migrations, 0);
  fs::remove_all(job.out_dir);
}

TEST(Evolution, PatienceStopsOnFlatFitness) {
  ServiceConfig cfg;
  ReplayService service(flat_db(), cfg);
  InProcessEndpoint endpoint(&service);

  JobConfig job;
  job.iterations = 200;
  job.islands = 1;
  job.tune_budget = 2;
  job.stop.patience_iterations = 10;
  job.out_dir = (fs::temp_directory_path() / "r3-ctl-flat").string();
  EvolutionReport report = run_evolution(job, 5, endpoint);
  EXPECT_EQ(report.kernels.at("flat").metrics.iterations_done, 10);
  fs::remove_all(job.out_dir);
}

TEST(Evolution, WallclockStopTerminatesEarly) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-clock");
  job.iterations = 100000;
  job.stop.max_wallclock_s = 0.3;
  job.kernels = {"reduce"};
  double started = mono_s();
  EvolutionReport report = run_evolution(job, 9, endpoint);
  EXPECT_LT(mono_s() - started, 30.0);
  EXPECT_LT(report.kernels.at("reduce").metrics.iterations_done, 100000);
  fs::remove_all(job.out_dir);
}

TEST(Evolution, CheckpointResumeReproducesFinalBest) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  fs::path out_a = fs::temp_directory_path() / "r3-ctl-full";
  fs::path out_b = fs::temp_directory_path() / "r3-ctl-resumed";

  JobConfig full = short_job(out_a);
  full.iterations = 24;
  full.checkpoint_interval = 6;
  full.kernels = {"gated"};
  EvolutionReport a = run_evolution(full, 21, endpoint);

  JobConfig half = short_job(out_b);
  half.iterations = 24;
  half.checkpoint_interval = 6;
  half.kernels = {"gated"};
  half.stop.max_iterations = 12;
  run_evolution(half, 21, endpoint);

  JobConfig rest = half;
  rest.stop.max_iterations.reset();
  EvolutionReport b = run_evolution(rest, 21, endpoint, /*resume=*/true);

  const auto& ka = a.kernels.at("gated");
  const auto& kb = b.kernels.at("gated");
  ASSERT_TRUE(ka.best.has_value());
  ASSERT_TRUE(kb.best.has_value());
  EXPECT_DOUBLE_EQ(ka.best->fitness.value_or(-1), kb.best->fitness.value_or(-2));
  EXPECT_EQ(ka.best->source, kb.best->source);
  EXPECT_EQ(ka.metrics.iterations_done + 0, 24);
  EXPECT_EQ(kb.metrics.iterations_done, 24);
  fs::remove_all(out_a);
  fs::remove_all(out_b);
}

TEST(Evolution, SerializedModeHasNoStaleReads) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-serial");
  job.iterations = 20;
  job.kernels = {"reduce"};
  EvolutionReport report = run_evolution(job, 13, endpoint);
  EXPECT_EQ(report.kernels.at("reduce").metrics.stale_read_count, 0);
  fs::remove_all(job.out_dir);
}

// Deterministic interleaving: a concurrent insert between sample and insert
// is exactly what the stale counter counts.
TEST(Evolution, StaleReadDetectionPrimitive) {
  IslandSet islands(1, GridConfig{10, 1.0, 40.0});
  Candidate seed;
  seed.id = "s";
  seed.source = "x\n";
  seed.features = FeatureVector{1, 0.0};
  EvalResult ok;
  ok.correct = true;
  ok.speedup = 1.0;
  seed.eval = ok;
  seed.fitness = 1.0;
  islands.insert(0, seed);

  uint64_t version_at_sample = islands.version(0);

  Candidate other = seed;  // another controller lands first
  other.id = "other";
  other.features = FeatureVector{20, 0.9};
  islands.insert(0, other);

  EXPECT_NE(islands.version(0), version_at_sample);  // our insert is now stale
}

TEST(Evolution, TwoControllersShareOneBudget) {
  SuiteFixture fx(4);
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-p2");
  job.controllers = 2;
  job.iterations = 30;
  job.kernels = {"axpy"};
  EvolutionReport report = run_evolution(job, 17, endpoint);
  const RunMetrics& m = report.kernels.at("axpy").metrics;
  EXPECT_EQ(m.iterations_done, 30);
  EXPECT_EQ(m.iterations_done, m.inserts + m.rejects + m.failure_total());
  EXPECT_GE(m.stale_read_count, 0);
  fs::remove_all(job.out_dir);
}

TEST(BoOnly, MatchesSeedSliceOracleOnExhaustibleSpaces) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  JobConfig job;
  job.iterations = 200;
  job.kernels = {"gated", "reduce", "axpy"};
  job.out_dir = (fs::temp_directory_path() / "r3-ctl-bo").string();
  EvolutionReport report = run_bo_only(job, 31, endpoint);

  for (const auto& name : job.kernels) {
    const KernelOutcome& out = report.kernels.at(name);
    ASSERT_TRUE(out.final_eval.correct) << name;
    // budget 200 >= slice size: exact seed-slice optimum, source untouched
    EXPECT_DOUBLE_EQ(out.final_eval.median_runtime_s,
                     fx.oracle.kernels.at(name).seed_slice_best_runtime_s)
        << name;
    ASSERT_TRUE(out.best.has_value());
    EXPECT_EQ(out.best->source, fx.service->db().kernel(name).seed_source);
  }
  EXPECT_TRUE(fs::exists(fs::path(job.out_dir) / "deployment.json"));
  fs::remove_all(job.out_dir);
}

TEST(BoOnly, EvolutionBeatsBoOnGatedKernel) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());

  JobConfig bo;
  bo.iterations = 60;
  bo.kernels = {"gated"};
  bo.out_dir = (fs::temp_directory_path() / "r3-ctl-bo2").string();
  EvolutionReport bo_report = run_bo_only(bo, 41, endpoint);

  JobConfig evo = short_job(fs::temp_directory_path() / "r3-ctl-evo2");
  evo.iterations = 60;
  evo.tune_budget = 15;
  evo.kernels = {"gated"};
  EvolutionReport evo_report = run_evolution(evo, 41, endpoint);

  double bo_speedup = bo_report.kernels.at("gated").final_eval.speedup.value_or(0);
  double evo_speedup = evo_report.kernels.at("gated").final_eval.speedup.value_or(0);
  EXPECT_GT(evo_speedup, bo_speedup);
  fs::remove_all(bo.out_dir);
  fs::remove_all(evo.out_dir);
}

TEST(Evolution, RunsOverTheWireEndToEnd) {
  SuiteFixture fx;
  ReplayServer server(*fx.service, "127.0.0.1:0");
  server.start();
  RemoteEndpoint endpoint(server.address());

  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-remote");
  job.iterations = 12;
  job.tune_budget = 10;
  job.kernels = {"reduce"};
  EvolutionReport report = run_evolution(job, 19, endpoint);
  EXPECT_EQ(report.kernels.at("reduce").metrics.iterations_done, 12);
  EXPECT_TRUE(report.kernels.at("reduce").final_eval.correct);
  server.stop();
  fs::remove_all(job.out_dir);
}

TEST(Evolution, CustomTemplateFileIsLoaded) {
  SuiteFixture fx;
  InProcessEndpoint endpoint(fx.service.get());
  fs::path tmpl = fs::temp_directory_path() / "r3-ctl-template.txt";
  write_file_atomic(tmpl,
                    "CUSTOM HEADER {{TASK}}\nrules here\n{{INSPIRATIONS}}{{PARENT}}go\n");
  JobConfig job = short_job(fs::temp_directory_path() / "r3-ctl-tmpl");
  job.iterations = 6;
  job.tune_budget = 8;
  job.kernels = {"reduce"};
  job.prompt.template_path = tmpl.string();
  EvolutionReport report = run_evolution(job, 23, endpoint);
  EXPECT_EQ(report.kernels.at("reduce").metrics.iterations_done, 6);

  // a template violating the placeholder contract is a config-time error
  write_file_atomic(tmpl, "{{PARENT}} before {{INSPIRATIONS}}");
  EXPECT_THROW(run_evolution(job, 23, endpoint), Error);
  fs::remove(tmpl);
  fs::remove_all(job.out_dir);
}
