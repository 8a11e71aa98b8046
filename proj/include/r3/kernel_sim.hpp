#pragma once

// Deterministic simulated-kernel backend: a parametric cost model maps
// (source features, tune point) to a runtime, and an output rule produces
// the observed epilogue (recorded epilogue plus optional per-feature
// perturbations), so the whole evaluate path can be exercised end-to-end
// with exhaustively computable optima.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "r3/kernel_dsl.hpp"
#include "r3/replay_db.hpp"
#include "r3/tuner.hpp"
#include "r3/util.hpp"

namespace r3 {

struct CostTerm {
  enum class Kind { feature_factor, param_factor, int_parabola, pass_factor, interaction_factor };

  Kind kind = Kind::feature_factor;
  std::string feature;  // feature_factor, interaction_factor
  std::string param;    // param_factor, int_parabola, pass_factor, interaction_factor
  std::map<std::string, double> table;
  double optimal = 0, curvature = 0, scale = 1;           // int_parabola
  std::vector<std::map<std::string, double>> position_tables;  // pass_factor
  double empty_factor = 1.0;

  json to_json() const {
    json j;
    switch (kind) {
      case Kind::feature_factor:
        j = {{"kind", "feature_factor"}, {"feature", feature}, {"table", table}};
        break;
      case Kind::param_factor:
        j = {{"kind", "param_factor"}, {"param", param}, {"table", table}};
        break;
      case Kind::int_parabola:
        j = {{"kind", "int_parabola"}, {"param", param}, {"optimal", optimal},
             {"curvature", curvature}, {"scale", scale}};
        break;
      case Kind::pass_factor:
        j = {{"kind", "pass_factor"}, {"param", param},
             {"position_tables", position_tables}, {"empty_factor", empty_factor}};
        break;
      case Kind::interaction_factor:
        j = {{"kind", "interaction_factor"}, {"feature", feature}, {"param", param},
             {"table", table}};
        break;
    }
    return j;
  }

  static CostTerm from_json(const json& j) {
    CostTerm t;
    std::string kind = require_field<std::string>(j, "kind");
    if (kind == "feature_factor") {
      t.kind = Kind::feature_factor;
      t.feature = require_field<std::string>(j, "feature");
      t.table = require_field<std::map<std::string, double>>(j, "table");
    } else if (kind == "param_factor") {
      t.kind = Kind::param_factor;
      t.param = require_field<std::string>(j, "param");
      t.table = require_field<std::map<std::string, double>>(j, "table");
    } else if (kind == "int_parabola") {
      t.kind = Kind::int_parabola;
      t.param = require_field<std::string>(j, "param");
      t.optimal = require_field<double>(j, "optimal");
      t.curvature = require_field<double>(j, "curvature");
      t.scale = j.value("scale", 1.0);
    } else if (kind == "pass_factor") {
      t.kind = Kind::pass_factor;
      t.param = require_field<std::string>(j, "param");
      t.position_tables =
          require_field<std::vector<std::map<std::string, double>>>(j, "position_tables");
      t.empty_factor = j.value("empty_factor", 1.0);
    } else if (kind == "interaction_factor") {
      t.kind = Kind::interaction_factor;
      t.feature = require_field<std::string>(j, "feature");
      t.param = require_field<std::string>(j, "param");
      t.table = require_field<std::map<std::string, double>>(j, "table");
    } else {
      throw Error("BAD_DB", "unknown cost term kind '" + kind + "'");
    }
    return t;
  }
};

struct CostModel {
  double base_s = 1e-3;
  std::vector<CostTerm> terms;

  double evaluate(const std::map<std::string, std::string>& features, const TunePoint& point,
                  const TuneSpace& space) const {
    double runtime = base_s;
    for (const auto& t : terms) {
      switch (t.kind) {
        case CostTerm::Kind::feature_factor: {
          auto fit = features.find(t.feature);
          if (fit != features.end()) {
            auto cell = t.table.find(fit->second);
            if (cell != t.table.end()) runtime *= cell->second;
          }
          break;
        }
        case CostTerm::Kind::param_factor: {
          const ParamDef* def = space.find(t.param);
          if (!def) break;
          auto cell = t.table.find(param_value_to_string(*def, point.assignment.at(t.param)));
          if (cell != t.table.end()) runtime *= cell->second;
          break;
        }
        case CostTerm::Kind::int_parabola: {
          double x = static_cast<double>(std::get<int64_t>(point.assignment.at(t.param)));
          double z = (x - t.optimal) / t.scale;
          runtime *= 1.0 + t.curvature * z * z;
          break;
        }
        case CostTerm::Kind::pass_factor: {
          const ParamDef* def = space.find(t.param);
          if (!def) break;
          const auto& seq = std::get<std::vector<int32_t>>(point.assignment.at(t.param));
          if (seq.empty()) {
            runtime *= t.empty_factor;
            break;
          }
          for (size_t pos = 0; pos < seq.size() && pos < t.position_tables.size(); ++pos) {
            const auto& tbl = t.position_tables[pos];
            auto cell = tbl.find(def->pass_set[static_cast<size_t>(seq[pos])]);
            if (cell != tbl.end()) runtime *= cell->second;
          }
          break;
        }
        case CostTerm::Kind::interaction_factor: {
          auto fit = features.find(t.feature);
          const ParamDef* def = space.find(t.param);
          if (fit == features.end() || !def) break;
          std::string key =
              fit->second + "|" + param_value_to_string(*def, point.assignment.at(t.param));
          auto cell = t.table.find(key);
          if (cell != t.table.end()) runtime *= cell->second;
          break;
        }
      }
    }
    return runtime;
  }

  json to_json() const {
    json terms_j = json::array();
    for (const auto& t : terms) terms_j.push_back(t.to_json());
    return json{{"base_s", base_s}, {"terms", terms_j}};
  }

  static CostModel from_json(const json& j) {
    CostModel m;
    m.base_s = require_field<double>(j, "base_s");
    for (const auto& tj : require_field<json>(j, "terms")) m.terms.push_back(CostTerm::from_json(tj));
    return m;
  }
};

// Feature-triggered epilogue perturbation: how "buggy" source variants
// corrupt output, and how numerically-relaxed variants wiggle inside their
// annotated tolerance.
struct BugRule {
  std::string feature, value;  // triggers when features[feature] == value
  std::string kind = "xor_byte";  // xor_byte | f32_scale
  uint32_t buffer_id = 0;
  uint64_t byte_offset = 0;
  uint64_t count = 1;       // f32_scale: number of floats
  uint8_t xor_mask = 0xFF;  // xor_byte
  double scale_delta = 0;   // f32_scale: v *= (1 + scale_delta)

  json to_json() const {
    return json{{"feature", feature}, {"value", value},   {"kind", kind},
                {"buffer_id", buffer_id}, {"byte_offset", byte_offset}, {"count", count},
                {"xor_mask", xor_mask},   {"scale_delta", scale_delta}};
  }

  static BugRule from_json(const json& j) {
    BugRule b;
    b.feature = require_field<std::string>(j, "feature");
    b.value = require_field<std::string>(j, "value");
    b.kind = j.value("kind", "xor_byte");
    b.buffer_id = require_field<uint32_t>(j, "buffer_id");
    b.byte_offset = require_field<uint64_t>(j, "byte_offset");
    b.count = j.value("count", uint64_t{1});
    b.xor_mask = static_cast<uint8_t>(j.value("xor_mask", 255));
    b.scale_delta = j.value("scale_delta", 0.0);
    return b;
  }
};

class IllegalPointError : public Error {
 public:
  explicit IllegalPointError(const std::string& msg) : Error("ILLEGAL_POINT", msg) {}
};

struct SimKernelSpec {
  std::string kernel_name;
  std::vector<FeatureDef> feature_defs;
  CostModel cost_model;
  std::vector<BugRule> bugs;
  double noise = 0.0;  // relative multiplicative noise amplitude

  json to_json() const {
    json defs = json::array();
    for (const auto& d : feature_defs) defs.push_back(d.to_json());
    json bugs_j = json::array();
    for (const auto& b : bugs) bugs_j.push_back(b.to_json());
    return json{{"kernel_name", kernel_name},
                {"features", defs},
                {"cost", cost_model.to_json()},
                {"bugs", bugs_j},
                {"noise", noise}};
  }

  static SimKernelSpec from_json(const json& j) {
    SimKernelSpec s;
    s.kernel_name = require_field<std::string>(j, "kernel_name");
    for (const auto& dj : require_field<json>(j, "features"))
      s.feature_defs.push_back(FeatureDef::from_json(dj));
    s.cost_model = CostModel::from_json(require_field<json>(j, "cost"));
    for (const auto& bj : j.value("bugs", json::array())) s.bugs.push_back(BugRule::from_json(bj));
    s.noise = j.value("noise", 0.0);
    return s;
  }
};

// One simulated run: runtime = cost * (1 + noise*u), u seeded uniform[-1,1].
inline double sim_runtime(const SimKernelSpec& spec,
                          const std::map<std::string, std::string>& features,
                          const TunePoint& point, const TuneSpace& space,
                          std::mt19937_64& rng) {
  if (!space.legal(point)) throw IllegalPointError("point is not legal for the space");
  double runtime = spec.cost_model.evaluate(features, point, space);
  if (runtime <= 0) throw Error("BAD_DB", "cost model produced nonpositive runtime");
  if (spec.noise > 0) runtime *= 1.0 + spec.noise * (2.0 * uniform01(rng) - 1.0);
  return runtime;
}

// Write the observed epilogue into `working`: the recorded epilogue, then
// any perturbations triggered by the candidate's features.
inline void sim_write_output(const SimKernelSpec& spec,
                             const std::map<std::string, std::string>& features,
                             const ReplayUnit& unit, Snapshot& working) {
  for (const auto& eb : unit.epilogue.buffers) {
    Buffer* wb = working.find(eb.buffer_id);
    if (!wb) throw Error("BACKEND_FAILURE", "working buffers out of shape");
    wb->bytes = eb.bytes;
  }
  for (const auto& bug : spec.bugs) {
    auto fit = features.find(bug.feature);
    if (fit == features.end() || fit->second != bug.value) continue;
    Buffer* wb = working.find(bug.buffer_id);
    if (!wb || bug.byte_offset >= wb->bytes.size()) continue;
    if (bug.kind == "xor_byte") {
      wb->bytes[bug.byte_offset] ^= bug.xor_mask;
    } else if (bug.kind == "f32_scale") {
      for (uint64_t k = 0; k < bug.count; ++k) {
        uint64_t off = bug.byte_offset + 4 * k;
        if (off + 4 > wb->bytes.size()) break;
        float v;
        std::memcpy(&v, wb->bytes.data() + off, 4);
        v = static_cast<float>(v * (1.0 + bug.scale_delta));
        std::memcpy(wb->bytes.data() + off, &v, 4);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Benchmark suite with exhaustively computed optima

struct KernelOracle {
  double best_runtime_s = 0;
  std::map<std::string, std::string> best_features;
  json best_point;
  double seed_slice_best_runtime_s = 0;  // best with the seed source's features
  json seed_slice_best_point;
  uint64_t joint_points = 0;  // enumerated (features x point) combinations

  json to_json() const {
    return json{{"best_runtime_s", best_runtime_s},
                {"best_features", best_features},
                {"best_point", best_point},
                {"seed_slice_best_runtime_s", seed_slice_best_runtime_s},
                {"seed_slice_best_point", seed_slice_best_point},
                {"joint_points", joint_points}};
  }

  static KernelOracle from_json(const json& j) {
    KernelOracle o;
    o.best_runtime_s = require_field<double>(j, "best_runtime_s");
    o.best_features = require_field<std::map<std::string, std::string>>(j, "best_features");
    o.best_point = j.at("best_point");
    o.seed_slice_best_runtime_s = require_field<double>(j, "seed_slice_best_runtime_s");
    o.seed_slice_best_point = j.at("seed_slice_best_point");
    o.joint_points = j.value("joint_points", uint64_t{0});
    return o;
  }
};

struct SuiteOracle {
  std::map<std::string, KernelOracle> kernels;

  json to_json() const {
    json k = json::object();
    for (const auto& [name, o] : kernels) k[name] = o.to_json();
    return json{{"kernels", k}};
  }

  static SuiteOracle load(const std::filesystem::path& dir) {
    SuiteOracle s;
    json j = json::parse(read_file(dir / "oracle.json"));
    for (const auto& [name, oj] : j.at("kernels").items())
      s.kernels[name] = KernelOracle::from_json(oj);
    return s;
  }
};

namespace sim_detail {

inline std::vector<uint8_t> random_bytes(std::mt19937_64& rng, size_t n) {
  std::vector<uint8_t> out(n);
  for (auto& b : out) b = static_cast<uint8_t>(rng() % 256);
  return out;
}

// Enumerate every legal feature combination.
inline void feature_combos(const std::vector<FeatureDef>& defs, size_t dim,
                           std::map<std::string, std::string>& current,
                           std::vector<std::map<std::string, std::string>>& out) {
  if (dim == defs.size()) {
    out.push_back(current);
    return;
  }
  for (const auto& v : defs[dim].values) {
    current[defs[dim].name] = v;
    feature_combos(defs, dim + 1, current, out);
  }
  current.erase(defs[dim].name);
}

// A feature combination is correct iff its perturbed epilogue still passes
// the annotation-aware check against the recorded epilogue.
inline bool combo_correct(const SimKernelSpec& spec,
                          const std::map<std::string, std::string>& features,
                          const ReplayUnit& unit) {
  Snapshot working = unit.prologue;
  sim_write_output(spec, features, unit, working);
  return check(working, unit.epilogue, unit.annotations).correct;
}

inline KernelOracle enumerate_oracle(const SimKernelSpec& spec, const KernelRecord& rec,
                                     const std::map<std::string, std::string>& seed_features) {
  KernelOracle oracle;
  std::vector<std::map<std::string, std::string>> combos;
  std::map<std::string, std::string> scratch;
  feature_combos(spec.feature_defs, 0, scratch, combos);

  const uint64_t n_points = rec.tune_space.size();
  double best = 0, second = 0;
  bool have_best = false, have_second = false;
  auto rng = make_rng(0);  // noise is zero for suite kernels; rng unused

  for (const auto& features : combos) {
    bool correct = combo_correct(spec, features, rec.instances.front());
    for (uint64_t f = 0; f < n_points; ++f) {
      TunePoint p = space_point_at(rec.tune_space, f);
      double r = sim_runtime(spec, features, p, rec.tune_space, rng);
      ++oracle.joint_points;
      if (features == seed_features &&
          (oracle.seed_slice_best_runtime_s == 0 || r < oracle.seed_slice_best_runtime_s)) {
        oracle.seed_slice_best_runtime_s = r;
        oracle.seed_slice_best_point = tune_point_to_json(rec.tune_space, p);
      }
      if (!correct) continue;
      if (!have_best || r < best) {
        if (have_best) {
          second = best;
          have_second = true;
        }
        best = r;
        oracle.best_runtime_s = r;
        oracle.best_features = features;
        oracle.best_point = tune_point_to_json(rec.tune_space, p);
        have_best = true;
      } else if (!have_second || r < second) {
        second = r;
        have_second = true;
      }
    }
  }
  if (!have_best) throw Error("BAD_DB", rec.name + ": no correct configuration");
  if (have_second && second <= best)
    throw Error("BAD_DB", rec.name + ": optimum is not a strict minimum");
  return oracle;
}

}  // namespace sim_detail

struct SuiteKernelBundle {
  KernelRecord record;
  SimKernelSpec spec;
};

// The fixed 4-kernel benchmark suite. Joint spaces stay small enough for
// exhaustive oracles; every acceptance number is machine-derived from them.
inline std::vector<SuiteKernelBundle> make_suite_kernels(uint64_t seed);

// Emit the suite as a replay-unit DB (manifest + snapshot files) plus
// oracle.json, and return the oracle.
inline SuiteOracle make_benchmark_suite(const std::filesystem::path& out_dir, uint64_t seed) {
  auto bundles = make_suite_kernels(seed);
  UnitDatabaseWriter writer(out_dir);
  SuiteOracle oracle;
  for (const auto& b : bundles) {
    auto parsed = parse_source(b.spec.feature_defs, b.record.seed_source);
    auto seed_features = resolve_features(b.spec.feature_defs, parsed);
    oracle.kernels[b.record.name] =
        sim_detail::enumerate_oracle(b.spec, b.record, seed_features);
    writer.add_kernel(b.record);
  }
  writer.finish();
  write_file_atomic(out_dir / "oracle.json", oracle.to_json().dump(2) + "\n");
  return oracle;
}

inline std::vector<SuiteKernelBundle> make_suite_kernels(uint64_t seed) {
  std::vector<SuiteKernelBundle> out;

  auto make_unit = [](const std::string& name, int instance, LaunchConfig launch,
                      std::mt19937_64& rng, bool with_f32, double baseline) {
    ReplayUnit unit;
    unit.kernel_name = name;
    unit.instance_id = instance;
    unit.launch = launch;
    unit.args_blob = sim_detail::random_bytes(rng, 64);
    Buffer args{0, sim_detail::random_bytes(rng, 64)};
    Buffer output{1, sim_detail::random_bytes(rng, with_f32 ? 256 : 512)};
    unit.prologue.buffers = {args, output};
    Buffer out_epi{1, sim_detail::random_bytes(rng, output.bytes.size())};
    unit.epilogue.buffers = {args, out_epi};  // args untouched by the kernel
    if (with_f32) {
      std::vector<uint8_t> pro(256), epi(256);
      for (int i = 0; i < 64; ++i) {
        float v = static_cast<float>(4.0 * uniform01(rng) - 2.0);
        float w = v * 1.5f + 0.25f;
        std::memcpy(pro.data() + 4 * i, &v, 4);
        std::memcpy(epi.data() + 4 * i, &w, 4);
      }
      unit.prologue.buffers.push_back(Buffer{2, pro});
      unit.epilogue.buffers.push_back(Buffer{2, epi});
    }
    unit.baseline_runtime_s = baseline;
    return unit;
  };

  // --- axpy: one int feature, block parabola plus pipeline choice ----------
  {
    SuiteKernelBundle b;
    b.spec.kernel_name = "axpy";
    b.spec.feature_defs = {FeatureDef{"unroll", {"1", "2", "4", "8"}}};
    b.spec.cost_model.base_s = 1e-3;
    b.spec.cost_model.terms = {
        CostTerm{CostTerm::Kind::feature_factor, "unroll", "",
                 {{"1", 1.0}, {"2", 0.84}, {"4", 0.72}, {"8", 0.78}}, 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::int_parabola, "", "block", {}, 160, 0.008, 32, {}, 1.0},
        CostTerm{CostTerm::Kind::param_factor, "", "pipeline",
                 {{"O0", 1.35}, {"O1", 1.12}, {"O2", 1.0}, {"O3", 0.97}}, 0, 0, 1, {}, 1.0}};
    b.record.name = "axpy";
    b.record.tune_space.params = {ParamDef::int_range("block", 32, 256, 32),
                                  ParamDef::categorical("pipeline", {"O0", "O1", "O2", "O3"})};
    b.record.recorded_point = json{{"block", 64}, {"pipeline", "O0"}};
    b.record.seed_source =
        "# axpy kernel\n"
        "unroll=1;\n"
        "load x and y from global memory\n"
        "fused multiply add\n"
        "store result\n";
    auto rng = make_rng(mix_seed({seed, hash_str("axpy")}));
    LaunchConfig launch{{1024, 1, 1}, {64, 1, 1}};
    auto parsed = parse_source(b.spec.feature_defs, b.record.seed_source);
    auto feats = resolve_features(b.spec.feature_defs, parsed);
    TunePoint rp = tune_point_from_json(b.record.tune_space, b.record.recorded_point);
    auto rng0 = make_rng(0);
    double baseline = sim_runtime(b.spec, feats, rp, b.record.tune_space, rng0);
    b.record.instances = {make_unit("axpy", 0, launch, rng, false, baseline)};
    b.record.sim_spec = b.spec.to_json();
    out.push_back(std::move(b));
  }

  // --- stencil: two source toggles, pass ordering, annotated f32 region ----
  {
    SuiteKernelBundle b;
    b.spec.kernel_name = "stencil";
    b.spec.feature_defs = {FeatureDef{"tiling", {"off", "on"}},
                           FeatureDef{"approx", {"off", "on"}}};
    b.spec.cost_model.base_s = 2.5e-3;
    b.spec.cost_model.terms = {
        CostTerm{CostTerm::Kind::feature_factor, "tiling", "", {{"off", 1.0}, {"on", 0.80}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::feature_factor, "approx", "", {{"off", 1.0}, {"on", 0.93}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::int_parabola, "", "block", {}, 256, 0.006, 32, {}, 1.0},
        CostTerm{CostTerm::Kind::pass_factor, "", "passes", {}, 0, 0, 1,
                 {{{"licm", 0.92}, {"unroll", 0.97}, {"gvn", 0.95}},
                  {{"licm", 0.99}, {"unroll", 0.96}, {"gvn", 0.965}}},
                 1.08}};
    // the approximate variant wiggles the annotated floats inside rel_tol
    b.spec.bugs = {BugRule{"approx", "on", "f32_scale", 2, 0, 64, 0, 2e-7}};
    b.record.name = "stencil";
    b.record.tune_space.params = {
        ParamDef::int_range("block", 32, 512, 32),
        ParamDef::pass_sequence("passes", {"licm", "unroll", "gvn"}, 2)};
    b.record.recorded_point = json{{"block", 128}, {"passes", json::array()}};
    b.record.seed_source =
        "# 9-point stencil\n"
        "tiling=off;\n"
        "approx=off;\n"
        "halo exchange of ghost cells\n"
        "accumulate neighbor contributions\n"
        "write interior cells\n";
    auto rng = make_rng(mix_seed({seed, hash_str("stencil")}));
    LaunchConfig launch{{512, 4, 1}, {128, 1, 1}};
    auto parsed = parse_source(b.spec.feature_defs, b.record.seed_source);
    auto feats = resolve_features(b.spec.feature_defs, parsed);
    TunePoint rp = tune_point_from_json(b.record.tune_space, b.record.recorded_point);
    auto rng0 = make_rng(0);
    double baseline = sim_runtime(b.spec, feats, rp, b.record.tune_space, rng0);
    auto u0 = make_unit("stencil", 0, launch, rng, true, baseline);
    auto u1 = make_unit("stencil", 1, launch, rng, true, baseline);
    Annotation ann{2, 0, ElementType::f32, 64, PredicateKind::rel_tol, 1e-6};
    u0.annotations = {ann};
    u1.annotations = {ann};
    b.record.instances = {u0, u1};
    b.record.sim_spec = b.spec.to_json();
    out.push_back(std::move(b));
  }

  // --- reduce: a tempting "bug" variant that is fast but wrong -------------
  {
    SuiteKernelBundle b;
    b.spec.kernel_name = "reduce";
    b.spec.feature_defs = {FeatureDef{"scheme", {"tree", "warp"}},
                           FeatureDef{"bug_flag", {"off", "on"}}};
    b.spec.cost_model.base_s = 5e-4;
    b.spec.cost_model.terms = {
        CostTerm{CostTerm::Kind::feature_factor, "scheme", "", {{"tree", 1.0}, {"warp", 0.88}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::feature_factor, "bug_flag", "", {{"off", 1.0}, {"on", 0.5}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::int_parabola, "", "block", {}, 256, 0.01, 64, {}, 1.0},
        CostTerm{CostTerm::Kind::param_factor, "", "atomics",
                 {{"true", 0.95}, {"false", 1.0}}, 0, 0, 1, {}, 1.0}};
    b.spec.bugs = {BugRule{"bug_flag", "on", "xor_byte", 1, 17, 1, 0xFF, 0}};
    b.record.name = "reduce";
    b.record.tune_space.params = {ParamDef::int_range("block", 64, 512, 64),
                                  ParamDef::boolean("atomics")};
    b.record.recorded_point = json{{"block", 128}, {"atomics", false}};
    b.record.seed_source =
        "# block reduction\n"
        "scheme=tree;\n"
        "bug_flag=off;\n"
        "shared memory staging\n"
        "final atomic add\n";
    auto rng = make_rng(mix_seed({seed, hash_str("reduce")}));
    LaunchConfig launch{{2048, 1, 1}, {128, 1, 1}};
    auto parsed = parse_source(b.spec.feature_defs, b.record.seed_source);
    auto feats = resolve_features(b.spec.feature_defs, parsed);
    TunePoint rp = tune_point_from_json(b.record.tune_space, b.record.recorded_point);
    auto rng0 = make_rng(0);
    double baseline = sim_runtime(b.spec, feats, rp, b.record.tune_space, rng0);
    b.record.instances = {make_unit("reduce", 0, launch, rng, false, baseline)};
    b.record.sim_spec = b.spec.to_json();
    out.push_back(std::move(b));
  }

  // --- gated: the optimum is unreachable without a source change -----------
  {
    SuiteKernelBundle b;
    b.spec.kernel_name = "gated";
    b.spec.feature_defs = {FeatureDef{"algo", {"v1", "v2"}}};
    b.spec.cost_model.base_s = 1.2e-3;
    b.spec.cost_model.terms = {
        CostTerm{CostTerm::Kind::feature_factor, "algo", "", {{"v1", 1.0}, {"v2", 0.55}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::int_parabola, "", "block", {}, 96, 0.01, 32, {}, 1.0},
        CostTerm{CostTerm::Kind::param_factor, "", "vec", {{"1", 1.0}, {"2", 0.90}, {"4", 0.85}},
                 0, 0, 1, {}, 1.0},
        CostTerm{CostTerm::Kind::interaction_factor, "algo", "vec", {{"v2|4", 0.93}},
                 0, 0, 1, {}, 1.0}};
    b.record.name = "gated";
    b.record.tune_space.params = {ParamDef::int_range("block", 32, 160, 32),
                                  ParamDef::categorical("vec", {"1", "2", "4"})};
    b.record.recorded_point = json{{"block", 96}, {"vec", "1"}};
    b.record.seed_source =
        "# gather-scatter transform\n"
        "algo=v1;\n"
        "index computation per site\n"
        "neighbor hopping accumulation\n";
    auto rng = make_rng(mix_seed({seed, hash_str("gated")}));
    LaunchConfig launch{{4096, 1, 1}, {96, 1, 1}};
    auto parsed = parse_source(b.spec.feature_defs, b.record.seed_source);
    auto feats = resolve_features(b.spec.feature_defs, parsed);
    TunePoint rp = tune_point_from_json(b.record.tune_space, b.record.recorded_point);
    auto rng0 = make_rng(0);
    double baseline = sim_runtime(b.spec, feats, rp, b.record.tune_space, rng0);
    b.record.instances = {make_unit("gated", 0, launch, rng, false, baseline)};
    b.record.sim_spec = b.spec.to_json();
    out.push_back(std::move(b));
  }

  return out;
}

}  // namespace r3
