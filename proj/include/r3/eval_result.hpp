#pragma once

// Outcome of evaluating one candidate through the replay path: correctness
// verdict, runtime samples, and the best tuning configuration found.

#include <optional>
#include <vector>

#include "r3/correctness.hpp"
#include "r3/util.hpp"

namespace r3 {

struct EvalResult {
  bool correct = false;
  std::vector<double> runtimes_s;     // post-warmup samples
  double median_runtime_s = 0.0;
  std::optional<json> best_point;     // rendered param -> value mapping
  std::optional<double> speedup;      // baseline / median; only when correct
  Verdict verdict;

  json to_json() const {
    json j{{"correct", correct},
           {"runtimes_s", runtimes_s},
           {"median_runtime_s", median_runtime_s},
           {"verdict", verdict.to_json()}};
    if (best_point) j["best_point"] = *best_point;
    if (speedup) j["speedup"] = *speedup;
    return j;
  }

  static EvalResult from_json(const json& j) {
    EvalResult r;
    r.correct = require_field<bool>(j, "correct");
    r.runtimes_s = j.value("runtimes_s", std::vector<double>{});
    r.median_runtime_s = j.value("median_runtime_s", 0.0);
    if (j.contains("best_point")) r.best_point = j.at("best_point");
    if (j.contains("speedup")) r.speedup = j.at("speedup").get<double>();
    if (j.contains("verdict")) r.verdict = Verdict::from_json(j.at("verdict"));
    return r;
  }
};

}  // namespace r3
