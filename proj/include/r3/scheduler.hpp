#pragma once

// Runtime-aware model selection. A generation request is normally sampled
// from the ensemble's base probabilities; when an evaluation worker is idle
// and some in-flight generation leaves enough slack, a fast model that fits
// inside the slack is issued instead, the way HPC schedulers backfill queue
// bubbles with short jobs. Also provides a discrete-event simulation of the
// generate->evaluate pipeline for measuring the policy's effect.

#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <string>
#include <vector>

#include "r3/mutation.hpp"
#include "r3/util.hpp"

namespace r3 {

// EWMA estimates of per-model generation latency and of replay+tune time.
struct LatencyEstimator {
  double alpha = 0.3;
  double eval_estimate_s = 10.0;
  std::map<std::string, double> model_latency;

  void prime(const std::vector<ModelSpec>& ensemble) {
    for (const auto& m : ensemble)
      if (!model_latency.count(m.name)) model_latency[m.name] = m.latency_prior_s;
  }

  double latency(const std::string& model) const {
    auto it = model_latency.find(model);
    if (it == model_latency.end()) throw Error("BAD_REQUEST", "unknown model '" + model + "'");
    return it->second;
  }

  void update_model(const std::string& model, double observed_s) {
    double& t = model_latency[model];
    t = t > 0 ? alpha * observed_s + (1 - alpha) * t : observed_s;
  }

  void update_eval(double observed_s) {
    eval_estimate_s = alpha * observed_s + (1 - alpha) * eval_estimate_s;
  }

  json to_json() const {
    return json{{"alpha", alpha},
                {"eval_estimate_s", eval_estimate_s},
                {"model_latency", model_latency}};
  }
  static LatencyEstimator from_json(const json& j) {
    LatencyEstimator e;
    e.alpha = j.value("alpha", 0.3);
    e.eval_estimate_s = j.value("eval_estimate_s", 10.0);
    if (j.contains("model_latency"))
      e.model_latency = j.at("model_latency").get<std::map<std::string, double>>();
    return e;
  }
};

class UnknownRequestError : public Error {
 public:
  explicit UnknownRequestError(uint64_t id)
      : Error("UNKNOWN_REQUEST", "request " + std::to_string(id) + " is not in flight") {}
};

struct InFlightEntry {
  uint64_t request_id = 0;
  std::string model_name;
  double issue_time = 0;
  double expected_completion = 0;  // issue_time + estimated latency at issue
};

class InFlightTable {
 public:
  void add(uint64_t request_id, const std::string& model, double issue_time,
           double expected_latency_s) {
    if (entries_.count(request_id))
      throw Error("BAD_REQUEST", "duplicate request id " + std::to_string(request_id));
    entries_[request_id] =
        InFlightEntry{request_id, model, issue_time, issue_time + expected_latency_s};
  }

  InFlightEntry take(uint64_t request_id) {
    auto it = entries_.find(request_id);
    if (it == entries_.end()) throw UnknownRequestError(request_id);
    InFlightEntry e = it->second;
    entries_.erase(it);
    return e;
  }

  bool empty() const { return entries_.empty(); }
  size_t size() const { return entries_.size(); }

  const std::map<uint64_t, InFlightEntry>& entries() const { return entries_; }

 private:
  std::map<uint64_t, InFlightEntry> entries_;
};

struct WorkerForecast {
  std::vector<double> next_free_time;

  bool any_idle(double now) const {
    for (double t : next_free_time)
      if (t <= now) return true;
    return false;
  }
};

enum class SlackMode { max_remaining, min_remaining };

struct SchedulerConfig {
  bool backfill = true;
  SlackMode slack_mode = SlackMode::max_remaining;
  double safety_margin = 0.10;  // fit test uses (1+margin)*(tau_m + t_eval)
};

// Pick the model for the next generation request. Deterministic in all
// inputs; the sampling fallback is driven by rng_seed alone.
inline const ModelSpec& select_model(double now, const std::vector<ModelSpec>& ensemble,
                                     const LatencyEstimator& estimator,
                                     const InFlightTable& inflight,
                                     const WorkerForecast& forecast, uint64_t rng_seed,
                                     const SchedulerConfig& cfg = {}) {
  validate_ensemble(ensemble);

  if (cfg.backfill && !inflight.empty() && forecast.any_idle(now)) {
    double slack = 0;
    bool first = true;
    for (const auto& [id, e] : inflight.entries()) {
      double remaining = e.expected_completion - now;
      if (first) {
        slack = remaining;
        first = false;
      } else if (cfg.slack_mode == SlackMode::max_remaining) {
        slack = std::max(slack, remaining);
      } else {
        slack = std::min(slack, remaining);
      }
    }
    if (slack > 0) {
      const ModelSpec* fit = nullptr;
      for (const auto& m : ensemble) {
        double cost = (1.0 + cfg.safety_margin) *
                      (estimator.latency(m.name) + estimator.eval_estimate_s);
        if (cost > slack) continue;
        if (!fit || m.base_probability > fit->base_probability) fit = &m;
      }
      if (fit) return *fit;
    }
  }

  auto rng = make_rng(rng_seed);
  double r = uniform01(rng);
  double acc = 0;
  for (const auto& m : ensemble) {
    acc += m.base_probability;
    if (r < acc) return m;
  }
  return ensemble.back();
}

inline void record_completion(uint64_t request_id, double observed_latency_s,
                              LatencyEstimator& estimator, InFlightTable& inflight) {
  InFlightEntry e = inflight.take(request_id);
  estimator.update_model(e.model_name, observed_latency_s);
}

// ---------------------------------------------------------------------------
// Discrete-event pipeline simulation

class InvalidWorkloadError : public Error {
 public:
  explicit InvalidWorkloadError(const std::string& msg) : Error("INVALID_WORKLOAD", msg) {}
};

struct LatencyDist {
  std::string kind = "fixed";  // fixed | uniform | exponential
  double a = 1.0, b = 0.0;     // fixed: a; uniform: [a,b]; exponential: mean a

  double mean() const {
    if (kind == "fixed") return a;
    if (kind == "uniform") return 0.5 * (a + b);
    if (kind == "exponential") return a;
    throw InvalidWorkloadError("unknown distribution '" + kind + "'");
  }

  double sample(std::mt19937_64& rng) const {
    if (kind == "fixed") return a;
    if (kind == "uniform") return a + (b - a) * uniform01(rng);
    if (kind == "exponential")
      return -a * std::log(std::max(1e-12, 1.0 - uniform01(rng)));
    throw InvalidWorkloadError("unknown distribution '" + kind + "'");
  }

  json to_json() const { return json{{"kind", kind}, {"a", a}, {"b", b}}; }
  static LatencyDist from_json(const json& j) {
    LatencyDist d;
    d.kind = j.value("kind", "fixed");
    d.a = j.value("a", 1.0);
    d.b = j.value("b", 0.0);
    return d;
  }
};

struct WorkloadModel {
  ModelSpec spec;
  LatencyDist latency;
};

struct WorkloadSpec {
  std::vector<WorkloadModel> models;
  LatencyDist eval_time;
  int controllers = 1;  // P
  int workers = 1;      // G
  int islands = 4;

  void validate() const {
    if (controllers < 1) throw InvalidWorkloadError("controllers must be >= 1");
    if (workers < 1) throw InvalidWorkloadError("workers must be >= 1");
    if (islands < 1) throw InvalidWorkloadError("islands must be >= 1");
    if (models.empty()) throw InvalidWorkloadError("no models");
    std::vector<ModelSpec> specs;
    for (const auto& m : models) {
      if (m.latency.mean() <= 0) throw InvalidWorkloadError("nonpositive latency");
      specs.push_back(m.spec);
    }
    if (eval_time.mean() <= 0) throw InvalidWorkloadError("nonpositive eval time");
    validate_ensemble(specs);
  }

  static WorkloadSpec from_json(const json& j) {
    WorkloadSpec w;
    for (const auto& mj : require_field<json>(j, "models")) {
      WorkloadModel m;
      m.spec = ModelSpec::from_json(mj);
      m.latency = LatencyDist::from_json(require_field<json>(mj, "latency"));
      m.spec.latency_prior_s = m.latency.mean();
      w.models.push_back(std::move(m));
    }
    w.eval_time = LatencyDist::from_json(require_field<json>(j, "eval_time"));
    w.controllers = j.value("controllers", 1);
    w.workers = j.value("workers", 1);
    w.islands = j.value("islands", 4);
    return w;
  }
};

struct SimReport {
  std::string policy;
  int controllers = 0, workers = 0;
  double evals_per_hour = 0;
  double utilization = 0;  // busy-worker-seconds / (G * horizon)
  uint64_t issued = 0, completed = 0, in_flight_at_end = 0, failed = 0;
  double stale_fraction = 0;

  json to_json() const {
    return json{{"policy", policy},
                {"controllers", controllers},
                {"workers", workers},
                {"evals_per_hour", evals_per_hour},
                {"utilization", utilization},
                {"issued", issued},
                {"completed", completed},
                {"in_flight_at_end", in_flight_at_end},
                {"failed", failed},
                {"stale_fraction", stale_fraction}};
  }

  static std::string csv_header() {
    return "policy,P,G,evals_per_hour,utilization,stale_fraction";
  }
  std::string csv_row() const {
    return policy + "," + std::to_string(controllers) + "," + std::to_string(workers) + "," +
           format_double(evals_per_hour, "%.4f") + "," + format_double(utilization, "%.4f") +
           "," + format_double(stale_fraction, "%.4f");
  }
};

// Simulate P sequential controllers sharing G evaluation workers for
// `horizon_s` simulated seconds. Each controller loops sample -> generate ->
// evaluate -> insert; inserts bump the island version, and an insert is a
// stale read when its island changed between sample and insert.
inline SimReport simulate(const SchedulerConfig& policy, const WorkloadSpec& workload,
                          double horizon_s, uint64_t seed) {
  workload.validate();
  if (horizon_s <= 0) throw InvalidWorkloadError("horizon must be positive");

  std::vector<ModelSpec> ensemble;
  for (const auto& m : workload.models) ensemble.push_back(m.spec);
  LatencyEstimator estimator;
  estimator.prime(ensemble);
  estimator.eval_estimate_s = workload.eval_time.mean();
  InFlightTable inflight;
  WorkerForecast forecast;
  forecast.next_free_time.assign(static_cast<size_t>(workload.workers), 0.0);

  auto rng = make_rng(mix_seed({seed, hash_str("sim")}));

  struct Event {
    double time;
    uint64_t seq;
    int kind;  // 0 = generation done, 1 = evaluation done
    int controller;
    bool operator>(const Event& o) const {
      return time != o.time ? time > o.time : seq > o.seq;
    }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events;
  uint64_t seq = 0;

  struct ControllerState {
    uint64_t request_id = 0;
    int island = 0;
    uint64_t version_at_sample = 0;
    double gen_issue_time = 0;
    double eval_duration = 0;
  };
  std::vector<ControllerState> ctl(static_cast<size_t>(workload.controllers));
  std::vector<uint64_t> island_version(static_cast<size_t>(workload.islands), 0);

  SimReport report;
  report.policy = policy.backfill ? "backfill" : "base";
  report.controllers = workload.controllers;
  report.workers = workload.workers;

  uint64_t next_request = 1;
  uint64_t stale = 0, inserts = 0, late_completions = 0;
  double busy_seconds = 0;

  auto issue = [&](int c, double now) {
    ControllerState& s = ctl[static_cast<size_t>(c)];
    s.island = c % workload.islands;
    s.version_at_sample = island_version[static_cast<size_t>(s.island)];
    const ModelSpec& m = select_model(now, ensemble, estimator, inflight, forecast,
                                      mix_seed({seed, next_request}), policy);
    const WorkloadModel* wm = nullptr;
    for (const auto& w : workload.models)
      if (w.spec.name == m.name) wm = &w;
    double actual = std::max(1e-9, wm->latency.sample(rng));
    s.request_id = next_request++;
    s.gen_issue_time = now;
    inflight.add(s.request_id, m.name, now, estimator.latency(m.name));
    ++report.issued;
    events.push(Event{now + actual, seq++, 0, c});
  };

  for (int c = 0; c < workload.controllers; ++c) issue(c, 0.0);

  while (!events.empty()) {
    Event ev = events.top();
    events.pop();
    ControllerState& s = ctl[static_cast<size_t>(ev.controller)];
    if (ev.kind == 0) {
      // generation finished: learn latency, queue evaluation on the earliest
      // free worker
      record_completion(s.request_id, ev.time - s.gen_issue_time, estimator, inflight);
      size_t w = 0;
      for (size_t i = 1; i < forecast.next_free_time.size(); ++i)
        if (forecast.next_free_time[i] < forecast.next_free_time[w]) w = i;
      double start = std::max(ev.time, forecast.next_free_time[w]);
      double dur = std::max(1e-9, workload.eval_time.sample(rng));
      double done = start + dur;
      s.eval_duration = dur;
      forecast.next_free_time[w] = done;
      busy_seconds += std::max(0.0, std::min(done, horizon_s) - std::min(start, horizon_s));
      events.push(Event{done, seq++, 1, ev.controller});
    } else {
      // evaluation finished: update estimate, insert, maybe issue again
      estimator.update_eval(s.eval_duration);
      if (ev.time <= horizon_s) {
        ++report.completed;
        ++inserts;
        if (island_version[static_cast<size_t>(s.island)] != s.version_at_sample) ++stale;
        island_version[static_cast<size_t>(s.island)] += 1;
        if (ev.time < horizon_s) issue(ev.controller, ev.time);
      } else {
        ++late_completions;
      }
    }
  }

  report.in_flight_at_end = late_completions;
  report.evals_per_hour = static_cast<double>(report.completed) / (horizon_s / 3600.0);
  report.utilization =
      busy_seconds / (static_cast<double>(workload.workers) * horizon_s);
  report.stale_fraction =
      inserts > 0 ? static_cast<double>(stale) / static_cast<double>(inserts) : 0.0;
  return report;
}

}  // namespace r3
