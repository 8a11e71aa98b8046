#pragma once

// Inner-loop Bayesian optimization: Tree Parzen Estimation over structured
// parameter spaces, with constant-liar parallel suggestion, plus a uniform
// random-search baseline.

#include <cmath>
#include <cstdint>
#include <functional>
#include <future>
#include <limits>
#include <optional>
#include <set>
#include <vector>

#include "r3/tune_space.hpp"
#include "r3/util.hpp"

namespace r3 {

class SpaceExhaustedError : public Error {
 public:
  SpaceExhaustedError() : Error("SPACE_EXHAUSTED", "all points in the space were evaluated") {}
};

struct TpeConfig {
  double gamma = 0.25;   // quantile separating good from bad trials
  int n_startup = 8;     // quasi-random trials before the model kicks in
  int n_candidates = 24; // draws from the good density per suggestion
  double laplace = 1.0;  // smoothing mass
};

namespace tpe_detail {

inline int64_t prime_for_dim(size_t i) {
  static const int primes[] = {2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47};
  return primes[i % (sizeof(primes) / sizeof(primes[0]))];
}

inline double halton(int64_t index, int64_t base) {
  double f = 1.0, r = 0.0;
  while (index > 0) {
    f /= static_cast<double>(base);
    r += f * static_cast<double>(index % base);
    index /= base;
  }
  return r;
}

// Flat integer encoding of a point, for dedup sets and enumeration.
inline std::vector<int64_t> encode_point(const TuneSpace& space, const TunePoint& p) {
  std::vector<int64_t> key;
  for (const auto& def : space.params) {
    const ParamValue& v = p.assignment.at(def.name);
    switch (def.kind) {
      case ParamDef::Kind::categorical:
        key.push_back(std::get<int64_t>(v));
        break;
      case ParamDef::Kind::int_range:
        key.push_back((std::get<int64_t>(v) - def.lo) / def.step);
        break;
      case ParamDef::Kind::boolean:
        key.push_back(std::get<bool>(v) ? 1 : 0);
        break;
      case ParamDef::Kind::pass_sequence: {
        const auto& seq = std::get<std::vector<int32_t>>(v);
        key.push_back(static_cast<int64_t>(seq.size()));
        for (int32_t s : seq) key.push_back(s);
        break;
      }
    }
  }
  return key;
}

// Per-dimension index <-> value. pass_sequence indices enumerate by length
// then lexicographically by position.
inline ParamValue value_from_index(const ParamDef& def, int64_t idx) {
  switch (def.kind) {
    case ParamDef::Kind::categorical:
      return idx;
    case ParamDef::Kind::int_range:
      return def.lo + idx * def.step;
    case ParamDef::Kind::boolean:
      return idx != 0;
    case ParamDef::Kind::pass_sequence: {
      int64_t a = static_cast<int64_t>(def.pass_set.size());
      int64_t len = 0, block = 1;
      while (idx >= block) {
        idx -= block;
        block *= a;
        ++len;
      }
      std::vector<int32_t> seq(static_cast<size_t>(len));
      for (int64_t t = len - 1; t >= 0; --t) {
        seq[static_cast<size_t>(t)] = static_cast<int32_t>(idx % a);
        idx /= a;
      }
      return seq;
    }
  }
  return int64_t{0};
}

inline TunePoint point_from_flat_index(const TuneSpace& space, uint64_t flat) {
  TunePoint p;
  for (auto it = space.params.rbegin(); it != space.params.rend(); ++it) {
    uint64_t c = static_cast<uint64_t>(it->cardinality());
    p.assignment[it->name] = value_from_index(*it, static_cast<int64_t>(flat % c));
    flat /= c;
  }
  return p;
}

// Density over one parameter, in "good"/"bad" TPE roles. Scalar kinds use a
// weight vector over the value grid; pass sequences use per-position counts
// with an explicit end-of-sequence symbol.
struct ParamDensity {
  const ParamDef* def = nullptr;
  std::vector<double> weights;                    // scalar kinds
  std::vector<std::vector<double>> position_weights;  // pass_sequence

  static ParamDensity build(const ParamDef& def, const std::vector<const ParamValue*>& obs,
                            double laplace) {
    ParamDensity d;
    d.def = &def;
    if (def.kind == ParamDef::Kind::pass_sequence) {
      size_t alphabet = def.pass_set.size() + 1;  // +1 for END
      d.position_weights.assign(static_cast<size_t>(def.max_len),
                                std::vector<double>(alphabet, laplace));
      for (const ParamValue* v : obs) {
        const auto& seq = std::get<std::vector<int32_t>>(*v);
        for (size_t t = 0; t < static_cast<size_t>(def.max_len); ++t) {
          size_t sym = t < seq.size() ? static_cast<size_t>(seq[t]) : def.pass_set.size();
          d.position_weights[t][sym] += 1.0;
          if (t >= seq.size()) break;  // count END once, at the stop position
        }
      }
      return d;
    }

    int64_t n = def.cardinality();
    d.weights.assign(static_cast<size_t>(n), 0.0);
    if (def.kind == ParamDef::Kind::int_range) {
      // kernel density over observed values on the integer grid
      double range = static_cast<double>(def.hi - def.lo);
      double bw = std::max(static_cast<double>(def.step), range / 20.0);
      double floor_mass = laplace / static_cast<double>(n);
      for (int64_t j = 0; j < n; ++j) {
        double vj = static_cast<double>(def.lo + j * def.step);
        double w = floor_mass;
        for (const ParamValue* v : obs) {
          double z = (vj - static_cast<double>(std::get<int64_t>(*v))) / bw;
          w += std::exp(-0.5 * z * z);
        }
        d.weights[static_cast<size_t>(j)] = w;
      }
    } else {
      for (auto& w : d.weights) w = laplace;
      for (const ParamValue* v : obs) {
        int64_t idx = 0;
        if (def.kind == ParamDef::Kind::categorical)
          idx = std::get<int64_t>(*v);
        else
          idx = std::get<bool>(*v) ? 1 : 0;
        d.weights[static_cast<size_t>(idx)] += 1.0;
      }
    }
    return d;
  }

  double log_prob(const ParamValue& v) const {
    if (def->kind == ParamDef::Kind::pass_sequence) {
      const auto& seq = std::get<std::vector<int32_t>>(v);
      double lp = 0.0;
      for (size_t t = 0; t < static_cast<size_t>(def->max_len); ++t) {
        const auto& w = position_weights[t];
        double total = 0;
        for (double x : w) total += x;
        size_t sym = t < seq.size() ? static_cast<size_t>(seq[t]) : def->pass_set.size();
        lp += std::log(w[sym] / total);
        if (t >= seq.size()) break;
      }
      return lp;
    }
    int64_t idx = 0;
    switch (def->kind) {
      case ParamDef::Kind::categorical: idx = std::get<int64_t>(v); break;
      case ParamDef::Kind::int_range: idx = (std::get<int64_t>(v) - def->lo) / def->step; break;
      case ParamDef::Kind::boolean: idx = std::get<bool>(v) ? 1 : 0; break;
      default: break;
    }
    double total = 0;
    for (double x : weights) total += x;
    return std::log(weights[static_cast<size_t>(idx)] / total);
  }

  ParamValue sample(std::mt19937_64& rng) const {
    if (def->kind == ParamDef::Kind::pass_sequence) {
      std::vector<int32_t> seq;
      for (size_t t = 0; t < static_cast<size_t>(def->max_len); ++t) {
        size_t sym = weighted_index(rng, position_weights[t]);
        if (sym == def->pass_set.size()) break;  // END
        seq.push_back(static_cast<int32_t>(sym));
      }
      return seq;
    }
    size_t idx = weighted_index(rng, weights);
    return value_from_index(*def, static_cast<int64_t>(idx));
  }
};

}  // namespace tpe_detail

// Enumerate a finite space: flat index in [0, space.size()) to point.
inline TunePoint space_point_at(const TuneSpace& space, uint64_t flat_index) {
  return tpe_detail::point_from_flat_index(space, flat_index);
}

// One TPE suggestion. Pending points are treated as bad-side observations
// (constant-liar), so parallel workers spread out instead of piling up.
inline TunePoint suggest(const TuneSpace& space, const std::vector<Trial>& trials,
                         const std::vector<TunePoint>& pending, uint64_t seed,
                         const TpeConfig& cfg = {}) {
  space.validate();
  if (space.params.empty()) throw Error("BAD_REQUEST", "empty tune space");

  std::set<std::vector<int64_t>> seen;
  for (const auto& t : trials) seen.insert(tpe_detail::encode_point(space, t.point));
  for (const auto& p : pending) seen.insert(tpe_detail::encode_point(space, p));

  const uint64_t space_size = space.size();
  if (seen.size() >= space_size) throw SpaceExhaustedError();

  auto enumerate_unseen = [&](std::mt19937_64& rng) -> TunePoint {
    uint64_t start = space_size ? rng() % space_size : 0;
    for (uint64_t k = 0; k < space_size; ++k) {
      TunePoint p = tpe_detail::point_from_flat_index(space, (start + k) % space_size);
      if (!seen.count(tpe_detail::encode_point(space, p))) return p;
    }
    throw SpaceExhaustedError();
  };

  std::vector<const Trial*> successes;
  for (const auto& t : trials)
    if (t.outcome == Trial::Outcome::success) successes.push_back(&t);

  auto rng = make_rng(mix_seed({seed, hash_str("suggest"), trials.size()}));

  if (static_cast<int>(successes.size()) < cfg.n_startup) {
    // startup: shifted Halton draws, one base per dimension
    std::vector<double> shift(space.params.size());
    for (size_t i = 0; i < shift.size(); ++i) {
      auto srng = make_rng(mix_seed({seed, hash_str("halton-shift"), i}));
      shift[i] = uniform01(srng);
    }
    int64_t index = static_cast<int64_t>(trials.size() + pending.size()) + 1;
    for (int attempt = 0; attempt < 512; ++attempt, ++index) {
      TunePoint p;
      for (size_t i = 0; i < space.params.size(); ++i) {
        const ParamDef& def = space.params[i];
        double u = tpe_detail::halton(index, tpe_detail::prime_for_dim(i)) + shift[i];
        u -= std::floor(u);
        int64_t c = def.cardinality();
        int64_t idx = std::min<int64_t>(static_cast<int64_t>(u * static_cast<double>(c)), c - 1);
        p.assignment[def.name] = tpe_detail::value_from_index(def, idx);
      }
      if (!seen.count(tpe_detail::encode_point(space, p))) return p;
    }
    return enumerate_unseen(rng);
  }

  // split successes at the gamma-quantile of runtime (lower is better)
  std::vector<const Trial*> sorted = successes;
  std::sort(sorted.begin(), sorted.end(),
            [](const Trial* a, const Trial* b) { return a->runtime_s < b->runtime_s; });
  size_t n_good = std::max<size_t>(
      1, static_cast<size_t>(std::ceil(cfg.gamma * static_cast<double>(sorted.size()))));

  std::vector<tpe_detail::ParamDensity> good_d, bad_d;
  for (size_t i = 0; i < space.params.size(); ++i) {
    const ParamDef& def = space.params[i];
    std::vector<const ParamValue*> good_obs, bad_obs;
    for (size_t k = 0; k < sorted.size(); ++k) {
      const ParamValue& v = sorted[k]->point.assignment.at(def.name);
      (k < n_good ? good_obs : bad_obs).push_back(&v);
    }
    for (const auto& p : pending) bad_obs.push_back(&p.assignment.at(def.name));
    good_d.push_back(tpe_detail::ParamDensity::build(def, good_obs, cfg.laplace));
    bad_d.push_back(tpe_detail::ParamDensity::build(def, bad_obs, cfg.laplace));
  }

  std::optional<TunePoint> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (int round = 0; round < 20 && !best; ++round) {
    for (int c = 0; c < cfg.n_candidates; ++c) {
      TunePoint p;
      for (size_t i = 0; i < space.params.size(); ++i)
        p.assignment[space.params[i].name] = good_d[i].sample(rng);
      if (seen.count(tpe_detail::encode_point(space, p))) continue;
      double score = 0.0;
      for (size_t i = 0; i < space.params.size(); ++i) {
        const ParamValue& v = p.assignment.at(space.params[i].name);
        score += good_d[i].log_prob(v) - bad_d[i].log_prob(v);
      }
      if (score > best_score) {
        best_score = score;
        best = p;
      }
    }
  }
  if (best) return *best;
  return enumerate_unseen(rng);
}

struct TuneResult {
  std::optional<TunePoint> best_point;
  std::optional<double> best_runtime_s;
  bool all_incorrect = false;  // no correct trial was seen
  std::vector<Trial> trials;

  json to_json(const TuneSpace& space) const {
    json jt = json::array();
    for (const auto& t : trials) {
      json e{{"point", tune_point_to_json(space, t.point)}};
      switch (t.outcome) {
        case Trial::Outcome::success:
          e["outcome"] = "success";
          e["runtime_s"] = t.runtime_s;
          break;
        case Trial::Outcome::incorrect: e["outcome"] = "incorrect"; break;
        case Trial::Outcome::failed: e["outcome"] = "failed"; break;
      }
      jt.push_back(std::move(e));
    }
    json j{{"all_incorrect", all_incorrect}, {"trials", jt}};
    if (best_point) j["best_point"] = tune_point_to_json(space, *best_point);
    if (best_runtime_s) j["best_runtime_s"] = *best_runtime_s;
    return j;
  }
};

using EvaluateFn = std::function<Trial(const TunePoint&)>;

namespace tpe_detail {

inline void record(TuneResult& result, Trial t) {
  if (t.outcome == Trial::Outcome::success &&
      (!result.best_runtime_s || t.runtime_s < *result.best_runtime_s)) {
    result.best_runtime_s = t.runtime_s;
    result.best_point = t.point;
  }
  result.trials.push_back(std::move(t));
}

inline Trial run_evaluate(const EvaluateFn& evaluate, const TunePoint& p) {
  try {
    return evaluate(p);
  } catch (const std::exception&) {
    return Trial::failed(p);  // evaluator transport errors become failed trials
  }
}

}  // namespace tpe_detail

// TPE-driven search. Issues exactly `budget` evaluations (fewer only when the
// space is exhausted), with up to `parallelism` outstanding at a time.
inline TuneResult tune(const TuneSpace& space, const EvaluateFn& evaluate, int budget,
                       int parallelism, uint64_t seed, const TpeConfig& cfg = {}) {
  if (budget < 1) throw Error("BAD_REQUEST", "budget must be >= 1");
  if (parallelism < 1) throw Error("BAD_REQUEST", "parallelism must be >= 1");
  TuneResult result;

  if (parallelism == 1) {
    for (int i = 0; i < budget; ++i) {
      TunePoint p;
      try {
        p = suggest(space, result.trials, {}, mix_seed({seed, static_cast<uint64_t>(i)}), cfg);
      } catch (const SpaceExhaustedError&) {
        break;
      }
      tpe_detail::record(result, tpe_detail::run_evaluate(evaluate, p));
    }
  } else {
    std::vector<std::pair<TunePoint, std::future<Trial>>> window;
    int issued = 0;
    bool exhausted = false;
    while (true) {
      while (!exhausted && issued < budget &&
             static_cast<int>(window.size()) < parallelism) {
        std::vector<TunePoint> pending;
        for (const auto& w : window) pending.push_back(w.first);
        TunePoint p;
        try {
          p = suggest(space, result.trials, pending,
                      mix_seed({seed, static_cast<uint64_t>(issued)}), cfg);
        } catch (const SpaceExhaustedError&) {
          exhausted = true;
          break;
        }
        ++issued;
        window.emplace_back(p, std::async(std::launch::async, [&evaluate, p] {
                              return tpe_detail::run_evaluate(evaluate, p);
                            }));
      }
      if (window.empty()) break;
      tpe_detail::record(result, window.front().second.get());
      window.erase(window.begin());
    }
  }

  bool any_success = false;
  for (const auto& t : result.trials)
    if (t.outcome == Trial::Outcome::success) any_success = true;
  result.all_incorrect = !any_success;
  return result;
}

// Uniform sampling without replacement; the baseline TPE is judged against.
inline TuneResult random_search(const TuneSpace& space, const EvaluateFn& evaluate,
                                int budget, uint64_t seed) {
  if (budget < 1) throw Error("BAD_REQUEST", "budget must be >= 1");
  space.validate();
  TuneResult result;
  auto rng = make_rng(mix_seed({seed, hash_str("random-search")}));
  const uint64_t space_size = space.size();

  if (space_size <= (uint64_t{1} << 20)) {
    std::vector<uint64_t> order(space_size);
    for (uint64_t i = 0; i < space_size; ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    uint64_t take = std::min<uint64_t>(order.size(), static_cast<uint64_t>(budget));
    for (uint64_t i = 0; i < take; ++i)
      tpe_detail::record(result, tpe_detail::run_evaluate(
                                     evaluate, tpe_detail::point_from_flat_index(space, order[i])));
  } else {
    std::set<std::vector<int64_t>> seen;
    int issued = 0;
    while (issued < budget) {
      TunePoint p = tpe_detail::point_from_flat_index(space, rng() % space_size);
      if (!seen.insert(tpe_detail::encode_point(space, p)).second) continue;
      ++issued;
      tpe_detail::record(result, tpe_detail::run_evaluate(evaluate, p));
    }
  }

  bool any_success = false;
  for (const auto& t : result.trials)
    if (t.outcome == Trial::Outcome::success) any_success = true;
  result.all_incorrect = !any_success;
  return result;
}

}  // namespace r3
