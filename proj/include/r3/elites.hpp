#pragma once

// MAP-Elites population across islands: feature binning, elite
// insertion/replacement, migration between islands, and parent/inspiration
// sampling. Islands are independently lockable; migration locks all islands
// in ascending id order.

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "r3/eval_result.hpp"
#include "r3/util.hpp"

namespace r3 {

struct FeatureVector {
  size_t complexity = 1;   // lines of code, >= 1 for non-empty sources
  double diversity = 0.0;  // mean normalized edit distance to elites, in [0,1]

  json to_json() const { return json{{"complexity", complexity}, {"diversity", diversity}}; }
  static FeatureVector from_json(const json& j) {
    return FeatureVector{require_field<size_t>(j, "complexity"),
                         require_field<double>(j, "diversity")};
  }
};

struct Candidate {
  std::string id;
  std::string source;
  std::optional<std::string> parent_id;
  int generation = 0;
  FeatureVector features;
  std::optional<double> fitness;  // speedup over baseline; present iff eval correct
  std::optional<EvalResult> eval;
  std::optional<std::string> model_used;
  double created_at = 0.0;

  json to_json() const {
    json j{{"id", id},
           {"source", source},
           {"generation", generation},
           {"features", features.to_json()},
           {"created_at", created_at}};
    if (parent_id) j["parent_id"] = *parent_id;
    if (fitness) j["fitness"] = *fitness;
    if (eval) j["eval"] = eval->to_json();
    if (model_used) j["model_used"] = *model_used;
    return j;
  }

  static Candidate from_json(const json& j) {
    Candidate c;
    c.id = require_field<std::string>(j, "id");
    c.source = require_field<std::string>(j, "source");
    if (j.contains("parent_id")) c.parent_id = j.at("parent_id").get<std::string>();
    c.generation = j.value("generation", 0);
    c.features = FeatureVector::from_json(j.at("features"));
    if (j.contains("fitness")) c.fitness = j.at("fitness").get<double>();
    if (j.contains("eval")) c.eval = EvalResult::from_json(j.at("eval"));
    if (j.contains("model_used")) c.model_used = j.at("model_used").get<std::string>();
    c.created_at = j.value("created_at", 0.0);
    return c;
  }
};

struct GridConfig {
  int bins_per_dim = 10;
  double complexity_lo = 1.0;
  double complexity_hi = 200.0;
};

struct GridCoord {
  int complexity_bin = 0;
  int diversity_bin = 0;

  auto operator<=>(const GridCoord&) const = default;
};

// Clamp-then-linear binning on both feature dimensions.
inline GridCoord bin_features(const FeatureVector& f, const GridConfig& cfg) {
  const int bins = cfg.bins_per_dim;
  double span = std::max(1e-9, cfg.complexity_hi - cfg.complexity_lo);
  double x = std::clamp(static_cast<double>(f.complexity), cfg.complexity_lo, cfg.complexity_hi);
  int cb = static_cast<int>(std::floor((x - cfg.complexity_lo) / span * bins));
  cb = std::clamp(cb, 0, bins - 1);
  double d = std::clamp(f.diversity, 0.0, 1.0);
  int db = std::clamp(static_cast<int>(std::floor(d * bins)), 0, bins - 1);
  return GridCoord{cb, db};
}

struct EliteGrid {
  GridConfig config;
  size_t capacity = 0;  // max occupied cells; 0 = unbounded
  std::map<GridCoord, Candidate> cells;
};

struct Island {
  int island_id = 0;
  EliteGrid grid;
  uint64_t version = 0;  // bumped on every grid mutation
};

enum class InsertOutcome { added, replaced, rejected_worse, rejected_incorrect };

inline const char* to_string(InsertOutcome o) {
  switch (o) {
    case InsertOutcome::added: return "added";
    case InsertOutcome::replaced: return "replaced";
    case InsertOutcome::rejected_worse: return "rejected_worse";
    case InsertOutcome::rejected_incorrect: return "rejected_incorrect";
  }
  return "?";
}

// Insert one evaluated candidate. Incorrect candidates never enter the grid;
// ties keep the incumbent. When the island is at capacity a newcomer must
// beat the current worst elite, which it then evicts.
inline InsertOutcome insert(Island& island, Candidate candidate) {
  if (!candidate.eval || !candidate.eval->correct || !candidate.fitness)
    return InsertOutcome::rejected_incorrect;
  auto& cells = island.grid.cells;
  GridCoord key = bin_features(candidate.features, island.grid.config);
  auto it = cells.find(key);
  if (it == cells.end()) {
    if (island.grid.capacity > 0 && cells.size() >= island.grid.capacity) {
      auto worst = cells.begin();
      for (auto c = cells.begin(); c != cells.end(); ++c)
        if (*c->second.fitness < *worst->second.fitness) worst = c;
      if (*worst->second.fitness >= *candidate.fitness) return InsertOutcome::rejected_worse;
      cells.erase(worst);
    }
    cells.emplace(key, std::move(candidate));
    ++island.version;
    return InsertOutcome::added;
  }
  if (*it->second.fitness < *candidate.fitness) {
    it->second = std::move(candidate);
    ++island.version;
    return InsertOutcome::replaced;
  }
  return InsertOutcome::rejected_worse;
}

struct Replacement {
  int island_id = 0;
  GridCoord cell;
  std::string old_id, new_id;
  double old_fitness = 0, new_fitness = 0;
};

struct MigrationReport {
  std::vector<Replacement> replacements;
  std::vector<int> skipped_islands;  // islands whose donor pool was empty

  json to_json() const {
    json reps = json::array();
    for (const auto& r : replacements)
      reps.push_back(json{{"island_id", r.island_id},
                          {"cell", {r.cell.complexity_bin, r.cell.diversity_bin}},
                          {"old_id", r.old_id},
                          {"new_id", r.new_id},
                          {"old_fitness", r.old_fitness},
                          {"new_fitness", r.new_fitness}});
    return json{{"replacements", reps}, {"skipped_islands", skipped_islands}};
  }
};

namespace elites_detail {

// Occupied cells ranked best-first; coordinate order breaks fitness ties.
inline std::vector<std::pair<GridCoord, const Candidate*>> ranked(const Island& island) {
  std::vector<std::pair<GridCoord, const Candidate*>> out;
  out.reserve(island.grid.cells.size());
  for (const auto& [coord, cand] : island.grid.cells) out.emplace_back(coord, &cand);
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return *a.second->fitness > *b.second->fitness;
  });
  return out;
}

}  // namespace elites_detail

// Replace the bottom half of every island's elites with copies of top elites
// pooled from the other islands. Donor pools are taken from the
// pre-migration state of all islands.
inline MigrationReport migrate(std::vector<Island*>& islands, uint64_t seed) {
  if (islands.size() < 2) throw Error("BAD_REQUEST", "migration needs >= 2 islands");
  MigrationReport report;
  auto rng = make_rng(mix_seed({seed, hash_str("migrate")}));

  // pre-migration snapshot of each island's ranked elites
  std::vector<std::vector<Candidate>> snapshot(islands.size());
  for (size_t i = 0; i < islands.size(); ++i) {
    auto ranked = elites_detail::ranked(*islands[i]);
    for (const auto& [coord, cand] : ranked) snapshot[i].push_back(*cand);
  }

  for (size_t i = 0; i < islands.size(); ++i) {
    Island& island = *islands[i];
    auto ranked = elites_detail::ranked(island);
    size_t n = ranked.size();
    size_t bottom = n / 2;
    if (bottom == 0) continue;

    std::vector<const Candidate*> donors;
    for (size_t j = 0; j < islands.size(); ++j) {
      if (j == i) continue;
      size_t m = snapshot[j].size();
      size_t top = (m + 1) / 2;
      for (size_t k = 0; k < top; ++k) donors.push_back(&snapshot[j][k]);
    }
    if (donors.empty()) {
      report.skipped_islands.push_back(island.island_id);
      continue;
    }

    for (size_t r = n - bottom; r < n; ++r) {
      const auto& [coord, old_cand] = ranked[r];
      const Candidate& donor = *donors[rng() % donors.size()];
      Candidate copy = donor;
      copy.id = "mig-" + to_hex(rng());
      copy.parent_id = donor.id;
      report.replacements.push_back(Replacement{island.island_id, coord, old_cand->id, copy.id,
                                                *old_cand->fitness, *copy.fitness});
      island.grid.cells[coord] = std::move(copy);
      ++island.version;
    }
  }
  return report;
}

struct SampleResult {
  Candidate parent;
  std::vector<Candidate> inspirations;  // top-fitness picks first
  uint64_t island_version = 0;
};

// Parent drawn fitness-proportionally; inspirations are the n_good best
// elites plus n_diverse uniform picks, parent excluded, deduplicated by id.
inline SampleResult sample_parent_and_inspirations(const Island& island, int n_good,
                                                   int n_diverse, uint64_t seed) {
  if (island.grid.cells.empty()) throw Error("BAD_REQUEST", "island has no elites");
  auto rng = make_rng(mix_seed({seed, hash_str("sample")}));

  std::vector<const Candidate*> entries;
  for (const auto& [coord, cand] : island.grid.cells) entries.push_back(&cand);

  std::vector<double> weights;
  for (const auto* c : entries) weights.push_back(*c->fitness);
  const Candidate* parent = entries[weighted_index(rng, weights)];

  std::vector<const Candidate*> others;
  for (const auto* c : entries)
    if (c->id != parent->id) others.push_back(c);
  std::vector<const Candidate*> by_fitness = others;
  std::stable_sort(by_fitness.begin(), by_fitness.end(),
                   [](const Candidate* a, const Candidate* b) { return *a->fitness > *b->fitness; });

  SampleResult out;
  out.parent = *parent;
  out.island_version = island.version;
  std::vector<std::string> seen_ids;
  auto push_unique = [&](const Candidate* c) {
    for (const auto& id : seen_ids)
      if (id == c->id) return;
    seen_ids.push_back(c->id);
    out.inspirations.push_back(*c);
  };
  for (int k = 0; k < n_good && k < static_cast<int>(by_fitness.size()); ++k)
    push_unique(by_fitness[static_cast<size_t>(k)]);
  for (int k = 0; k < n_diverse && !others.empty(); ++k)
    push_unique(others[rng() % others.size()]);
  return out;
}

inline json island_to_json(const Island& island) {
  json cells = json::array();
  for (const auto& [coord, cand] : island.grid.cells)
    cells.push_back(json{{"bin", {coord.complexity_bin, coord.diversity_bin}},
                         {"candidate", cand.to_json()}});
  return json{{"island_id", island.island_id},
              {"version", island.version},
              {"grid",
               {{"bins_per_dim", island.grid.config.bins_per_dim},
                {"complexity_lo", island.grid.config.complexity_lo},
                {"complexity_hi", island.grid.config.complexity_hi},
                {"capacity", island.grid.capacity},
                {"cells", cells}}}};
}

inline Island island_from_json(const json& j) {
  Island island;
  island.island_id = require_field<int>(j, "island_id");
  island.version = require_field<uint64_t>(j, "version");
  const json& g = j.at("grid");
  island.grid.config.bins_per_dim = require_field<int>(g, "bins_per_dim");
  island.grid.config.complexity_lo = require_field<double>(g, "complexity_lo");
  island.grid.config.complexity_hi = require_field<double>(g, "complexity_hi");
  island.grid.capacity = g.value("capacity", size_t{0});
  for (const auto& cell : g.at("cells")) {
    auto bin = cell.at("bin");
    GridCoord coord{bin.at(0).get<int>(), bin.at(1).get<int>()};
    island.grid.cells.emplace(coord, Candidate::from_json(cell.at("candidate")));
  }
  return island;
}

// Thread-safe set of islands. Writers serialize per island; migration locks
// every island in ascending id order so concurrent migrations cannot
// deadlock. Readers get value snapshots, which may be stale by design.
class IslandSet {
 public:
  IslandSet(int n_islands, GridConfig cfg, size_t capacity = 0) {
    for (int i = 0; i < n_islands; ++i) {
      auto slot = std::make_unique<Slot>();
      slot->island.island_id = i;
      slot->island.grid.config = cfg;
      slot->island.grid.capacity = capacity;
      slots_.push_back(std::move(slot));
    }
  }

  size_t size() const { return slots_.size(); }

  uint64_t version(size_t i) const {
    std::lock_guard lock(slots_.at(i)->mu);
    return slots_[i]->island.version;
  }

  size_t occupied(size_t i) const {
    std::lock_guard lock(slots_.at(i)->mu);
    return slots_[i]->island.grid.cells.size();
  }

  InsertOutcome insert(size_t i, Candidate c) {
    std::lock_guard lock(slots_.at(i)->mu);
    return r3::insert(slots_[i]->island, std::move(c));
  }

  MigrationReport migrate(uint64_t seed) {
    std::vector<std::unique_lock<std::mutex>> locks;
    std::vector<Island*> islands;
    for (auto& slot : slots_) {  // ascending island_id order
      locks.emplace_back(slot->mu);
      islands.push_back(&slot->island);
    }
    return r3::migrate(islands, seed);
  }

  SampleResult sample(size_t i, int n_good, int n_diverse, uint64_t seed) const {
    std::lock_guard lock(slots_.at(i)->mu);
    return sample_parent_and_inspirations(slots_[i]->island, n_good, n_diverse, seed);
  }

  // Up to max_n elite sources, sampled without replacement; used for the
  // diversity feature of new candidates.
  std::vector<std::string> sample_sources(size_t i, size_t max_n, uint64_t seed) const {
    std::lock_guard lock(slots_.at(i)->mu);
    std::vector<const Candidate*> entries;
    for (const auto& [coord, cand] : slots_[i]->island.grid.cells) entries.push_back(&cand);
    auto rng = make_rng(mix_seed({seed, hash_str("sources")}));
    std::shuffle(entries.begin(), entries.end(), rng);
    std::vector<std::string> out;
    for (size_t k = 0; k < entries.size() && k < max_n; ++k) out.push_back(entries[k]->source);
    return out;
  }

  std::optional<Candidate> best() const {
    std::optional<Candidate> best;
    for (const auto& slot : slots_) {
      std::lock_guard lock(slot->mu);
      for (const auto& [coord, cand] : slot->island.grid.cells)
        if (!best || *cand.fitness > *best->fitness) best = cand;
    }
    return best;
  }

  json to_json() const {
    json islands = json::array();
    for (const auto& slot : slots_) {
      std::lock_guard lock(slot->mu);
      islands.push_back(island_to_json(slot->island));
    }
    return json{{"format", "r3-elites"}, {"version", 1}, {"islands", islands}};
  }

  static IslandSet from_json(const json& j) {
    IslandSet set(0, GridConfig{});
    for (const auto& ij : j.at("islands")) {
      auto slot = std::make_unique<Slot>();
      slot->island = island_from_json(ij);
      set.slots_.push_back(std::move(slot));
    }
    return set;
  }

  void save(const std::filesystem::path& path) const {
    write_file_atomic(path, to_json().dump(2) + "\n");
  }

  static IslandSet load(const std::filesystem::path& path) {
    return from_json(json::parse(read_file(path)));
  }

 private:
  struct Slot {
    Island island;
    mutable std::mutex mu;
  };
  std::vector<std::unique_ptr<Slot>> slots_;
};

}  // namespace r3
