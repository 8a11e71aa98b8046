#include <gtest/gtest.h>

#include <map>
#include <set>

#include "r3/elites.hpp"

using namespace r3;

namespace {

Candidate correct_candidate(const std::string& id, double fitness, size_t complexity = 10,
                            double diversity = 0.5) {
  Candidate c;
  c.id = id;
  c.source = "src-" + id;
  c.features = FeatureVector{complexity, diversity};
  EvalResult e;
  e.correct = true;
  e.median_runtime_s = 1.0 / fitness;
  e.speedup = fitness;
  c.eval = e;
  c.fitness = fitness;
  return c;
}

Candidate incorrect_candidate(const std::string& id) {
  Candidate c;
  c.id = id;
  c.source = "src-" + id;
  c.features = FeatureVector{10, 0.5};
  EvalResult e;
  e.correct = false;
  e.verdict.correct = false;
  c.eval = e;
  return c;
}

GridConfig small_grid(int bins = 10, double hi = 201.0) {
  GridConfig g;
  g.bins_per_dim = bins;
  g.complexity_lo = 1.0;
  g.complexity_hi = hi;
  return g;
}

}  // namespace

TEST(Binning, BoundsAndLinearMapping) {
  GridConfig cfg = small_grid();
  EXPECT_EQ(bin_features(FeatureVector{1, 0.0}, cfg), (GridCoord{0, 0}));
  EXPECT_EQ(bin_features(FeatureVector{201, 1.0}, cfg), (GridCoord{9, 9}));
  EXPECT_EQ(bin_features(FeatureVector{101, 0.55}, cfg), (GridCoord{5, 5}));
  // clamping
  EXPECT_EQ(bin_features(FeatureVector{100000, 2.0}, cfg), (GridCoord{9, 9}));
}

TEST(Insert, AddReplaceRejectRules) {
  Island island;
  island.grid.config = small_grid();

  EXPECT_EQ(insert(island, correct_candidate("a", 1.2)), InsertOutcome::added);
  EXPECT_EQ(island.version, 1u);

  // same cell, lower fitness
  EXPECT_EQ(insert(island, correct_candidate("b", 1.0)), InsertOutcome::rejected_worse);
  EXPECT_EQ(island.version, 1u);

  // tie keeps incumbent
  EXPECT_EQ(insert(island, correct_candidate("c", 1.2)), InsertOutcome::rejected_worse);
  EXPECT_EQ(island.grid.cells.begin()->second.id, "a");
  EXPECT_EQ(island.version, 1u);

  // higher fitness replaces
  EXPECT_EQ(insert(island, correct_candidate("d", 1.5)), InsertOutcome::replaced);
  EXPECT_EQ(island.grid.cells.begin()->second.id, "d");
  EXPECT_EQ(island.version, 2u);
}

TEST(Insert, IncorrectNeverEnters) {
  Island island;
  island.grid.config = small_grid();
  EXPECT_EQ(insert(island, incorrect_candidate("x")), InsertOutcome::rejected_incorrect);
  EXPECT_TRUE(island.grid.cells.empty());
  EXPECT_EQ(island.version, 0u);

  Candidate no_eval;
  no_eval.id = "y";
  no_eval.source = "s";
  EXPECT_EQ(insert(island, no_eval), InsertOutcome::rejected_incorrect);
}

TEST(Insert, CapacityEvictsGlobalWorstOnlyWhenBeaten) {
  Island island;
  island.grid.config = small_grid();
  island.grid.capacity = 2;
  insert(island, correct_candidate("a", 2.0, 10, 0.1));
  insert(island, correct_candidate("b", 1.0, 50, 0.5));
  ASSERT_EQ(island.grid.cells.size(), 2u);

  // newcomer worse than the worst elite: rejected, grid untouched
  EXPECT_EQ(insert(island, correct_candidate("c", 0.5, 90, 0.9)), InsertOutcome::rejected_worse);
  EXPECT_EQ(island.grid.cells.size(), 2u);

  // newcomer beats the worst: worst evicted
  EXPECT_EQ(insert(island, correct_candidate("d", 1.5, 90, 0.9)), InsertOutcome::added);
  EXPECT_EQ(island.grid.cells.size(), 2u);
  std::set<std::string> ids;
  for (const auto& [coord, cand] : island.grid.cells) ids.insert(cand.id);
  EXPECT_TRUE(ids.count("a"));
  EXPECT_TRUE(ids.count("d"));
}

TEST(Migrate, HandDerivedTwoIslandCase) {
  Island a, b;
  a.island_id = 0;
  b.island_id = 1;
  a.grid.config = b.grid.config = small_grid();
  insert(a, correct_candidate("a-hi", 2.0, 10, 0.1));
  insert(a, correct_candidate("a-lo", 1.0, 50, 0.5));
  insert(b, correct_candidate("b-hi", 3.0, 10, 0.1));
  insert(b, correct_candidate("b-lo", 0.5, 50, 0.5));

  std::vector<Island*> islands{&a, &b};
  MigrationReport rep = migrate(islands, 42);

  ASSERT_EQ(rep.replacements.size(), 2u);
  EXPECT_TRUE(rep.skipped_islands.empty());

  // island A's bottom (1.0) must now hold a copy of B's 3.0 elite
  std::map<std::string, double> a_fitness;
  for (const auto& [coord, cand] : a.grid.cells) a_fitness[cand.source] = *cand.fitness;
  EXPECT_TRUE(a_fitness.count("src-b-hi"));
  EXPECT_DOUBLE_EQ(a_fitness["src-b-hi"], 3.0);
  EXPECT_TRUE(a_fitness.count("src-a-hi"));  // best elite untouched

  std::map<std::string, double> b_fitness;
  for (const auto& [coord, cand] : b.grid.cells) b_fitness[cand.source] = *cand.fitness;
  EXPECT_TRUE(b_fitness.count("src-a-hi"));
  EXPECT_DOUBLE_EQ(b_fitness["src-a-hi"], 2.0);
  EXPECT_TRUE(b_fitness.count("src-b-hi"));

  // copies carry fresh ids and preserved occupancy
  EXPECT_EQ(a.grid.cells.size(), 2u);
  EXPECT_EQ(b.grid.cells.size(), 2u);
  for (const auto& r : rep.replacements) EXPECT_NE(r.old_id, r.new_id);
}

TEST(Migrate, EmptyDonorPoolSkipsIsland) {
  Island a, b;
  a.island_id = 0;
  b.island_id = 1;
  a.grid.config = b.grid.config = small_grid();
  insert(a, correct_candidate("a1", 2.0, 10, 0.1));
  insert(a, correct_candidate("a2", 1.0, 50, 0.5));
  // b stays empty: a has no donors, b has no targets
  std::vector<Island*> islands{&a, &b};
  MigrationReport rep = migrate(islands, 7);
  EXPECT_TRUE(rep.replacements.empty());
  ASSERT_EQ(rep.skipped_islands.size(), 1u);
  EXPECT_EQ(rep.skipped_islands[0], 0);
  EXPECT_EQ(a.grid.cells.size(), 2u);  // unchanged
}

TEST(Migrate, SingleEliteIslandsHaveEmptyBottomHalf) {
  std::vector<Island> islands(4);
  std::vector<Island*> ptrs;
  for (int i = 0; i < 4; ++i) {
    islands[static_cast<size_t>(i)].island_id = i;
    islands[static_cast<size_t>(i)].grid.config = small_grid();
    insert(islands[static_cast<size_t>(i)],
           correct_candidate("k" + std::to_string(i), 1.0 + i, 10, 0.1));
    ptrs.push_back(&islands[static_cast<size_t>(i)]);
  }
  MigrationReport rep = migrate(ptrs, 3);
  EXPECT_TRUE(rep.replacements.empty());
  EXPECT_TRUE(rep.skipped_islands.empty());
}

TEST(Migrate, PreservesCountsAndBestElite) {
  auto rng = make_rng(15);
  for (int round = 0; round < 50; ++round) {
    std::vector<Island> islands(2 + rng() % 3);
    std::vector<Island*> ptrs;
    for (size_t i = 0; i < islands.size(); ++i) {
      islands[i].island_id = static_cast<int>(i);
      islands[i].grid.config = small_grid();
      int n = static_cast<int>(rng() % 8);
      for (int k = 0; k < n; ++k)
        insert(islands[i],
               correct_candidate("r" + std::to_string(round) + "-" + std::to_string(i) + "-" +
                                     std::to_string(k),
                                 0.1 + uniform01(rng) * 5.0, 1 + rng() % 200, uniform01(rng)));
      ptrs.push_back(&islands[i]);
    }
    std::vector<size_t> counts;
    std::vector<double> best;
    for (const auto& isl : islands) {
      counts.push_back(isl.grid.cells.size());
      double b = 0;
      for (const auto& [coord, cand] : isl.grid.cells) b = std::max(b, *cand.fitness);
      best.push_back(b);
    }
    migrate(ptrs, rng());
    for (size_t i = 0; i < islands.size(); ++i) {
      EXPECT_EQ(islands[i].grid.cells.size(), counts[i]);
      double b = 0;
      for (const auto& [coord, cand] : islands[i].grid.cells) b = std::max(b, *cand.fitness);
      EXPECT_GE(b + 1e-12, best[i]);  // own best never evicted (may only improve)
    }
  }
}

TEST(Sample, SingleEliteIslandYieldsParentOnly) {
  Island island;
  island.grid.config = small_grid();
  insert(island, correct_candidate("only", 1.0));
  SampleResult s = sample_parent_and_inspirations(island, 3, 2, 5);
  EXPECT_EQ(s.parent.id, "only");
  EXPECT_TRUE(s.inspirations.empty());
}

TEST(Sample, TopKExcludingParentInFitnessOrder) {
  Island island;
  island.grid.config = small_grid();
  insert(island, correct_candidate("A", 3.0, 10, 0.1));
  insert(island, correct_candidate("B", 2.0, 50, 0.5));
  insert(island, correct_candidate("C", 1.0, 90, 0.9));

  // find a seed whose parent draw lands on C, then check top-2
  for (uint64_t seed = 0; seed < 200; ++seed) {
    SampleResult s = sample_parent_and_inspirations(island, 2, 0, seed);
    if (s.parent.id != "C") continue;
    ASSERT_EQ(s.inspirations.size(), 2u);
    EXPECT_EQ(s.inspirations[0].id, "A");
    EXPECT_EQ(s.inspirations[1].id, "B");
    return;
  }
  FAIL() << "no seed selected C as parent";
}

TEST(Sample, DeterministicForSeedAndVersion) {
  Island island;
  island.grid.config = small_grid();
  for (int i = 0; i < 6; ++i)
    insert(island, correct_candidate("c" + std::to_string(i), 1.0 + i * 0.3, 1 + i * 30,
                                     0.15 * i));
  SampleResult a = sample_parent_and_inspirations(island, 2, 2, 77);
  SampleResult b = sample_parent_and_inspirations(island, 2, 2, 77);
  EXPECT_EQ(a.parent.id, b.parent.id);
  ASSERT_EQ(a.inspirations.size(), b.inspirations.size());
  for (size_t i = 0; i < a.inspirations.size(); ++i)
    EXPECT_EQ(a.inspirations[i].id, b.inspirations[i].id);
  EXPECT_EQ(a.island_version, island.version);
}

TEST(Sample, InspirationsDeduplicatedAndExcludeParent) {
  Island island;
  island.grid.config = small_grid();
  for (int i = 0; i < 4; ++i)
    insert(island, correct_candidate("c" + std::to_string(i), 1.0 + i, 1 + i * 40, 0.2 * i));
  for (uint64_t seed = 0; seed < 50; ++seed) {
    SampleResult s = sample_parent_and_inspirations(island, 2, 3, seed);
    std::set<std::string> seen;
    for (const auto& insp : s.inspirations) {
      EXPECT_NE(insp.id, s.parent.id);
      EXPECT_TRUE(seen.insert(insp.id).second) << "duplicate inspiration";
    }
  }
}

// Brute-force reference: after any insert sequence every occupied cell holds
// the max-fitness correct candidate ever binned there.
TEST(Invariants, InsertMatchesBruteForceReference) {
  auto rng = make_rng(31);
  for (int round = 0; round < 300; ++round) {
    GridConfig cfg = small_grid(4, 41.0);
    Island island;
    island.grid.config = cfg;
    std::map<GridCoord, double> reference;

    int ops = 1 + static_cast<int>(rng() % 30);
    for (int i = 0; i < ops; ++i) {
      bool correct = rng() % 4 != 0;
      size_t complexity = 1 + rng() % 60;
      double diversity = uniform01(rng);
      if (!correct) {
        Candidate c = incorrect_candidate("i" + std::to_string(i));
        c.features = FeatureVector{complexity, diversity};
        EXPECT_EQ(insert(island, std::move(c)), InsertOutcome::rejected_incorrect);
        continue;
      }
      double fitness = 0.1 + uniform01(rng) * 3;
      Candidate c = correct_candidate("c" + std::to_string(i), fitness, complexity, diversity);
      GridCoord coord = bin_features(c.features, cfg);
      insert(island, std::move(c));
      auto it = reference.find(coord);
      if (it == reference.end() || fitness > it->second) reference[coord] = fitness;
    }

    ASSERT_EQ(island.grid.cells.size(), reference.size());
    for (const auto& [coord, cand] : island.grid.cells) {
      ASSERT_TRUE(reference.count(coord));
      EXPECT_DOUBLE_EQ(*cand.fitness, reference[coord]);
    }
  }
}

TEST(IslandSet, JsonRoundTripPreservesEverything) {
  IslandSet set(3, small_grid(), 20);
  auto rng = make_rng(8);
  for (int i = 0; i < 12; ++i)
    set.insert(rng() % 3, correct_candidate("c" + std::to_string(i), 0.5 + uniform01(rng),
                                            1 + rng() % 200, uniform01(rng)));
  set.migrate(4);
  json j = set.to_json();
  IslandSet back = IslandSet::from_json(j);
  EXPECT_EQ(back.to_json(), j);
  EXPECT_EQ(back.size(), 3u);
  for (size_t i = 0; i < 3; ++i) EXPECT_EQ(back.version(i), set.version(i));
}

TEST(IslandSet, CheckpointSaveLoad) {
  auto dir = std::filesystem::temp_directory_path() / "r3-elites-ckpt";
  std::filesystem::create_directories(dir);
  IslandSet set(2, small_grid());
  set.insert(0, correct_candidate("a", 1.5));
  set.insert(1, correct_candidate("b", 2.5, 100, 0.8));
  set.save(dir / "db.json");
  IslandSet back = IslandSet::load(dir / "db.json");
  EXPECT_EQ(back.to_json(), set.to_json());
  std::filesystem::remove_all(dir);
}

TEST(IslandSet, FixedSeedTraceIsReproducible) {
  auto run = [](uint64_t seed) {
    IslandSet set(2, small_grid());
    auto rng = make_rng(seed);
    json trace = json::array();
    for (int i = 0; i < 40; ++i) {
      auto c = correct_candidate("c" + std::to_string(i), 0.1 + uniform01(rng) * 2,
                                 1 + rng() % 200, uniform01(rng));
      trace.push_back(to_string(set.insert(rng() % 2, std::move(c))));
      if (i % 10 == 9) trace.push_back(set.migrate(rng()).to_json());
      if (set.occupied(0) > 0) {
        SampleResult s = set.sample(0, 2, 1, rng());
        trace.push_back(s.parent.id);
      }
    }
    trace.push_back(set.to_json());
    return trace.dump();
  };
  EXPECT_EQ(run(99), run(99));
  EXPECT_NE(run(99), run(100));
}
