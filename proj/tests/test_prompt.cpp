#include <gtest/gtest.h>

#include <set>

#include "r3/prompt.hpp"

using namespace r3;

namespace {

Candidate cand(const std::string& id, const std::string& source, double fitness = 1.0) {
  Candidate c;
  c.id = id;
  c.source = source;
  c.fitness = fitness;
  EvalResult e;
  e.correct = true;
  e.speedup = fitness;
  c.eval = e;
  return c;
}

std::vector<std::string> ids(std::initializer_list<const char*> xs) {
  return {xs.begin(), xs.end()};
}

}  // namespace

TEST(Reorder, NoHistoryKeepsSampledOrder) {
  OrderingHistory h;
  EXPECT_EQ(reorder_inspirations(ids({"a", "b", "c"}), h), ids({"a", "b", "c"}));
}

TEST(Reorder, HandTracedMatchingRule) {
  OrderingHistory h;
  h.push(ids({"a", "c", "x"}));
  h.push(ids({"b"}));
  // H=[a,c,x] matches prefix length 2 (a,c in E; x not); H=[b] matches 0.
  EXPECT_EQ(reorder_inspirations(ids({"c", "a", "d"}), h), ids({"a", "c", "d"}));
}

TEST(Reorder, TieBreakPrefersMostRecent) {
  OrderingHistory h;
  h.push(ids({"p", "q"}));
  h.push(ids({"q", "p"}));  // newer
  EXPECT_EQ(reorder_inspirations(ids({"p", "q"}), h), ids({"q", "p"}));

  OrderingHistory h2;
  h2.push(ids({"q", "p"}));
  h2.push(ids({"p", "q"}));  // newer
  EXPECT_EQ(reorder_inspirations(ids({"p", "q"}), h2), ids({"p", "q"}));
}

TEST(Reorder, OutputIsAlwaysAPermutation) {
  auto rng = make_rng(12);
  OrderingHistory history;
  for (int round = 0; round < 2000; ++round) {
    std::set<std::string> pick;
    size_t n = rng() % 6;
    while (pick.size() < n) pick.insert("id" + std::to_string(rng() % 12));
    std::vector<std::string> sampled(pick.begin(), pick.end());
    std::shuffle(sampled.begin(), sampled.end(), rng);

    auto out = reorder_inspirations(sampled, history);
    std::multiset<std::string> a(sampled.begin(), sampled.end());
    std::multiset<std::string> b(out.begin(), out.end());
    ASSERT_EQ(a, b) << "not a permutation";
    history.push(out);
  }
}

TEST(Reorder, SelectedPrefixComesFromBestHistory) {
  OrderingHistory h;
  h.push(ids({"a", "b", "c", "zz"}));
  h.push(ids({"c", "b"}));
  // first ordering matches 3 elements, second only 2
  auto out = reorder_inspirations(ids({"b", "c", "a"}), h);
  EXPECT_EQ(out, ids({"a", "b", "c"}));
}

TEST(History, CapacityEvictsOldest) {
  OrderingHistory h;
  h.capacity = 3;
  for (int i = 0; i < 5; ++i) h.push(ids({("x" + std::to_string(i)).c_str()}));
  EXPECT_EQ(h.recent.size(), 3u);
  EXPECT_EQ(h.recent.front()[0], "x2");
  EXPECT_EQ(h.recent.back()[0], "x4");
}

TEST(SharedPrefix, ByteSemantics) {
  EXPECT_EQ(shared_prefix_len("abc", "abd"), 2u);
  EXPECT_EQ(shared_prefix_len("", "x"), 0u);
  std::string big(1024, 'k');
  EXPECT_EQ(shared_prefix_len(big, big), 1024u);
}

TEST(BuildPrompt, StaticPrefixThenParent) {
  OrderingHistory h;
  TaskConfig cfg;
  cfg.task_text = "make it fast";
  PromptParts parts = build_prompt(cand("p1", "line1\nline2\n"), {}, h, cfg);
  EXPECT_TRUE(parts.rendered.rfind(parts.static_prefix, 0) == 0);
  EXPECT_NE(parts.static_prefix.find("make it fast"), std::string::npos);
  EXPECT_NE(parts.rendered.find("line1\nline2"), std::string::npos);
  EXPECT_TRUE(parts.inspiration_blocks.empty());
  // parent appears after the full static prefix
  EXPECT_GE(parts.rendered.find("Current kernel p1"), parts.static_prefix.size());
}

TEST(BuildPrompt, ByteIdenticalForIdenticalInputs) {
  TaskConfig cfg;
  OrderingHistory h1, h2;
  std::vector<Candidate> insp{cand("i1", "alpha\n", 2.0), cand("i2", "beta\n", 1.5)};
  PromptParts a = build_prompt(cand("p", "body\n"), insp, h1, cfg);
  PromptParts b = build_prompt(cand("p", "body\n"), insp, h2, cfg);
  EXPECT_EQ(a.rendered, b.rendered);
}

TEST(BuildPrompt, StaticPrefixIndependentOfDynamicContent) {
  TaskConfig cfg;
  OrderingHistory h;
  PromptParts a = build_prompt(cand("p1", "one\n"), {cand("i", "x\n", 1.0)}, h, cfg);
  PromptParts b = build_prompt(cand("p2", "totally different\n"), {}, h, cfg);
  EXPECT_EQ(a.static_prefix, b.static_prefix);
  EXPECT_GE(shared_prefix_len(a.rendered, b.rendered), a.static_prefix.size());
}

TEST(BuildPrompt, ReorderingExtendsSharedPrefixAcrossCalls) {
  TaskConfig cfg;
  OrderingHistory history;
  std::string filler(300, 'f');
  std::vector<Candidate> first{cand("a", "aaa\n" + filler, 2.0),
                               cand("b", "bbb\n" + filler, 1.5),
                               cand("c", "ccc\n" + filler, 1.2)};
  PromptParts p1 = build_prompt(cand("p", "body\n"), first, history, cfg);

  // second sample: same candidates, different sampled order, one new
  std::vector<Candidate> second{cand("c", "ccc\n" + filler, 1.2),
                                cand("a", "aaa\n" + filler, 2.0),
                                cand("b", "bbb\n" + filler, 1.5),
                                cand("d", "ddd\n" + filler, 1.1)};
  TaskConfig plain = cfg;
  plain.prefix_aware = false;
  OrderingHistory scratch;
  PromptParts baseline = build_prompt(cand("p", "body\n"), second, scratch, plain);
  PromptParts aware = build_prompt(cand("p", "body\n"), second, history, cfg);

  size_t baseline_shared = shared_prefix_len(p1.rendered, baseline.rendered);
  size_t aware_shared = shared_prefix_len(p1.rendered, aware.rendered);
  EXPECT_GT(aware_shared, baseline_shared);
  // the prefix-aware prompt starts with the previous ordering [a, b, c]
  ASSERT_EQ(aware.inspiration_blocks.size(), 4u);
  EXPECT_EQ(aware.inspiration_blocks[0].first, "a");
  EXPECT_EQ(aware.inspiration_blocks[1].first, "b");
  EXPECT_EQ(aware.inspiration_blocks[2].first, "c");
  EXPECT_EQ(aware.inspiration_blocks[3].first, "d");
}

TEST(BuildPrompt, TooLargeThrowsAndLeavesHistoryUntouched) {
  TaskConfig cfg;
  cfg.token_budget = 64;  // tiny
  OrderingHistory h;
  std::vector<Candidate> insp{cand("i", std::string(4096, 'z'), 1.0)};
  EXPECT_THROW(build_prompt(cand("p", "b\n"), insp, h, cfg), PromptTooLargeError);
  EXPECT_TRUE(h.recent.empty());
}

TEST(BuildPrompt, AppendsChosenOrderingToHistory) {
  TaskConfig cfg;
  OrderingHistory h;
  std::vector<Candidate> insp{cand("i2", "x\n", 1.0), cand("i1", "y\n", 2.0)};
  build_prompt(cand("p", "b\n"), insp, h, cfg);
  ASSERT_EQ(h.recent.size(), 1u);
  EXPECT_EQ(h.recent.back(), ids({"i2", "i1"}));
}

TEST(BuildPrompt, TemplateValidation) {
  TaskConfig bad;
  bad.template_text = "no placeholders";
  OrderingHistory h;
  EXPECT_THROW(build_prompt(cand("p", "b\n"), {}, h, bad), Error);

  TaskConfig reversed;
  reversed.template_text = "{{PARENT}}{{INSPIRATIONS}}";
  EXPECT_THROW(build_prompt(cand("p", "b\n"), {}, h, reversed), Error);

  TaskConfig task_late;
  task_late.template_text = "{{INSPIRATIONS}}{{TASK}}{{PARENT}}";
  EXPECT_THROW(build_prompt(cand("p", "b\n"), {}, h, task_late), Error);

  TaskConfig custom;
  custom.template_text = "intro {{TASK}} rules\n{{INSPIRATIONS}}now the kernel:\n{{PARENT}}go\n";
  custom.task_text = "T";
  PromptParts parts = build_prompt(cand("p", "b\n"), {}, h, custom);
  EXPECT_EQ(parts.static_prefix, "intro T rules\n");
  EXPECT_TRUE(parts.rendered.rfind("go\n") == parts.rendered.size() - 3);
}

TEST(BuildPrompt, EmptyParentRejected) {
  TaskConfig cfg;
  OrderingHistory h;
  EXPECT_THROW(build_prompt(cand("p", ""), {}, h, cfg), Error);
}
