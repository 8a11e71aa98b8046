#pragma once

// Mutation-prompt construction: fixed static prefix first, then dynamic
// inspiration/parent blocks. Sampled inspiration codes are reordered to
// extend the longest prefix shared with a recent prompt ordering, which is
// what makes inference-server prefix caches hit across generations.

#include <deque>
#include <string>
#include <vector>

#include "r3/elites.hpp"
#include "r3/util.hpp"

namespace r3 {

// Bounded FIFO of recent inspiration orderings (candidate-id lists).
struct OrderingHistory {
  size_t capacity = 32;
  std::deque<std::vector<std::string>> recent;  // back = newest

  void push(std::vector<std::string> ordering) {
    recent.push_back(std::move(ordering));
    while (recent.size() > capacity) recent.pop_front();
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& o : recent) arr.push_back(o);
    return json{{"capacity", capacity}, {"recent", arr}};
  }

  static OrderingHistory from_json(const json& j) {
    OrderingHistory h;
    h.capacity = j.value("capacity", size_t{32});
    for (const auto& o : j.at("recent")) h.recent.push_back(o.get<std::vector<std::string>>());
    return h;
  }
};

inline size_t shared_prefix_len(std::string_view a, std::string_view b) {
  size_t n = std::min(a.size(), b.size());
  size_t i = 0;
  while (i < n && a[i] == b[i]) ++i;
  return i;
}

// For each recent ordering H, find the longest prefix H[1:l] whose elements
// are all members of E; pick the H with maximal l (ties: most recent), put
// that prefix first and append the remaining elements of E in their original
// sampled order. Always a permutation of E.
inline std::vector<std::string> reorder_inspirations(const std::vector<std::string>& sampled,
                                                     const OrderingHistory& history) {
  size_t best_len = 0;
  const std::vector<std::string>* best = nullptr;
  for (auto it = history.recent.rbegin(); it != history.recent.rend(); ++it) {
    size_t len = 0;
    for (const auto& id : *it) {
      bool member = false;
      for (const auto& e : sampled)
        if (e == id) {
          member = true;
          break;
        }
      if (!member) break;
      ++len;
    }
    if (len > best_len) {  // newest-first scan makes ties favor recency
      best_len = len;
      best = &*it;
    }
  }
  if (best_len == 0) return sampled;

  std::vector<std::string> out(best->begin(), best->begin() + static_cast<long>(best_len));
  for (const auto& e : sampled) {
    bool in_prefix = false;
    for (const auto& id : out)
      if (id == e) {
        in_prefix = true;
        break;
      }
    if (!in_prefix) out.push_back(e);
  }
  return out;
}

struct PromptParts {
  std::string static_prefix;
  std::string parent_block;
  std::vector<std::pair<std::string, std::string>> inspiration_blocks;  // (id, text)
  std::string rendered;

  // carried for downstream engines (the mock mutator edits the parent)
  std::string parent_id;
  std::string parent_source;
};

class PromptTooLargeError : public Error {
 public:
  PromptTooLargeError(size_t estimated, size_t budget)
      : Error("PROMPT_TOO_LARGE", "estimated " + std::to_string(estimated) +
                                      " tokens exceeds budget " + std::to_string(budget)) {}
};

inline const std::string& default_prompt_template() {
  static const std::string tmpl =
      "You are a GPU kernel optimization assistant. Improve the runtime of the\n"
      "current kernel while keeping its observable results identical.\n"
      "\n"
      "Task context:\n"
      "{{TASK}}\n"
      "\n"
      "Rules:\n"
      "- Propose one focused optimization per reply.\n"
      "- Reply with one or more search/replace hunks, each formatted exactly as:\n"
      "<<<<SEARCH\n"
      "(exact lines copied from the current kernel)\n"
      "====\n"
      "(replacement lines)\n"
      ">>>>REPLACE\n"
      "- As a fallback you may reply with a single fenced code block containing\n"
      "  the complete rewritten kernel.\n"
      "\n"
      "{{INSPIRATIONS}}"
      "{{PARENT}}"
      "Reply with the smallest diff that implements your optimization.\n";
  return tmpl;
}

struct TaskConfig {
  std::string task_text;
  std::string template_text = default_prompt_template();
  size_t token_budget = 48000;  // estimate: ceil(bytes / 4)
  bool prefix_aware = true;
};

namespace prompt_detail {

struct TemplateLayout {
  std::string static_part;   // up to the inspirations slot, task filled in
  std::string middle_part;   // between inspirations and parent slots
  std::string tail_part;     // final instruction after the parent slot
};

inline TemplateLayout split_template(const TaskConfig& cfg) {
  const std::string& t = cfg.template_text;
  size_t ip = t.find("{{INSPIRATIONS}}");
  size_t pp = t.find("{{PARENT}}");
  if (ip == std::string::npos || pp == std::string::npos || pp < ip)
    throw Error("BAD_TEMPLATE",
                "template must contain {{INSPIRATIONS}} followed by {{PARENT}}");
  size_t tp = t.find("{{TASK}}");
  if (tp != std::string::npos && tp > ip)
    throw Error("BAD_TEMPLATE", "{{TASK}} must precede {{INSPIRATIONS}}");

  TemplateLayout lay;
  lay.static_part = t.substr(0, ip);
  if (tp != std::string::npos) {
    size_t local = lay.static_part.find("{{TASK}}");
    lay.static_part = lay.static_part.substr(0, local) + cfg.task_text +
                      lay.static_part.substr(local + 8);
  }
  lay.middle_part = t.substr(ip + 16, pp - (ip + 16));
  lay.tail_part = t.substr(pp + 10);
  return lay;
}

inline std::string code_block(const std::string& header, const std::string& source) {
  std::string out = header;
  out += "~~~\n";
  out += source;
  if (source.empty() || source.back() != '\n') out += "\n";
  out += "~~~\n\n";
  return out;
}

}  // namespace prompt_detail

// Render the full mutation prompt. The chosen inspiration ordering is pushed
// onto `history` only after the size check passes, so a PromptTooLarge retry
// does not pollute the ordering record.
inline PromptParts build_prompt(const Candidate& parent, const std::vector<Candidate>& inspirations,
                                OrderingHistory& history, const TaskConfig& cfg) {
  if (parent.source.empty()) throw Error("BAD_REQUEST", "parent source is empty");
  auto layout = prompt_detail::split_template(cfg);

  std::vector<std::string> sampled_ids;
  for (const auto& c : inspirations) sampled_ids.push_back(c.id);
  std::vector<std::string> order =
      cfg.prefix_aware ? reorder_inspirations(sampled_ids, history) : sampled_ids;

  PromptParts parts;
  parts.static_prefix = layout.static_part;
  parts.parent_id = parent.id;
  parts.parent_source = parent.source;

  for (const auto& id : order) {
    const Candidate* c = nullptr;
    for (const auto& cand : inspirations)
      if (cand.id == id) c = &cand;
    std::string header = "### Inspiration " + c->id + " (fitness " +
                         (c->fitness ? format_double(*c->fitness) : "unknown") + ")\n";
    parts.inspiration_blocks.emplace_back(id, prompt_detail::code_block(header, c->source));
  }

  std::string parent_header = "### Current kernel " + parent.id + " (fitness " +
                              (parent.fitness ? format_double(*parent.fitness) : "unknown") +
                              ")\n";
  parts.parent_block =
      layout.middle_part + prompt_detail::code_block(parent_header, parent.source);

  parts.rendered = parts.static_prefix;
  for (const auto& [id, block] : parts.inspiration_blocks) parts.rendered += block;
  parts.rendered += parts.parent_block;
  parts.rendered += layout.tail_part;

  size_t estimated = (parts.rendered.size() + 3) / 4;
  if (estimated > cfg.token_budget) throw PromptTooLargeError(estimated, cfg.token_budget);

  if (cfg.prefix_aware) history.push(order);
  return parts;
}

}  // namespace r3
