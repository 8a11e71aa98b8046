#pragma once

// Candidate generation: chat-completion ensemble client with retry/backoff,
// a deterministic rule-based mock, and the search/replace diff engine that
// applies model output to parent sources.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "r3/kernel_dsl.hpp"
#include "r3/prompt.hpp"
#include "r3/util.hpp"

namespace r3 {

struct ModelSpec {
  std::string name;
  std::string endpoint;  // "http://..." or "mock:"
  double base_probability = 1.0;
  double latency_prior_s = 10.0;
  int max_output_tokens = 8192;
  std::string api_key_env;

  json to_json() const {
    return json{{"name", name},
                {"endpoint", endpoint},
                {"base_probability", base_probability},
                {"latency_prior_s", latency_prior_s},
                {"max_output_tokens", max_output_tokens},
                {"api_key_env", api_key_env}};
  }

  static ModelSpec from_json(const json& j) {
    ModelSpec m;
    m.name = require_field<std::string>(j, "name");
    m.endpoint = require_field<std::string>(j, "endpoint");
    m.base_probability = require_field<double>(j, "base_probability");
    m.latency_prior_s = j.value("latency_prior_s", 10.0);
    m.max_output_tokens = j.value("max_output_tokens", 8192);
    m.api_key_env = j.value("api_key_env", std::string{});
    return m;
  }
};

inline void validate_ensemble(const std::vector<ModelSpec>& ensemble) {
  if (ensemble.empty()) throw Error("BAD_REQUEST", "ensemble is empty");
  double total = 0;
  for (const auto& m : ensemble) {
    if (m.base_probability < 0 || m.base_probability > 1)
      throw Error("BAD_REQUEST", "base probability out of [0,1] for " + m.name);
    total += m.base_probability;
  }
  if (std::fabs(total - 1.0) > 1e-9)
    throw Error("BAD_REQUEST", "ensemble probabilities sum to " + format_double(total, "%.12g"));
}

// ---------------------------------------------------------------------------
// Diff engine

struct DiffHunk {
  std::string search;
  std::string replace;
};

struct Diff {
  std::vector<DiffHunk> hunks;
  std::optional<std::string> full_source;  // single fenced block fallback
};

class MalformedDiffError : public Error {
 public:
  explicit MalformedDiffError(const std::string& msg) : Error("MALFORMED_DIFF", msg) {}
};
class AmbiguousMatchError : public Error {
 public:
  explicit AmbiguousMatchError(const std::string& msg) : Error("AMBIGUOUS_MATCH", msg) {}
};
class NoMatchError : public Error {
 public:
  explicit NoMatchError(const std::string& msg) : Error("NO_MATCH", msg) {}
};

// Hunks are delimited by literal `<<<<SEARCH`, `====`, `>>>>REPLACE` marker
// lines; anything outside hunks is ignored. With no hunks at all, a single
// fenced code block is taken as a full-source replacement.
inline Diff parse_diff(const std::string& raw_output) {
  Diff diff;
  auto lines = split_lines(raw_output);

  enum class State { outside, in_search, in_replace };
  State state = State::outside;
  std::vector<std::string> search, replace;
  for (const auto& raw_line : lines) {
    std::string line = rstrip(raw_line);
    if (line == "<<<<SEARCH") {
      if (state != State::outside) throw MalformedDiffError("nested <<<<SEARCH");
      state = State::in_search;
      search.clear();
      replace.clear();
      continue;
    }
    if (line == "====" && state == State::in_search) {
      state = State::in_replace;
      continue;
    }
    if (line == ">>>>REPLACE") {
      if (state == State::in_search) throw MalformedDiffError("missing ==== separator");
      if (state == State::outside) continue;  // stray close marker is plain text
      std::string s, r;
      for (size_t i = 0; i < search.size(); ++i) s += (i ? "\n" : "") + search[i];
      for (size_t i = 0; i < replace.size(); ++i) r += (i ? "\n" : "") + replace[i];
      if (s.empty()) throw MalformedDiffError("empty search block");
      diff.hunks.push_back(DiffHunk{s, r});
      state = State::outside;
      continue;
    }
    if (state == State::in_search)
      search.push_back(raw_line);
    else if (state == State::in_replace)
      replace.push_back(raw_line);
  }
  if (state != State::outside) throw MalformedDiffError("unterminated hunk");
  if (!diff.hunks.empty()) return diff;

  // fenced-block fallback
  std::vector<std::string> block;
  int fences = 0;
  bool in_block = false, have_block = false;
  for (const auto& raw_line : lines) {
    if (strip(raw_line).rfind("```", 0) == 0) {
      ++fences;
      if (!in_block) {
        if (have_block) throw MalformedDiffError("multiple fenced code blocks");
        in_block = true;
      } else {
        in_block = false;
        have_block = true;
      }
      continue;
    }
    if (in_block) block.push_back(raw_line);
  }
  if (in_block) throw MalformedDiffError("unterminated fenced code block");
  if (!have_block) throw MalformedDiffError("no hunks and no fenced code block");
  std::string full;
  for (const auto& l : block) full += l + "\n";
  diff.full_source = full;
  return diff;
}

// Hunks applied in order, each search matching exactly once; all-or-nothing.
inline std::string apply_diff(const std::string& parent_source, const Diff& diff) {
  if (diff.full_source) return *diff.full_source;
  std::string result = parent_source;
  for (const auto& hunk : diff.hunks) {
    size_t first = result.find(hunk.search);
    if (first == std::string::npos) throw NoMatchError("search block not found");
    if (result.find(hunk.search, first + 1) != std::string::npos)
      throw AmbiguousMatchError("search block occurs more than once");
    result = result.substr(0, first) + hunk.replace + result.substr(first + hunk.search.size());
  }
  return result;
}

inline std::string render_diff(const Diff& diff) {
  std::string out;
  for (const auto& h : diff.hunks)
    out += "<<<<SEARCH\n" + h.search + "\n====\n" + h.replace + "\n>>>>REPLACE\n";
  return out;
}

// ---------------------------------------------------------------------------
// Mock mutation over the sim DSL

// One seeded legal edit: change a feature value, add a missing feature, or
// remove a feature line. Output always parses under the DSL.
inline std::string mock_mutate(const std::string& parent_source,
                               const std::vector<FeatureDef>& defs, uint64_t seed) {
  if (defs.empty()) throw Error("BAD_REQUEST", "mock_mutate needs feature definitions");
  auto rng = make_rng(mix_seed({seed, hash_str(parent_source), hash_str("mock-mutate")}));
  auto lines = split_lines(parent_source);

  struct AssignLine {
    size_t line_index;
    const FeatureDef* def;
    std::string value;
  };
  std::vector<AssignLine> assigns;
  std::vector<const FeatureDef*> absent;
  {
    std::map<std::string, bool> present;
    for (size_t i = 0; i < lines.size(); ++i) {
      std::string name, value;
      if (!dsl_detail::match_assignment(lines[i], name, value)) continue;
      for (const auto& d : defs)
        if (d.name == name) {
          assigns.push_back({i, &d, value});
          present[name] = true;
        }
    }
    for (const auto& d : defs)
      if (!present.count(d.name)) absent.push_back(&d);
  }

  enum class Edit { change, add, remove };
  std::vector<Edit> legal;
  for (const auto& a : assigns)
    if (a.def->values.size() > 1) {
      legal.push_back(Edit::change);
      break;
    }
  if (!absent.empty()) legal.push_back(Edit::add);
  if (!assigns.empty()) legal.push_back(Edit::remove);
  if (legal.empty()) return parent_source;  // single-value features only; nothing to edit

  Edit edit = legal[rng() % legal.size()];
  switch (edit) {
    case Edit::change: {
      std::vector<const AssignLine*> editable;
      for (const auto& a : assigns)
        if (a.def->values.size() > 1) editable.push_back(&a);
      const AssignLine& a = *editable[rng() % editable.size()];
      std::vector<std::string> options;
      for (const auto& v : a.def->values)
        if (v != a.value) options.push_back(v);
      lines[a.line_index] = a.def->name + "=" + options[rng() % options.size()] + ";";
      break;
    }
    case Edit::add: {
      const FeatureDef& d = *absent[rng() % absent.size()];
      std::string value = d.values[rng() % d.values.size()];
      size_t at = assigns.empty() ? 0 : assigns.back().line_index + 1;
      lines.insert(lines.begin() + static_cast<long>(at), d.name + "=" + value + ";");
      break;
    }
    case Edit::remove: {
      const AssignLine& a = assigns[rng() % assigns.size()];
      lines.erase(lines.begin() + static_cast<long>(a.line_index));
      break;
    }
  }

  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Generation

struct GenerationResult {
  std::string raw_output;
  double latency_s = 0.0;
};

struct GenerateOptions {
  double timeout_s = 120.0;
  uint64_t seed = 0;  // consumed by the mock engine only
};

class GenerationTimeoutError : public Error {
 public:
  explicit GenerationTimeoutError(const std::string& msg) : Error("GENERATION_TIMEOUT", msg) {}
};
class EndpointError : public Error {
 public:
  explicit EndpointError(const std::string& msg) : Error("ENDPOINT_ERROR", msg) {}
};

class Generator {
 public:
  virtual ~Generator() = default;
  virtual GenerationResult generate(const PromptParts& prompt, const ModelSpec& model,
                                    const GenerateOptions& opts) = 0;
};

// Caps simultaneous in-flight generations per model. Callers block until a
// slot frees up.
class ModelGate {
 public:
  explicit ModelGate(int max_inflight = 8) : max_inflight_(max_inflight) {}

  class Slot {
   public:
    Slot(ModelGate* gate, const std::string& model) : gate_(gate), model_(model) {}
    Slot(Slot&& o) noexcept : gate_(o.gate_), model_(o.model_) { o.gate_ = nullptr; }
    Slot& operator=(Slot&&) = delete;
    ~Slot() {
      if (gate_) gate_->release(model_);
    }

   private:
    ModelGate* gate_;
    std::string model_;
  };

  Slot acquire(const std::string& model) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return inflight_[model] < max_inflight_; });
    ++inflight_[model];
    return Slot(this, model);
  }

  int inflight(const std::string& model) const {
    std::lock_guard lock(mu_);
    auto it = inflight_.find(model);
    return it == inflight_.end() ? 0 : it->second;
  }

 private:
  friend class Slot;
  void release(const std::string& model) {
    std::lock_guard lock(mu_);
    --inflight_[model];
    cv_.notify_all();
  }

  int max_inflight_;
  std::map<std::string, int> inflight_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
};

// Deterministic test double: mutates the prompt's parent source with
// mock_mutate and wraps the result either as a proper search/replace diff or
// as a fenced code block, exercising both parse paths.
class MockGenerator : public Generator {
 public:
  explicit MockGenerator(std::vector<FeatureDef> defs) : defs_(std::move(defs)) {}

  GenerationResult generate(const PromptParts& prompt, const ModelSpec& model,
                            const GenerateOptions& opts) override {
    (void)model;
    std::string mutant = mock_mutate(prompt.parent_source, defs_, opts.seed);
    auto rng = make_rng(mix_seed({opts.seed, hash_str("mock-render")}));
    GenerationResult out;
    out.latency_s = 0.001 + 1e-5 * static_cast<double>(rng() % 100);
    if (rng() % 2 == 0) {
      if (auto diff = single_line_diff(prompt.parent_source, mutant)) {
        out.raw_output = "Applying one optimization.\n" + render_diff(*diff);
        return out;
      }
    }
    out.raw_output = "Rewritten kernel:\n```\n" + mutant + "```\n";
    return out;
  }

 private:
  // Minimal hunk covering the changed line span, only when unique in the
  // parent; otherwise the caller falls back to a full code block.
  static std::optional<Diff> single_line_diff(const std::string& parent,
                                              const std::string& mutant) {
    auto a = split_lines(parent);
    auto b = split_lines(mutant);
    size_t lo = 0;
    while (lo < a.size() && lo < b.size() && a[lo] == b[lo]) ++lo;
    size_t ae = a.size(), be = b.size();
    while (ae > lo && be > lo && a[ae - 1] == b[be - 1]) {
      --ae;
      --be;
    }
    if (lo >= ae) return std::nullopt;  // pure insertion; span empty on parent side
    std::string search, replace;
    for (size_t i = lo; i < ae; ++i) search += (i > lo ? "\n" : "") + a[i];
    for (size_t i = lo; i < be; ++i) replace += (i > lo ? "\n" : "") + b[i];
    if (search.empty()) return std::nullopt;
    size_t first = parent.find(search);
    if (first == std::string::npos || parent.find(search, first + 1) != std::string::npos)
      return std::nullopt;
    Diff d;
    d.hunks.push_back(DiffHunk{search, replace});
    return d;
  }

  std::vector<FeatureDef> defs_;
};

// Remote chat-completion client. POSTs {model, messages, max_tokens,
// temperature}; the system message carries the static prefix so server-side
// prefix caches key on it. Transport/HTTP failures retry with backoff;
// timeouts do not retry (the caller's deadline is already spent).
class HttpGenerator : public Generator {
 public:
  struct Config {
    std::vector<double> retry_delays_s = {1.0, 4.0};
    double temperature = 0.8;
    std::string path = "/v1/chat/completions";
  };

  HttpGenerator() = default;
  explicit HttpGenerator(Config cfg) : cfg_(std::move(cfg)) {}

  GenerationResult generate(const PromptParts& prompt, const ModelSpec& model,
                            const GenerateOptions& opts) override;

 private:
  Config cfg_;
};

// Routes each model to its engine: "mock:" endpoints to a shared mock,
// anything else to HTTP. A per-model gate bounds concurrent generations.
class EngineRouter : public Generator {
 public:
  explicit EngineRouter(std::vector<FeatureDef> mock_defs, HttpGenerator::Config http_cfg = {},
                        int max_inflight_per_model = 8)
      : mock_(std::move(mock_defs)), http_(std::move(http_cfg)),
        gate_(max_inflight_per_model) {}

  GenerationResult generate(const PromptParts& prompt, const ModelSpec& model,
                            const GenerateOptions& opts) override {
    ModelGate::Slot slot = gate_.acquire(model.name);
    if (model.endpoint.rfind("mock:", 0) == 0) return mock_.generate(prompt, model, opts);
    return http_.generate(prompt, model, opts);
  }

 private:
  MockGenerator mock_;
  HttpGenerator http_;
  ModelGate gate_;
};

}  // namespace r3

// httplib pulled in only where the HTTP engine is compiled.
#include <httplib.h>

namespace r3 {

inline GenerationResult HttpGenerator::generate(const PromptParts& prompt,
                                                const ModelSpec& model,
                                                const GenerateOptions& opts) {
  std::string url = model.endpoint;
  if (url.rfind("http://", 0) != 0 && url.rfind("https://", 0) != 0)
    throw EndpointError("unsupported endpoint '" + url + "'");
  size_t scheme_end = url.find("://") + 3;
  size_t path_pos = url.find('/', scheme_end);
  std::string host_port = url.substr(0, path_pos == std::string::npos ? url.size() : path_pos);
  std::string path =
      path_pos == std::string::npos ? cfg_.path : url.substr(path_pos);

  json body{{"model", model.name},
            {"messages",
             json::array({json{{"role", "system"}, {"content", prompt.static_prefix}},
                          json{{"role", "user"},
                               {"content", prompt.rendered.substr(prompt.static_prefix.size())}}})},
            {"max_tokens", model.max_output_tokens},
            {"temperature", cfg_.temperature}};
  std::string payload = body.dump();

  const double start = mono_s();
  std::string last_error;
  size_t attempts = cfg_.retry_delays_s.size() + 1;
  for (size_t attempt = 0; attempt < attempts; ++attempt) {
    if (attempt > 0) {
      double delay = cfg_.retry_delays_s[attempt - 1];
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
    }
    httplib::Client client(host_port);
    auto micros = static_cast<time_t>(opts.timeout_s * 1e6);
    client.set_connection_timeout(micros / 1000000, micros % 1000000);
    client.set_read_timeout(micros / 1000000, micros % 1000000);
    client.set_write_timeout(micros / 1000000, micros % 1000000);
    httplib::Headers headers;
    if (!model.api_key_env.empty()) {
      if (const char* key = std::getenv(model.api_key_env.c_str()))
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }

    auto res = client.Post(path, headers, payload, "application/json");
    double elapsed = mono_s() - start;
    if (!res) {
      auto err = res.error();
      if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
          err == httplib::Error::Write) {
        if (elapsed >= opts.timeout_s)
          throw GenerationTimeoutError("no response within " +
                                       format_double(opts.timeout_s) + " s");
      }
      last_error = httplib::to_string(err);
      continue;
    }
    if (res->status != 200) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    try {
      json reply = json::parse(res->body);
      GenerationResult out;
      out.raw_output = reply.at("choices").at(0).at("message").at("content").get<std::string>();
      out.latency_s = mono_s() - start;
      return out;
    } catch (const json::exception& e) {
      last_error = std::string("bad response body: ") + e.what();
      continue;
    }
  }
  throw EndpointError("giving up after " + std::to_string(attempts) + " attempts: " + last_error);
}

}  // namespace r3
