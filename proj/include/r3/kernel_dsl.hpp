#pragma once

// The simulated-kernel source DSL: lines of `name=value;`, `#` comments, and
// arbitrary free text that is ignored for semantics but counted as lines of
// code. A kernel's feature definitions give the legal names and values.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "r3/util.hpp"

namespace r3 {

struct FeatureDef {
  std::string name;
  std::vector<std::string> values;  // legal tokens; first one is the default

  const std::string& default_value() const { return values.front(); }

  bool int_typed() const {
    for (const auto& v : values) {
      if (v.empty()) return false;
      for (char c : v)
        if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    }
    return true;
  }

  bool legal(const std::string& v) const {
    for (const auto& x : values)
      if (x == v) return true;
    return false;
  }

  json to_json() const { return json{{"name", name}, {"values", values}}; }
  static FeatureDef from_json(const json& j) {
    FeatureDef d;
    d.name = require_field<std::string>(j, "name");
    d.values = require_field<std::vector<std::string>>(j, "values");
    if (d.values.empty()) throw Error("BAD_REQUEST", "feature '" + d.name + "' has no values");
    return d;
  }
};

class ParseError : public Error {
 public:
  ParseError(int line, const std::string& msg)
      : Error("PARSE_ERROR", "line " + std::to_string(line) + ": " + msg), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

struct ParsedSource {
  std::map<std::string, std::string> features;  // explicitly assigned only
  bool duplicate_warning = false;
  size_t loc = 0;  // every non-blank line counts, free text included
};

namespace dsl_detail {

// A feature-assignment line: ident = token ; with optional trailing comment.
inline bool match_assignment(const std::string& line, std::string& name, std::string& value) {
  size_t i = 0, n = line.size();
  auto skip_ws = [&] { while (i < n && (line[i] == ' ' || line[i] == '\t')) ++i; };
  skip_ws();
  size_t ns = i;
  while (i < n && (std::isalnum(static_cast<unsigned char>(line[i])) || line[i] == '_')) ++i;
  if (i == ns) return false;
  name = line.substr(ns, i - ns);
  skip_ws();
  if (i >= n || line[i] != '=') return false;
  ++i;
  skip_ws();
  size_t vs = i;
  while (i < n && (std::isalnum(static_cast<unsigned char>(line[i])) || line[i] == '_' ||
                   line[i] == '.' || line[i] == '-'))
    ++i;
  if (i == vs) return false;
  value = line.substr(vs, i - vs);
  skip_ws();
  if (i >= n || line[i] != ';') return false;
  ++i;
  skip_ws();
  return i == n || line[i] == '#';
}

}  // namespace dsl_detail

inline ParsedSource parse_source(const std::vector<FeatureDef>& defs, const std::string& text) {
  ParsedSource out;
  auto lines = split_lines(text);
  for (size_t li = 0; li < lines.size(); ++li) {
    const std::string& line = lines[li];
    if (!is_blank(line)) ++out.loc;
    std::string t = strip(line);
    if (t.empty() || t[0] == '#') continue;
    std::string name, value;
    if (!dsl_detail::match_assignment(line, name, value)) continue;  // free text
    const FeatureDef* def = nullptr;
    for (const auto& d : defs)
      if (d.name == name) def = &d;
    if (!def) throw ParseError(static_cast<int>(li + 1), "unknown feature '" + name + "'");
    if (def->int_typed()) {
      for (char c : value)
        if (!std::isdigit(static_cast<unsigned char>(c)))
          throw ParseError(static_cast<int>(li + 1),
                           "feature '" + name + "' expects an integer, got '" + value + "'");
    }
    if (out.features.count(name)) out.duplicate_warning = true;
    out.features[name] = value;  // last assignment wins
  }
  return out;
}

// Full feature map: parsed values where assigned, defaults elsewhere.
// Illegal values surface here rather than at parse time.
inline std::map<std::string, std::string> resolve_features(const std::vector<FeatureDef>& defs,
                                                           const ParsedSource& parsed) {
  std::map<std::string, std::string> out;
  for (const auto& d : defs) {
    auto it = parsed.features.find(d.name);
    if (it == parsed.features.end()) {
      out[d.name] = d.default_value();
      continue;
    }
    if (!d.legal(it->second))
      throw Error("ILLEGAL_FEATURES",
                  "value '" + it->second + "' is not legal for feature '" + d.name + "'");
    out[d.name] = it->second;
  }
  return out;
}

// Canonical listing: one assignment line per feature, in definition order.
inline std::string render_features(const std::vector<FeatureDef>& defs,
                                   const std::map<std::string, std::string>& features) {
  std::string out;
  for (const auto& d : defs) {
    auto it = features.find(d.name);
    if (it != features.end()) out += d.name + "=" + it->second + ";\n";
  }
  return out;
}

}  // namespace r3
