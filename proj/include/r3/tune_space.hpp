#pragma once

// Structured tuning-parameter spaces (compiler pipelines, launch dims,
// toggles) and concrete points within them.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "r3/util.hpp"

namespace r3 {

struct ParamDef {
  enum class Kind { categorical, int_range, boolean, pass_sequence };

  std::string name;
  Kind kind = Kind::categorical;

  std::vector<std::string> choices;  // categorical
  int64_t lo = 0, hi = 0, step = 1;  // int_range
  std::vector<std::string> pass_set;  // pass_sequence
  int max_len = 1;

  static ParamDef categorical(std::string name, std::vector<std::string> choices) {
    ParamDef d;
    d.name = std::move(name);
    d.kind = Kind::categorical;
    d.choices = std::move(choices);
    return d;
  }
  static ParamDef int_range(std::string name, int64_t lo, int64_t hi, int64_t step = 1) {
    ParamDef d;
    d.name = std::move(name);
    d.kind = Kind::int_range;
    d.lo = lo;
    d.hi = hi;
    d.step = step;
    return d;
  }
  static ParamDef boolean(std::string name) {
    ParamDef d;
    d.name = std::move(name);
    d.kind = Kind::boolean;
    return d;
  }
  static ParamDef pass_sequence(std::string name, std::vector<std::string> pass_set,
                                int max_len) {
    ParamDef d;
    d.name = std::move(name);
    d.kind = Kind::pass_sequence;
    d.pass_set = std::move(pass_set);
    d.max_len = max_len;
    return d;
  }

  // Number of grid values for scalar-like kinds.
  int64_t cardinality() const {
    switch (kind) {
      case Kind::categorical: return static_cast<int64_t>(choices.size());
      case Kind::int_range: return (hi - lo) / step + 1;
      case Kind::boolean: return 2;
      case Kind::pass_sequence: {
        // sequences up to max_len, repeats allowed: sum of |set|^k
        int64_t total = 0, pow = 1;
        for (int k = 0; k <= max_len; ++k) {
          total += pow;
          if (pow > (int64_t{1} << 40)) return int64_t{1} << 40;  // saturate
          pow *= static_cast<int64_t>(pass_set.size());
        }
        return total;
      }
    }
    return 0;
  }
};

// Value of one parameter inside a TunePoint:
//   categorical -> choice index, int_range -> integer value,
//   boolean -> bool, pass_sequence -> ordered pass indices.
using ParamValue = std::variant<int64_t, bool, std::vector<int32_t>>;

struct TunePoint {
  std::map<std::string, ParamValue> assignment;

  bool operator==(const TunePoint&) const = default;
  bool operator<(const TunePoint& o) const { return assignment < o.assignment; }
};

struct TuneSpace {
  std::vector<ParamDef> params;

  void validate() const {
    std::map<std::string, int> seen;
    for (const auto& p : params) {
      if (p.name.empty()) throw Error("BAD_REQUEST", "parameter with empty name");
      if (++seen[p.name] > 1) throw Error("BAD_REQUEST", "duplicate parameter '" + p.name + "'");
      switch (p.kind) {
        case ParamDef::Kind::categorical:
          if (p.choices.empty())
            throw Error("BAD_REQUEST", "categorical '" + p.name + "' has no choices");
          break;
        case ParamDef::Kind::int_range:
          if (p.lo > p.hi) throw Error("BAD_REQUEST", "int_range '" + p.name + "' has lo > hi");
          if (p.step < 1) throw Error("BAD_REQUEST", "int_range '" + p.name + "' has step < 1");
          break;
        case ParamDef::Kind::boolean:
          break;
        case ParamDef::Kind::pass_sequence:
          if (p.pass_set.empty())
            throw Error("BAD_REQUEST", "pass_sequence '" + p.name + "' has empty pass set");
          if (p.max_len < 1)
            throw Error("BAD_REQUEST", "pass_sequence '" + p.name + "' has max_len < 1");
          break;
      }
    }
  }

  const ParamDef* find(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }

  // Total number of points, saturating at 2^62 for practical purposes.
  uint64_t size() const {
    const uint64_t cap = uint64_t{1} << 62;
    uint64_t total = 1;
    for (const auto& p : params) {
      uint64_t c = static_cast<uint64_t>(p.cardinality());
      if (c == 0) return 0;
      if (total > cap / c) return cap;
      total *= c;
    }
    return total;
  }

  bool legal(const TunePoint& point) const {
    if (point.assignment.size() != params.size()) return false;
    for (const auto& p : params) {
      auto it = point.assignment.find(p.name);
      if (it == point.assignment.end()) return false;
      const ParamValue& v = it->second;
      switch (p.kind) {
        case ParamDef::Kind::categorical: {
          auto* idx = std::get_if<int64_t>(&v);
          if (!idx || *idx < 0 || *idx >= static_cast<int64_t>(p.choices.size())) return false;
          break;
        }
        case ParamDef::Kind::int_range: {
          auto* x = std::get_if<int64_t>(&v);
          if (!x || *x < p.lo || *x > p.hi || (*x - p.lo) % p.step != 0) return false;
          break;
        }
        case ParamDef::Kind::boolean:
          if (!std::holds_alternative<bool>(v)) return false;
          break;
        case ParamDef::Kind::pass_sequence: {
          auto* seq = std::get_if<std::vector<int32_t>>(&v);
          if (!seq || seq->size() > static_cast<size_t>(p.max_len)) return false;
          for (int32_t pi : *seq)
            if (pi < 0 || pi >= static_cast<int32_t>(p.pass_set.size())) return false;
          break;
        }
      }
    }
    return true;
  }

  json to_json() const {
    json arr = json::array();
    for (const auto& p : params) {
      json d{{"name", p.name}};
      switch (p.kind) {
        case ParamDef::Kind::categorical:
          d["kind"] = "categorical";
          d["choices"] = p.choices;
          break;
        case ParamDef::Kind::int_range:
          d["kind"] = "int_range";
          d["lo"] = p.lo;
          d["hi"] = p.hi;
          d["step"] = p.step;
          break;
        case ParamDef::Kind::boolean:
          d["kind"] = "boolean";
          break;
        case ParamDef::Kind::pass_sequence:
          d["kind"] = "pass_sequence";
          d["pass_set"] = p.pass_set;
          d["max_len"] = p.max_len;
          break;
      }
      arr.push_back(std::move(d));
    }
    return json{{"params", arr}};
  }

  static TuneSpace from_json(const json& j) {
    TuneSpace s;
    for (const auto& d : require_field<json>(j, "params")) {
      std::string kind = require_field<std::string>(d, "kind");
      std::string name = require_field<std::string>(d, "name");
      if (kind == "categorical") {
        s.params.push_back(ParamDef::categorical(name, require_field<std::vector<std::string>>(d, "choices")));
      } else if (kind == "int_range") {
        s.params.push_back(ParamDef::int_range(name, require_field<int64_t>(d, "lo"),
                                               require_field<int64_t>(d, "hi"),
                                               d.value("step", int64_t{1})));
      } else if (kind == "boolean") {
        s.params.push_back(ParamDef::boolean(name));
      } else if (kind == "pass_sequence") {
        s.params.push_back(ParamDef::pass_sequence(name, require_field<std::vector<std::string>>(d, "pass_set"),
                                                   require_field<int>(d, "max_len")));
      } else {
        throw Error("BAD_REQUEST", "unknown param kind '" + kind + "'");
      }
    }
    s.validate();
    return s;
  }
};

// Human- and deployment-facing value rendering: categorical as its choice
// string, pass sequences as pass-name arrays.
inline json param_value_to_json(const ParamDef& def, const ParamValue& v) {
  switch (def.kind) {
    case ParamDef::Kind::categorical:
      return def.choices[static_cast<size_t>(std::get<int64_t>(v))];
    case ParamDef::Kind::int_range:
      return std::get<int64_t>(v);
    case ParamDef::Kind::boolean:
      return std::get<bool>(v);
    case ParamDef::Kind::pass_sequence: {
      json arr = json::array();
      for (int32_t idx : std::get<std::vector<int32_t>>(v))
        arr.push_back(def.pass_set[static_cast<size_t>(idx)]);
      return arr;
    }
  }
  return nullptr;
}

inline json tune_point_to_json(const TuneSpace& space, const TunePoint& point) {
  json j = json::object();
  for (const auto& p : space.params) {
    auto it = point.assignment.find(p.name);
    if (it == point.assignment.end()) throw Error("BAD_REQUEST", "point missing '" + p.name + "'");
    j[p.name] = param_value_to_json(p, it->second);
  }
  return j;
}

inline TunePoint tune_point_from_json(const TuneSpace& space, const json& j) {
  TunePoint point;
  for (const auto& p : space.params) {
    if (!j.contains(p.name)) throw Error("BAD_REQUEST", "point missing '" + p.name + "'");
    const json& v = j.at(p.name);
    switch (p.kind) {
      case ParamDef::Kind::categorical: {
        std::string c = v.get<std::string>();
        auto it = std::find(p.choices.begin(), p.choices.end(), c);
        if (it == p.choices.end())
          throw Error("BAD_REQUEST", "illegal choice '" + c + "' for '" + p.name + "'");
        point.assignment[p.name] = static_cast<int64_t>(it - p.choices.begin());
        break;
      }
      case ParamDef::Kind::int_range:
        point.assignment[p.name] = v.get<int64_t>();
        break;
      case ParamDef::Kind::boolean:
        point.assignment[p.name] = v.get<bool>();
        break;
      case ParamDef::Kind::pass_sequence: {
        std::vector<int32_t> seq;
        for (const auto& e : v) {
          std::string pass = e.get<std::string>();
          auto it = std::find(p.pass_set.begin(), p.pass_set.end(), pass);
          if (it == p.pass_set.end())
            throw Error("BAD_REQUEST", "illegal pass '" + pass + "' for '" + p.name + "'");
          seq.push_back(static_cast<int32_t>(it - p.pass_set.begin()));
        }
        point.assignment[p.name] = std::move(seq);
        break;
      }
    }
  }
  if (!space.legal(point)) throw Error("BAD_REQUEST", "illegal point for space");
  return point;
}

// String form of one value, used by cost-model tables and reports.
inline std::string param_value_to_string(const ParamDef& def, const ParamValue& v) {
  switch (def.kind) {
    case ParamDef::Kind::categorical:
      return def.choices[static_cast<size_t>(std::get<int64_t>(v))];
    case ParamDef::Kind::int_range:
      return std::to_string(std::get<int64_t>(v));
    case ParamDef::Kind::boolean:
      return std::get<bool>(v) ? "true" : "false";
    case ParamDef::Kind::pass_sequence: {
      std::string out;
      const auto& seq = std::get<std::vector<int32_t>>(v);
      for (size_t i = 0; i < seq.size(); ++i) {
        if (i) out += "+";
        out += def.pass_set[static_cast<size_t>(seq[i])];
      }
      return out;
    }
  }
  return {};
}

struct Trial {
  enum class Outcome { success, incorrect, failed };

  TunePoint point;
  Outcome outcome = Outcome::failed;
  double runtime_s = 0.0;  // meaningful only for success

  static Trial success(TunePoint p, double runtime_s) {
    return Trial{std::move(p), Outcome::success, runtime_s};
  }
  static Trial incorrect(TunePoint p) { return Trial{std::move(p), Outcome::incorrect, 0.0}; }
  static Trial failed(TunePoint p) { return Trial{std::move(p), Outcome::failed, 0.0}; }
};

}  // namespace r3
