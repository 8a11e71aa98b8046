#pragma once

// Verdicts on replayed kernel outputs against recorded epilogue snapshots.
// Comparison is bitwise outside annotated regions; annotated regions are
// checked element-wise under absolute or relative tolerance predicates.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "r3/util.hpp"

namespace r3 {

struct Buffer {
  uint32_t buffer_id = 0;
  std::vector<uint8_t> bytes;

  bool operator==(const Buffer&) const = default;
};

struct Snapshot {
  std::vector<Buffer> buffers;  // buffer_ids unique within a snapshot

  bool operator==(const Snapshot&) const = default;

  const Buffer* find(uint32_t id) const {
    for (const auto& b : buffers)
      if (b.buffer_id == id) return &b;
    return nullptr;
  }
  Buffer* find(uint32_t id) {
    for (auto& b : buffers)
      if (b.buffer_id == id) return &b;
    return nullptr;
  }
};

enum class ElementType { f32, f64, i32, i64, u8 };

inline size_t element_size(ElementType t) {
  switch (t) {
    case ElementType::f32: return 4;
    case ElementType::f64: return 8;
    case ElementType::i32: return 4;
    case ElementType::i64: return 8;
    case ElementType::u8: return 1;
  }
  return 1;
}

inline std::string to_string(ElementType t) {
  switch (t) {
    case ElementType::f32: return "f32";
    case ElementType::f64: return "f64";
    case ElementType::i32: return "i32";
    case ElementType::i64: return "i64";
    case ElementType::u8: return "u8";
  }
  return "u8";
}

inline ElementType element_type_from_string(const std::string& s) {
  if (s == "f32") return ElementType::f32;
  if (s == "f64") return ElementType::f64;
  if (s == "i32") return ElementType::i32;
  if (s == "i64") return ElementType::i64;
  if (s == "u8") return ElementType::u8;
  throw Error("BAD_REQUEST", "unknown element type '" + s + "'");
}

enum class PredicateKind { abs_tol, rel_tol };

struct Annotation {
  uint32_t buffer_id = 0;
  uint64_t byte_offset = 0;
  ElementType element_type = ElementType::f32;
  uint64_t count = 1;
  PredicateKind predicate = PredicateKind::abs_tol;
  double eps = 0.0;  // must be > 0

  uint64_t byte_length() const { return count * element_size(element_type); }

  json to_json() const {
    return json{{"buffer_id", buffer_id},
                {"byte_offset", byte_offset},
                {"element_type", to_string(element_type)},
                {"count", count},
                {"predicate", predicate == PredicateKind::abs_tol ? "abs_tol" : "rel_tol"},
                {"eps", eps}};
  }

  static Annotation from_json(const json& j) {
    Annotation a;
    a.buffer_id = require_field<uint32_t>(j, "buffer_id");
    a.byte_offset = require_field<uint64_t>(j, "byte_offset");
    a.element_type = element_type_from_string(require_field<std::string>(j, "element_type"));
    a.count = require_field<uint64_t>(j, "count");
    std::string pred = require_field<std::string>(j, "predicate");
    if (pred == "abs_tol")
      a.predicate = PredicateKind::abs_tol;
    else if (pred == "rel_tol")
      a.predicate = PredicateKind::rel_tol;
    else
      throw Error("BAD_REQUEST", "unknown predicate '" + pred + "'");
    a.eps = require_field<double>(j, "eps");
    if (a.eps <= 0) throw Error("BAD_REQUEST", "annotation eps must be positive");
    return a;
  }
};

struct Mismatch {
  uint32_t buffer_id = 0;
  uint64_t byte_offset = 0;
};

struct Verdict {
  bool correct = true;
  std::optional<Mismatch> first_mismatch;
  std::optional<int> first_mismatch_instance;  // set by check_all_instances
  double max_abs_err = 0.0;  // over annotated float elements
  double max_rel_err = 0.0;

  json to_json() const {
    json j{{"correct", correct},
           {"max_abs_err", max_abs_err},
           {"max_rel_err", max_rel_err}};
    if (first_mismatch)
      j["first_mismatch"] = {{"buffer_id", first_mismatch->buffer_id},
                             {"byte_offset", first_mismatch->byte_offset}};
    if (first_mismatch_instance) j["first_mismatch_instance"] = *first_mismatch_instance;
    return j;
  }

  static Verdict from_json(const json& j) {
    Verdict v;
    v.correct = require_field<bool>(j, "correct");
    v.max_abs_err = j.value("max_abs_err", 0.0);
    v.max_rel_err = j.value("max_rel_err", 0.0);
    if (j.contains("first_mismatch")) {
      Mismatch m;
      m.buffer_id = require_field<uint32_t>(j["first_mismatch"], "buffer_id");
      m.byte_offset = require_field<uint64_t>(j["first_mismatch"], "byte_offset");
      v.first_mismatch = m;
    }
    if (j.contains("first_mismatch_instance"))
      v.first_mismatch_instance = j["first_mismatch_instance"].get<int>();
    return v;
  }
};

class ShapeMismatchError : public Error {
 public:
  explicit ShapeMismatchError(const std::string& msg) : Error("SHAPE_MISMATCH", msg) {}
};

namespace detail {

template <typename T>
double load_as_double(const uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return static_cast<double>(v);
}

inline double load_element(const uint8_t* p, ElementType t) {
  switch (t) {
    case ElementType::f32: return load_as_double<float>(p);
    case ElementType::f64: return load_as_double<double>(p);
    case ElementType::i32: return load_as_double<int32_t>(p);
    case ElementType::i64: return load_as_double<int64_t>(p);
    case ElementType::u8: return static_cast<double>(*p);
  }
  return 0.0;
}

struct Region {
  uint64_t begin = 0, end = 0;
  const Annotation* ann = nullptr;
};

}  // namespace detail

// Compare one observed snapshot to the recorded epilogue. Bytes outside
// annotated regions must match exactly; annotated elements are compared
// under their predicate. NaN observed against non-NaN expected fails; NaN
// against NaN passes under relaxed predicates.
inline Verdict check(const Snapshot& observed, const Snapshot& expected,
                     const std::vector<Annotation>& annotations) {
  if (observed.buffers.size() != expected.buffers.size())
    throw ShapeMismatchError("buffer counts differ");
  for (const auto& eb : expected.buffers) {
    const Buffer* ob = observed.find(eb.buffer_id);
    if (!ob) throw ShapeMismatchError("missing buffer " + std::to_string(eb.buffer_id));
    if (ob->bytes.size() != eb.bytes.size())
      throw ShapeMismatchError("length differs for buffer " + std::to_string(eb.buffer_id));
  }

  Verdict verdict;
  for (const auto& eb : expected.buffers) {
    const Buffer& ob = *observed.find(eb.buffer_id);

    std::vector<detail::Region> regions;
    for (const auto& a : annotations) {
      if (a.buffer_id != eb.buffer_id) continue;
      uint64_t end = a.byte_offset + a.byte_length();
      if (end > eb.bytes.size())
        throw Error("BAD_REQUEST", "annotation exceeds buffer " + std::to_string(a.buffer_id));
      regions.push_back({a.byte_offset, end, &a});
    }
    std::sort(regions.begin(), regions.end(),
              [](const auto& x, const auto& y) { return x.begin < y.begin; });
    for (size_t i = 1; i < regions.size(); ++i)
      if (regions[i].begin < regions[i - 1].end)
        throw Error("BAD_REQUEST", "overlapping annotations in buffer " +
                                       std::to_string(eb.buffer_id));

    auto fail_at = [&](uint64_t off) {
      if (verdict.correct) {
        verdict.correct = false;
        verdict.first_mismatch = Mismatch{eb.buffer_id, off};
      }
    };

    uint64_t cursor = 0;
    size_t ri = 0;
    const uint64_t len = eb.bytes.size();
    while (cursor < len) {
      uint64_t raw_end = (ri < regions.size()) ? regions[ri].begin : len;
      if (cursor < raw_end) {
        // bitwise segment
        if (verdict.correct) {
          size_t n = static_cast<size_t>(raw_end - cursor);
          if (std::memcmp(ob.bytes.data() + cursor, eb.bytes.data() + cursor, n) != 0) {
            for (uint64_t off = cursor; off < raw_end; ++off) {
              if (ob.bytes[off] != eb.bytes[off]) {
                fail_at(off);
                break;
              }
            }
          }
        }
        cursor = raw_end;
        continue;
      }
      // annotated region
      const detail::Region& r = regions[ri];
      const Annotation& a = *r.ann;
      size_t esz = element_size(a.element_type);
      bool is_float = a.element_type == ElementType::f32 || a.element_type == ElementType::f64;
      for (uint64_t k = 0; k < a.count; ++k) {
        uint64_t off = r.begin + k * esz;
        double o = detail::load_element(ob.bytes.data() + off, a.element_type);
        double e = detail::load_element(eb.bytes.data() + off, a.element_type);
        bool ok;
        if (o == e) {
          ok = true;  // covers equal values and equal infinities
        } else if (std::isnan(o) && std::isnan(e)) {
          ok = true;  // relaxed predicates accept NaN vs NaN
        } else if (std::isnan(o) || std::isnan(e)) {
          ok = false;
        } else {
          double abs_err = std::fabs(o - e);
          if (is_float) {
            verdict.max_abs_err = std::max(verdict.max_abs_err, abs_err);
            double rel = abs_err / std::max(std::fabs(e), a.eps);
            verdict.max_rel_err = std::max(verdict.max_rel_err, rel);
          }
          if (a.predicate == PredicateKind::abs_tol)
            ok = abs_err <= a.eps;
          else
            ok = abs_err <= a.eps * std::max(std::fabs(e), a.eps);
        }
        if (!ok) fail_at(off);
      }
      cursor = r.end;
      ++ri;
    }
  }
  return verdict;
}

// "Expected" sides for check_all_instances: each instance supplies its own
// recorded epilogue; the candidate must pass every one of them.
template <typename UnitLike>
Verdict check_all_instances(const std::vector<Snapshot>& candidate_outputs,
                            const std::vector<UnitLike>& unit_instances,
                            const std::vector<Annotation>& annotations) {
  if (candidate_outputs.size() != unit_instances.size())
    throw ShapeMismatchError("one output per instance required");
  Verdict agg;
  for (size_t i = 0; i < candidate_outputs.size(); ++i) {
    Verdict v = check(candidate_outputs[i], unit_instances[i].epilogue, annotations);
    agg.max_abs_err = std::max(agg.max_abs_err, v.max_abs_err);
    agg.max_rel_err = std::max(agg.max_rel_err, v.max_rel_err);
    if (!v.correct && agg.correct) {
      agg.correct = false;
      agg.first_mismatch = v.first_mismatch;
      agg.first_mismatch_instance = static_cast<int>(i);
    }
  }
  return agg;
}

}  // namespace r3
