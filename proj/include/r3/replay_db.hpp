#pragma once

// On-disk replay-unit database: manifest.json plus one snapshot file per
// prologue/epilogue. Snapshot files are bit-exact little-endian:
//   magic "MNEM", version u32, buffer_count u32,
//   then per buffer: buffer_id u32, length u64, raw bytes.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "r3/correctness.hpp"
#include "r3/tune_space.hpp"
#include "r3/util.hpp"

namespace r3 {

constexpr uint32_t kSnapshotVersion = 1;

inline std::string encode_snapshot(const Snapshot& snap) {
  std::string out;
  out += "MNEM";
  put_u32le(out, kSnapshotVersion);
  put_u32le(out, static_cast<uint32_t>(snap.buffers.size()));
  for (const auto& b : snap.buffers) {
    put_u32le(out, b.buffer_id);
    put_u64le(out, b.bytes.size());
    out.append(reinterpret_cast<const char*>(b.bytes.data()), b.bytes.size());
  }
  return out;
}

inline Snapshot decode_snapshot(std::string_view data) {
  if (data.size() < 12 || data.substr(0, 4) != "MNEM")
    throw Error("BAD_SNAPSHOT", "bad magic");
  uint32_t version = get_u32le(data, 4);
  if (version != kSnapshotVersion)
    throw Error("BAD_SNAPSHOT", "unsupported version " + std::to_string(version));
  uint32_t count = get_u32le(data, 8);
  Snapshot snap;
  size_t off = 12;
  for (uint32_t i = 0; i < count; ++i) {
    if (off + 12 > data.size()) throw Error("BAD_SNAPSHOT", "truncated buffer header");
    Buffer b;
    b.buffer_id = get_u32le(data, off);
    uint64_t len = get_u64le(data, off + 4);
    off += 12;
    if (off + len > data.size()) throw Error("BAD_SNAPSHOT", "truncated buffer payload");
    b.bytes.assign(data.begin() + static_cast<long>(off),
                   data.begin() + static_cast<long>(off + len));
    off += len;
    snap.buffers.push_back(std::move(b));
  }
  if (off != data.size()) throw Error("BAD_SNAPSHOT", "trailing bytes");
  return snap;
}

inline void write_snapshot_file(const std::filesystem::path& path, const Snapshot& snap) {
  write_file_atomic(path, encode_snapshot(snap));
}

inline Snapshot read_snapshot_file(const std::filesystem::path& path) {
  return decode_snapshot(read_file(path));
}

struct LaunchConfig {
  std::array<uint32_t, 3> grid{1, 1, 1};
  std::array<uint32_t, 3> block{1, 1, 1};

  json to_json() const { return json{{"grid", grid}, {"block", block}}; }
  static LaunchConfig from_json(const json& j) {
    LaunchConfig lc;
    lc.grid = require_field<std::array<uint32_t, 3>>(j, "grid");
    lc.block = require_field<std::array<uint32_t, 3>>(j, "block");
    for (uint32_t b : lc.block)
      if (b < 1) throw Error("BAD_REQUEST", "block dims must be >= 1");
    return lc;
  }
};

// One recorded kernel invocation.
struct ReplayUnit {
  std::string kernel_name;
  int instance_id = 0;
  LaunchConfig launch;
  std::vector<uint8_t> args_blob;
  Snapshot prologue;
  Snapshot epilogue;
  std::vector<Annotation> annotations;
  double baseline_runtime_s = 0;

  void validate() const {
    if (baseline_runtime_s <= 0)
      throw Error("BAD_REQUEST", kernel_name + ": baseline runtime must be positive");
    if (prologue.buffers.size() != epilogue.buffers.size())
      throw Error("BAD_REQUEST", kernel_name + ": prologue/epilogue buffer sets differ");
    for (const auto& pb : prologue.buffers) {
      const Buffer* eb = epilogue.find(pb.buffer_id);
      if (!eb || eb->bytes.size() != pb.bytes.size())
        throw Error("BAD_REQUEST", kernel_name + ": prologue/epilogue buffer sets differ");
    }
  }
};

struct KernelRecord {
  std::string name;
  TuneSpace tune_space;
  json recorded_point;  // point matching the recorded execution
  std::string seed_source;
  json sim_spec;  // opaque here; parsed by the sim backend
  std::vector<ReplayUnit> instances;
};

class DbError : public Error {
 public:
  explicit DbError(const std::string& msg) : Error("BAD_DB", msg) {}
};

struct UnitDatabase {
  std::map<std::string, KernelRecord> kernels;

  const KernelRecord& kernel(const std::string& name) const {
    auto it = kernels.find(name);
    if (it == kernels.end()) throw Error("UNKNOWN_KERNEL", "no kernel '" + name + "'");
    return it->second;
  }

  size_t instance_count() const {
    size_t n = 0;
    for (const auto& [name, k] : kernels) n += k.instances.size();
    return n;
  }

  static UnitDatabase load(const std::filesystem::path& dir) {
    auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path))
      throw DbError("missing manifest: " + manifest_path.string());
    json manifest;
    try {
      manifest = json::parse(read_file(manifest_path));
    } catch (const json::exception& e) {
      throw DbError(std::string("manifest does not parse: ") + e.what());
    }

    UnitDatabase db;
    for (const auto& kj : require_field<json>(manifest, "kernels")) {
      KernelRecord rec;
      rec.name = require_field<std::string>(kj, "name");
      rec.tune_space = TuneSpace::from_json(require_field<json>(kj, "tune_space"));
      rec.recorded_point = kj.value("recorded_point", json::object());
      rec.seed_source = kj.value("seed_source", std::string{});
      rec.sim_spec = kj.value("sim", json{});
      for (const auto& ij : require_field<json>(kj, "instances")) {
        ReplayUnit unit;
        unit.kernel_name = rec.name;
        unit.instance_id = require_field<int>(ij, "instance_id");
        unit.launch = LaunchConfig::from_json(require_field<json>(ij, "launch"));
        unit.args_blob = base64_decode(ij.value("args_blob_b64", std::string{}));
        unit.prologue = read_snapshot_file(dir / require_field<std::string>(ij, "prologue"));
        unit.epilogue = read_snapshot_file(dir / require_field<std::string>(ij, "epilogue"));
        for (const auto& aj : ij.value("annotations", json::array()))
          unit.annotations.push_back(Annotation::from_json(aj));
        unit.baseline_runtime_s = require_field<double>(ij, "baseline_runtime_s");
        try {
          unit.validate();
        } catch (const Error& e) {
          throw DbError(e.what());
        }
        rec.instances.push_back(std::move(unit));
      }
      if (rec.instances.empty()) throw DbError(rec.name + ": no instances");
      db.kernels.emplace(rec.name, std::move(rec));
    }
    if (db.kernels.empty()) throw DbError("database has no kernels");
    return db;
  }
};

// Writer used by suite generation (and by recorders in general): lays out
// manifest.json plus per-instance snapshot files under `dir`.
struct UnitDatabaseWriter {
  std::filesystem::path dir;
  json kernels = json::array();

  explicit UnitDatabaseWriter(std::filesystem::path d) : dir(std::move(d)) {
    std::filesystem::create_directories(dir);
  }

  void add_kernel(const KernelRecord& rec) {
    json kj{{"name", rec.name},
            {"tune_space", rec.tune_space.to_json()},
            {"recorded_point", rec.recorded_point},
            {"seed_source", rec.seed_source}};
    if (!rec.sim_spec.is_null()) kj["sim"] = rec.sim_spec;
    json instances = json::array();
    for (const auto& unit : rec.instances) {
      std::string stem = rec.name + "_" + std::to_string(unit.instance_id);
      std::string pro = stem + ".pro.snap";
      std::string epi = stem + ".epi.snap";
      write_snapshot_file(dir / pro, unit.prologue);
      write_snapshot_file(dir / epi, unit.epilogue);
      json aj = json::array();
      for (const auto& a : unit.annotations) aj.push_back(a.to_json());
      instances.push_back(json{{"instance_id", unit.instance_id},
                               {"launch", unit.launch.to_json()},
                               {"args_blob_b64", base64_encode(unit.args_blob)},
                               {"prologue", pro},
                               {"epilogue", epi},
                               {"annotations", aj},
                               {"baseline_runtime_s", unit.baseline_runtime_s}});
    }
    kj["instances"] = instances;
    kernels.push_back(std::move(kj));
  }

  void finish() const {
    json manifest{{"version", 1}, {"kernels", kernels}};
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
  }
};

}  // namespace r3
