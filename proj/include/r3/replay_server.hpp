#pragma once

// Persistent replay service. Loads the unit database once, pre-instantiates
// one working buffer set per worker, and serves replay/tune/validate/status
// requests, either in process or over a newline-delimited-JSON stream
// socket. Initialization costs are paid at startup, not per candidate.

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "r3/eval_result.hpp"
#include "r3/kernel_sim.hpp"
#include "r3/replay_db.hpp"
#include "r3/tuner.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace r3 {

struct ReplayRequest {
  std::string kind;  // replay | tune | validate | status
  std::string kernel_name;
  std::string candidate_source;
  std::optional<json> point;           // replay/validate
  std::optional<TuneSpace> tune_space; // tune
  std::optional<int> instance_id;
  int reps = 5;
  int warmup = 2;
  int budget = 30;
  int parallelism = 1;
  uint64_t seed = 0;

  static ReplayRequest from_json(const json& j) {
    ReplayRequest r;
    r.kind = require_field<std::string>(j, "kind");
    r.kernel_name = j.value("kernel_name", std::string{});
    r.candidate_source = j.value("candidate_source", std::string{});
    if (j.contains("point")) r.point = j.at("point");
    if (j.contains("tune_space")) r.tune_space = TuneSpace::from_json(j.at("tune_space"));
    if (j.contains("instance_id")) r.instance_id = j.at("instance_id").get<int>();
    r.reps = j.value("reps", r.kind == "validate" ? 10 : 5);
    r.warmup = j.value("warmup", 2);
    r.budget = j.value("budget", 30);
    r.parallelism = j.value("parallelism", 1);
    r.seed = j.value("seed", uint64_t{0});
    if (r.reps < 1) throw Error("BAD_REQUEST", "reps must be >= 1");
    if (r.warmup < 0) throw Error("BAD_REQUEST", "warmup must be >= 0");
    return r;
  }

  json to_json() const {
    json j{{"kind", kind},
           {"kernel_name", kernel_name},
           {"candidate_source", candidate_source},
           {"reps", reps},
           {"warmup", warmup},
           {"budget", budget},
           {"parallelism", parallelism},
           {"seed", seed}};
    if (point) j["point"] = *point;
    if (tune_space) j["tune_space"] = tune_space->to_json();
    if (instance_id) j["instance_id"] = *instance_id;
    return j;
  }
};

struct BackendRun {
  bool ok = false;
  std::string error;
  std::vector<double> runtimes_s;  // post-warmup samples, length = reps
};

class ReplayBackend {
 public:
  virtual ~ReplayBackend() = default;
  // Execute the candidate for warmup+reps runs against `working` (already
  // reset from the prologue); leave the observed epilogue in `working`.
  virtual BackendRun run(const KernelRecord& kernel, const ReplayUnit& unit,
                         const std::string& candidate_source, const TunePoint& point,
                         int warmup, int reps, uint64_t seed, Snapshot& working) = 0;
};

class SimBackend : public ReplayBackend {
 public:
  explicit SimBackend(const UnitDatabase& db) {
    for (const auto& [name, rec] : db.kernels) {
      if (rec.sim_spec.is_null() || rec.sim_spec.empty())
        throw DbError(name + ": no sim spec in manifest for the sim backend");
      specs_.emplace(name, SimKernelSpec::from_json(rec.sim_spec));
    }
  }

  BackendRun run(const KernelRecord& kernel, const ReplayUnit& unit,
                 const std::string& candidate_source, const TunePoint& point, int warmup,
                 int reps, uint64_t seed, Snapshot& working) override {
    BackendRun out;
    const SimKernelSpec& spec = specs_.at(kernel.name);
    std::map<std::string, std::string> features;
    try {
      auto parsed = parse_source(spec.feature_defs, candidate_source);
      features = resolve_features(spec.feature_defs, parsed);
    } catch (const Error& e) {
      out.error = e.what();
      return out;
    }
    auto rng = make_rng(mix_seed({seed, hash_str(candidate_source), hash_str(kernel.name),
                                  static_cast<uint64_t>(unit.instance_id)}));
    try {
      for (int i = 0; i < warmup + reps; ++i) {
        double r = sim_runtime(spec, features, point, kernel.tune_space, rng);
        if (i >= warmup) out.runtimes_s.push_back(r);
      }
      sim_write_output(spec, features, unit, working);
    } catch (const Error& e) {
      out.error = e.what();
      return out;
    }
    out.ok = true;
    return out;
  }

 private:
  std::map<std::string, SimKernelSpec> specs_;
};

// Generic out-of-process backend: materializes a job directory (candidate
// source, point, launch, prologue snapshot), invokes the configured command
// with the directory as its argument, and reads back result.json plus an
// epilogue snapshot. The command contract is documented in the README.
class SubprocessBackend : public ReplayBackend {
 public:
  explicit SubprocessBackend(std::string command) : command_(std::move(command)) {
    if (command_.empty()) throw Error("BAD_REQUEST", "subprocess backend needs a command");
  }

  BackendRun run(const KernelRecord& kernel, const ReplayUnit& unit,
                 const std::string& candidate_source, const TunePoint& point, int warmup,
                 int reps, uint64_t seed, Snapshot& working) override {
    BackendRun out;
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() /
                   ("r3-job-" + to_hex(mix_seed({seed, hash_str(candidate_source),
                                                 static_cast<uint64_t>(::getpid())})));
    fs::create_directories(dir);
    struct Cleanup {
      fs::path dir;
      ~Cleanup() {
        std::error_code ec;
        fs::remove_all(dir, ec);
      }
    } cleanup{dir};

    try {
      write_file_atomic(dir / "candidate.txt", candidate_source);
      write_snapshot_file(dir / "prologue.snap", unit.prologue);
      json job{{"kernel", kernel.name},
               {"instance_id", unit.instance_id},
               {"candidate_file", "candidate.txt"},
               {"point", tune_point_to_json(kernel.tune_space, point)},
               {"launch", unit.launch.to_json()},
               {"args_blob_b64", base64_encode(unit.args_blob)},
               {"warmup", warmup},
               {"reps", reps},
               {"seed", seed},
               {"prologue", "prologue.snap"},
               {"epilogue_out", "epilogue.snap"},
               {"result_out", "result.json"}};
      write_file_atomic(dir / "job.json", job.dump(2) + "\n");
    } catch (const std::exception& e) {
      out.error = std::string("job setup failed: ") + e.what();
      return out;
    }

    std::string cmd = command_ + " " + dir.string() + " >/dev/null 2>&1";
    int rc = std::system(cmd.c_str());
    if (rc != 0) {
      out.error = "backend command exited with status " + std::to_string(rc);
      return out;
    }

    try {
      json result = json::parse(read_file(dir / "result.json"));
      out.runtimes_s = require_field<std::vector<double>>(result, "runtimes_s");
      if (static_cast<int>(out.runtimes_s.size()) != reps) {
        out.error = "backend returned " + std::to_string(out.runtimes_s.size()) +
                    " samples, expected " + std::to_string(reps);
        return out;
      }
      Snapshot observed = read_snapshot_file(dir / "epilogue.snap");
      for (auto& wb : working.buffers) {
        const Buffer* ob = observed.find(wb.buffer_id);
        if (!ob || ob->bytes.size() != wb.bytes.size()) {
          out.error = "backend epilogue has wrong shape";
          return out;
        }
        wb.bytes = ob->bytes;
      }
    } catch (const std::exception& e) {
      out.error = std::string("backend output unreadable: ") + e.what();
      return out;
    }
    out.ok = true;
    return out;
  }

 private:
  std::string command_;
};

class ServerShutdownError : public Error {
 public:
  ServerShutdownError() : Error("SERVER_SHUTDOWN", "server is shutting down") {}
};

// Fixed set of replay workers. Each worker owns one scratch buffer set; a
// request leases a worker for the duration of one replay.
class WorkerPool {
 public:
  explicit WorkerPool(int n) : slots_(static_cast<size_t>(n)) {
    if (n < 1) throw Error("BAD_REQUEST", "worker count must be >= 1");
  }

  class Lease {
   public:
    Lease(WorkerPool* pool, size_t index) : pool_(pool), index_(index) {}
    Lease(Lease&& o) noexcept : pool_(o.pool_), index_(o.index_) { o.pool_ = nullptr; }
    Lease& operator=(Lease&&) = delete;
    ~Lease() {
      if (pool_) pool_->release(index_);
    }
    Snapshot& scratch() { return pool_->slots_[index_].scratch; }

   private:
    WorkerPool* pool_;
    size_t index_;
  };

  Lease acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return stopping_ || any_free(); });
    if (stopping_ && !any_free()) throw ServerShutdownError();
    for (size_t i = 0; i < slots_.size(); ++i) {
      if (!slots_[i].busy) {
        slots_[i].busy = true;
        slots_[i].acquired_at = mono_s();
        return Lease(this, i);
      }
    }
    throw ServerShutdownError();
  }

  int size() const { return static_cast<int>(slots_.size()); }

  int idle() const {
    std::lock_guard lock(mu_);
    int n = 0;
    for (const auto& s : slots_)
      if (!s.busy) ++n;
    return n;
  }

  double busy_seconds() const {
    std::lock_guard lock(mu_);
    double total = busy_seconds_;
    double now = mono_s();
    for (const auto& s : slots_)
      if (s.busy) total += now - s.acquired_at;
    return total;
  }

  void stop() {
    std::lock_guard lock(mu_);
    stopping_ = true;
    cv_.notify_all();
  }

 private:
  friend class Lease;

  bool any_free() const {
    for (const auto& s : slots_)
      if (!s.busy) return true;
    return false;
  }

  void release(size_t index) {
    std::lock_guard lock(mu_);
    slots_[index].busy = false;
    busy_seconds_ += mono_s() - slots_[index].acquired_at;
    cv_.notify_one();
  }

  struct Slot {
    Snapshot scratch;
    bool busy = false;
    double acquired_at = 0;
  };
  std::vector<Slot> slots_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  double busy_seconds_ = 0;
};

struct ServiceConfig {
  std::string backend = "sim";  // sim | subprocess
  int workers = 2;
  std::string subprocess_command;
};

class ExportRejectedError : public Error {
 public:
  explicit ExportRejectedError(const std::string& kernel)
      : Error("EXPORT_REJECTED", "refusing to export incorrect result for '" + kernel + "'") {}
};

class ReplayService {
 public:
  ReplayService(UnitDatabase db, ServiceConfig cfg)
      : db_(std::move(db)), cfg_(cfg), workers_(cfg.workers), started_at_(mono_s()) {
    if (cfg_.backend == "sim")
      backend_ = std::make_unique<SimBackend>(db_);
    else if (cfg_.backend == "subprocess")
      backend_ = std::make_unique<SubprocessBackend>(cfg_.subprocess_command);
    else
      throw Error("BAD_REQUEST", "unknown backend '" + cfg_.backend + "'");
  }

  // Custom backend injection (external toolchains, test doubles).
  ReplayService(UnitDatabase db, std::unique_ptr<ReplayBackend> backend, int workers)
      : db_(std::move(db)), backend_(std::move(backend)), workers_(workers),
        started_at_(mono_s()) {
    cfg_.backend = "custom";
    cfg_.workers = workers;
  }

  const UnitDatabase& db() const { return db_; }
  WorkerPool& workers() { return workers_; }

  // Dispatch one request object (the wire payload without framing).
  json handle(const json& request) {
    ReplayRequest req = ReplayRequest::from_json(request);
    if (req.kind == "status") return status();
    if (req.kind != "replay" && req.kind != "tune" && req.kind != "validate")
      throw Error("BAD_REQUEST", "unknown kind '" + req.kind + "'");
    if (req.kernel_name.empty()) throw Error("BAD_REQUEST", "missing field 'kernel_name'");
    if (req.candidate_source.empty())
      throw Error("BAD_REQUEST", "missing field 'candidate_source'");
    if (req.kind == "replay") return replay(req).to_json();
    if (req.kind == "tune") return tune(req).to_json();
    return validate(req).to_json();
  }

  EvalResult replay(const ReplayRequest& req) {
    const KernelRecord& rec = db_.kernel(req.kernel_name);
    const ReplayUnit& unit = instance(rec, req.instance_id.value_or(0));
    if (!req.point) throw Error("BAD_REQUEST", "replay requests carry a point");
    TunePoint point = tune_point_from_json(rec.tune_space, *req.point);
    return replay_point(rec, unit, req.candidate_source, point, req.warmup, req.reps,
                        req.seed);
  }

  // Inner BO search over the request's space; the best correct configuration
  // is confirmed with 10 replay reps.
  EvalResult tune(const ReplayRequest& req) {
    const KernelRecord& rec = db_.kernel(req.kernel_name);
    const ReplayUnit& unit = instance(rec, req.instance_id.value_or(0));
    if (!req.tune_space) throw Error("BAD_REQUEST", "tune requests carry a tune_space");
    const TuneSpace& space = *req.tune_space;
    space.validate();

    auto evaluate = [&](const TunePoint& p) -> Trial {
      try {
        EvalResult r =
            replay_point(rec, unit, req.candidate_source, p, req.warmup, req.reps, req.seed);
        return r.correct ? Trial::success(p, r.median_runtime_s) : Trial::incorrect(p);
      } catch (const Error& e) {
        if (e.code() == "BACKEND_FAILURE") return Trial::failed(p);
        throw;
      }
    };

    int parallelism = std::min(req.parallelism, workers_.size());
    TuneResult tr = r3::tune(space, evaluate, req.budget, std::max(1, parallelism), req.seed);
    if (!tr.best_point) {
      EvalResult none;
      none.correct = false;
      none.verdict.correct = false;
      return none;
    }
    return replay_point(rec, unit, req.candidate_source, *tr.best_point, req.warmup, 10,
                        mix_seed({req.seed, hash_str("confirm")}));
  }

  // Final-candidate validation across every recorded instance of the kernel.
  EvalResult validate(const ReplayRequest& req) {
    const KernelRecord& rec = db_.kernel(req.kernel_name);
    if (!req.point) throw Error("BAD_REQUEST", "validate requests carry a point");
    TunePoint point = tune_point_from_json(rec.tune_space, *req.point);

    std::vector<Snapshot> outputs;
    EvalResult first;
    for (size_t i = 0; i < rec.instances.size(); ++i) {
      Snapshot observed;
      EvalResult r = replay_point(rec, rec.instances[i], req.candidate_source, point,
                                  req.warmup, req.reps, mix_seed({req.seed, i}), &observed);
      if (i == 0) first = r;
      outputs.push_back(std::move(observed));
    }
    Verdict agg = check_all_instances(outputs, rec.instances, rec.instances.front().annotations);
    EvalResult out = first;
    out.verdict = agg;
    out.correct = agg.correct;
    if (!agg.correct) out.speedup.reset();
    return out;
  }

  json status() const {
    json kernels = json::array();
    for (const auto& [name, rec] : db_.kernels) {
      json entry{{"name", name},
                 {"instances", rec.instances.size()},
                 {"tune_space", rec.tune_space.to_json()},
                 {"recorded_point", rec.recorded_point},
                 {"seed_source", rec.seed_source},
                 {"launch", rec.instances.front().launch.to_json()},
                 {"baseline_runtime_s", rec.instances.front().baseline_runtime_s}};
      if (rec.sim_spec.is_object() && rec.sim_spec.contains("features"))
        entry["features"] = rec.sim_spec.at("features");
      kernels.push_back(std::move(entry));
    }
    return json{{"workers", workers_.size()},
                {"idle_workers", workers_.idle()},
                {"units_loaded", db_.instance_count()},
                {"busy_seconds", workers_.busy_seconds()},
                {"uptime_s", mono_s() - started_at_},
                {"kernels", kernels}};
  }

 private:
  const ReplayUnit& instance(const KernelRecord& rec, int instance_id) const {
    for (const auto& u : rec.instances)
      if (u.instance_id == instance_id) return u;
    throw Error("BAD_REQUEST", rec.name + ": no instance " + std::to_string(instance_id));
  }

  EvalResult replay_point(const KernelRecord& rec, const ReplayUnit& unit,
                          const std::string& source, const TunePoint& point, int warmup,
                          int reps, uint64_t seed, Snapshot* observed_out = nullptr) {
    if (!rec.tune_space.legal(point)) throw Error("BAD_REQUEST", "illegal point");
    auto lease = workers_.acquire();
    Snapshot& working = lease.scratch();
    working = unit.prologue;  // full reset; earlier candidates leave no residue
    BackendRun run =
        backend_->run(rec, unit, source, point, warmup, reps, seed, working);
    if (!run.ok) throw Error("BACKEND_FAILURE", run.error);
    Verdict verdict;
    try {
      verdict = check(working, unit.epilogue, unit.annotations);
    } catch (const ShapeMismatchError& e) {
      throw Error("BACKEND_FAILURE", e.what());
    }
    if (observed_out) *observed_out = working;

    EvalResult res;
    res.correct = verdict.correct;
    res.runtimes_s = run.runtimes_s;
    res.median_runtime_s = median_of(run.runtimes_s);
    res.best_point = tune_point_to_json(rec.tune_space, point);
    if (verdict.correct) res.speedup = unit.baseline_runtime_s / res.median_runtime_s;
    res.verdict = verdict;
    return res;
  }

  UnitDatabase db_;
  ServiceConfig cfg_;
  std::unique_ptr<ReplayBackend> backend_;
  WorkerPool workers_;
  double started_at_;
};

// Best-per-kernel results ready for deployment export.
struct DeploymentEntry {
  std::string source;
  EvalResult eval;
  json launch;  // grid/block of the recorded instance
};

// Byte-stable JSON export of winning configurations. Incorrect results are
// refused outright.
inline void export_deployment(const std::map<std::string, DeploymentEntry>& results,
                              const std::filesystem::path& path) {
  json kernels = json::array();
  for (const auto& [name, entry] : results) {
    if (!entry.eval.correct) throw ExportRejectedError(name);
    kernels.push_back(json{{"name", name},
                           {"source", entry.source},
                           {"point", entry.eval.best_point.value_or(json::object())},
                           {"launch", entry.launch},
                           {"median_runtime_s", entry.eval.median_runtime_s},
                           {"speedup", entry.eval.speedup.value_or(0.0)}});
  }
  json doc{{"version", 1}, {"kernels", kernels}};
  write_file_atomic(path, doc.dump(2) + "\n");
}

inline void export_deployment(const UnitDatabase& db,
                              const std::map<std::string, std::pair<std::string, EvalResult>>&
                                  results,
                              const std::filesystem::path& path) {
  std::map<std::string, DeploymentEntry> entries;
  for (const auto& [name, se] : results)
    entries[name] = DeploymentEntry{se.first, se.second,
                                    db.kernel(name).instances.front().launch.to_json()};
  export_deployment(entries, path);
}

// ---------------------------------------------------------------------------
// Wire protocol: one JSON object per line over a stream socket.

namespace net_detail {

// Wire frames may echo attacker-controlled bytes inside error messages;
// never let invalid UTF-8 turn into an exception mid-reply.
inline std::string dump_frame(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

inline std::pair<std::string, uint16_t> parse_address(const std::string& address) {
  size_t colon = address.rfind(':');
  if (colon == std::string::npos)
    throw Error("BAD_REQUEST", "address must be HOST:PORT, got '" + address + "'");
  std::string host = address.substr(0, colon);
  if (host.empty()) host = "0.0.0.0";
  int port = std::stoi(address.substr(colon + 1));
  if (port < 0 || port > 65535) throw Error("BAD_REQUEST", "bad port in '" + address + "'");
  return {host, static_cast<uint16_t>(port)};
}

inline bool write_all(int fd, std::string_view data) {
  size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n <= 0) return false;
    off += static_cast<size_t>(n);
  }
  return true;
}

inline std::string protocol_code(const std::string& code) {
  if (code == "UNKNOWN_KERNEL" || code == "BACKEND_FAILURE" || code == "SERVER_SHUTDOWN")
    return code;
  return "BAD_REQUEST";
}

}  // namespace net_detail

class ReplayServer {
 public:
  ReplayServer(ReplayService& service, const std::string& listen_address)
      : service_(service) {
    auto [host, port] = net_detail::parse_address(listen_address);

    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    std::string port_str = std::to_string(port);
    if (::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res) != 0 || !res)
      throw Error("BIND_FAILURE", "cannot resolve " + listen_address);

    listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (listen_fd_ < 0) {
      ::freeaddrinfo(res);
      throw Error("BIND_FAILURE", "socket() failed");
    }
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0 ||
        ::listen(listen_fd_, 64) != 0) {
      ::freeaddrinfo(res);
      ::close(listen_fd_);
      throw Error("BIND_FAILURE", "cannot bind " + listen_address);
    }
    ::freeaddrinfo(res);

    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&actual), &len);
    port_ = ntohs(actual.sin_port);
  }

  ~ReplayServer() { stop(); }

  int port() const { return port_; }
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

  void start() {
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  // Graceful: stop accepting, let in-flight requests finish (their response
  // is still written), then unblock idle readers and join every connection.
  void stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) {
      if (acceptor_.joinable()) acceptor_.join();
      return;
    }
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> conns;
    {
      std::lock_guard lock(mu_);
      // SHUT_RD wakes threads blocked in recv; in-flight handlers can still
      // write their response before seeing EOF
      for (int fd : conn_fds_) ::shutdown(fd, SHUT_RD);
      conns.swap(connections_);
    }
    for (auto& t : conns)
      if (t.joinable()) t.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      pollfd pfd{listen_fd_, POLLIN, 0};
      int rc = ::poll(&pfd, 1, 200);
      if (stopping_) break;
      if (rc <= 0) continue;
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      std::lock_guard lock(mu_);
      connections_.emplace_back([this, fd] { connection_loop(fd); });
    }
  }

  void connection_loop(int fd) {
    {
      std::lock_guard lock(mu_);
      conn_fds_.insert(fd);
    }
    std::string buf;
    char chunk[4096];
    constexpr size_t kMaxFrame = 8 << 20;
    while (true) {
      size_t nl = buf.find('\n');
      if (nl == std::string::npos) {
        if (buf.size() > kMaxFrame) {
          net_detail::write_all(
              fd, net_detail::dump_frame(
                      json{{"id", 0},
                           {"ok", false},
                           {"error",
                            {{"code", "BAD_REQUEST"}, {"message", "frame too large"}}}}) +
                  "\n");
          break;
        }
        ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
        if (n <= 0) break;
        buf.append(chunk, static_cast<size_t>(n));
        continue;
      }
      std::string line = buf.substr(0, nl);
      buf.erase(0, nl + 1);
      if (is_blank(line)) continue;
      std::string reply = handle_line(line);
      if (!net_detail::write_all(fd, reply + "\n")) break;
    }
    {
      std::lock_guard lock(mu_);
      conn_fds_.erase(fd);
    }
    ::close(fd);
  }

  std::string handle_line(const std::string& line) {
    uint64_t id = 0;
    json error;
    try {
      json request = json::parse(line);
      if (request.contains("id") && request.at("id").is_number())
        id = request.at("id").get<uint64_t>();
      if (stopping_) throw ServerShutdownError();
      json result = service_.handle(request);
      return net_detail::dump_frame(json{{"id", id}, {"ok", true}, {"result", result}});
    } catch (const Error& e) {
      error = json{{"code", net_detail::protocol_code(e.code())}, {"message", e.what()}};
    } catch (const std::exception& e) {
      error = json{{"code", "BAD_REQUEST"}, {"message", e.what()}};
    }
    return net_detail::dump_frame(json{{"id", id}, {"ok", false}, {"error", error}});
  }

  ReplayService& service_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::thread acceptor_;
  std::vector<std::thread> connections_;
  std::set<int> conn_fds_;
  std::mutex mu_;
  std::atomic<bool> stopping_{false};
};

class ConnectError : public Error {
 public:
  explicit ConnectError(const std::string& msg) : Error("SERVER_UNREACHABLE", msg) {}
};

class ReplayClient {
 public:
  explicit ReplayClient(const std::string& address) {
    auto [host, port] = net_detail::parse_address(address);
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    std::string port_str = std::to_string(port);
    if (::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res) != 0 || !res)
      throw ConnectError("cannot resolve " + address);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
      ::freeaddrinfo(res);
      if (fd_ >= 0) ::close(fd_);
      throw ConnectError("cannot connect to " + address);
    }
    ::freeaddrinfo(res);
  }

  ~ReplayClient() {
    if (fd_ >= 0) ::close(fd_);
  }

  ReplayClient(const ReplayClient&) = delete;
  ReplayClient& operator=(const ReplayClient&) = delete;

  // Send one frame and wait for its reply. Protocol errors surface as
  // r3::Error with the frame's error code.
  json call(json request) {
    std::lock_guard lock(mu_);
    uint64_t id = next_id_++;
    request["id"] = id;
    if (!net_detail::write_all(fd_, request.dump() + "\n"))
      throw ConnectError("connection lost while sending");
    std::string line = read_line();
    json reply = json::parse(line);
    if (reply.value("id", uint64_t{0}) != id)
      throw Error("BAD_REQUEST", "response id mismatch");
    if (!reply.value("ok", false)) {
      const json& err = reply.at("error");
      throw Error(err.value("code", "BAD_REQUEST"), err.value("message", "request failed"));
    }
    return reply.at("result");
  }

  json status() { return call(json{{"kind", "status"}}); }

  EvalResult replay(const ReplayRequest& req) { return EvalResult::from_json(call(req.to_json())); }

 private:
  std::string read_line() {
    while (true) {
      size_t nl = inbuf_.find('\n');
      if (nl != std::string::npos) {
        std::string line = inbuf_.substr(0, nl);
        inbuf_.erase(0, nl + 1);
        return line;
      }
      char chunk[4096];
      ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
      if (n <= 0) throw ConnectError("connection closed by server");
      inbuf_.append(chunk, static_cast<size_t>(n));
    }
  }

  int fd_ = -1;
  uint64_t next_id_ = 1;
  std::mutex mu_;
  std::string inbuf_;
};

}  // namespace r3
