#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <thread>

#include "r3/replay_server.hpp"

using namespace r3;
namespace fs = std::filesystem;

namespace {

struct SuiteFixture {
  fs::path dir;
  SuiteOracle oracle;

  SuiteFixture() {
    dir = fs::temp_directory_path() / "r3-server-suite";
    fs::remove_all(dir);
    oracle = make_benchmark_suite(dir, 7);
  }
  ~SuiteFixture() { fs::remove_all(dir); }
};

ReplayRequest replay_req(const std::string& kernel, const std::string& source,
                         const json& point, uint64_t seed = 1) {
  ReplayRequest req;
  req.kind = "replay";
  req.kernel_name = kernel;
  req.candidate_source = source;
  req.point = point;
  req.seed = seed;
  return req;
}

// raw socket for protocol fuzzing
struct RawConn {
  int fd = -1;
  explicit RawConn(int port) {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<uint16_t>(port));
    ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
    EXPECT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)), 0);
  }
  ~RawConn() {
    if (fd >= 0) ::close(fd);
  }
  void send_bytes(const std::string& data) {
    ASSERT_TRUE(net_detail::write_all(fd, data));
  }
  std::string read_line() {
    std::string buf;
    char c;
    while (::recv(fd, &c, 1, 0) == 1) {
      if (c == '\n') return buf;
      buf.push_back(c);
    }
    return buf;
  }
};

}  // namespace

TEST(SnapshotFormat, GoldenBytes) {
  Snapshot s;
  s.buffers.push_back(Buffer{1, {0xAA, 0xBB}});
  s.buffers.push_back(Buffer{7, {}});
  std::string encoded = encode_snapshot(s);
  const unsigned char golden[] = {
      'M',  'N',  'E',  'M',              // magic
      0x01, 0x00, 0x00, 0x00,             // version
      0x02, 0x00, 0x00, 0x00,             // buffer count
      0x01, 0x00, 0x00, 0x00,             // buffer_id 1
      0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // length 2
      0xAA, 0xBB,                         // payload
      0x07, 0x00, 0x00, 0x00,             // buffer_id 7
      0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00,  // length 0
  };
  ASSERT_EQ(encoded.size(), sizeof(golden));
  for (size_t i = 0; i < sizeof(golden); ++i)
    EXPECT_EQ(static_cast<unsigned char>(encoded[i]), golden[i]) << "byte " << i;
  EXPECT_EQ(decode_snapshot(encoded), s);
}

TEST(SnapshotFormat, FileRoundTripBitExact) {
  auto rng = make_rng(4);
  fs::path dir = fs::temp_directory_path() / "r3-snap";
  fs::create_directories(dir);
  for (int round = 0; round < 20; ++round) {
    Snapshot s;
    size_t buffers = rng() % 4;
    for (size_t i = 0; i < buffers; ++i) {
      Buffer b;
      b.buffer_id = static_cast<uint32_t>(rng());
      b.bytes.resize(rng() % 300);
      for (auto& byte : b.bytes) byte = static_cast<uint8_t>(rng() % 256);
      s.buffers.push_back(std::move(b));
    }
    fs::path p = dir / "x.snap";
    write_snapshot_file(p, s);
    EXPECT_EQ(read_snapshot_file(p), s);
    std::string bytes1 = read_file(p);
    write_snapshot_file(p, decode_snapshot(bytes1));
    EXPECT_EQ(read_file(p), bytes1);
  }
  fs::remove_all(dir);
}

TEST(SnapshotFormat, CorruptInputsRejected) {
  Snapshot s;
  s.buffers.push_back(Buffer{1, {1, 2, 3}});
  std::string good = encode_snapshot(s);
  EXPECT_THROW(decode_snapshot("MNEX" + good.substr(4)), Error);
  EXPECT_THROW(decode_snapshot(good.substr(0, 10)), Error);
  EXPECT_THROW(decode_snapshot(good.substr(0, good.size() - 1)), Error);
  EXPECT_THROW(decode_snapshot(good + "x"), Error);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(decode_snapshot(bad_version), Error);
}

TEST(UnitDb, MissingManifestFailsLoad) {
  fs::path dir = fs::temp_directory_path() / "r3-empty-db";
  fs::remove_all(dir);
  fs::create_directories(dir);
  EXPECT_THROW(UnitDatabase::load(dir), DbError);
  write_file_atomic(dir / "manifest.json", "not json at all");
  EXPECT_THROW(UnitDatabase::load(dir), DbError);
  fs::remove_all(dir);
}

TEST(Service, StatusReportsWorkersAndUnits) {
  SuiteFixture fx;
  ServiceConfig cfg;
  cfg.workers = 2;
  ReplayService service(UnitDatabase::load(fx.dir), cfg);
  json st = service.status();
  EXPECT_EQ(st.at("workers"), 2);
  EXPECT_EQ(st.at("idle_workers"), 2);
  EXPECT_EQ(st.at("units_loaded"), 5u);  // stencil has 2 instances
  EXPECT_EQ(st.at("kernels").size(), 4u);
}

TEST(Service, IdentityCandidateReplaysAtSpeedupOne) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("axpy");
  EvalResult r = service.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));
  EXPECT_TRUE(r.correct);
  EXPECT_EQ(r.runtimes_s.size(), 5u);
  ASSERT_TRUE(r.speedup.has_value());
  EXPECT_DOUBLE_EQ(*r.speedup, 1.0);  // noise 0: identity replays exactly
  EXPECT_DOUBLE_EQ(*r.speedup * r.median_runtime_s,
                   rec.instances[0].baseline_runtime_s);
}

TEST(Service, CorruptingCandidateReportsMismatchLocation) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("reduce");
  EvalResult r = service.replay(
      replay_req("reduce", "scheme=tree;\nbug_flag=on;\n", rec.recorded_point));
  EXPECT_FALSE(r.correct);
  EXPECT_FALSE(r.speedup.has_value());
  ASSERT_TRUE(r.verdict.first_mismatch.has_value());
  EXPECT_EQ(r.verdict.first_mismatch->buffer_id, 1u);
  EXPECT_EQ(r.verdict.first_mismatch->byte_offset, 17u);
}

TEST(Service, ErrorsCarryProtocolCodes) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("axpy");

  try {
    service.replay(replay_req("nope", rec.seed_source, rec.recorded_point));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "UNKNOWN_KERNEL");
  }

  try {
    service.replay(replay_req("axpy", "unroll=banana;\n", rec.recorded_point));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "BACKEND_FAILURE");
  }

  ReplayRequest no_point;
  no_point.kind = "replay";
  no_point.kernel_name = "axpy";
  no_point.candidate_source = rec.seed_source;
  EXPECT_THROW(service.replay(no_point), Error);
}

TEST(Service, RepeatedIdenticalReplaysAreByteIdentical) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("stencil");
  std::string first;
  for (int i = 0; i < 10; ++i) {
    EvalResult r = service.replay(
        replay_req("stencil", "tiling=on;\napprox=on;\n", rec.recorded_point, 99));
    std::string bytes = r.to_json().dump();
    if (i == 0)
      first = bytes;
    else
      EXPECT_EQ(bytes, first);
  }
}

// A candidate that writes garbage must never leak into the next verdict.
TEST(Service, WorkerBuffersFullyResetBetweenReplays) {
  SuiteFixture fx;
  ServiceConfig cfg;
  cfg.workers = 1;  // force every request through the same scratch buffers
  ReplayService service(UnitDatabase::load(fx.dir), cfg);
  const KernelRecord& rec = service.db().kernel("reduce");
  auto rng = make_rng(31);
  for (int i = 0; i < 60; ++i) {
    bool corrupt = rng() % 2 == 0;
    std::string source = corrupt ? "scheme=tree;\nbug_flag=on;\n" : "scheme=warp;\n";
    EvalResult r = service.replay(replay_req("reduce", source, rec.recorded_point, rng()));
    EXPECT_EQ(r.correct, !corrupt) << "iteration " << i;
  }
}

TEST(Service, TuneFindsSliceOptimumOnSmallSpace) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("reduce");

  ReplayRequest req;
  req.kind = "tune";
  req.kernel_name = "reduce";
  req.candidate_source = "scheme=warp;\n";  // best feature slice
  req.tune_space = rec.tune_space;
  req.budget = 30;  // space has 16 points; exhaustion guarantees the optimum
  req.seed = 3;
  EvalResult r = service.tune(req);
  ASSERT_TRUE(r.correct);
  ASSERT_TRUE(r.best_point.has_value());
  EXPECT_EQ((*r.best_point).at("block"), 256);
  EXPECT_EQ((*r.best_point).at("atomics"), true);
  EXPECT_EQ(r.runtimes_s.size(), 10u);  // confirmation replays
  EXPECT_DOUBLE_EQ(r.median_runtime_s, fx.oracle.kernels.at("reduce").best_runtime_s);
}

TEST(Service, AllIncorrectTuneHasNoBest) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("reduce");
  ReplayRequest req;
  req.kind = "tune";
  req.kernel_name = "reduce";
  req.candidate_source = "scheme=warp;\nbug_flag=on;\n";
  req.tune_space = rec.tune_space;
  req.budget = 8;
  EvalResult r = service.tune(req);
  EXPECT_FALSE(r.correct);
  EXPECT_FALSE(r.best_point.has_value());
  EXPECT_FALSE(r.speedup.has_value());
}

TEST(Service, ValidateChecksEveryInstance) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("stencil");
  ReplayRequest req;
  req.kind = "validate";
  req.kernel_name = "stencil";
  req.candidate_source = rec.seed_source;
  req.point = rec.recorded_point;
  EvalResult r = service.validate(req);
  EXPECT_TRUE(r.correct);

  req.candidate_source = "tiling=on;\napprox=on;\n";  // in-tolerance on both instances
  EvalResult r2 = service.validate(req);
  EXPECT_TRUE(r2.correct);
}

TEST(Deployment, ExportIsByteStableAndRejectsIncorrect) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  const KernelRecord& rec = service.db().kernel("axpy");
  EvalResult good = service.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));

  std::map<std::string, std::pair<std::string, EvalResult>> results;
  results["axpy"] = {rec.seed_source, good};
  fs::path p1 = fx.dir / "dep1.json";
  fs::path p2 = fx.dir / "dep2.json";
  export_deployment(service.db(), results, p1);
  export_deployment(service.db(), results, p2);
  EXPECT_EQ(read_file(p1), read_file(p2));

  json parsed = json::parse(read_file(p1));
  ASSERT_EQ(parsed.at("kernels").size(), 1u);
  const json& entry = parsed.at("kernels")[0];
  EXPECT_EQ(entry.at("name"), "axpy");
  EXPECT_EQ(entry.at("source"), rec.seed_source);
  EXPECT_EQ(entry.at("point"), *good.best_point);
  EXPECT_EQ(entry.at("launch"), rec.instances[0].launch.to_json());

  EvalResult bad = good;
  bad.correct = false;
  results["axpy"] = {rec.seed_source, bad};
  EXPECT_THROW(export_deployment(service.db(), results, p1), ExportRejectedError);
}

// ---------------------------------------------------------------------------
// Wire protocol

TEST(Wire, StatusReplayAndErrorsOverSocket) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  ReplayServer server(service, "127.0.0.1:0");
  server.start();

  ReplayClient client(server.address());
  json st = client.status();
  EXPECT_EQ(st.at("workers"), 2);

  const KernelRecord& rec = service.db().kernel("axpy");
  EvalResult r = client.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));
  EXPECT_TRUE(r.correct);
  EXPECT_DOUBLE_EQ(*r.speedup, 1.0);

  try {
    client.replay(replay_req("ghost", rec.seed_source, rec.recorded_point));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "UNKNOWN_KERNEL");
  }

  // tune over the wire
  ReplayRequest treq;
  treq.kind = "tune";
  treq.kernel_name = "gated";
  treq.candidate_source = service.db().kernel("gated").seed_source;
  treq.tune_space = service.db().kernel("gated").tune_space;
  treq.budget = 20;  // 15-point space: exhausted
  json result = client.call(treq.to_json());
  EvalResult tr = EvalResult::from_json(result);
  EXPECT_TRUE(tr.correct);
  EXPECT_DOUBLE_EQ(tr.median_runtime_s, fx.oracle.kernels.at("gated").seed_slice_best_runtime_s);

  server.stop();
}

TEST(Wire, MalformedFramesGetBadRequestWithoutCrash) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  ReplayServer server(service, "127.0.0.1:0");
  server.start();

  std::vector<std::string> bad_frames = {
      "garbage",
      "{not json",
      "[]",
      "{\"id\": \"string-id\", \"kind\": \"status\"}",  // wrong id type tolerated as 0
      "{\"kind\": \"mystery\"}",
      "{\"kind\": \"replay\"}",
      "{\"id\": 4, \"kind\": \"replay\", \"kernel_name\": \"axpy\"}",
      "{\"id\": 5, \"kind\": \"tune\", \"kernel_name\": \"axpy\", \"candidate_source\": \"x\"}",
      std::string(300000, 'z'),
  };
  {
    RawConn conn(server.port());
    for (const auto& frame : bad_frames) {
      conn.send_bytes(frame + "\n");
      std::string line = conn.read_line();
      ASSERT_FALSE(line.empty());
      json reply = json::parse(line);
      if (reply.value("ok", true)) continue;  // some frames are legal (status with id 0)
      EXPECT_EQ(reply.at("error").at("code"), "BAD_REQUEST") << frame.substr(0, 60);
    }
  }

  // fuzz random bytes; server must stay alive
  auto rng = make_rng(6);
  {
    RawConn conn(server.port());
    for (int i = 0; i < 200; ++i) {
      std::string noise;
      size_t len = rng() % 64;
      for (size_t k = 0; k < len; ++k) {
        char c = static_cast<char>(rng() % 256);
        if (c == '\n') c = ' ';
        noise.push_back(c);
      }
      if (is_blank(noise)) noise += "x";  // blank lines are keepalives, no reply
      conn.send_bytes(noise + "\n");
      std::string line = conn.read_line();
      ASSERT_FALSE(line.empty()) << "server died at iteration " << i;
    }
  }

  // a valid request still succeeds afterwards
  ReplayClient client(server.address());
  EXPECT_EQ(client.status().at("workers"), 2);
  server.stop();
}

TEST(Wire, OversizedFrameIsRejectedNotFatal) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  ReplayServer server(service, "127.0.0.1:0");
  server.start();
  {
    RawConn conn(server.port());
    std::string huge(9 << 20, 'a');  // exceeds the 8 MiB frame cap, no newline
    conn.send_bytes(huge);
    std::string line = conn.read_line();
    json reply = json::parse(line);
    EXPECT_FALSE(reply.at("ok").get<bool>());
  }
  ReplayClient client(server.address());
  EXPECT_EQ(client.status().at("workers"), 2);
  server.stop();
}

TEST(Wire, StopAnswersPendingConnectionsAndExitsCleanly) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), ServiceConfig{});
  auto server = std::make_unique<ReplayServer>(service, "127.0.0.1:0");
  server->start();
  ReplayClient client(server->address());
  EXPECT_EQ(client.status().at("workers"), 2);
  server->stop();
  // further calls on the dead server fail with a transport error
  EXPECT_THROW(client.status(), Error);
  server.reset();
}

// ---------------------------------------------------------------------------
// Subprocess backend

TEST(SubprocessBackend, RunsExternalCommandContract) {
  SuiteFixture fx;
  fs::path script = fx.dir / "echo_backend.sh";
  {
    std::ofstream out(script);
    out << "#!/bin/sh\n"
           "cd \"$1\" || exit 1\n"
           "cp prologue.snap epilogue.snap\n"
           "python3 -c \"import json; j=json.load(open('job.json')); "
           "json.dump({'runtimes_s':[0.002]*j['reps']}, open('result.json','w'))\"\n";
  }
  fs::permissions(script, fs::perms::owner_all);

  ServiceConfig cfg;
  cfg.backend = "subprocess";
  cfg.subprocess_command = script.string();
  ReplayService service(UnitDatabase::load(fx.dir), cfg);
  const KernelRecord& rec = service.db().kernel("axpy");

  // copying the prologue is NOT the recorded epilogue: incorrect but well-formed
  EvalResult r = service.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));
  EXPECT_FALSE(r.correct);
  EXPECT_EQ(r.runtimes_s.size(), 5u);
  EXPECT_DOUBLE_EQ(r.median_runtime_s, 0.002);

  // a command that fails maps to BACKEND_FAILURE
  ServiceConfig bad;
  bad.backend = "subprocess";
  bad.subprocess_command = "/bin/false";
  ReplayService failing(UnitDatabase::load(fx.dir), bad);
  try {
    failing.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), "BACKEND_FAILURE");
  }
}

TEST(Service, ConcurrentReplaysScaleAcrossWorkers) {
  SuiteFixture fx;
  ServiceConfig cfg;
  cfg.workers = 4;
  ReplayService service(UnitDatabase::load(fx.dir), cfg);
  const KernelRecord& rec = service.db().kernel("axpy");
  std::atomic<int> correct{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&, t] {
      for (int i = 0; i < 25; ++i) {
        EvalResult r = service.replay(
            replay_req("axpy", rec.seed_source, rec.recorded_point,
                       static_cast<uint64_t>(t * 100 + i)));
        if (r.correct) ++correct;
      }
    });
  for (auto& th : threads) th.join();
  EXPECT_EQ(correct.load(), 200);
}

namespace {

// Backend with a fixed service time, so worker-count scaling is measurable.
class SleepingBackend : public ReplayBackend {
 public:
  explicit SleepingBackend(double seconds) : seconds_(seconds) {}
  BackendRun run(const KernelRecord&, const ReplayUnit& unit, const std::string&,
                 const TunePoint&, int, int reps, uint64_t, Snapshot& working) override {
    std::this_thread::sleep_for(std::chrono::duration<double>(seconds_));
    BackendRun out;
    out.ok = true;
    out.runtimes_s.assign(static_cast<size_t>(reps), seconds_);
    for (auto& wb : working.buffers) wb.bytes = unit.epilogue.find(wb.buffer_id)->bytes;
    return out;
  }

 private:
  double seconds_;
};

double replays_per_second(ReplayService& service, const KernelRecord& rec, int clients,
                          int total) {
  std::atomic<int> remaining{total};
  double started = mono_s();
  std::vector<std::thread> threads;
  for (int c = 0; c < clients; ++c)
    threads.emplace_back([&] {
      while (remaining.fetch_sub(1) > 0)
        service.replay(replay_req(rec.name, rec.seed_source, rec.recorded_point));
    });
  for (auto& t : threads) t.join();
  return static_cast<double>(total) / (mono_s() - started);
}

}  // namespace

// Throughput under saturating load scales with the worker count: w workers
// land within [0.8w, w] of the single-worker rate.
TEST(Service, ThroughputScalesWithWorkers) {
  SuiteFixture fx;
  const int w = 4;
  ReplayService one(UnitDatabase::load(fx.dir), std::make_unique<SleepingBackend>(0.004), 1);
  ReplayService many(UnitDatabase::load(fx.dir), std::make_unique<SleepingBackend>(0.004), w);
  const KernelRecord& rec = one.db().kernel("axpy");

  double rate1 = replays_per_second(one, rec, 2 * w, 60);
  double ratew = replays_per_second(many, rec, 2 * w, 240);
  double ratio = ratew / rate1;
  EXPECT_GE(ratio, 0.8 * w);
  EXPECT_LE(ratio, 1.15 * w);  // small allowance for timer jitter
}

// Shutdown mid-request: the in-flight reply is still delivered before the
// connection is torn down.
TEST(Wire, InFlightRequestCompletesAcrossStop) {
  SuiteFixture fx;
  ReplayService service(UnitDatabase::load(fx.dir), std::make_unique<SleepingBackend>(0.3), 1);
  ReplayServer server(service, "127.0.0.1:0");
  server.start();

  const KernelRecord& rec = service.db().kernel("axpy");
  EvalResult result;
  std::atomic<bool> got_reply{false};
  std::thread requester([&] {
    ReplayClient client(server.address());
    result = client.replay(replay_req("axpy", rec.seed_source, rec.recorded_point));
    got_reply = true;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(80));  // request is in flight
  server.stop();  // must drain, not sever
  requester.join();
  EXPECT_TRUE(got_reply.load());
  EXPECT_TRUE(result.correct);
}
