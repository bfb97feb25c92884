// arig: command-line front end for the engine, formats, training and gateway.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"

#include "arig/bench.hpp"
#include "arig/formats.hpp"
#include "arig/gateway.hpp"
#include "arig/synth.hpp"
#include "arig/train.hpp"
#include "arig/weights.hpp"

using namespace arig;

namespace {

enum Exit { kOk = 0, kUsage = 1, kInvalid = 2, kNumeric = 3 };

EngineConfig load_cfg(const std::string& path) {
  EngineConfig cfg = path.empty() ? EngineConfig{} : load_config(path);
  cfg.validate();
  return cfg;
}

std::shared_ptr<const EngineWeights> load_or_init(const EngineConfig& cfg, const std::string& path) {
  if (path.empty()) {
    log_info("no --weights given; using random weights from seed " + std::to_string(cfg.seed));
    return std::make_shared<const EngineWeights>(random_weights(cfg));
  }
  return std::make_shared<const EngineWeights>(from_bundle(cfg, load_weights(path)));
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

// ---- run --------------------------------------------------------------------

struct RunArgs {
  std::string config, weights, input, out, trace, snapshot_out, resume;
  std::optional<std::uint64_t> seed;
  bool teacher_forcing = false;
};

int cmd_run(const RunArgs& a) {
  EngineConfig cfg = load_cfg(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const auto w = load_or_init(cfg, a.weights);
  const StreamFile in = load_stream(a.input);
  const StreamSession ss = stream_to_inputs(in, cfg, a.teacher_forcing);
  std::ofstream trace;
  if (!a.trace.empty()) {
    trace.open(a.trace);
    if (!trace) throw FormatError("cannot write " + a.trace);
  }
  Session s(cfg, w);
  std::size_t first = 0;
  if (!a.resume.empty()) {
    s.restore(read_file(a.resume));
    first = s.frame();
    if (first > ss.inputs.size()) {
      throw ValidationError("run: snapshot is at frame " + std::to_string(first) + " but the stream has " +
                            std::to_string(ss.inputs.size()) + " frames");
    }
  } else if (!ss.inputs.empty()) {
    s.init(ss.reference_motion, ss.first_audio);
  }
  std::vector<FrameOutput> outs;
  for (std::size_t t = first; t < ss.inputs.size(); ++t) {
    outs.push_back(s.step(ss.inputs[t]));
    if (trace) trace << frame_output_json(outs.back()).dump() << "\n";
  }
  const std::string bytes = encode_stream(motion_stream(outs, cfg.motion_dim, cfg.fps));
  write_file(a.out, bytes);
  if (!a.snapshot_out.empty() && !ss.inputs.empty()) write_file(a.snapshot_out, s.snapshot());
  const auto& tel = s.telemetry();
  std::cout << "frames " << outs.size() << "\n"
            << "mean_latency_ms " << (tel.frames ? tel.total_micros / tel.frames / 1000.0 : 0.0) << "\n"
            << "keypoint_warnings " << tel.keypoint_warnings << "\n"
            << "output_crc32 " << hex32(crc32_of(bytes)) << "\n";
  return kOk;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
  std::string config, weights, baseline, report, record;
  std::size_t frames = 500, warmup = 10, context_cap = 64;
  bool require_pass = false;
};

int cmd_bench(const BenchArgs& a) {
  EngineConfig cfg = load_cfg(a.config);
  const auto w = load_or_init(cfg, a.weights);
  const BenchReport r = run_bench(cfg, w, {a.frames, a.warmup, a.context_cap, 7});
  Json j = bench_json(r);
  int code = kOk;
  if (!a.baseline.empty()) {
    const GuardResult g = check_regression(r, load_baseline(a.baseline));
    j["guard"] = {{"status", g.status == GuardStatus::Pass        ? "pass"
                             : g.status == GuardStatus::Regressed ? "regressed"
                                                                  : "no_baseline"},
                  {"message", g.message},
                  {"baseline_p50_ms", g.baseline_p50},
                  {"ratio", g.ratio}};
    if (a.require_pass && g.status != GuardStatus::Pass) code = kInvalid;
  }
  if (!a.record.empty()) record_baseline(r, a.record);
  if (!a.report.empty()) write_file(a.report, j.dump(2) + "\n");
  std::cout << std::fixed << std::setprecision(3) << "frames " << r.frames << " (warmup " << r.warmup
            << ", context cap " << r.context_cap << ")\n"
            << "frame    p50 " << r.frame.p50 << " ms  p95 " << r.frame.p95 << " ms  max " << r.frame.max
            << " ms\n";
  for (auto [name, s] : {std::pair{"ibu", &r.ibu}, {"csu", &r.csu}, {"pmp", &r.pmp}, {"sampler", &r.sampler}}) {
    std::cout << std::left << std::setw(8) << name << std::right << " p50 " << s->p50 << " ms  p95 "
              << s->p95 << " ms  mean " << s->mean << " ms\n";
  }
  std::cout << "fps " << r.fps << " (budget " << r.budget_ms << " ms/frame, p50 "
            << (r.frame.p50 <= r.budget_ms ? "within" : "over") << " budget)\n"
            << "profile " << r.profile << "\n";
  if (j.contains("guard")) std::cout << "guard " << j["guard"]["status"].get<std::string>() << ": "
                                     << j["guard"]["message"].get<std::string>() << "\n";
  return code;
}

// ---- serve / drive ----------------------------------------------------------

std::atomic<bool> g_stop{false};

struct ServeArgs {
  std::string config, weights, bind = "127.0.0.1";
  int port = 7070;
  std::size_t queue_depth = kDefaultQueueDepth;
};

int cmd_serve(const ServeArgs& a) {
  EngineConfig cfg = load_cfg(a.config);
  GatewayServer server(cfg, load_or_init(cfg, a.weights), {a.queue_depth});
  const int port = server.start(a.port, a.bind);
  std::cout << "listening on " << a.bind << ":" << port << std::endl;
  std::signal(SIGINT, [](int) { g_stop = true; });
  std::signal(SIGTERM, [](int) { g_stop = true; });
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
  std::cout << "served " << server.connections_served() << " connections\n";
  return kOk;
}

struct DriveArgs {
  std::string config, input, host = "127.0.0.1", transcript, masked;
  int port = 7070;
  std::size_t motion_display = 0;
  bool firehose = false, base64 = false, teacher_forcing = false;
};

int cmd_drive(const DriveArgs& a) {
  EngineConfig cfg = load_cfg(a.config);
  const StreamFile in = load_stream(a.input);
  DriveOptions opt;
  opt.firehose = a.firehose;
  opt.motion_display = a.motion_display;
  opt.base64 = a.base64;
  opt.teacher_forcing = a.teacher_forcing;
  const Transcript tr = client_drive(in, cfg, a.host, a.port, opt);
  if (!a.transcript.empty()) {
    std::string all;
    for (const auto& l : tr.sent) all += "> " + l + "\n";
    for (const auto& l : tr.received) all += "< " + l + "\n";
    write_file(a.transcript, all);
  }
  if (!a.masked.empty()) write_file(a.masked, masked_transcript(tr));
  const LatencySummary e2e = summarize_ms(tr.e2e_micros);
  std::cout << std::fixed << std::setprecision(3) << "frame_outs " << tr.frame_outs << "\n"
            << "e2e p50 " << e2e.p50 << " ms  p95 " << e2e.p95 << " ms\n"
            << "fps " << tr.fps() << "\n"
            << "masked_crc32 " << hex32(crc32_of(masked_transcript(tr))) << "\n";
  if (!tr.complete) {
    std::cerr << "error: drive incomplete: " << tr.failure << "\n";
    return kInvalid;
  }
  return kOk;
}

// ---- training / gradcheck ---------------------------------------------------

struct TrainArgs {
  ToyTrainConfig cfg;
  std::string report, loss_csv;
  double lr = 1e-4;
};

int cmd_train(TrainArgs a) {
  a.cfg.adam.lr = a.lr;
  const ToyTrainReport r = train_toy(a.cfg);
  const std::string text = toy_report_text(a.cfg, r);
  if (!a.report.empty()) write_file(a.report, text);
  if (!a.loss_csv.empty()) write_loss_csv(a.loss_csv, r.losses);
  std::cout << text;
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t dim, double tol) {
  const GradcheckReport r = gradcheck_toy(seed, dim);
  std::cout << std::scientific << std::setprecision(3);
  for (const auto& e : r.tensors) {
    std::cout << std::left << std::setw(28) << e.name << std::right << " rel " << e.rel_error << "  max|g| "
              << e.max_abs_analytic << "\n";
  }
  std::cout << "worst " << r.worst << " (tolerance " << tol << ")\n";
  return r.worst <= tol ? kOk : kNumeric;
}

// ---- synth / inspect / init-weights ------------------------------------------

int cmd_synth(const std::string& script, const std::string& out, const std::string& ann) {
  const SynthOutput o = synth_generate(parse_synth_script(read_file(script)));
  save_stream(o.stream, out);
  if (!ann.empty()) write_file(ann, encode_annotations(o.annotations));
  const auto rep = check_coarse_consistency(o.annotations);
  std::cout << "frames " << o.stream.frames.size() << "\nannotation_violations " << rep.violations.size()
            << "\n";
  return kOk;
}

void print_snapshot(const std::string& bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 8 || r.raw(4) != "ARSN") throw FormatError("snapshot: bad magic");
  const std::uint32_t version = r.u32();
  if (version != Session::kVersion) throw VersionError("snapshot: unsupported version " + std::to_string(version));
  std::cout << "magic ARSN\nversion " << version << "\nframe " << r.u64();
  const std::uint64_t state = r.u64();
  std::cout << "\nstate " << state << " (" << state_name(state) << ")\nseed " << r.u64() << "\n";
  for (const char* who : {"agent", "user"}) {
    const std::uint64_t n = r.u64();
    if (n > 4096) throw FormatError("snapshot: VAD history too long");
    for (std::uint64_t i = 0; i < n; ++i) r.f32();
    const std::uint64_t hang = r.u64();
    std::cout << "vad." << who << " history " << n << " hangover " << hang << " active " << int(r.u8()) << "\n";
  }
  const CacheSet cs = read_caches(r);
  r.expect_done("snapshot");
  std::cout << "chunk_cache.agent " << cs.agent.tokens().size() << "/" << cs.agent.window() << "\n"
            << "chunk_cache.user " << cs.user.tokens().size() << "/" << cs.user.window() << "\n"
            << "context " << cs.context.size() << "/" << cs.context.capacity();
  if (!cs.context.empty()) {
    std::cout << " newest chunk " << cs.context.entries().back().chunk_index
              << (cs.context.entries().back().complete ? " complete" : " partial");
  }
  std::cout << "\nbytes " << cs.byte_size() << "\n";
}

int cmd_inspect(const std::string& weights, const std::string& stream, const std::string& snapshot,
                const std::string& annotations) {
  if (!weights.empty()) {
    const WeightBundle b = load_weights(weights);
    std::size_t total = 0;
    std::cout << "magic ARIG\nversion " << kWeightsVersion << "\ntensors " << b.tensors.size() << "\n";
    for (const auto& t : b.tensors) {
      std::cout << std::left << std::setw(34) << t.name << std::right << " " << t.tensor.shape() << "\n";
      total += t.tensor.size();
    }
    std::cout << "parameters " << total << "\nchecksum ok\n";
  }
  if (!stream.empty()) {
    const StreamFile s = load_stream(stream);
    const auto& h = s.header;
    std::cout << "magic ARGS\nversion " << h.version << "\ntracks " << h.track_count << "\naudio_dim "
              << h.audio_dim << "\nmotion_dim " << h.motion_dim << "\nfps " << h.fps << "\nenergies "
              << (h.has_energy() ? "yes" : "no") << "\nextractor " << h.extractor << "\nframes "
              << s.frames.size() << "\n";
  }
  if (!snapshot.empty()) print_snapshot(read_file(snapshot));
  if (!annotations.empty()) {
    const auto rows = decode_annotations(read_file(annotations));
    const auto rep = check_coarse_consistency(rows);
    std::cout << "frames " << rows.size() << "\ncoarse_violations " << rep.violations.size() << "\n";
    for (std::size_t i = 0; i < rep.violations.size() && i < 10; ++i) {
      std::cout << "  frame " << rep.violations[i] << "\n";
    }
  }
  return kOk;
}

int cmd_init_weights(const std::string& config, const std::string& out, std::optional<std::uint64_t> seed) {
  EngineConfig cfg = load_cfg(config);
  if (seed) cfg.seed = *seed;
  EngineWeights w = random_weights(cfg);
  save_weights(to_bundle(w), out);
  std::cout << "parameters " << w.parameter_count() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"arig: real-time dyadic head-motion generation engine"};
  app.require_subcommand(1);
  std::string level_name = "warn";
  app.add_option("--log-level", level_name, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  RunArgs run;
  auto* r = app.add_subcommand("run", "generate agent motion for a feature stream");
  r->add_option("--config", run.config, "config file (key = value)");
  r->add_option("--weights", run.weights, "weight bundle; random weights from the seed if omitted");
  r->add_option("--input", run.input, "input stream file")->required();
  r->add_option("--out", run.out, "output motion stream file")->required();
  r->add_option("--seed", run.seed, "override the configured seed");
  r->add_option("--trace", run.trace, "write one JSON record per frame");
  r->add_option("--snapshot-out", run.snapshot_out, "write the final session snapshot");
  r->add_option("--resume", run.resume, "continue from a session snapshot");
  r->add_flag("--teacher-forcing", run.teacher_forcing, "feed recorded agent motion instead of generated");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "per-frame latency benchmark");
  b->add_option("--config", bench.config);
  b->add_option("--weights", bench.weights);
  b->add_option("--frames", bench.frames, "measured frames")->capture_default_str();
  b->add_option("--warmup", bench.warmup, "unmeasured leading frames")->capture_default_str();
  b->add_option("--context-cap", bench.context_cap, "context truncation (0 = full)")->capture_default_str();
  b->add_option("--baseline", bench.baseline, "baseline JSON to compare against");
  b->add_option("--report", bench.report, "write the JSON report here");
  b->add_option("--record-baseline", bench.record, "store this run as the baseline for this machine");
  b->add_flag("--require-pass", bench.require_pass, "exit 2 unless the regression guard passes");

  ServeArgs serve;
  auto* s = app.add_subcommand("serve", "run the session gateway");
  s->add_option("--config", serve.config);
  s->add_option("--weights", serve.weights);
  s->add_option("--port", serve.port)->capture_default_str();
  s->add_option("--bind", serve.bind)->capture_default_str();
  s->add_option("--queue-depth", serve.queue_depth)->capture_default_str();

  DriveArgs drive;
  auto* d = app.add_subcommand("drive", "stream a feature file to a gateway");
  d->add_option("--config", drive.config);
  d->add_option("--input", drive.input)->required();
  d->add_option("--host", drive.host)->capture_default_str();
  d->add_option("--port", drive.port)->capture_default_str();
  d->add_option("--transcript", drive.transcript, "write both directions");
  d->add_option("--masked", drive.masked, "write received lines with latency fields masked");
  d->add_option("--motion-display", drive.motion_display, "coordinates per frame_out (0 = all)");
  d->add_flag("--firehose", drive.firehose, "send as fast as the server answers");
  d->add_flag("--base64", drive.base64, "base64 f32 payloads");
  d->add_flag("--teacher-forcing", drive.teacher_forcing);

  TrainArgs train;
  auto* t = app.add_subcommand("train-diffmlp", "train the diffusion head on the toy task");
  t->add_option("--steps", train.cfg.steps)->capture_default_str();
  t->add_option("--batch", train.cfg.batch)->capture_default_str();
  t->add_option("--lr", train.lr)->capture_default_str();
  t->add_option("--seed", train.cfg.seed)->capture_default_str();
  t->add_option("--report", train.report, "write the text report here");
  t->add_option("--loss-csv", train.loss_csv, "write per-step losses");

  std::uint64_t gc_seed = 7;
  std::size_t gc_dim = 8;
  double gc_tol = 1e-4;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of the diffusion head");
  g->add_option("--seed", gc_seed)->capture_default_str();
  g->add_option("--dim", gc_dim)->capture_default_str();
  g->add_option("--tolerance", gc_tol)->capture_default_str();

  std::string synth_script, synth_out, synth_ann;
  auto* y = app.add_subcommand("synth", "generate a scripted synthetic stream");
  y->add_option("--script", synth_script)->required();
  y->add_option("--out", synth_out)->required();
  y->add_option("--annotations", synth_ann, "write the state annotation file");

  std::string iw, is, isnap, iann;
  auto* i = app.add_subcommand("inspect", "print validated headers");
  i->add_option("--weights", iw);
  i->add_option("--stream", is);
  i->add_option("--snapshot", isnap);
  i->add_option("--annotations", iann);

  std::string init_config, init_out;
  std::optional<std::uint64_t> init_seed;
  auto* w = app.add_subcommand("init-weights", "write randomly initialized weights");
  w->add_option("--config", init_config);
  w->add_option("--out", init_out)->required();
  w->add_option("--seed", init_seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }
  static const std::map<std::string, LogLevel> levels = {
      {"debug", LogLevel::Debug}, {"info", LogLevel::Info}, {"warn", LogLevel::Warn}, {"error", LogLevel::Error}};
  log_level() = levels.at(level_name);

  try {
    if (*r) return cmd_run(run);
    if (*b) return cmd_bench(bench);
    if (*s) return cmd_serve(serve);
    if (*d) return cmd_drive(drive);
    if (*t) return cmd_train(train);
    if (*g) return cmd_gradcheck(gc_seed, gc_dim, gc_tol);
    if (*y) return cmd_synth(synth_script, synth_out, synth_ann);
    if (*i) {
      if (iw.empty() && is.empty() && isnap.empty() && iann.empty()) {
        std::cerr << "inspect: give --weights, --stream, --snapshot or --annotations\n";
        return kUsage;
      }
      return cmd_inspect(iw, is, isnap, iann);
    }
    if (*w) return cmd_init_weights(init_config, init_out, init_seed);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  }
  return kUsage;
}
