#pragma once

// Per-frame latency benchmark and the committed-baseline regression guard.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "arig/engine.hpp"

namespace arig {

// Random but valid inputs: features ~ N(0, 1), energies alternating between
// speech-like and silent stretches so the VAD and state paths see both.
inline std::vector<FrameInput> synthetic_inputs(const EngineConfig& cfg, std::size_t frames,
                                                std::uint64_t seed) {
  std::vector<FrameInput> out;
  out.reserve(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    CounterRng rng(seed, 0xbe00000000ULL + t);
    FrameInput in;
    in.frame_index = t;
    in.agent_audio.resize(cfg.audio_dim);
    in.user_audio.resize(cfg.audio_dim);
    in.user_motion.resize(cfg.motion_dim);
    rng.fill_normal<float>(in.agent_audio);
    rng.fill_normal<float>(in.user_audio);
    for (std::size_t i = 0; i < cfg.motion_dim; ++i) {
      in.user_motion[i] = static_cast<float>(0.5 + 0.1 * rng.normal());
    }
    in.agent_energy = ((t / 50) % 2 == 0) ? 0.08f : 0.001f;
    in.user_energy = ((t / 35) % 3 == 1) ? 0.08f : 0.001f;
    out.push_back(std::move(in));
  }
  return out;
}

struct LatencySummary {
  double p50 = 0, p95 = 0, max = 0, mean = 0;  // milliseconds
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  // nearest rank
  std::size_t rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  rank = std::clamp<std::size_t>(rank, 1, v.size());
  return v[rank - 1];
}

inline LatencySummary summarize_ms(const std::vector<double>& micros) {
  LatencySummary s;
  if (micros.empty()) return s;
  std::vector<double> ms(micros.size());
  std::transform(micros.begin(), micros.end(), ms.begin(), [](double u) { return u / 1000.0; });
  s.p50 = percentile(ms, 0.50);
  s.p95 = percentile(ms, 0.95);
  s.max = *std::max_element(ms.begin(), ms.end());
  double sum = 0;
  for (double x : ms) sum += x;
  s.mean = sum / static_cast<double>(ms.size());
  return s;
}

struct BenchOptions {
  std::size_t frames = 500;
  std::size_t warmup = 10;       // excluded from the statistics
  std::size_t context_cap = 64;  // 0 keeps the configured capacity
  std::uint64_t input_seed = 7;
};

struct BenchReport {
  std::size_t frames = 0;        // measured frames
  std::size_t warmup = 0;
  std::size_t context_cap = 0;
  LatencySummary frame;
  LatencySummary ibu, csu, pmp, sampler;
  double stage_sum_micros = 0;   // sum over measured frames of the four stages
  double frame_sum_micros = 0;   // sum over measured frames of frame latency
  double wall_seconds = 0;       // wall time of the measured frames
  double fps = 0;
  std::size_t denoiser_evals_per_frame = 0;
  std::string profile;
  double budget_ms = 40.0;
};

inline std::string cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) return detail::trim(line.substr(pos + 1));
    }
  }
  return "unknown-cpu";
}

inline std::string compiler_id() {
#if defined(__clang__)
  return "clang " __clang_version__;
#elif defined(__GNUC__)
  return "gcc " __VERSION__;
#else
  return "unknown-compiler";
#endif
}

// Baselines are keyed by CPU model and compiler.
inline std::string machine_profile() { return cpu_model() + " | " + compiler_id(); }

inline BenchReport run_bench(EngineConfig cfg, std::shared_ptr<const EngineWeights> w,
                             const BenchOptions& opt) {
  using clock = std::chrono::steady_clock;
  cfg.context_cap = opt.context_cap;
  cfg.incremental_context = true;  // the real-time path; bit-identical to a full decode
  const auto inputs = synthetic_inputs(cfg, opt.frames + opt.warmup, opt.input_seed);
  std::vector<float> ref(cfg.motion_dim, 0.5f);
  Session s(cfg, std::move(w));
  s.init(ref, inputs.empty() ? std::vector<float>(cfg.audio_dim, 0.0f) : inputs[0].agent_audio);
  for (std::size_t i = 0; i < opt.warmup && i < inputs.size(); ++i) s.step(inputs[i]);

  std::vector<double> lat, ibu, csu, pmp, smp;
  BenchReport r;
  const auto t0 = clock::now();
  for (std::size_t i = opt.warmup; i < inputs.size(); ++i) {
    const FrameOutput o = s.step(inputs[i]);
    lat.push_back(o.latency_micros);
    ibu.push_back(o.stage_micros.ibu);
    csu.push_back(o.stage_micros.csu);
    pmp.push_back(o.stage_micros.pmp);
    smp.push_back(o.stage_micros.sampler);
    r.stage_sum_micros += o.stage_micros.sum();
    r.frame_sum_micros += o.latency_micros;
    r.denoiser_evals_per_frame = o.denoiser_eval_count;
  }
  r.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  r.frames = lat.size();
  r.warmup = opt.warmup;
  r.context_cap = opt.context_cap;
  r.frame = summarize_ms(lat);
  r.ibu = summarize_ms(ibu);
  r.csu = summarize_ms(csu);
  r.pmp = summarize_ms(pmp);
  r.sampler = summarize_ms(smp);
  r.fps = r.wall_seconds > 0 ? static_cast<double>(r.frames) / r.wall_seconds : 0.0;
  r.profile = machine_profile();
  r.budget_ms = cfg.frame_budget_ms();
  return r;
}

inline nlohmann::json summary_json(const LatencySummary& s) {
  return {{"p50_ms", s.p50}, {"p95_ms", s.p95}, {"max_ms", s.max}, {"mean_ms", s.mean}};
}

inline nlohmann::json bench_json(const BenchReport& r) {
  return {{"frames", r.frames},
          {"warmup", r.warmup},
          {"context_cap", r.context_cap},
          {"frame", summary_json(r.frame)},
          {"stages",
           {{"ibu", summary_json(r.ibu)},
            {"csu", summary_json(r.csu)},
            {"pmp", summary_json(r.pmp)},
            {"sampler", summary_json(r.sampler)}}},
          {"stage_sum_micros", r.stage_sum_micros},
          {"frame_sum_micros", r.frame_sum_micros},
          {"wall_seconds", r.wall_seconds},
          {"fps", r.fps},
          {"denoiser_evals_per_frame", r.denoiser_evals_per_frame},
          {"budget_ms", r.budget_ms},
          {"profile", r.profile}};
}

enum class GuardStatus { Pass, Regressed, NoBaseline };

struct GuardResult {
  GuardStatus status = GuardStatus::NoBaseline;
  double baseline_p50 = 0;
  double ratio = 0;
  std::string message;
};

inline constexpr double kRegressionTolerance = 0.20;

// Baseline file: {"profiles": {"<cpu> | <compiler>": {"p50_ms": x, ...}}}.
// Only slowdowns beyond the tolerance fail; a faster run passes and is noted.
inline GuardResult check_regression(const BenchReport& r, const nlohmann::json& baseline) {
  GuardResult g;
  if (!baseline.contains("profiles") || !baseline["profiles"].contains(r.profile)) {
    g.message = "no baseline for profile '" + r.profile +
                "'; record one with: arig bench --record-baseline <file>";
    return g;
  }
  const auto& b = baseline["profiles"][r.profile];
  g.baseline_p50 = b.at("p50_ms").get<double>();
  g.ratio = g.baseline_p50 > 0 ? r.frame.p50 / g.baseline_p50 : 0.0;
  if (g.ratio > 1.0 + kRegressionTolerance) {
    g.status = GuardStatus::Regressed;
    g.message = "p50 " + std::to_string(r.frame.p50) + " ms is " + std::to_string(g.ratio) +
                "x the baseline " + std::to_string(g.baseline_p50) + " ms";
  } else {
    g.status = GuardStatus::Pass;
    g.message = "p50 " + std::to_string(r.frame.p50) + " ms vs baseline " +
                std::to_string(g.baseline_p50) + " ms (ratio " + std::to_string(g.ratio) + ")";
    if (g.ratio < 1.0 - kRegressionTolerance) g.message += "; faster than baseline, consider re-recording";
  }
  return g;
}

inline nlohmann::json load_baseline(const std::string& path) {
  std::ifstream in(path);
  if (!in) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bench baseline '" + path + "' is not valid JSON: " + e.what());
  }
}

inline void record_baseline(const BenchReport& r, const std::string& path) {
  nlohmann::json b = load_baseline(path);
  if (!b.contains("profiles")) b["profiles"] = nlohmann::json::object();
  b["profiles"][r.profile] = {{"p50_ms", r.frame.p50},
                              {"p95_ms", r.frame.p95},
                              {"frames", r.frames},
                              {"context_cap", r.context_cap}};
  write_file(path, b.dump(2) + "\n");
}

}  // namespace arig
