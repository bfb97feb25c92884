#pragma once

// Frame-wise autoregressive session: caches, the per-frame IBU -> CSU -> PMP
// -> sampler step, snapshots, and a from-scratch reference evaluation over the
// whole prefix.

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "arig/caches.hpp"
#include "arig/csu.hpp"
#include "arig/diffusion.hpp"
#include "arig/ibu.hpp"
#include "arig/log.hpp"
#include "arig/pmp.hpp"
#include "arig/weights.hpp"

namespace arig {

struct VadOverride {
  bool agent_active = false;
  bool user_active = false;
  bool operator==(const VadOverride&) const = default;
};

// Inputs for frame T. User-side signals lag one frame: user_audio and
// user_motion are A_{T-1}^u and M_{T-1}^u. agent_motion (M_{T-1}^a), when
// given, replaces the engine's own previous output in the motion history.
struct FrameInput {
  std::uint64_t frame_index = 0;
  std::vector<float> agent_audio;
  std::vector<float> user_audio;
  std::vector<float> user_motion;
  std::optional<std::vector<float>> agent_motion;
  float agent_energy = 0.0f;
  float user_energy = 0.0f;
  std::optional<VadOverride> vad_override;
};

struct StageTimes {
  double ibu = 0.0, csu = 0.0, pmp = 0.0, sampler = 0.0;  // microseconds
  double sum() const { return ibu + csu + pmp + sampler; }
};

struct FrameOutput {
  std::uint64_t frame_index = 0;
  std::vector<float> motion;
  std::size_t state_index = 0;
  std::array<float, kStateCount> state_probs{};
  bool agent_active = false;
  bool user_active = false;
  std::vector<float> cis_digest;  // empty unless requested
  double latency_micros = 0.0;
  StageTimes stage_micros;
  std::size_t denoiser_eval_count = 0;
};

struct SessionOptions {
  bool record_cis = false;
};

namespace detail {

inline void check_finite(std::span<const float> v, const char* module, std::uint64_t frame) {
  for (float x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(module) + ": non-finite value at frame " +
                         std::to_string(frame) + ", max |x| " +
                         std::to_string(max_abs<float>(v)));
    }
  }
}

inline void check_input_vector(std::span<const float> v, std::size_t n, const char* what) {
  check_length(v, n, what);
  for (float x : v) {
    if (!std::isfinite(x)) throw ValidationError(std::string(what) + ": non-finite value");
  }
}

inline void validate_input(const EngineConfig& cfg, const FrameInput& in) {
  check_input_vector(in.agent_audio, cfg.audio_dim, "frame input agent_audio");
  check_input_vector(in.user_audio, cfg.audio_dim, "frame input user_audio");
  check_input_vector(in.user_motion, cfg.motion_dim, "frame input user_motion");
  if (in.agent_motion) check_input_vector(*in.agent_motion, cfg.motion_dim, "frame input agent_motion");
  auto energy = [](float e, const char* what) {
    if (!(e >= 0.0f) || !std::isfinite(e)) {
      throw ValidationError(std::string(what) + " must be finite and nonnegative");
    }
  };
  energy(in.agent_energy, "agent_energy");
  energy(in.user_energy, "user_energy");
}

// Number of keypoint coordinates outside [0, 1].
inline std::size_t keypoints_out_of_range(const EngineConfig& cfg, std::span<const float> m) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < cfg.layout.keypoint_count; ++i) {
    const float v = m[cfg.layout.keypoint_offset + i];
    if (v < 0.0f || v > 1.0f) ++n;
  }
  return n;
}

inline std::uint64_t sampler_stream(std::uint64_t frame) { return frame; }

// Tokens feeding the summary of `chunk`: those of the chunk itself; chunk 0
// also sees the initialization padding still in the cache.
inline std::vector<const std::vector<float>*> chunk_tokens(const ChunkCache& cache,
                                                           std::uint64_t chunk, std::size_t c) {
  std::vector<const std::vector<float>*> out;
  const std::int64_t first = static_cast<std::int64_t>(chunk * c);
  for (const auto& t : cache.tokens()) {
    if (chunk == 0 || t.frame_index >= first) out.push_back(&t.vector);
  }
  return out;
}

}  // namespace detail

struct SessionTelemetry {
  std::uint64_t frames = 0;
  std::uint64_t keypoint_warnings = 0;
  double total_micros = 0.0;
};

class Session {
 public:
  Session(const EngineConfig& cfg, std::shared_ptr<const EngineWeights> weights,
          SessionOptions opt = {})
      : cfg_(cfg), w_(std::move(weights)), opt_(opt), decoder_(cfg.incremental_context) {
    cfg_.validate();
    if (!w_) throw ConfigError("session: no weights");
    sched_ = build_schedule(cfg_);
    check_topology();
  }

  // Caches are pre-filled by repeating the reference motion and the first
  // audio frame; the context starts with the padded chunk-0 summary.
  void init(std::span<const float> reference_motion, std::span<const float> first_audio) {
    detail::check_input_vector(reference_motion, cfg_.motion_dim, "reference_motion");
    detail::check_input_vector(first_audio, cfg_.audio_dim, "first_audio");
    const std::size_t c = cfg_.chunk_size;
    const auto& ibu = w_->ibu;
    std::vector<float> ref(reference_motion.begin(), reference_motion.end());
    std::vector<float> audio(first_audio.begin(), first_audio.end());
    caches_ = CacheSet{ChunkCache(Track::Agent, c), ChunkCache(Track::User, c),
                       ContextCache(cfg_.effective_context()),
                       VectorWindow(EngineConfig::kAudioWindow),
                       VectorWindow(EngineConfig::kMotionWindow),
                       VectorWindow(EngineConfig::kMotionWindow)};
    const std::vector<float> pad = merge_behavior(ibu, cfg_, audio, ref);
    for (std::int64_t f = -static_cast<std::int64_t>(c); f < 0; ++f) {
      caches_.agent.push({pad, Track::Agent, f});
      caches_.user.push({pad, Track::User, f});
    }
    caches_.audio.fill(audio);
    caches_.motion.fill(ref);
    const auto cond = embed_audio(ibu, cfg_, audio);
    const auto toks = detail::chunk_tokens(caches_.agent, 0, c);
    const auto utoks = detail::chunk_tokens(caches_.user, 0, c);
    caches_.context.upsert(
        compress_summary(ibu, interaction_summary(ibu, cfg_, toks, utoks, cond), 0, false));
    vad_agent_ = VadTracker(cfg_.vad);
    vad_user_ = VadTracker(cfg_.vad);
    state_ = kInitialState;
    t_ = 0;
    decoder_.reset();
    initialized_ = true;
  }

  FrameOutput step(const FrameInput& in) {
    using clock = std::chrono::steady_clock;
    if (!initialized_) throw SequencingError("session: step before init");
    if (in.frame_index != t_) {
      throw SequencingError("session: expected frame " + std::to_string(t_) + ", got " +
                            std::to_string(in.frame_index));
    }
    detail::validate_input(cfg_, in);
    const auto& W = *w_;
    const std::size_t c = cfg_.chunk_size;
    const std::uint64_t T = t_;
    FrameOutput out;
    out.frame_index = T;
    const auto t0 = clock::now();

    // IBU: behavior tokens for frame T from the previous agent audio/motion
    // and the lagged user signals, then the chunk summary and the cis-token.
    if (in.agent_motion) caches_.motion.replace_newest(*in.agent_motion);
    const std::vector<float>& prev_audio = caches_.audio.newest();
    const std::vector<float>& prev_motion = caches_.motion.newest();
    auto agent_tok = merge_behavior(W.ibu, cfg_, prev_audio, prev_motion);
    auto user_tok = merge_behavior(W.ibu, cfg_, in.user_audio, in.user_motion);
    detail::check_finite(agent_tok, "ibu.merge", T);
    detail::check_finite(user_tok, "ibu.merge", T);
    caches_.agent.push({std::move(agent_tok), Track::Agent, static_cast<std::int64_t>(T)});
    caches_.user.push({std::move(user_tok), Track::User, static_cast<std::int64_t>(T)});
    caches_.audio.push(in.agent_audio);

    const auto cond = embed_audio(W.ibu, cfg_, in.agent_audio);
    const std::uint64_t chunk = chunk_index(T, c);
    auto summary = compress_summary(
        W.ibu,
        interaction_summary(W.ibu, cfg_, detail::chunk_tokens(caches_.agent, chunk, c),
                            detail::chunk_tokens(caches_.user, chunk, c), cond),
        chunk, T % c == c - 1);
    detail::check_finite(summary.vector, "ibu.summary", T);
    caches_.context.upsert(std::move(summary));
    CisToken cis = decoder_.decode(W.ibu, cfg_, caches_.context, T);
    detail::check_finite(cis.vector, "ibu.context", T);
    const auto t1 = clock::now();

    // CSU.
    const bool va = vad_agent_.update(in.agent_energy);
    const bool vu = vad_user_.update(in.user_energy);
    VadPair vad = VadPair::of(va, vu);
    if (in.vad_override) vad = VadPair::of(in.vad_override->agent_active, in.vad_override->user_active);
    StatePrediction sp = predict_state(W.csu, cfg_, state_, vad, cis.vector);
    detail::check_finite(sp.latent, "csu", T);
    state_ = sp.next;
    const auto t2 = clock::now();

    // PMP.
    auto outline = coarse_outline(W.pmp, cfg_, caches_.motion.newest(), caches_.audio.padded());
    auto fine = fine_condition(W.pmp, cfg_, outline, cis.vector, sp.latent, in.agent_audio);
    detail::check_finite(fine, "pmp.fine", T);
    caches_.fine.push(std::move(fine));
    auto z = temporal_layer(W.pmp, cfg_, caches_.fine.padded(), caches_.motion.padded());
    detail::check_finite(z, "pmp.temporal", T);
    const auto t3 = clock::now();

    // Sampler.
    CounterRng rng(cfg_.seed, detail::sampler_stream(T));
    SampleStats stats;
    std::vector<float> motion = sample_motion<float>(W.diff, z, sched_, rng, &stats);
    const auto t4 = clock::now();

    if (std::size_t bad = detail::keypoints_out_of_range(cfg_, motion); bad > 0) {
      if (telemetry_.keypoint_warnings++ == 0) {
        log_warn("frame " + std::to_string(T) + ": " + std::to_string(bad) +
                 " keypoint coordinates outside [0, 1] (further warnings counted only)");
      }
    }
    caches_.motion.push(motion);
    ++t_;

    auto us = [](auto a, auto b) { return std::chrono::duration<double, std::micro>(b - a).count(); };
    out.motion = std::move(motion);
    out.state_index = sp.next;
    out.state_probs = sp.probs;
    out.agent_active = vad.agent_active;
    out.user_active = vad.user_active;
    if (opt_.record_cis) out.cis_digest = cis.vector;
    out.stage_micros = {us(t0, t1), us(t1, t2), us(t2, t3), us(t3, t4)};
    out.latency_micros = us(t0, clock::now());
    out.denoiser_eval_count = stats.denoiser_evals;
    ++telemetry_.frames;
    telemetry_.total_micros += out.latency_micros;
    return out;
  }

  std::vector<FrameOutput> run(const std::vector<FrameInput>& inputs) {
    std::vector<FrameOutput> out;
    out.reserve(inputs.size());
    for (const auto& in : inputs) out.push_back(step(in));
    return out;
  }

  // "ARSN", u32 version, u64 T, u64 state, u64 seed, the two VAD trackers,
  // then the cache sections.
  std::string snapshot() const {
    if (!initialized_) throw SequencingError("session: snapshot before init");
    ByteWriter w;
    w.raw("ARSN");
    w.u32(kVersion);
    w.u64(t_);
    w.u64(state_);
    w.u64(cfg_.seed);
    for (const VadTracker* v : {&vad_agent_, &vad_user_}) {
      w.u64(v->energies().size());
      for (float e : v->energies()) w.f32(e);
      w.u64(v->hang_left());
      w.u8(v->active() ? 1 : 0);
    }
    write_caches(w, caches_);
    return w.take();
  }

  void restore(std::string_view bytes) {
    ByteReader r(bytes);
    if (r.remaining() < 8 || r.raw(4) != "ARSN") throw FormatError("session snapshot: bad magic");
    const std::uint32_t version = r.u32();
    if (version != kVersion) {
      throw VersionError("session snapshot: unsupported version " + std::to_string(version));
    }
    const std::uint64_t t = r.u64();
    const std::uint64_t state = r.u64();
    const std::uint64_t seed = r.u64();
    if (state >= kStateCount) throw FormatError("session snapshot: state out of range");
    if (seed != cfg_.seed) throw ConfigError("session snapshot: seed differs from the configuration");
    VadTracker trackers[2] = {VadTracker(cfg_.vad), VadTracker(cfg_.vad)};
    for (auto& v : trackers) {
      const std::uint64_t n = r.u64();
      if (n > cfg_.vad.window) throw FormatError("session snapshot: VAD history too long");
      std::deque<float> e;
      for (std::uint64_t i = 0; i < n; ++i) e.push_back(r.f32());
      const std::uint64_t hang = r.u64();
      const bool active = r.u8() != 0;
      v.restore_state(std::move(e), hang, active);
    }
    CacheSet cs = read_caches(r);
    r.expect_done("session snapshot");
    if (cs.agent.window() != cfg_.chunk_size || cs.context.capacity() != cfg_.effective_context()) {
      throw ConfigError("session snapshot: cache sizes do not match the configuration");
    }
    caches_ = std::move(cs);
    vad_agent_ = trackers[0];
    vad_user_ = trackers[1];
    t_ = t;
    state_ = state;
    decoder_.reset();
    initialized_ = true;
  }

  std::uint64_t frame() const { return t_; }
  std::size_t state() const { return state_; }
  const CacheSet& caches() const { return caches_; }
  const EngineConfig& config() const { return cfg_; }
  const SessionTelemetry& telemetry() const { return telemetry_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const EngineWeights& weights() const { return *w_; }
  std::size_t byte_size() const { return caches_.byte_size() + decoder_.byte_size(); }

  static constexpr std::uint32_t kVersion = 1;

 private:
  void check_topology() const {
    EngineWeights expect = EngineWeights::shaped(cfg_);
    std::map<std::string, std::pair<std::size_t, std::size_t>> shapes;
    expect.visit([&](const std::string& n, Tensor<float>& t, Init, std::size_t) {
      shapes[n] = {t.rows(), t.cols()};
    });
    auto& w = const_cast<EngineWeights&>(*w_);
    std::size_t seen = 0;
    w.visit([&](const std::string& n, Tensor<float>& t, Init, std::size_t) {
      auto it = shapes.find(n);
      if (it == shapes.end()) throw ConfigError("weights: unexpected tensor '" + n + "'");
      if (it->second != std::pair{t.rows(), t.cols()}) {
        throw ConfigError("weights: tensor '" + n + "' has shape " + t.shape() +
                          " but the configuration needs [" + std::to_string(it->second.first) +
                          "x" + std::to_string(it->second.second) + "]");
      }
      ++seen;
    });
    if (seen != shapes.size()) throw ConfigError("weights: topology differs from the configuration");
  }

  EngineConfig cfg_;
  std::shared_ptr<const EngineWeights> w_;
  SessionOptions opt_;
  NoiseSchedule sched_;
  CacheSet caches_;
  VadTracker vad_agent_, vad_user_;
  ContextDecoder decoder_;
  std::size_t state_ = kInitialState;
  std::uint64_t t_ = 0;
  bool initialized_ = false;
  SessionTelemetry telemetry_;
};

inline Session init_session(const EngineConfig& cfg, std::shared_ptr<const EngineWeights> w,
                            std::span<const float> reference_motion,
                            std::span<const float> first_audio, SessionOptions opt = {}) {
  Session s(cfg, std::move(w), opt);
  s.init(reference_motion, first_audio);
  return s;
}

// Reference evaluation: every frame is recomputed from the raw input prefix
// and the previously generated motions, with no state carried between frames
// other than those motions.
class PrefixOracle {
 public:
  PrefixOracle(const EngineConfig& cfg, std::shared_ptr<const EngineWeights> w,
               std::vector<float> reference_motion, std::vector<float> first_audio)
      : cfg_(cfg), w_(std::move(w)), ref_(std::move(reference_motion)),
        first_audio_(std::move(first_audio)), sched_(build_schedule(cfg)) {}

  std::vector<FrameOutput> run(const std::vector<FrameInput>& inputs) {
    std::vector<FrameOutput> outs;
    std::vector<std::vector<float>> generated;
    for (std::size_t T = 0; T < inputs.size(); ++T) {
      if (inputs[T].frame_index != T) throw SequencingError("oracle: inputs must start at frame 0");
      outs.push_back(frame(inputs, generated, T));
      generated.push_back(outs.back().motion);
    }
    return outs;
  }

 private:
  using Vec = std::vector<float>;
  using I64 = std::int64_t;

  // A^a_k, with the first audio standing in before the stream starts.
  const Vec& agent_audio(const std::vector<FrameInput>& in, I64 k) const {
    return k < 0 ? first_audio_ : in[static_cast<std::size_t>(k)].agent_audio;
  }

  // M^a_k as seen by later frames: a supplied agent_motion at frame k+1 wins
  // over the generated motion; the reference motion stands in before frame 0.
  const Vec& agent_motion(const std::vector<FrameInput>& in, const std::vector<Vec>& gen,
                          I64 k) const {
    if (k < -1) return ref_;
    const auto& next = in[static_cast<std::size_t>(k + 1)];
    if (next.agent_motion) return *next.agent_motion;
    return k < 0 ? ref_ : gen[static_cast<std::size_t>(k)];
  }

  struct Frame {
    Vec cis;
    StatePrediction state;
    Vec fine;
  };

  FrameOutput frame(const std::vector<FrameInput>& in, const std::vector<Vec>& gen,
                    std::size_t T) const {
    const auto& W = *w_;
    const std::size_t c = cfg_.chunk_size;
    const I64 ci = static_cast<I64>(c);

    // Behavior tokens for frames -c..T.
    const Vec pad = merge_behavior(W.ibu, cfg_, first_audio_, ref_);
    std::vector<Vec> agent_tok, user_tok;  // index f + c
    for (I64 f = -ci; f <= static_cast<I64>(T); ++f) {
      if (f < 0) {
        agent_tok.push_back(pad);
        user_tok.push_back(pad);
      } else {
        const auto& x = in[static_cast<std::size_t>(f)];
        agent_tok.push_back(merge_behavior(W.ibu, cfg_, agent_audio(in, f - 1), agent_motion(in, gen, f - 1)));
        user_tok.push_back(merge_behavior(W.ibu, cfg_, x.user_audio, x.user_motion));
      }
    }
    // Compressed summary of chunk j as of frame k (the frames of chunk j up to
    // k, plus for chunk 0 the padding inside the last c frames).
    std::map<std::pair<std::uint64_t, I64>, Vec> summaries;
    auto summary = [&](std::uint64_t j, I64 k) -> const Vec& {
      auto key = std::pair{j, k};
      if (auto it = summaries.find(key); it != summaries.end()) return it->second;
      const I64 lo = j == 0 ? k - ci + 1 : static_cast<I64>(j) * ci;
      std::vector<const Vec*> a, u;
      for (I64 f = lo; f <= k; ++f) {
        a.push_back(&agent_tok[static_cast<std::size_t>(f + ci)]);
        u.push_back(&user_tok[static_cast<std::size_t>(f + ci)]);
      }
      const auto cond = embed_audio(W.ibu, cfg_, agent_audio(in, k));
      auto s = compress_summary(W.ibu, interaction_summary(W.ibu, cfg_, a, u, cond), j,
                                k % ci == ci - 1);
      return summaries.emplace(key, std::move(s.vector)).first->second;
    };
    // cis-token at frame k: newest chunks up to the capacity, each as last
    // refreshed by frame k.
    auto cis_at = [&](I64 k) {
      const std::uint64_t newest = static_cast<std::uint64_t>(k) / c;
      const std::uint64_t cap = cfg_.effective_context();
      const std::uint64_t oldest = newest + 1 > cap ? newest + 1 - cap : 0;
      ContextCache ctx(cap);
      for (std::uint64_t j = oldest; j <= newest; ++j) {
        const I64 last = std::min<I64>(k, static_cast<I64>(j * c + c - 1));
        ctx.upsert({j, summary(j, last), last % ci == ci - 1});
      }
      return context_decode(W.ibu, cfg_, ctx, static_cast<std::uint64_t>(k)).vector;
    };

    // VAD decisions replayed from frame 0.
    std::vector<VadPair> vad;
    {
      VadTracker ta(cfg_.vad), tu(cfg_.vad);
      for (std::size_t k = 0; k <= T; ++k) {
        const bool a = ta.update(in[k].agent_energy);
        const bool u = tu.update(in[k].user_energy);
        vad.push_back(in[k].vad_override
                          ? VadPair::of(in[k].vad_override->agent_active, in[k].vad_override->user_active)
                          : VadPair::of(a, u));
      }
    }

    // State trajectory and fine features over the whole prefix.
    std::vector<Frame> frames;
    std::size_t prev_state = kInitialState;
    for (std::size_t k = 0; k <= T; ++k) {
      Frame fr;
      fr.cis = cis_at(static_cast<I64>(k));
      fr.state = predict_state(W.csu, cfg_, prev_state, vad[k], fr.cis);
      prev_state = fr.state.next;
      if (k + 5 > T) {
        const I64 kk = static_cast<I64>(k);
        std::vector<const Vec*> audio = {&agent_audio(in, kk - 2), &agent_audio(in, kk - 1),
                                         &agent_audio(in, kk)};
        auto outline = coarse_outline(W.pmp, cfg_, agent_motion(in, gen, kk - 1), audio);
        fr.fine = fine_condition(W.pmp, cfg_, outline, fr.cis, fr.state.latent, in[k].agent_audio);
      }
      frames.push_back(std::move(fr));
    }

    // Temporal layer: fine features of frames T-4..T (oldest repeated at the
    // start of the stream) against motions of frames T-5..T-1.
    std::vector<const Vec*> fine, motion;
    const I64 TT = static_cast<I64>(T);
    for (I64 k = TT - 4; k <= TT; ++k) {
      fine.push_back(&frames[static_cast<std::size_t>(std::max<I64>(k, 0))].fine);
      motion.push_back(&agent_motion(in, gen, k - 1));
    }
    auto z = temporal_layer(W.pmp, cfg_, fine, motion);
    CounterRng rng(cfg_.seed, detail::sampler_stream(T));
    SampleStats stats;
    FrameOutput out;
    out.frame_index = T;
    out.motion = sample_motion<float>(W.diff, z, sched_, rng, &stats);
    out.state_index = frames.back().state.next;
    out.state_probs = frames.back().state.probs;
    out.agent_active = vad.back().agent_active;
    out.user_active = vad.back().user_active;
    out.cis_digest = frames.back().cis;
    out.denoiser_eval_count = stats.denoiser_evals;
    return out;
  }

  EngineConfig cfg_;
  std::shared_ptr<const EngineWeights> w_;
  Vec ref_, first_audio_;
  NoiseSchedule sched_;
};

inline std::vector<FrameOutput> run_stream(Session& s, const std::vector<FrameInput>& inputs) {
  return s.run(inputs);
}

inline std::vector<FrameOutput> run_stream_oracle(const EngineConfig& cfg,
                                                  std::shared_ptr<const EngineWeights> w,
                                                  std::span<const float> reference_motion,
                                                  std::span<const float> first_audio,
                                                  const std::vector<FrameInput>& inputs) {
  PrefixOracle o(cfg, std::move(w), {reference_motion.begin(), reference_motion.end()},
                 {first_audio.begin(), first_audio.end()});
  return o.run(inputs);
}

}  // namespace arig
