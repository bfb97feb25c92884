#pragma once

// Scripted synthetic conversations: feature/motion streams plus per-frame
// state annotations.

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "arig/formats.hpp"
#include "arig/rng.hpp"

namespace arig {

enum class Speaker { Agent, User, Silence };

struct SynthSegment {
  Speaker speaker = Speaker::Silence;
  double duration = 0.0;  // seconds
  double overlap = 0.0;   // seconds this segment starts before the previous one ends
};

struct SynthScript {
  std::uint32_t fps = 25;
  std::uint64_t seed = 0;
  std::uint32_t audio_dim = 768;
  std::uint32_t motion_dim = 262;
  std::string extractor = "synthetic";
  MotionLayout layout;
  std::vector<SynthSegment> segments;
};

inline Speaker parse_speaker(const std::string& s) {
  if (s == "agent") return Speaker::Agent;
  if (s == "user") return Speaker::User;
  if (s == "silence") return Speaker::Silence;
  throw ValidationError("synth: unknown speaker '" + s + "' (agent, user or silence)");
}

// {"fps":25,"seed":1,"audio_dim":768,"motion_dim":262,"extractor":"...",
//  "segments":[{"speaker":"user","duration":2.0,"overlap":0.0}, ...]}
inline SynthScript parse_synth_script(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("synth: script is not valid JSON: ") + e.what());
  }
  SynthScript s;
  try {
    s.fps = j.value("fps", s.fps);
    s.seed = j.value("seed", s.seed);
    s.audio_dim = j.value("audio_dim", s.audio_dim);
    s.motion_dim = j.value("motion_dim", s.motion_dim);
    s.extractor = j.value("extractor", s.extractor);
    if (!j.contains("segments") || !j["segments"].is_array()) {
      throw ValidationError("synth: script needs a segments array");
    }
    for (const auto& seg : j["segments"]) {
      s.segments.push_back({parse_speaker(seg.at("speaker").get<std::string>()),
                            seg.at("duration").get<double>(), seg.value("overlap", 0.0)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("synth: bad script field: ") + e.what());
  }
  if (s.motion_dim != 262) {
    s.layout = {0, std::min<std::size_t>(63, s.motion_dim), 0, 0, 0, 0, 0, 0};
  }
  return s;
}

struct SynthInterval {
  Speaker speaker;
  std::uint64_t begin, end;  // frames, half-open
};

inline std::vector<SynthInterval> script_intervals(const SynthScript& s) {
  if (s.fps == 0) throw ValidationError("synth: fps must be positive");
  std::vector<SynthInterval> out;
  double prev_end = 0.0;
  for (std::size_t i = 0; i < s.segments.size(); ++i) {
    const auto& seg = s.segments[i];
    if (!(seg.duration >= 0.0) || !std::isfinite(seg.duration)) {
      throw ValidationError("synth: segment " + std::to_string(i) + " has a negative duration");
    }
    if (!(seg.overlap >= 0.0) || !std::isfinite(seg.overlap)) {
      throw ValidationError("synth: segment " + std::to_string(i) + " has a negative overlap");
    }
    const double start = prev_end - seg.overlap;
    if (start < -1e-9) {
      throw ValidationError("synth: segment " + std::to_string(i) + " overlaps before time 0");
    }
    const double end = start + seg.duration;
    out.push_back({seg.speaker, static_cast<std::uint64_t>(std::llround(std::max(0.0, start) * s.fps)),
                   static_cast<std::uint64_t>(std::llround(end * s.fps))});
    prev_end = std::max(prev_end, end);
  }
  return out;
}

namespace detail {

struct Run {
  std::int64_t begin = -1, end = -1;  // half-open; begin < 0 means none
};

// Maximal activity run containing frame t.
inline Run run_at(const std::vector<bool>& a, std::size_t t) {
  if (!a[t]) return {};
  std::size_t b = t, e = t + 1;
  while (b > 0 && a[b - 1]) --b;
  while (e < a.size() && a[e]) ++e;
  return {static_cast<std::int64_t>(b), static_cast<std::int64_t>(e)};
}

}  // namespace detail

// Fine state from the per-frame activity of both tracks.
//   agent only -> Speaking, user only -> Listening
//   both, agent started first (or together): user run inside the agent run ->
//     SpeakingWithFeedbackReceived, otherwise Interrupted
//   both, user started first -> GivingFeedback
//   neither: last speaker agent -> PauseToThink, otherwise WaitDuringPause
inline std::vector<std::size_t> annotate_states(const std::vector<bool>& agent,
                                                const std::vector<bool>& user) {
  const std::size_t n = agent.size();
  std::vector<std::size_t> out(n);
  int last = 0;  // 0 none, 1 agent, 2 user
  for (std::size_t t = 0; t < n; ++t) {
    FineState s;
    if (agent[t] && !user[t]) {
      s = FineState::Speaking;
    } else if (!agent[t] && user[t]) {
      s = FineState::Listening;
    } else if (agent[t] && user[t]) {
      const auto ra = detail::run_at(agent, t), ru = detail::run_at(user, t);
      if (ra.begin <= ru.begin) {
        s = ru.end <= ra.end ? FineState::SpeakingWithFeedbackReceived : FineState::Interrupted;
      } else {
        s = FineState::GivingFeedback;
      }
    } else {
      s = last == 1 ? FineState::PauseToThink : FineState::WaitDuringPause;
    }
    out[t] = static_cast<std::size_t>(s);
    if (agent[t] && !user[t]) last = 1;
    else if (user[t] && !agent[t]) last = 2;
    else if (agent[t] && user[t]) {
      // whoever keeps talking longest is the last speaker
      const auto ra = detail::run_at(agent, t), ru = detail::run_at(user, t);
      last = ra.end >= ru.end ? 1 : 2;
    }
  }
  return out;
}

struct SynthOutput {
  StreamFile stream;
  std::vector<StateAnnotation> annotations;
};

inline constexpr float kSynthActiveEnergyLo = 0.05f;
inline constexpr float kSynthActiveEnergyHi = 0.15f;
inline constexpr float kSynthSilentEnergy = 0.002f;

// Audio features are an AR(1) process per dimension scaled by activity;
// energies are drawn well above (active) or well below (silent) the default
// VAD threshold; motions are slow sinusoidal mixtures whose amplitude grows
// while speaking, with keypoints kept inside [0, 1].
inline SynthOutput synth_generate(const SynthScript& s) {
  const auto iv = script_intervals(s);
  std::uint64_t frames = 0;
  for (const auto& i : iv) frames = std::max(frames, i.end);
  std::vector<bool> act[2] = {std::vector<bool>(frames), std::vector<bool>(frames)};
  for (const auto& i : iv) {
    if (i.speaker == Speaker::Silence) continue;
    auto& a = act[i.speaker == Speaker::Agent ? 0 : 1];
    for (std::uint64_t t = i.begin; t < i.end; ++t) a[t] = true;
  }

  SynthOutput out;
  out.stream.header = {kStreamVersion, 2, s.audio_dim, s.motion_dim, s.fps, StreamHeader::kHasEnergy,
                       s.extractor};
  out.stream.frames.assign(frames, std::vector<TrackRecord>(2));

  constexpr double rho = 0.9;
  const double innov = std::sqrt(1.0 - rho * rho);
  const double two_pi = 2.0 * std::numbers::pi;
  for (int track = 0; track < 2; ++track) {
    CounterRng param_rng(s.seed, 0x100 + track);
    std::vector<double> freq(s.motion_dim), phase(s.motion_dim), amp(s.motion_dim);
    for (std::size_t i = 0; i < s.motion_dim; ++i) {
      freq[i] = 0.1 + 0.7 * param_rng.uniform();  // Hz
      phase[i] = two_pi * param_rng.uniform();
      amp[i] = 0.05 + 0.1 * param_rng.uniform();
    }
    std::vector<double> ar(s.audio_dim, 0.0);
    CounterRng init_rng(s.seed, 0x200 + track);
    for (auto& v : ar) v = init_rng.normal();
    const auto& kp = s.layout;
    for (std::uint64_t t = 0; t < frames; ++t) {
      CounterRng rng(s.seed, (static_cast<std::uint64_t>(track + 1) << 40) | t);
      const bool on = act[track][t];
      auto& rec = out.stream.frames[t][track];
      rec.audio.resize(s.audio_dim);
      const double gain = on ? 1.0 : 0.05;
      for (std::size_t i = 0; i < s.audio_dim; ++i) {
        ar[i] = rho * ar[i] + innov * rng.normal();
        rec.audio[i] = static_cast<float>(gain * ar[i]);
      }
      rec.energy = on ? static_cast<float>(kSynthActiveEnergyLo +
                                           (kSynthActiveEnergyHi - kSynthActiveEnergyLo) * rng.uniform())
                      : static_cast<float>(kSynthSilentEnergy * rng.uniform());
      rec.motion.resize(s.motion_dim);
      const double sec = static_cast<double>(t) / s.fps;
      const double boost = on ? 1.5 : 1.0;
      for (std::size_t i = 0; i < s.motion_dim; ++i) {
        const double w = std::sin(two_pi * freq[i] * sec + phase[i]);
        if (i >= kp.keypoint_offset && i < kp.keypoint_offset + kp.keypoint_count) {
          rec.motion[i] = static_cast<float>(0.5 + 0.2 * boost * w);
        } else {
          rec.motion[i] = static_cast<float>(boost * amp[i] * w);
        }
      }
    }
  }

  const auto states = annotate_states(act[0], act[1]);
  out.annotations.reserve(frames);
  for (std::uint64_t t = 0; t < frames; ++t) {
    out.annotations.push_back({t, act[0][t], act[1][t], states[t]});
  }
  return out;
}

}  // namespace arig
