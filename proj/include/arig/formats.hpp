#pragma once

// Feature/motion stream files, state annotation files, and the adapter from
// stream records to engine frame inputs.

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "arig/binio.hpp"
#include "arig/csu.hpp"
#include "arig/engine.hpp"

namespace arig {

struct TrackRecord {
  std::vector<float> audio;   // empty in motion-only files
  std::vector<float> motion;
  float energy = 0.0f;        // meaningful only when the file carries energies

  bool operator==(const TrackRecord&) const = default;
};

struct StreamHeader {
  std::uint32_t version = 1;
  std::uint32_t track_count = 2;  // agent, then user
  std::uint32_t audio_dim = 768;  // 0 for motion-only files
  std::uint32_t motion_dim = 262;
  std::uint32_t fps = 25;
  std::uint32_t flags = kHasEnergy;
  std::string extractor = "unspecified";

  static constexpr std::uint32_t kHasEnergy = 1;

  bool has_energy() const { return (flags & kHasEnergy) != 0; }
  bool operator==(const StreamHeader&) const = default;
};

// Record k holds frame k of every track (not lagged).
struct StreamFile {
  StreamHeader header;
  std::vector<std::vector<TrackRecord>> frames;  // [frame][track]

  bool operator==(const StreamFile&) const = default;
};

inline constexpr std::uint32_t kStreamVersion = 1;

inline void validate_stream(const StreamFile& s) {
  const auto& h = s.header;
  if (h.track_count == 0 || h.track_count > 2) {
    throw ValidationError("stream: track count must be 1 or 2, got " + std::to_string(h.track_count));
  }
  if (h.motion_dim == 0 || h.fps == 0) throw ValidationError("stream: motion_dim and fps must be positive");
  for (std::size_t k = 0; k < s.frames.size(); ++k) {
    if (s.frames[k].size() != h.track_count) {
      throw ValidationError("stream: frame " + std::to_string(k) + " has " +
                            std::to_string(s.frames[k].size()) + " tracks");
    }
    for (const auto& r : s.frames[k]) {
      if (r.audio.size() != h.audio_dim || r.motion.size() != h.motion_dim) {
        throw ValidationError("stream: frame " + std::to_string(k) + " has audio/motion length " +
                              std::to_string(r.audio.size()) + "/" + std::to_string(r.motion.size()) +
                              ", header says " + std::to_string(h.audio_dim) + "/" +
                              std::to_string(h.motion_dim));
      }
      if (h.has_energy() && (!(r.energy >= 0.0f) || !std::isfinite(r.energy))) {
        throw ValidationError("stream: frame " + std::to_string(k) + " has invalid energy");
      }
    }
  }
}

// "ARGS", u32 version, u32 tracks, u32 audio_dim, u32 motion_dim, u32 fps,
// u32 flags, extractor (u32 length + UTF-8), u64 frame count, then per frame:
// u64 frame_index and per track audio f32[audio_dim], motion f32[motion_dim],
// energy f32 (if flagged).
inline std::string encode_stream(const StreamFile& s) {
  validate_stream(s);
  const auto& h = s.header;
  ByteWriter w;
  w.raw("ARGS");
  w.u32(kStreamVersion);
  w.u32(h.track_count);
  w.u32(h.audio_dim);
  w.u32(h.motion_dim);
  w.u32(h.fps);
  w.u32(h.flags);
  w.str(h.extractor);
  w.u64(s.frames.size());
  for (std::size_t k = 0; k < s.frames.size(); ++k) {
    w.u64(k);
    for (const auto& r : s.frames[k]) {
      w.floats(r.audio);
      w.floats(r.motion);
      if (h.has_energy()) w.f32(r.energy);
    }
  }
  return w.take();
}

inline StreamHeader read_stream_header(ByteReader& r, std::uint64_t& count) {
  if (r.remaining() < 8 || r.raw(4) != "ARGS") throw FormatError("stream: bad magic");
  StreamHeader h;
  h.version = r.u32();
  if (h.version != kStreamVersion) {
    throw VersionError("stream: unsupported version " + std::to_string(h.version));
  }
  h.track_count = r.u32();
  h.audio_dim = r.u32();
  h.motion_dim = r.u32();
  h.fps = r.u32();
  h.flags = r.u32();
  h.extractor = r.str();
  count = r.u64();
  if (h.track_count == 0 || h.track_count > 2) throw FormatError("stream: bad track count");
  if (h.motion_dim == 0 || h.fps == 0) throw FormatError("stream: zero motion_dim or fps");
  const std::uint64_t per_track =
      4ULL * (std::uint64_t{h.audio_dim} + h.motion_dim + (h.has_energy() ? 1 : 0));
  if (count > 0 && (8 + h.track_count * per_track) * count > r.remaining()) {
    throw FormatError("stream: " + std::to_string(count) + " frames exceed the file size");
  }
  return h;
}

inline StreamFile decode_stream(std::string_view bytes) {
  ByteReader r(bytes);
  StreamFile s;
  std::uint64_t count = 0;
  s.header = read_stream_header(r, count);
  const auto& h = s.header;
  s.frames.reserve(count);
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::uint64_t idx = r.u64();
    if (idx != k) {
      throw FormatError("stream: frame indices not contiguous (record " + std::to_string(k) +
                        " has index " + std::to_string(idx) + ")");
    }
    std::vector<TrackRecord> tracks(h.track_count);
    for (auto& t : tracks) {
      t.audio.resize(h.audio_dim);
      r.floats(t.audio);
      t.motion.resize(h.motion_dim);
      r.floats(t.motion);
      if (h.has_energy()) t.energy = r.f32();
    }
    s.frames.push_back(std::move(tracks));
  }
  r.expect_done("stream");
  validate_stream(s);
  return s;
}

inline void save_stream(const StreamFile& s, const std::string& path) {
  write_file(path, encode_stream(s));
}
inline StreamFile load_stream(const std::string& path) { return decode_stream(read_file(path)); }

// Generated motions as a one-track, motion-only stream.
inline StreamFile motion_stream(const std::vector<FrameOutput>& outs, std::uint32_t motion_dim,
                                std::uint32_t fps) {
  StreamFile s;
  s.header = {kStreamVersion, 1, 0, motion_dim, fps, 0, "arig"};
  for (const auto& o : outs) s.frames.push_back({TrackRecord{{}, o.motion, 0.0f}});
  return s;
}

struct StreamSession {
  std::vector<float> reference_motion;
  std::vector<float> first_audio;
  std::vector<FrameInput> inputs;
};

// Frame T receives agent audio/energy of record T and the user's audio,
// motion and energy of record T-1. Frame 0 repeats record 0's user signals
// with zero energy. With teacher_forcing the agent's recorded motion of
// record T-1 replaces the generated one.
inline StreamSession stream_to_inputs(const StreamFile& s, const EngineConfig& cfg,
                                      bool teacher_forcing = false) {
  const auto& h = s.header;
  if (h.track_count != 2) throw ValidationError("run: input stream needs agent and user tracks");
  if (h.audio_dim != cfg.audio_dim || h.motion_dim != cfg.motion_dim) {
    throw ValidationError("run: stream dims audio " + std::to_string(h.audio_dim) + " motion " +
                          std::to_string(h.motion_dim) + " do not match the configuration (" +
                          std::to_string(cfg.audio_dim) + "/" + std::to_string(cfg.motion_dim) + ")");
  }
  if (!h.has_energy()) throw ValidationError("run: input stream carries no energies");
  StreamSession out;
  if (s.frames.empty()) return out;
  out.reference_motion = s.frames[0][0].motion;
  out.first_audio = s.frames[0][0].audio;
  for (std::size_t t = 0; t < s.frames.size(); ++t) {
    const auto& agent = s.frames[t][0];
    const auto& user_prev = s.frames[t == 0 ? 0 : t - 1][1];
    FrameInput in;
    in.frame_index = t;
    in.agent_audio = agent.audio;
    in.agent_energy = agent.energy;
    in.user_audio = user_prev.audio;
    in.user_motion = user_prev.motion;
    in.user_energy = t == 0 ? 0.0f : user_prev.energy;
    if (teacher_forcing && t > 0) in.agent_motion = s.frames[t - 1][0].motion;
    out.inputs.push_back(std::move(in));
  }
  return out;
}

struct StateAnnotation {
  std::uint64_t frame_index = 0;
  bool agent_active = false;
  bool user_active = false;
  std::size_t state_index = 0;

  bool operator==(const StateAnnotation&) const = default;
};

// CSV text: header "frame_index,agent_active,user_active,state_index", one row
// per frame, indices contiguous from 0.
inline std::string encode_annotations(const std::vector<StateAnnotation>& rows) {
  std::ostringstream os;
  os << "frame_index,agent_active,user_active,state_index\n";
  for (const auto& r : rows) {
    os << r.frame_index << "," << (r.agent_active ? 1 : 0) << "," << (r.user_active ? 1 : 0) << ","
       << r.state_index << "\n";
  }
  return os.str();
}

inline std::vector<StateAnnotation> decode_annotations(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || detail::trim(line) != "frame_index,agent_active,user_active,state_index") {
    throw FormatError("annotations: missing header line");
  }
  std::vector<StateAnnotation> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[4];
    for (int i = 0; i < 4; ++i) {
      if (!std::getline(ls, f[i], ',')) throw FormatError("annotations line " + std::to_string(lineno) + ": expected 4 fields");
    }
    StateAnnotation a;
    try {
      a.frame_index = detail::parse_number<std::uint64_t>("frame_index", f[0]);
      a.agent_active = detail::parse_bool("agent_active", f[1]);
      a.user_active = detail::parse_bool("user_active", f[2]);
      a.state_index = detail::parse_number<std::size_t>("state_index", f[3]);
    } catch (const ConfigError& e) {
      throw FormatError("annotations line " + std::to_string(lineno) + ": " + e.what());
    }
    if (a.state_index >= kStateCount) {
      throw FormatError("annotations line " + std::to_string(lineno) + ": state out of range");
    }
    if (a.frame_index != rows.size()) {
      throw FormatError("annotations line " + std::to_string(lineno) + ": frame indices not contiguous");
    }
    rows.push_back(a);
  }
  return rows;
}

struct ConsistencyReport {
  std::size_t frames = 0;
  std::vector<std::uint64_t> violations;  // frames whose state disagrees with the VAD pair
  bool ok() const { return violations.empty(); }
};

inline ConsistencyReport check_coarse_consistency(const std::vector<StateAnnotation>& rows) {
  ConsistencyReport rep;
  rep.frames = rows.size();
  for (const auto& r : rows) {
    if (coarse_parent(r.state_index) != coarse_category(r.agent_active, r.user_active)) {
      rep.violations.push_back(r.frame_index);
    }
  }
  return rep;
}

}  // namespace arig
