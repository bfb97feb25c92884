#pragma once

// Gateway wire protocol: newline-delimited JSON messages and the per-connection
// protocol state machine. Transport lives in gateway.hpp.

#include <sodium.h>

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "arig/engine.hpp"

namespace arig {

using Json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;

namespace wire {

inline std::string encode_base64(std::span<const float> v) {
  std::string raw(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(v[i]);
    for (int b = 0; b < 4; ++b) raw[i * 4 + b] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  const std::size_t cap = sodium_base64_ENCODED_LEN(raw.size(), sodium_base64_VARIANT_ORIGINAL);
  std::string out(cap, '\0');
  sodium_bin2base64(out.data(), cap, reinterpret_cast<const unsigned char*>(raw.data()), raw.size(),
                    sodium_base64_VARIANT_ORIGINAL);
  out.resize(cap - 1);
  return out;
}

inline std::vector<float> decode_base64(const std::string& text, const char* field) {
  std::string raw(text.size(), '\0');
  std::size_t len = 0;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(raw.data()), raw.size(), text.data(),
                        text.size(), nullptr, &len, nullptr, sodium_base64_VARIANT_ORIGINAL) != 0 ||
      len % 4 != 0) {
    throw ValidationError(std::string("field '") + field + "' is not base64 little-endian f32 data");
  }
  std::vector<float> v(len / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[i * 4 + b])) << (8 * b);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

// A float vector from either a numeric array or a base64 string.
inline std::vector<float> vector_field(const Json& j, const char* field) {
  if (!j.contains(field)) throw ValidationError(std::string("missing field '") + field + "'");
  const Json& v = j[field];
  if (v.is_string()) return decode_base64(v.get<std::string>(), field);
  if (!v.is_array()) throw ValidationError(std::string("field '") + field + "' must be an array or base64 string");
  std::vector<float> out;
  out.reserve(v.size());
  for (const auto& x : v) {
    if (!x.is_number()) throw ValidationError(std::string("field '") + field + "' has a non-numeric entry");
    out.push_back(static_cast<float>(x.get<double>()));
  }
  return out;
}

inline Json vector_json(std::span<const float> v, bool base64) {
  if (base64) return encode_base64(v);
  return Json(std::vector<float>(v.begin(), v.end()));
}

inline float number_field(const Json& j, const char* field) {
  if (!j.contains(field) || !j[field].is_number()) {
    throw ValidationError(std::string("missing numeric field '") + field + "'");
  }
  return static_cast<float>(j[field].get<double>());
}

}  // namespace wire

// One JSON record per frame with every FrameOutput field (the --trace format).
inline Json frame_output_json(const FrameOutput& o) {
  Json j = {{"frame_index", o.frame_index},
            {"motion", o.motion},
            {"state_index", o.state_index},
            {"state_probs", std::vector<float>(o.state_probs.begin(), o.state_probs.end())},
            {"agent_active", o.agent_active},
            {"user_active", o.user_active},
            {"latency_micros", o.latency_micros},
            {"stage_micros",
             {{"ibu", o.stage_micros.ibu},
              {"csu", o.stage_micros.csu},
              {"pmp", o.stage_micros.pmp},
              {"sampler", o.stage_micros.sampler}}},
            {"denoiser_eval_count", o.denoiser_eval_count}};
  if (!o.cis_digest.empty()) j["cis_digest"] = o.cis_digest;
  return j;
}

inline FrameInput frame_input_from_json(const Json& j) {
  FrameInput in;
  if (!j.contains("frame_index") || !j["frame_index"].is_number_unsigned()) {
    throw ValidationError("missing or negative 'frame_index'");
  }
  in.frame_index = j["frame_index"].get<std::uint64_t>();
  in.agent_audio = wire::vector_field(j, "agent_audio");
  in.user_audio = wire::vector_field(j, "user_audio");
  in.user_motion = wire::vector_field(j, "user_motion");
  in.agent_energy = wire::number_field(j, "agent_energy");
  in.user_energy = wire::number_field(j, "user_energy");
  if (j.contains("agent_motion") && !j["agent_motion"].is_null()) {
    in.agent_motion = wire::vector_field(j, "agent_motion");
  }
  if (j.contains("vad_override") && !j["vad_override"].is_null()) {
    const auto& v = j["vad_override"];
    if (!v.is_object() || !v.contains("agent_active") || !v.contains("user_active") ||
        !v["agent_active"].is_boolean() || !v["user_active"].is_boolean()) {
      throw ValidationError("'vad_override' needs boolean agent_active and user_active");
    }
    in.vad_override = VadOverride{v["agent_active"].get<bool>(), v["user_active"].get<bool>()};
  }
  return in;
}

inline Json frame_input_json(const FrameInput& in, bool base64) {
  Json j = {{"type", "frame_in"},
            {"frame_index", in.frame_index},
            {"agent_audio", wire::vector_json(in.agent_audio, base64)},
            {"user_audio", wire::vector_json(in.user_audio, base64)},
            {"user_motion", wire::vector_json(in.user_motion, base64)},
            {"agent_energy", in.agent_energy},
            {"user_energy", in.user_energy}};
  if (in.agent_motion) j["agent_motion"] = wire::vector_json(*in.agent_motion, base64);
  if (in.vad_override) {
    j["vad_override"] = {{"agent_active", in.vad_override->agent_active},
                         {"user_active", in.vad_override->user_active}};
  }
  return j;
}

inline Json error_json(const std::string& code, const std::string& message,
                       std::optional<std::uint64_t> frame = std::nullopt) {
  Json j = {{"type", "error"}, {"code", code}, {"message", message}};
  if (frame) j["frame_index"] = *frame;
  return j;
}

// Latency fields vary run to run; golden comparisons replace them.
inline std::string mask_latency(const std::string& line) {
  Json j = Json::parse(line);
  if (j.contains("latency_micros")) j["latency_micros"] = 0;
  if (j.contains("stage_micros")) j["stage_micros"] = 0;
  return j.dump();
}

inline std::vector<float> default_reference_motion(const EngineConfig& cfg) {
  std::vector<float> m(cfg.motion_dim, 0.0f);
  for (std::size_t i = 0; i < cfg.layout.keypoint_count; ++i) m[cfg.layout.keypoint_offset + i] = 0.5f;
  return m;
}

struct Reply {
  std::vector<std::string> lines;
  bool close = false;
};

// Transport-independent handler for one connection. Feed it one incoming line
// at a time; it answers with zero or more outgoing lines.
class ProtocolSession {
 public:
  ProtocolSession(const EngineConfig& cfg, std::shared_ptr<const EngineWeights> w)
      : cfg_(cfg), w_(std::move(w)) {}

  Reply handle(const std::string& line) {
    Reply r;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::exception& e) {
      return fail(r, error_json("malformed_json", e.what()));
    }
    if (!j.is_object() || !j.contains("type") || !j["type"].is_string()) {
      return fail(r, error_json("protocol", "message must be an object with a string 'type'"));
    }
    const std::string type = j["type"].get<std::string>();
    try {
      if (type == "hello") return hello(j);
      if (!hello_done_) return fail(r, error_json("protocol", "expected hello first"));
      if (type == "config") return config(j);
      if (type == "frame_in") return frame(j);
      if (type == "bye") {
        r.lines.push_back(Json{{"type", "bye"}, {"frames", frames_}}.dump());
        r.close = true;
        return r;
      }
      return fail(r, error_json("protocol", "unknown message type '" + type + "'"));
    } catch (const Json::exception& e) {
      return fail(r, error_json("protocol", e.what()));
    }
  }

  std::uint64_t frames() const { return frames_; }

 private:
  static Reply fail(Reply& r, const Json& err) {
    r.lines.push_back(err.dump());
    r.close = true;
    return r;
  }

  Json config_json() const {
    return {{"type", "config"},
            {"motion_dim", cfg_.motion_dim},
            {"audio_dim", cfg_.audio_dim},
            {"fps", cfg_.fps},
            {"chunk_size", cfg_.chunk_size},
            {"context_capacity", cfg_.effective_context()},
            {"diffusion_steps", cfg_.diffusion_steps},
            {"seed", cfg_.seed},
            {"motion_display", motion_display_},
            {"encoding", base64_ ? "base64" : "json"},
            {"states", [] {
               Json s = Json::array();
               for (std::size_t i = 0; i < kStateCount; ++i) s.push_back(state_name(i));
               return s;
             }()}};
  }

  Reply hello(const Json& j) {
    Reply r;
    if (hello_done_) return fail(r, error_json("protocol", "duplicate hello"));
    const int version = j.value("version", -1);
    if (version != kProtocolVersion) {
      return fail(r, error_json("version", "unsupported protocol version " + std::to_string(version) +
                                               " (server speaks " + std::to_string(kProtocolVersion) + ")"));
    }
    const std::string enc = j.value("encoding", std::string("json"));
    if (enc != "json" && enc != "base64") {
      return fail(r, error_json("protocol", "encoding must be json or base64"));
    }
    base64_ = enc == "base64";
    try {
      apply_display(j);
      if (j.contains("reference_motion")) {
        reference_ = wire::vector_field(j, "reference_motion");
        detail::check_input_vector(reference_, cfg_.motion_dim, "reference_motion");
      } else {
        reference_ = default_reference_motion(cfg_);
      }
    } catch (const Error& e) {
      return fail(r, error_json("validation", e.what()));
    }
    hello_done_ = true;
    r.lines.push_back(Json{{"type", "hello"}, {"version", kProtocolVersion}, {"encoding", enc}}.dump());
    r.lines.push_back(config_json().dump());
    return r;
  }

  void apply_display(const Json& j) {
    if (!j.contains("motion_display")) return;
    if (!j["motion_display"].is_number_unsigned()) {
      throw ValidationError("'motion_display' must be a non-negative integer");
    }
    motion_display_ = std::min<std::size_t>(j["motion_display"].get<std::size_t>(), cfg_.motion_dim);
  }

  Reply config(const Json& j) {
    Reply r;
    try {
      apply_display(j);
    } catch (const Error& e) {
      r.lines.push_back(error_json("validation", e.what()).dump());
      return r;
    }
    r.lines.push_back(config_json().dump());
    return r;
  }

  Reply frame(const Json& j) {
    Reply r;
    std::optional<std::uint64_t> idx;
    if (j.contains("frame_index") && j["frame_index"].is_number_unsigned()) {
      idx = j["frame_index"].get<std::uint64_t>();
    }
    FrameInput in;
    try {
      in = frame_input_from_json(j);
      if (!session_) {
        if (in.frame_index != 0) throw SequencingError("first frame must be 0, got " + std::to_string(in.frame_index));
        detail::validate_input(cfg_, in);
        session_ = std::make_unique<Session>(cfg_, w_);
        session_->init(reference_, in.agent_audio);
      }
      const std::size_t before = session_->state();
      const FrameOutput o = session_->step(in);
      ++frames_;
      Json out = frame_output_json(o);
      out["type"] = "frame_out";
      out["motion_dim"] = o.motion.size();
      const bool full = j.value("full_motion", false);
      const std::size_t n = (full || motion_display_ == 0) ? o.motion.size() : motion_display_;
      out["motion"] = wire::vector_json(std::span<const float>(o.motion).first(n), base64_);
      out["state_name"] = state_name(o.state_index);
      r.lines.push_back(out.dump());
      if (o.state_index != before) {
        r.lines.push_back(Json{{"type", "state"},
                               {"frame_index", o.frame_index},
                               {"previous", before},
                               {"state_index", o.state_index},
                               {"state_name", state_name(o.state_index)}}
                              .dump());
      }
    } catch (const SequencingError& e) {
      r.lines.push_back(error_json("sequencing", e.what(), idx).dump());
    } catch (const NumericError& e) {
      return fail(r, error_json("numeric", e.what(), idx));
    } catch (const Error& e) {
      r.lines.push_back(error_json("validation", e.what(), idx).dump());
    }
    return r;
  }

  EngineConfig cfg_;
  std::shared_ptr<const EngineWeights> w_;
  std::unique_ptr<Session> session_;
  std::vector<float> reference_;
  std::size_t motion_display_ = 0;
  bool base64_ = false;
  bool hello_done_ = false;
  std::uint64_t frames_ = 0;
};

}  // namespace arig
