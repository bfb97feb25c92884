#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "arig/error.hpp"

namespace arig {

// Where the expression / pose / scale coefficients live inside a motion
// vector. The keypoint slice carries coordinates expected in [0, 1].
struct MotionLayout {
  std::size_t keypoint_offset = 0;
  std::size_t keypoint_count = 63;
  std::size_t expression_offset = 63;
  std::size_t expression_count = 192;
  std::size_t pose_offset = 255;
  std::size_t pose_count = 6;
  std::size_t scale_offset = 261;
  std::size_t scale_count = 1;

  bool operator==(const MotionLayout&) const = default;
};

struct VadConfig {
  std::size_t window = 3;
  double threshold = 0.01;
  std::size_t hangover = 5;

  bool operator==(const VadConfig&) const = default;
};

struct EngineConfig {
  // Fixed by the model topology.
  static constexpr std::size_t kAudioWindow = 3;
  static constexpr std::size_t kMotionWindow = 5;
  static constexpr std::size_t kDiffusionBlocks = 3;
  static constexpr std::size_t kStateCount = 7;

  std::size_t chunk_size = 6;          // c
  std::size_t context_capacity = 512;  // w
  std::size_t heads = 6;               // h
  std::size_t head_dim = 64;
  std::size_t d_model = 512;
  std::size_t d_ff = 2048;
  std::size_t bidir_depth = 2;
  std::size_t integrated_depth = 1;
  std::size_t context_depth = 2;
  std::size_t audio_dim = 768;
  std::size_t motion_dim = 262;
  std::size_t fps = 25;

  std::size_t diffusion_train_steps = 1000;
  std::size_t diffusion_steps = 15;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t diff_width = 262;
  std::size_t diff_cond_dim = 512;
  std::size_t timestep_dim = 256;

  // 0 keeps the full capacity w; otherwise the context is truncated to this
  // many entries.
  std::size_t context_cap = 0;
  bool incremental_context = false;
  bool positional_encoding = true;

  VadConfig vad;
  MotionLayout layout;
  std::uint64_t seed = 0;

  std::size_t latent_dim() const { return motion_dim; }
  std::size_t effective_context() const {
    return context_cap == 0 ? context_capacity : std::min(context_cap, context_capacity);
  }
  double frame_budget_ms() const { return 1000.0 / static_cast<double>(fps); }

  bool operator==(const EngineConfig&) const = default;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
    };
    positive(chunk_size, "c");
    positive(context_capacity, "w");
    positive(heads, "h");
    positive(head_dim, "head_dim");
    positive(d_model, "d_model");
    positive(d_ff, "d_ff");
    positive(bidir_depth, "bidir_depth");
    positive(integrated_depth, "integrated_depth");
    positive(context_depth, "context_depth");
    positive(audio_dim, "audio_dim");
    positive(motion_dim, "motion_dim");
    positive(fps, "fps");
    positive(diffusion_train_steps, "train_steps");
    positive(diffusion_steps, "diffusion_steps");
    positive(diff_width, "diff_width");
    positive(diff_cond_dim, "diff_cond_dim");
    positive(timestep_dim, "timestep_dim");
    positive(vad.window, "vad_window");
    if (timestep_dim % 2 != 0) throw ConfigError("config: timestep_dim must be even");
    if (diffusion_steps > diffusion_train_steps) {
      throw ConfigError("config: diffusion_steps exceeds train_steps");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
      throw ConfigError("config: need 0 < beta_start <= beta_end < 1");
    }
    if (!(vad.threshold > 0.0)) throw ConfigError("config: vad_threshold must be positive");
    auto in_range = [&](std::size_t off, std::size_t n, const char* name) {
      if (off + n > motion_dim) {
        throw ConfigError(std::string("config: motion layout slice ") + name +
                          " exceeds motion_dim");
      }
    };
    in_range(layout.keypoint_offset, layout.keypoint_count, "keypoint");
    in_range(layout.expression_offset, layout.expression_count, "expression");
    in_range(layout.pose_offset, layout.pose_count, "pose");
    in_range(layout.scale_offset, layout.scale_count, "scale");
  }
};

namespace detail {

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = b + text.size();
  if constexpr (std::is_floating_point_v<T>) {
    try {
      std::size_t used = 0;
      v = static_cast<T>(std::stod(text, &used));
      if (used != text.size()) throw std::invalid_argument(text);
    } catch (const std::exception&) {
      throw ConfigError("config: bad value '" + text + "' for " + key);
    }
  } else {
    auto [p, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || p != e) {
      throw ConfigError("config: bad value '" + text + "' for " + key);
    }
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct ConfigField {
  std::function<void(EngineConfig&, const std::string&)> set;
  std::function<std::string(const EngineConfig&)> get;
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> m;
    auto size_field = [&m](const std::string& key, std::size_t EngineConfig::*p) {
      m[key] = {[key, p](EngineConfig& c, const std::string& v) {
                  c.*p = parse_number<std::size_t>(key, v);
                },
                [p](const EngineConfig& c) { return std::to_string(c.*p); }};
    };
    auto layout_field = [&m](const std::string& key, std::size_t MotionLayout::*p) {
      m[key] = {[key, p](EngineConfig& c, const std::string& v) {
                  c.layout.*p = parse_number<std::size_t>(key, v);
                },
                [p](const EngineConfig& c) { return std::to_string(c.layout.*p); }};
    };
    auto double_field = [&m](const std::string& key, double EngineConfig::*p) {
      m[key] = {[key, p](EngineConfig& c, const std::string& v) {
                  c.*p = parse_number<double>(key, v);
                },
                [p](const EngineConfig& c) { return format_double(c.*p); }};
    };
    auto bool_field = [&m](const std::string& key, bool EngineConfig::*p) {
      m[key] = {[key, p](EngineConfig& c, const std::string& v) { c.*p = parse_bool(key, v); },
                [p](const EngineConfig& c) { return std::string(c.*p ? "true" : "false"); }};
    };
    size_field("c", &EngineConfig::chunk_size);
    size_field("w", &EngineConfig::context_capacity);
    size_field("h", &EngineConfig::heads);
    size_field("head_dim", &EngineConfig::head_dim);
    size_field("d_model", &EngineConfig::d_model);
    size_field("d_ff", &EngineConfig::d_ff);
    size_field("bidir_depth", &EngineConfig::bidir_depth);
    size_field("integrated_depth", &EngineConfig::integrated_depth);
    size_field("context_depth", &EngineConfig::context_depth);
    size_field("audio_dim", &EngineConfig::audio_dim);
    size_field("motion_dim", &EngineConfig::motion_dim);
    size_field("fps", &EngineConfig::fps);
    size_field("train_steps", &EngineConfig::diffusion_train_steps);
    size_field("diffusion_steps", &EngineConfig::diffusion_steps);
    double_field("beta_start", &EngineConfig::beta_start);
    double_field("beta_end", &EngineConfig::beta_end);
    size_field("diff_width", &EngineConfig::diff_width);
    size_field("diff_cond_dim", &EngineConfig::diff_cond_dim);
    size_field("timestep_dim", &EngineConfig::timestep_dim);
    size_field("context_cap", &EngineConfig::context_cap);
    bool_field("incremental_context", &EngineConfig::incremental_context);
    bool_field("positional_encoding", &EngineConfig::positional_encoding);
    m["vad_window"] = {[](EngineConfig& c, const std::string& v) {
                         c.vad.window = parse_number<std::size_t>("vad_window", v);
                       },
                       [](const EngineConfig& c) { return std::to_string(c.vad.window); }};
    m["vad_threshold"] = {[](EngineConfig& c, const std::string& v) {
                            c.vad.threshold = parse_number<double>("vad_threshold", v);
                          },
                          [](const EngineConfig& c) { return format_double(c.vad.threshold); }};
    m["vad_hangover"] = {[](EngineConfig& c, const std::string& v) {
                           c.vad.hangover = parse_number<std::size_t>("vad_hangover", v);
                         },
                         [](const EngineConfig& c) { return std::to_string(c.vad.hangover); }};
    m["seed"] = {[](EngineConfig& c, const std::string& v) {
                   c.seed = parse_number<std::uint64_t>("seed", v);
                 },
                 [](const EngineConfig& c) { return std::to_string(c.seed); }};
    layout_field("keypoint_offset", &MotionLayout::keypoint_offset);
    layout_field("keypoint_count", &MotionLayout::keypoint_count);
    layout_field("expression_offset", &MotionLayout::expression_offset);
    layout_field("expression_count", &MotionLayout::expression_count);
    layout_field("pose_offset", &MotionLayout::pose_offset);
    layout_field("pose_count", &MotionLayout::pose_count);
    layout_field("scale_offset", &MotionLayout::scale_offset);
    layout_field("scale_count", &MotionLayout::scale_count);
    return m;
  }();
  return fields;
}

}  // namespace detail

// Flat `key = value` text. `#` starts a comment. Unknown keys are errors.
inline EngineConfig parse_config(const std::string& text, EngineConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  const auto& fields = detail::config_fields();
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    auto it = fields.find(key);
    if (it == fields.end()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    it->second.set(base, value);
  }
  base.validate();
  return base;
}

inline EngineConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

inline std::string config_to_text(const EngineConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) {
    out += key + " = " + field.get(cfg) + "\n";
  }
  return out;
}

}  // namespace arig
