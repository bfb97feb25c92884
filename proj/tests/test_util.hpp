#pragma once

#include <memory>
#include <vector>

#include "arig/engine.hpp"
#include "arig/rng.hpp"
#include "arig/weights.hpp"

namespace arig::testing {

// Small but structurally complete topology for fast engine tests.
inline EngineConfig tiny_config(std::uint64_t seed = 3) {
  EngineConfig cfg;
  cfg.d_model = 16;
  cfg.d_ff = 32;
  cfg.heads = 2;
  cfg.head_dim = 8;
  cfg.audio_dim = 12;
  cfg.motion_dim = 10;
  cfg.context_capacity = 64;
  cfg.diff_width = 10;
  cfg.diff_cond_dim = 16;
  cfg.timestep_dim = 16;
  cfg.layout = {0, 3, 3, 4, 7, 2, 9, 1};
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

inline std::vector<float> randn(CounterRng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (float& x : v) x = static_cast<float>(scale * rng.normal());
  return v;
}

inline Tensor<float> randt(CounterRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  return Tensor<float>(r, c, randn(rng, r * c, scale));
}

// Random weights with live gates so every path carries signal.
inline std::shared_ptr<const EngineWeights> live_weights(const EngineConfig& cfg,
                                                          std::uint64_t seed = 5) {
  return std::make_shared<const EngineWeights>(random_weights(cfg, {seed, false}));
}

inline std::vector<FrameInput> random_inputs(const EngineConfig& cfg, std::size_t n,
                                             std::uint64_t seed, bool overrides = false) {
  CounterRng rng(seed, 77);
  std::vector<FrameInput> in;
  for (std::size_t t = 0; t < n; ++t) {
    FrameInput f;
    f.frame_index = t;
    f.agent_audio = randn(rng, cfg.audio_dim);
    f.user_audio = randn(rng, cfg.audio_dim);
    f.user_motion = randn(rng, cfg.motion_dim);
    f.agent_energy = static_cast<float>(rng.uniform() * 0.03);
    f.user_energy = static_cast<float>(rng.uniform() * 0.03);
    if (overrides && t % 7 == 3) f.agent_motion = randn(rng, cfg.motion_dim);
    in.push_back(std::move(f));
  }
  return in;
}

inline bool same_outputs(const FrameOutput& a, const FrameOutput& b) {
  return a.frame_index == b.frame_index && a.motion == b.motion && a.state_index == b.state_index &&
         a.state_probs == b.state_probs && a.agent_active == b.agent_active &&
         a.user_active == b.user_active;
}

}  // namespace arig::testing
