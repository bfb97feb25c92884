#pragma once

// Conversation state understanding: energy VAD per track, the coarse 4-way
// category it implies, and the learned 7-way fine state.

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <string>

#include "arig/config.hpp"
#include "arig/ibu.hpp"
#include "arig/log.hpp"
#include "arig/nn.hpp"

namespace arig {

enum class CoarseState : std::uint8_t { AgentOnly = 0, UserOnly = 1, BothActive = 2, BothSilent = 3 };

inline const char* coarse_name(CoarseState c) {
  switch (c) {
    case CoarseState::AgentOnly: return "AgentOnly";
    case CoarseState::UserOnly: return "UserOnly";
    case CoarseState::BothActive: return "BothActive";
    case CoarseState::BothSilent: return "BothSilent";
  }
  return "?";
}

inline CoarseState coarse_category(bool agent_active, bool user_active) {
  if (agent_active && !user_active) return CoarseState::AgentOnly;
  if (!agent_active && user_active) return CoarseState::UserOnly;
  if (agent_active && user_active) return CoarseState::BothActive;
  return CoarseState::BothSilent;
}

// Fine-state indices.
enum class FineState : std::uint8_t {
  Speaking = 0,
  SpeakingWithFeedbackReceived = 1,
  Interrupted = 2,
  Listening = 3,
  GivingFeedback = 4,
  PauseToThink = 5,
  WaitDuringPause = 6,
};

inline constexpr std::size_t kStateCount = EngineConfig::kStateCount;

inline const char* state_name(std::size_t s) {
  static constexpr const char* names[] = {"Speaking",       "SpeakingWithFeedbackReceived",
                                          "Interrupted",    "Listening",
                                          "GivingFeedback", "PauseToThink",
                                          "WaitDuringPause"};
  return s < kStateCount ? names[s] : "?";
}

// The coarse category each fine state is expected under.
inline CoarseState coarse_parent(std::size_t s) {
  switch (static_cast<FineState>(s)) {
    case FineState::Speaking: return CoarseState::AgentOnly;
    case FineState::SpeakingWithFeedbackReceived:
    case FineState::Interrupted:
    case FineState::GivingFeedback: return CoarseState::BothActive;
    case FineState::Listening: return CoarseState::UserOnly;
    case FineState::PauseToThink:
    case FineState::WaitDuringPause: return CoarseState::BothSilent;
  }
  throw ValidationError("state index out of range: " + std::to_string(s));
}

inline constexpr std::size_t kInitialState = static_cast<std::size_t>(FineState::Listening);

struct VadPair {
  bool agent_active = false;
  bool user_active = false;
  CoarseState coarse = CoarseState::BothSilent;

  static VadPair of(bool a, bool u) { return {a, u, coarse_category(a, u)}; }
};

// Mean energy over the last `window` frames against a threshold; after going
// active the decision holds for `hangover` more frames once energy drops.
class VadTracker {
 public:
  VadTracker() = default;
  explicit VadTracker(VadConfig cfg) : cfg_(cfg) {
    if (cfg.window == 0) throw ConfigError("vad: window must be >= 1");
    if (!(cfg.threshold > 0.0)) throw ConfigError("vad: threshold must be positive");
  }

  bool update(float energy) {
    if (!(energy >= 0.0f) || !std::isfinite(energy)) {
      throw ValidationError("vad: energy must be finite and nonnegative, got " +
                            std::to_string(energy));
    }
    energies_.push_back(energy);
    if (energies_.size() > cfg_.window) energies_.pop_front();
    double sum = 0.0;
    for (float e : energies_) sum += e;
    const bool raw = sum / static_cast<double>(energies_.size()) > cfg_.threshold;
    if (raw) {
      hang_left_ = cfg_.hangover;
      active_ = true;
    } else if (hang_left_ > 0) {
      --hang_left_;
      active_ = true;
    } else {
      active_ = false;
    }
    return active_;
  }

  bool active() const { return active_; }
  const std::deque<float>& energies() const { return energies_; }
  std::size_t hang_left() const { return hang_left_; }
  const VadConfig& config() const { return cfg_; }

  void restore_state(std::deque<float> energies, std::size_t hang_left, bool active) {
    energies_ = std::move(energies);
    hang_left_ = hang_left;
    active_ = active;
  }

  bool operator==(const VadTracker&) const = default;

 private:
  VadConfig cfg_;
  std::deque<float> energies_;
  std::size_t hang_left_ = 0;
  bool active_ = false;
};

// Decision for the last frame of an energy history, replaying the tracker.
inline bool vad_classify(std::span<const float> energies, const VadConfig& cfg) {
  if (energies.empty()) throw ValidationError("vad: empty energy history");
  VadTracker t(cfg);
  bool a = false;
  for (float e : energies) a = t.update(e);
  return a;
}

struct CsuParams {
  Tensor<float> state_embed;  // [7 x d]
  Tensor<float> vad_agent;    // [2 x d], row 0 silent, row 1 active
  Tensor<float> vad_user;     // [2 x d]
  NormWeights<float> ln_q, ln_kv, ln2;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
  Linear<float> head;         // d -> 7

  static CsuParams shaped(const EngineConfig& cfg) {
    const std::size_t d = cfg.d_model, inner = cfg.heads * cfg.head_dim;
    CsuParams p;
    p.state_embed = Tensor<float>(kStateCount, d);
    p.vad_agent = Tensor<float>(2, d);
    p.vad_user = Tensor<float>(2, d);
    p.ln_q = NormWeights<float>(d);
    p.ln_kv = NormWeights<float>(d);
    p.ln2 = NormWeights<float>(d);
    p.attn = make_attention<float>(d, d, inner, d);
    p.mlp = make_mlp<float>(d, cfg.d_ff);
    p.head = Linear<float>(d, kStateCount);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    f(std::string("csu.state_embed"), state_embed, Init::Embedding, state_embed.cols());
    f(std::string("csu.vad_agent"), vad_agent, Init::Embedding, vad_agent.cols());
    f(std::string("csu.vad_user"), vad_user, Init::Embedding, vad_user.cols());
    visit_norm(f, "csu.ln_q", ln_q);
    visit_norm(f, "csu.ln_kv", ln_kv);
    visit_attention(f, "csu.attn", attn);
    visit_norm(f, "csu.ln2", ln2);
    visit_mlp(f, "csu.mlp", mlp);
    visit_linear(f, "csu.head", head);
  }
};

struct StatePrediction {
  std::vector<float> latent;  // S_T
  std::array<float, kStateCount> logits{};
  std::array<float, kStateCount> probs{};
  std::size_t next = 0;
};

// Lowest index wins ties.
inline std::size_t argmax_lowest(std::span<const float> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// Cross attention from the embedded previous state onto
// [agent VAD embedding, user VAD embedding, cis-token], then a feedforward.
inline StatePrediction predict_state(const CsuParams& p, const EngineConfig& cfg, std::size_t prev,
                                     const VadPair& vad, std::span<const float> cis) {
  if (prev >= kStateCount) throw ValidationError("predict_state: previous state out of range");
  detail::check_length(cis, cfg.d_model, "predict_state cis");
  const std::size_t d = cfg.d_model;
  Tensor<float> q(1, d);
  std::copy(p.state_embed.row(prev).begin(), p.state_embed.row(prev).end(), q.row(0).begin());
  Tensor<float> kv(3, d);
  auto va = p.vad_agent.row(vad.agent_active ? 1 : 0);
  auto vu = p.vad_user.row(vad.user_active ? 1 : 0);
  std::copy(va.begin(), va.end(), kv.row(0).begin());
  std::copy(vu.begin(), vu.end(), kv.row(1).begin());
  std::copy(cis.begin(), cis.end(), kv.row(2).begin());

  Tensor<float> x = add(q, multi_head_attention(p.ln_q(q, kNormEps), p.ln_kv(kv, kNormEps),
                                                AttentionMask::none(), p.attn, cfg.heads));
  x = add(x, gelu_mlp(p.ln2(x, kNormEps), p.mlp));

  StatePrediction out;
  out.latent.assign(x.flat().begin(), x.flat().end());
  auto logits = p.head(std::span<const float>(out.latent));
  std::copy(logits.begin(), logits.end(), out.logits.begin());
  out.probs = out.logits;
  softmax_inplace(std::span<float>(out.probs));
  out.next = argmax_lowest(out.logits);
  return out;
}

// -log(probs[target]), clamped at log(machine epsilon) when the probability is 0.
inline double state_ce_loss(std::span<const float> probs, std::size_t target) {
  if (target >= probs.size()) throw ValidationError("state_ce_loss: target out of range");
  double pt = probs[target];
  if (!(pt > 0.0)) {
    log_warn("state_ce_loss: zero probability for target " + std::to_string(target) +
             ", clamping");
    pt = std::numeric_limits<double>::epsilon();
  }
  return -std::log(pt);
}

// The same loss from logits, log-sum-exp in double.
inline double state_ce_from_logits(std::span<const float> logits, std::size_t target) {
  if (target >= logits.size()) throw ValidationError("state_ce_from_logits: target out of range");
  double m = logits[0];
  for (float v : logits) m = std::max(m, static_cast<double>(v));
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - m);
  return m + std::log(sum) - static_cast<double>(logits[target]);
}

}  // namespace arig
