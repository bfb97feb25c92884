#pragma once

// Progressive motion prediction: an audio-driven coarse outline, refinement
// with context, state and current audio, and a short causal temporal layer
// producing the sampler condition z.

#include <string>
#include <vector>

#include "arig/config.hpp"
#include "arig/ibu.hpp"
#include "arig/nn.hpp"

namespace arig {

struct CoarseParams {
  Linear<float> motion_embed;  // motion -> d
  Linear<float> audio_embed;   // audio -> d
  NormWeights<float> ln_q, ln_kv, ln2;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
};

struct FineParams {
  Linear<float> audio_embed;  // audio -> d
  NormWeights<float> ln_q, ln_kv, ln2;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
  Tensor<float> gate_attn;  // [1 x d], zero at init
  Tensor<float> gate_mlp;   // [1 x d], zero at init
};

struct TemporalParams {
  Linear<float> motion_embed;  // motion -> d
  NormWeights<float> ln1, ln2, ln_f;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
  Linear<float> out;  // d -> latent
};

struct PmpParams {
  CoarseParams coarse;
  FineParams fine;
  TemporalParams temporal;

  static PmpParams shaped(const EngineConfig& cfg) {
    const std::size_t d = cfg.d_model, inner = cfg.heads * cfg.head_dim;
    PmpParams p;
    auto& c = p.coarse;
    c.motion_embed = Linear<float>(cfg.motion_dim, d);
    c.audio_embed = Linear<float>(cfg.audio_dim, d);
    c.ln_q = c.ln_kv = c.ln2 = NormWeights<float>(d);
    c.attn = make_attention<float>(d, d, inner, d);
    c.mlp = make_mlp<float>(d, cfg.d_ff);
    auto& f = p.fine;
    f.audio_embed = Linear<float>(cfg.audio_dim, d);
    f.ln_q = f.ln_kv = f.ln2 = NormWeights<float>(d);
    f.attn = make_attention<float>(d, d, inner, d);
    f.mlp = make_mlp<float>(d, cfg.d_ff);
    f.gate_attn = Tensor<float>(1, d);
    f.gate_mlp = Tensor<float>(1, d);
    auto& t = p.temporal;
    t.motion_embed = Linear<float>(cfg.motion_dim, d);
    t.ln1 = t.ln2 = t.ln_f = NormWeights<float>(d);
    t.attn = make_attention<float>(d, d, inner, d);
    t.mlp = make_mlp<float>(d, cfg.d_ff);
    t.out = Linear<float>(d, cfg.latent_dim());
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    visit_linear(f, "pmp.coarse.motion_embed", coarse.motion_embed);
    visit_linear(f, "pmp.coarse.audio_embed", coarse.audio_embed);
    visit_norm(f, "pmp.coarse.ln_q", coarse.ln_q);
    visit_norm(f, "pmp.coarse.ln_kv", coarse.ln_kv);
    visit_attention(f, "pmp.coarse.attn", coarse.attn);
    visit_norm(f, "pmp.coarse.ln2", coarse.ln2);
    visit_mlp(f, "pmp.coarse.mlp", coarse.mlp);

    visit_linear(f, "pmp.fine.audio_embed", fine.audio_embed);
    visit_norm(f, "pmp.fine.ln_q", fine.ln_q);
    visit_norm(f, "pmp.fine.ln_kv", fine.ln_kv);
    visit_attention(f, "pmp.fine.attn", fine.attn);
    visit_norm(f, "pmp.fine.ln2", fine.ln2);
    visit_mlp(f, "pmp.fine.mlp", fine.mlp);
    f(std::string("pmp.fine.gate_attn"), fine.gate_attn, Init::Zero, fine.gate_attn.cols());
    f(std::string("pmp.fine.gate_mlp"), fine.gate_mlp, Init::Zero, fine.gate_mlp.cols());

    visit_linear(f, "pmp.temporal.motion_embed", temporal.motion_embed);
    visit_norm(f, "pmp.temporal.ln1", temporal.ln1);
    visit_attention(f, "pmp.temporal.attn", temporal.attn);
    visit_norm(f, "pmp.temporal.ln2", temporal.ln2);
    visit_mlp(f, "pmp.temporal.mlp", temporal.mlp);
    visit_norm(f, "pmp.temporal.ln_f", temporal.ln_f);
    visit_linear(f, "pmp.temporal.out", temporal.out);
  }
};

// Query: embedded previous motion. Keys/values: the embedded audio window
// (oldest first), with slot positions when enabled.
inline std::vector<float> coarse_outline(const PmpParams& p, const EngineConfig& cfg,
                                         std::span<const float> prev_motion,
                                         const std::vector<const std::vector<float>*>& audio,
                                         AttentionTrace<float>* trace = nullptr) {
  detail::check_length(prev_motion, cfg.motion_dim, "coarse_outline motion");
  if (audio.empty()) throw ValidationError("coarse_outline: empty audio window");
  const auto& c = p.coarse;
  Tensor<float> q = Tensor<float>::row_vector(c.motion_embed(prev_motion));
  Tensor<float> kv = c.audio_embed(detail::stack(audio, cfg.audio_dim));
  if (cfg.positional_encoding) detail::add_sinusoidal_positions(kv);
  Tensor<float> x = add(q, multi_head_attention(c.ln_q(q, kNormEps), c.ln_kv(kv, kNormEps),
                                                AttentionMask::none(), c.attn, cfg.heads, trace));
  x = add(x, gelu_mlp(c.ln2(x, kNormEps), c.mlp));
  return {x.flat().begin(), x.flat().end()};
}

// Query: the outline. Keys/values: [cis, state latent, embedded current audio].
// Both residual branches are scaled by learned per-feature gates.
inline std::vector<float> fine_condition(const PmpParams& p, const EngineConfig& cfg,
                                         std::span<const float> outline,
                                         std::span<const float> cis,
                                         std::span<const float> state,
                                         std::span<const float> audio_now) {
  const std::size_t d = cfg.d_model;
  detail::check_length(outline, d, "fine_condition outline");
  detail::check_length(cis, d, "fine_condition cis");
  detail::check_length(state, d, "fine_condition state");
  detail::check_length(audio_now, cfg.audio_dim, "fine_condition audio");
  const auto& f = p.fine;
  Tensor<float> x(1, d, std::vector<float>(outline.begin(), outline.end()));
  Tensor<float> kv(3, d);
  std::copy(cis.begin(), cis.end(), kv.row(0).begin());
  std::copy(state.begin(), state.end(), kv.row(1).begin());
  auto a = f.audio_embed(audio_now);
  std::copy(a.begin(), a.end(), kv.row(2).begin());
  x = gated_residual<float>(x, f.gate_attn.row(0),
                            multi_head_attention(f.ln_q(x, kNormEps), f.ln_kv(kv, kNormEps),
                                                 AttentionMask::none(), f.attn, cfg.heads));
  x = gated_residual<float>(x, f.gate_mlp.row(0), gelu_mlp(f.ln2(x, kNormEps), f.mlp));
  return {x.flat().begin(), x.flat().end()};
}

// Slot k carries fine[k] + embed(motion[k]) (+ position k); oldest first. One
// causal pre-LN layer; the newest slot is projected to z.
inline std::vector<float> temporal_layer(const PmpParams& p, const EngineConfig& cfg,
                                         const std::vector<const std::vector<float>*>& fine,
                                         const std::vector<const std::vector<float>*>& motion,
                                         AttentionTrace<float>* trace = nullptr) {
  if (fine.empty() || fine.size() != motion.size()) {
    throw ValidationError("temporal_layer: need matching non-empty fine/motion histories, got " +
                          std::to_string(fine.size()) + "/" + std::to_string(motion.size()));
  }
  const auto& t = p.temporal;
  Tensor<float> x = add(detail::stack(fine, cfg.d_model),
                        t.motion_embed(detail::stack(motion, cfg.motion_dim)));
  if (cfg.positional_encoding) detail::add_sinusoidal_positions(x);
  Tensor<float> n = t.ln1(x, kNormEps);
  x = add(x, multi_head_attention(n, n, AttentionMask::causal(), t.attn, cfg.heads, trace));
  x = add(x, gelu_mlp(t.ln2(x, kNormEps), t.mlp));
  Tensor<float> last = slice_rows(x, x.rows() - 1, 1);
  return t.out(std::span<const float>(t.ln_f(last, kNormEps).flat()));
}

}  // namespace arig
