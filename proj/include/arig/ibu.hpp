#pragma once

// Interactive behavior understanding: per-frame audio/motion fusion, chunk
// summaries from bidirectional + integrated learning, and causal decoding of
// the long-range context into the cis-token.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "arig/caches.hpp"
#include "arig/config.hpp"
#include "arig/nn.hpp"

namespace arig {

inline constexpr float kNormEps = 1e-6f;

struct CisToken {
  std::vector<float> vector;
  std::uint64_t as_of_frame = 0;
};

struct BidirTrack {
  Modulation<float> mod_attn;
  Modulation<float> mod_mlp;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
};

struct BidirLayer {
  BidirTrack agent;
  BidirTrack user;
};

struct IntegratedLayer {
  Modulation<float> mod;
  AttentionWeights<float> attn;
  MlpWeights<float> mlp;
};

struct DecoderLayer {
  NormWeights<float> ln1;
  AttentionWeights<float> attn;
  NormWeights<float> ln2;
  MlpWeights<float> mlp;
};

struct IbuParams {
  MlpWeights<float> merge;     // (audio + motion) -> d -> d
  Linear<float> audio_embed;   // audio -> d, the conditioning AudioCond
  std::vector<BidirLayer> bidir;
  std::vector<IntegratedLayer> integrated;
  Linear<float> compress;      // d -> d
  Tensor<float> ctx_pos;       // [w x d] learned slot positions
  std::vector<DecoderLayer> ctx;
  NormWeights<float> ctx_ln_f;

  static IbuParams shaped(const EngineConfig& cfg) {
    const std::size_t d = cfg.d_model, inner = cfg.heads * cfg.head_dim;
    IbuParams p;
    p.merge = {Linear<float>(cfg.audio_dim + cfg.motion_dim, d), Linear<float>(d, d)};
    p.audio_embed = Linear<float>(cfg.audio_dim, d);
    auto track = [&] {
      return BidirTrack{make_modulation<float>(d, d), make_modulation<float>(d, d),
                        make_attention<float>(d, d, inner, d), make_mlp<float>(d, cfg.d_ff)};
    };
    for (std::size_t l = 0; l < cfg.bidir_depth; ++l) p.bidir.push_back({track(), track()});
    for (std::size_t l = 0; l < cfg.integrated_depth; ++l) {
      p.integrated.push_back({make_modulation<float>(d, d), make_attention<float>(d, d, inner, d),
                              make_mlp<float>(d, cfg.d_ff)});
    }
    p.compress = Linear<float>(d, d);
    p.ctx_pos = Tensor<float>(cfg.context_capacity, d);
    for (std::size_t l = 0; l < cfg.context_depth; ++l) {
      p.ctx.push_back({NormWeights<float>(d), make_attention<float>(d, d, inner, d),
                       NormWeights<float>(d), make_mlp<float>(d, cfg.d_ff)});
    }
    p.ctx_ln_f = NormWeights<float>(d);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    visit_mlp(f, "ibu.merge", merge);
    visit_linear(f, "ibu.audio_embed", audio_embed);
    for (std::size_t l = 0; l < bidir.size(); ++l) {
      for (auto [name, t] : {std::pair<const char*, BidirTrack*>{"agent", &bidir[l].agent},
                             std::pair<const char*, BidirTrack*>{"user", &bidir[l].user}}) {
        const std::string pre = "ibu.bidir." + std::to_string(l) + "." + name;
        visit_modulation(f, pre + ".mod_attn", t->mod_attn);
        visit_modulation(f, pre + ".mod_mlp", t->mod_mlp);
        visit_attention(f, pre + ".attn", t->attn);
        visit_mlp(f, pre + ".mlp", t->mlp);
      }
    }
    for (std::size_t l = 0; l < integrated.size(); ++l) {
      const std::string pre = "ibu.integrated." + std::to_string(l);
      visit_modulation(f, pre + ".mod", integrated[l].mod);
      visit_attention(f, pre + ".attn", integrated[l].attn);
      visit_mlp(f, pre + ".mlp", integrated[l].mlp);
    }
    visit_linear(f, "ibu.compress", compress);
    f(std::string("ibu.ctx.pos"), ctx_pos, Init::Positional, ctx_pos.cols());
    for (std::size_t l = 0; l < ctx.size(); ++l) {
      const std::string pre = "ibu.ctx." + std::to_string(l);
      visit_norm(f, pre + ".ln1", ctx[l].ln1);
      visit_attention(f, pre + ".attn", ctx[l].attn);
      visit_norm(f, pre + ".ln2", ctx[l].ln2);
      visit_mlp(f, pre + ".mlp", ctx[l].mlp);
    }
    visit_norm(f, "ibu.ctx.ln_f", ctx_ln_f);
  }
};

namespace detail {

inline void check_length(std::span<const float> v, std::size_t expect, const char* what) {
  if (v.size() != expect) {
    throw ValidationError(std::string(what) + ": length " + std::to_string(v.size()) +
                          ", expected " + std::to_string(expect));
  }
}

inline Tensor<float> stack(const std::vector<const std::vector<float>*>& rows, std::size_t d) {
  Tensor<float> out(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check_length(*rows[i], d, "token");
    std::copy(rows[i]->begin(), rows[i]->end(), out.row(i).begin());
  }
  return out;
}

inline void add_sinusoidal_positions(Tensor<float>& x, std::size_t first_position = 0) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto pe = sinusoidal_embedding<float>(static_cast<double>(first_position + i), x.cols());
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += pe[j];
  }
}

}  // namespace detail

// Two-layer GELU MLP over the concatenated [audio, motion] vector.
inline std::vector<float> merge_behavior(const IbuParams& p, const EngineConfig& cfg,
                                         std::span<const float> audio,
                                         std::span<const float> motion) {
  detail::check_length(audio, cfg.audio_dim, "merge_behavior audio");
  detail::check_length(motion, cfg.motion_dim, "merge_behavior motion");
  Tensor<float> x(1, audio.size() + motion.size());
  std::copy(audio.begin(), audio.end(), x.row(0).begin());
  std::copy(motion.begin(), motion.end(), x.row(0).begin() + static_cast<long>(audio.size()));
  Tensor<float> y = gelu_mlp(x, p.merge);
  return {y.flat().begin(), y.flat().end()};
}

inline std::vector<float> embed_audio(const IbuParams& p, const EngineConfig& cfg,
                                      std::span<const float> audio) {
  detail::check_length(audio, cfg.audio_dim, "embed_audio");
  return p.audio_embed(audio);
}

namespace detail {

struct TrackProjection {
  Tensor<float> q, k, v;
  std::vector<float> gate;
};

inline TrackProjection project_track(const BidirTrack& t, const Tensor<float>& x,
                                     std::span<const float> cond) {
  auto mp = modulation_params(t.mod_attn, cond);
  Tensor<float> h = modulate<float>(x, mp.scale, mp.shift, kNormEps);
  return {t.attn.q(h), t.attn.k(h), t.attn.v(h), std::move(mp.gate)};
}

inline Tensor<float> track_mlp(const BidirTrack& t, const Tensor<float>& x,
                               std::span<const float> cond) {
  return adaln_modulate<float>(
      x, cond, t.mod_mlp, [&](const Tensor<float>& h) { return gelu_mlp(h, t.mlp); }, kNormEps);
}

}  // namespace detail

// Per-track modulation and projections, one joint unmasked attention over the
// concatenation of both tracks, outputs split back per track.
inline std::pair<Tensor<float>, Tensor<float>> bidirectional_block(
    const IbuParams& p, const EngineConfig& cfg, Tensor<float> agent, Tensor<float> user,
    std::span<const float> cond) {
  if (agent.rows() == 0 && user.rows() == 0) {
    throw ValidationError("bidirectional_block: both tracks empty");
  }
  const std::size_t na = agent.rows();
  for (const auto& layer : p.bidir) {
    auto pa = detail::project_track(layer.agent, agent, cond);
    auto pu = detail::project_track(layer.user, user, cond);
    Tensor<float> joint = attention_core(concat_rows(pa.q, pu.q), concat_rows(pa.k, pu.k),
                                         concat_rows(pa.v, pu.v), AttentionMask::none(),
                                         cfg.heads, cfg.head_dim);
    Tensor<float> oa = layer.agent.attn.o(slice_rows(joint, 0, na));
    Tensor<float> ou = layer.user.attn.o(slice_rows(joint, na, joint.rows() - na));
    agent = gated_residual<float>(agent, pa.gate, oa);
    user = gated_residual<float>(user, pu.gate, ou);
    agent = detail::track_mlp(layer.agent, agent, cond);
    user = detail::track_mlp(layer.user, user, cond);
  }
  return {std::move(agent), std::move(user)};
}

// Parallel attention + MLP over the concatenated tracks; the agent rows are
// mean-pooled into the interaction summary.
inline std::vector<float> integrated_block(const IbuParams& p, const EngineConfig& cfg,
                                           const Tensor<float>& agent, const Tensor<float>& user,
                                           std::span<const float> cond) {
  if (agent.rows() == 0) throw ValidationError("integrated_block: no agent tokens");
  Tensor<float> x = concat_rows(agent, user);
  for (const auto& layer : p.integrated) {
    x = adaln_modulate<float>(
        x, cond, layer.mod,
        [&](const Tensor<float>& h) {
          return add(multi_head_attention(h, h, AttentionMask::none(), layer.attn, cfg.heads),
                     gelu_mlp(h, layer.mlp));
        },
        kNormEps);
  }
  std::vector<float> summary(x.cols(), 0.0f);
  for (std::size_t i = 0; i < agent.rows(); ++i) {
    auto r = x.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) summary[j] += r[j];
  }
  const float inv = 1.0f / static_cast<float>(agent.rows());
  for (float& v : summary) v *= inv;
  return summary;
}

inline ChunkSummary compress_summary(const IbuParams& p, std::span<const float> summary,
                                     std::uint64_t chunk, bool complete) {
  return {chunk, p.compress(summary), complete};
}

// Positions, bidirectional block and integrated block for one chunk.
inline std::vector<float> interaction_summary(const IbuParams& p, const EngineConfig& cfg,
                                              const std::vector<const std::vector<float>*>& agent,
                                              const std::vector<const std::vector<float>*>& user,
                                              std::span<const float> cond) {
  Tensor<float> a = detail::stack(agent, cfg.d_model);
  Tensor<float> u = detail::stack(user, cfg.d_model);
  if (cfg.positional_encoding) {
    detail::add_sinusoidal_positions(a);
    detail::add_sinusoidal_positions(u);
  }
  auto [a2, u2] = bidirectional_block(p, cfg, std::move(a), std::move(u), cond);
  return integrated_block(p, cfg, a2, u2, cond);
}

// Causal decoder over the context entries. Keeps per-layer keys/values of the
// rows it has computed so that a later call whose leading entries are
// unchanged only recomputes the trailing rows; the arithmetic per row is the
// same either way, so results match a full recompute bit for bit.
class ContextDecoder {
 public:
  explicit ContextDecoder(bool reuse = false) : reuse_(reuse) {}

  CisToken decode(const IbuParams& p, const EngineConfig& cfg, const ContextCache& ctx,
                  std::uint64_t as_of_frame = 0) {
    Tensor<float> rows = decode_all(p, cfg, ctx);
    auto last = rows.row(rows.rows() - 1);
    return {std::vector<float>(last.begin(), last.end()), as_of_frame};
  }

  // Outputs for the recomputed trailing rows; rows() - first_recomputed()
  // rows, the last one being the cis-token.
  Tensor<float> decode_all(const IbuParams& p, const EngineConfig& cfg, const ContextCache& ctx) {
    const auto& entries = ctx.entries();
    const std::size_t n = entries.size();
    if (n == 0) throw SequencingError("context_decode: empty context cache");
    if (n > p.ctx_pos.rows()) {
      throw ConfigError("context_decode: " + std::to_string(n) + " entries exceed " +
                        std::to_string(p.ctx_pos.rows()) + " positions");
    }
    const std::size_t d = cfg.d_model;
    std::size_t first = 0;
    if (reuse_) {
      while (first < n - 1 && first < inputs_.size() &&
             inputs_[first].first == entries[first].chunk_index &&
             inputs_[first].second == entries[first].vector) {
        ++first;
      }
    }
    if (keys_.size() != p.ctx.size()) {
      keys_.assign(p.ctx.size(), {});
      values_.assign(p.ctx.size(), {});
      first = 0;
    }
    first_recomputed_ = first;

    Tensor<float> x(n - first, d);
    for (std::size_t i = first; i < n; ++i) {
      detail::check_length(entries[i].vector, d, "context entry");
      auto r = x.row(i - first);
      auto pos = p.ctx_pos.row(i);
      for (std::size_t j = 0; j < d; ++j) r[j] = entries[i].vector[j] + pos[j];
    }
    for (std::size_t l = 0; l < p.ctx.size(); ++l) {
      const auto& layer = p.ctx[l];
      Tensor<float> h = layer.ln1(x, kNormEps);
      Tensor<float> q = layer.attn.q(h);
      keys_[l] = join(keys_[l], first, layer.attn.k(h));
      values_[l] = join(values_[l], first, layer.attn.v(h));
      Tensor<float> a = attention_core(q, keys_[l], values_[l], AttentionMask::causal(), cfg.heads,
                                       cfg.head_dim);
      x = add(x, layer.attn.o(a));
      x = add(x, gelu_mlp(layer.ln2(x, kNormEps), layer.mlp));
    }
    inputs_.resize(n);
    for (std::size_t i = first; i < n; ++i) inputs_[i] = {entries[i].chunk_index, entries[i].vector};
    return p.ctx_ln_f(x, kNormEps);
  }

  std::size_t first_recomputed() const { return first_recomputed_; }
  void reset() {
    keys_.clear();
    values_.clear();
    inputs_.clear();
  }

  std::size_t byte_size() const {
    std::size_t n = sizeof(*this);
    for (const auto& k : keys_) n += k.size() * sizeof(float);
    for (const auto& v : values_) n += v.size() * sizeof(float);
    for (const auto& in : inputs_) n += in.second.capacity() * sizeof(float);
    return n;
  }

 private:
  static Tensor<float> join(const Tensor<float>& cached, std::size_t keep,
                            const Tensor<float>& fresh) {
    if (keep == 0) return fresh;
    return concat_rows(slice_rows(cached, 0, keep), fresh);
  }

  bool reuse_;
  std::vector<Tensor<float>> keys_, values_;
  std::vector<std::pair<std::uint64_t, std::vector<float>>> inputs_;
  std::size_t first_recomputed_ = 0;
};

inline CisToken context_decode(const IbuParams& p, const EngineConfig& cfg,
                               const ContextCache& ctx, std::uint64_t as_of_frame = 0) {
  ContextDecoder dec(false);
  return dec.decode(p, cfg, ctx, as_of_frame);
}

}  // namespace arig
