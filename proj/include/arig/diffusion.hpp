#pragma once

// Continuous motion sampler: DDPM noise schedule, the 3-block adaLN MLP noise
// estimator, the reverse update and the denoising loss.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "arig/config.hpp"
#include "arig/nn.hpp"
#include "arig/rng.hpp"

namespace arig {

struct InferenceStep {
  std::size_t t = 0;       // index into the training schedule
  double alpha = 1.0;      // alpha_bar[t] / alpha_bar[next]
  double alpha_bar = 1.0;  // alpha_bar[t]
  double sigma = 0.0;      // 0 on the final step
};

struct NoiseSchedule {
  std::size_t train_steps = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;
  // In sampling order: strictly decreasing t, last step has sigma = 0.
  std::vector<InferenceStep> inference;
};

// Linear beta ramp, cumulative alpha_bar, sigma_t = sqrt(beta_t). The
// inference chain uses evenly spaced training indices (first and last
// included) with alpha/beta recomputed for the respaced steps.
inline NoiseSchedule build_schedule(std::size_t train_steps, double beta_start, double beta_end,
                                    std::size_t inference_steps) {
  if (train_steps == 0 || inference_steps == 0 || inference_steps > train_steps) {
    throw ConfigError("schedule: need 1 <= inference_steps <= train_steps");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.train_steps = train_steps;
  s.beta.resize(train_steps);
  s.alpha.resize(train_steps);
  s.alpha_bar.resize(train_steps);
  s.sigma.resize(train_steps);
  double prod = 1.0;
  for (std::size_t t = 0; t < train_steps; ++t) {
    const double frac =
        train_steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(train_steps - 1);
    s.beta[t] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    prod *= s.alpha[t];
    s.alpha_bar[t] = prod;
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  std::vector<std::size_t> idx(inference_steps);
  for (std::size_t k = 0; k < inference_steps; ++k) {
    idx[k] = inference_steps == 1
                 ? train_steps - 1
                 : static_cast<std::size_t>(std::llround(
                       static_cast<double>(k) * static_cast<double>(train_steps - 1) /
                       static_cast<double>(inference_steps - 1)));
  }
  for (std::size_t k = inference_steps; k-- > 0;) {
    InferenceStep st;
    st.t = idx[k];
    st.alpha_bar = s.alpha_bar[st.t];
    const double prev_bar = k == 0 ? 1.0 : s.alpha_bar[idx[k - 1]];
    st.alpha = st.alpha_bar / prev_bar;
    st.sigma = k == 0 ? 0.0 : std::sqrt(1.0 - st.alpha);
    s.inference.push_back(st);
  }
  return s;
}

inline NoiseSchedule build_schedule(const EngineConfig& cfg) {
  return build_schedule(cfg.diffusion_train_steps, cfg.beta_start, cfg.beta_end,
                        cfg.diffusion_steps);
}

// One reverse step:
// x_{t-1} = (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t) + sigma_t * noise
template <typename T>
std::vector<T> ddpm_update(std::span<const T> x_t, std::span<const T> eps, double alpha,
                           double alpha_bar, double sigma, std::span<const T> noise) {
  const T c1 = static_cast<T>(1.0 / std::sqrt(alpha));
  const T c2 = static_cast<T>((1.0 - alpha) / std::sqrt(1.0 - alpha_bar));
  const T s = static_cast<T>(sigma);
  std::vector<T> out(x_t.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = c1 * (x_t[i] - c2 * eps[i]);
    if (sigma != 0.0) out[i] += s * noise[i];
  }
  return out;
}

struct DiffDims {
  std::size_t motion = 262;  // x_t and output width
  std::size_t latent = 262;  // z
  std::size_t width = 262;   // block width
  std::size_t cond = 512;    // adaLN condition width
  std::size_t timestep = 256;

  static DiffDims from(const EngineConfig& cfg) {
    return {cfg.motion_dim, cfg.latent_dim(), cfg.diff_width, cfg.diff_cond_dim,
            cfg.timestep_dim};
  }
  bool operator==(const DiffDims&) const = default;
};

template <typename T>
struct DiffBlock {
  Modulation<T> mod;
  Linear<T> fc1, fc2;
};

// Noise estimator eps_theta(x_t | t, z).
template <typename T>
struct DiffParams {
  DiffDims dims;
  Linear<T> cond_z;       // latent -> cond
  Linear<T> cond_t;       // timestep embedding -> cond
  Linear<T> in;           // motion -> width
  std::array<DiffBlock<T>, EngineConfig::kDiffusionBlocks> blocks;
  Linear<T> final_scale;  // cond -> width
  Linear<T> final_shift;  // cond -> width
  Linear<T> head;         // width -> motion

  static DiffParams shaped(const DiffDims& d) {
    DiffParams p;
    p.dims = d;
    p.cond_z = Linear<T>(d.latent, d.cond);
    p.cond_t = Linear<T>(d.timestep, d.cond);
    p.in = Linear<T>(d.motion, d.width);
    for (auto& b : p.blocks) {
      b.mod = make_modulation<T>(d.cond, d.width);
      b.fc1 = Linear<T>(d.width, d.width);
      b.fc2 = Linear<T>(d.width, d.width);
    }
    p.final_scale = Linear<T>(d.cond, d.width);
    p.final_shift = Linear<T>(d.cond, d.width);
    p.head = Linear<T>(d.width, d.motion);
    return p;
  }

  template <typename F>
  void visit(F&& f) {
    visit_linear(f, "diffmlp.cond_z", cond_z);
    visit_linear(f, "diffmlp.cond_t", cond_t);
    visit_linear(f, "diffmlp.in", in);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      const std::string pre = "diffmlp.block" + std::to_string(k);
      visit_modulation(f, pre + ".mod", blocks[k].mod);
      visit_linear(f, pre, blocks[k].fc1, false, "w1", "b1");
      visit_linear(f, pre, blocks[k].fc2, false, "w2", "b2");
    }
    visit_linear(f, "diffmlp.final.scale", final_scale);
    visit_linear(f, "diffmlp.final.shift", final_shift);
    visit_linear(f, "diffmlp.head", head);
  }

  template <typename U>
  DiffParams<U> cast() {
    DiffParams<U> out = DiffParams<U>::shaped(dims);
    std::vector<Tensor<T>*> src;
    visit([&](const std::string&, Tensor<T>& t, Init, std::size_t) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, Tensor<U>& t, Init, std::size_t) {
      t = src[i++]->template cast<U>();
    });
    return out;
  }
};

inline constexpr double kDiffNormEps = 1e-6;

// Every intermediate of one forward pass, kept for the backward pass.
template <typename T>
struct DiffForward {
  std::vector<T> t_embed, cond_pre, cond;
  std::vector<T> x;                       // input x_t
  std::array<std::vector<T>, 4> h;        // residual stream before each block, h[3] final
  struct Block {
    std::vector<T> scale, shift, gate;
    std::vector<T> norm, mod, pre_act, act, out;
    T inv_std{};
  };
  std::array<Block, EngineConfig::kDiffusionBlocks> blocks;
  std::vector<T> f_scale, f_shift, f_norm, f_mod;
  T f_inv_std{};
  std::vector<T> eps;  // output
};

namespace detail {

template <typename T>
std::vector<T> vec_linear(const Linear<T>& l, std::span<const T> x) {
  return l(x);
}

template <typename T>
std::vector<T> normalize(std::span<const T> x, T& inv_std) {
  const T n = static_cast<T>(x.size());
  T mean{0};
  for (T v : x) mean += v;
  mean /= n;
  T var{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  inv_std = T{1} / std::sqrt(var + static_cast<T>(kDiffNormEps));
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv_std;
  return out;
}

}  // namespace detail

template <typename T>
DiffForward<T> diffmlp_forward(const DiffParams<T>& p, std::span<const T> x_t, double t,
                               std::span<const T> z) {
  const DiffDims& d = p.dims;
  if (x_t.size() != d.motion || z.size() != d.latent) {
    throw ConfigError("diffmlp: x_t length " + std::to_string(x_t.size()) + " z length " +
                      std::to_string(z.size()) + ", expected " + std::to_string(d.motion) + "/" +
                      std::to_string(d.latent));
  }
  DiffForward<T> f;
  f.x.assign(x_t.begin(), x_t.end());
  f.t_embed = sinusoidal_embedding<T>(t, d.timestep);
  {
    auto cz = p.cond_z(z);
    auto ct = p.cond_t(std::span<const T>(f.t_embed));
    f.cond_pre.resize(d.cond);
    for (std::size_t i = 0; i < d.cond; ++i) f.cond_pre[i] = cz[i] + ct[i];
    f.cond.resize(d.cond);
    for (std::size_t i = 0; i < d.cond; ++i) f.cond[i] = silu(f.cond_pre[i]);
  }
  std::span<const T> cond(f.cond);
  f.h[0] = p.in(x_t);
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const auto& blk = p.blocks[k];
    auto& bf = f.blocks[k];
    bf.scale = blk.mod.scale(cond);
    bf.shift = blk.mod.shift(cond);
    bf.gate = blk.mod.gate(cond);
    bf.norm = detail::normalize<T>(f.h[k], bf.inv_std);
    bf.mod.resize(d.width);
    for (std::size_t i = 0; i < d.width; ++i) {
      bf.mod[i] = bf.norm[i] * (T{1} + bf.scale[i]) + bf.shift[i];
    }
    bf.pre_act = blk.fc1(std::span<const T>(bf.mod));
    bf.act.resize(d.width);
    for (std::size_t i = 0; i < d.width; ++i) bf.act[i] = silu(bf.pre_act[i]);
    bf.out = blk.fc2(std::span<const T>(bf.act));
    f.h[k + 1] = f.h[k];
    for (std::size_t i = 0; i < d.width; ++i) f.h[k + 1][i] += bf.gate[i] * bf.out[i];
  }
  f.f_scale = p.final_scale(cond);
  f.f_shift = p.final_shift(cond);
  f.f_norm = detail::normalize<T>(f.h[3], f.f_inv_std);
  f.f_mod.resize(d.width);
  for (std::size_t i = 0; i < d.width; ++i) {
    f.f_mod[i] = f.f_norm[i] * (T{1} + f.f_scale[i]) + f.f_shift[i];
  }
  f.eps = p.head(std::span<const T>(f.f_mod));
  return f;
}

template <typename T>
std::vector<T> denoiser_eps(const DiffParams<T>& p, std::span<const T> x_t, double t,
                            std::span<const T> z) {
  return diffmlp_forward(p, x_t, t, z).eps;
}

template <typename T>
T squared_error(std::span<const T> a, std::span<const T> b) {
  T s{0};
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// x_t = sqrt(alpha_bar) * x_0 + sqrt(1 - alpha_bar) * eps
template <typename T>
std::vector<T> forward_noise(std::span<const T> x0, std::span<const T> eps, double alpha_bar) {
  const T a = static_cast<T>(std::sqrt(alpha_bar));
  const T b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

// || eps - eps_theta(x_t | t, z) ||^2 with x_t from the forward process.
template <typename T>
T denoise_loss(const DiffParams<T>& p, std::span<const T> target, std::span<const T> z,
               std::size_t t, std::span<const T> eps, const NoiseSchedule& sched) {
  if (t >= sched.train_steps) throw ConfigError("denoise_loss: step out of range");
  auto x_t = forward_noise<T>(target, eps, sched.alpha_bar[t]);
  auto pred = denoiser_eps<T>(p, x_t, static_cast<double>(t), z);
  return squared_error<T>(eps, pred);
}

struct SampleStats {
  std::size_t denoiser_evals = 0;
};

// Generic reverse chain. `denoise(x, step)` returns the noise estimate.
template <typename T, typename Denoise>
std::vector<T> sample_chain(Denoise&& denoise, std::size_t dim, const NoiseSchedule& sched,
                            CounterRng& rng, SampleStats* stats = nullptr) {
  std::vector<T> x(dim);
  rng.fill_normal(std::span<T>(x));
  std::vector<T> noise(dim);
  for (std::size_t k = 0; k < sched.inference.size(); ++k) {
    const auto& st = sched.inference[k];
    std::vector<T> eps = denoise(std::span<const T>(x), st);
    if (stats) ++stats->denoiser_evals;
    if (st.sigma != 0.0) rng.fill_normal(std::span<T>(noise));
    x = ddpm_update<T>(x, eps, st.alpha, st.alpha_bar, st.sigma, noise);
    if (!all_finite<T>(x)) {
      throw NumericError("sampler: non-finite value at step " + std::to_string(k) + " (t=" +
                         std::to_string(st.t) + "), max |eps| " +
                         std::to_string(static_cast<double>(max_abs<T>(eps))));
    }
  }
  return x;
}

// Draws x_T ~ N(0, I) and runs the inference chain with eps_theta.
template <typename T>
std::vector<T> sample_motion(const DiffParams<T>& p, std::span<const T> z,
                             const NoiseSchedule& sched, CounterRng& rng,
                             SampleStats* stats = nullptr) {
  return sample_chain<T>(
      [&](std::span<const T> x, const InferenceStep& st) {
        return denoiser_eps<T>(p, x, static_cast<double>(st.t), z);
      },
      p.dims.motion, sched, rng, stats);
}

// One reverse step with the learned estimator.
template <typename T>
std::vector<T> ddpm_step(const DiffParams<T>& p, std::span<const T> x_t, const InferenceStep& st,
                         std::span<const T> z, std::span<const T> noise) {
  auto eps = denoiser_eps<T>(p, x_t, static_cast<double>(st.t), z);
  return ddpm_update<T>(x_t, eps, st.alpha, st.alpha_bar, st.sigma, noise);
}

}  // namespace arig
