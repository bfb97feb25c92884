#pragma once

// Reverse-mode gradients for the noise estimator, AdamW, finite-difference
// checking and a small conditional-Gaussian training loop.

#include <cmath>
#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "arig/diffusion.hpp"
#include "arig/log.hpp"

namespace arig {

// Gradients share the parameter layout (names and shapes).
template <typename T>
using DiffGrads = DiffParams<T>;

template <typename T>
DiffGrads<T> zero_grads(const DiffDims& d) {
  return DiffGrads<T>::shaped(d);
}

template <typename T>
std::vector<Tensor<T>*> tensor_list(DiffParams<T>& p) {
  std::vector<Tensor<T>*> out;
  p.visit([&](const std::string&, Tensor<T>& t, Init, std::size_t) { out.push_back(&t); });
  return out;
}

template <typename T>
std::vector<std::string> tensor_names(DiffParams<T>& p) {
  std::vector<std::string> out;
  p.visit([&](const std::string& n, Tensor<T>&, Init, std::size_t) { out.push_back(n); });
  return out;
}

namespace detail {

template <typename T>
T silu_grad(T a) {
  const T s = sigmoid(a);
  return s * (T{1} + a * (T{1} - s));
}

// Accumulates dW += x (x) dy, db += dy and returns dx = W dy.
template <typename T>
std::vector<T> linear_backward(const Linear<T>& l, Linear<T>& g, std::span<const T> x,
                               std::span<const T> dy) {
  const std::size_t in = l.in_dim(), out = l.out_dim();
  std::vector<T> dx(in, T{0});
  T* gw = g.w.data();
  const T* w = l.w.data();
  for (std::size_t i = 0; i < in; ++i) {
    const T xi = x[i];
    T acc{0};
    for (std::size_t j = 0; j < out; ++j) {
      gw[i * out + j] += xi * dy[j];
      acc += w[i * out + j] * dy[j];
    }
    dx[i] = acc;
  }
  T* gb = g.b.data();
  for (std::size_t j = 0; j < out; ++j) gb[j] += dy[j];
  return dx;
}

// Backward of n = (x - mean) * inv_std.
template <typename T>
std::vector<T> normalize_backward(std::span<const T> dn, std::span<const T> n, T inv_std) {
  const T size = static_cast<T>(n.size());
  T mean_dn{0}, mean_dn_n{0};
  for (std::size_t i = 0; i < n.size(); ++i) {
    mean_dn += dn[i];
    mean_dn_n += dn[i] * n[i];
  }
  mean_dn /= size;
  mean_dn_n /= size;
  std::vector<T> dx(n.size());
  for (std::size_t i = 0; i < n.size(); ++i) dx[i] = inv_std * (dn[i] - mean_dn - n[i] * mean_dn_n);
  return dx;
}

template <typename T>
void accumulate(std::vector<T>& into, const std::vector<T>& v) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += v[i];
}

}  // namespace detail

// Loss ||eps_target - eps_theta(x_t | t, z)||^2 and its gradient, added into
// `grads`. The forward value is computed exactly as denoise_loss does.
template <typename T>
T diffmlp_backward(const DiffParams<T>& p, std::span<const T> x_t, double t, std::span<const T> z,
                   std::span<const T> eps_target, DiffGrads<T>& grads) {
  const DiffDims& d = p.dims;
  DiffForward<T> f = diffmlp_forward<T>(p, x_t, t, z);
  const T loss = squared_error<T>(eps_target, f.eps);

  std::vector<T> d_eps(d.motion);
  for (std::size_t i = 0; i < d.motion; ++i) d_eps[i] = T{2} * (f.eps[i] - eps_target[i]);
  std::vector<T> dc(d.cond, T{0});
  std::span<const T> cond(f.cond);

  auto d_fm = detail::linear_backward<T>(p.head, grads.head, f.f_mod, d_eps);
  std::vector<T> d_fs(d.width), d_fsh(d.width), d_fn(d.width);
  for (std::size_t i = 0; i < d.width; ++i) {
    d_fs[i] = d_fm[i] * f.f_norm[i];
    d_fsh[i] = d_fm[i];
    d_fn[i] = d_fm[i] * (T{1} + f.f_scale[i]);
  }
  detail::accumulate(dc, detail::linear_backward<T>(p.final_scale, grads.final_scale, cond, d_fs));
  detail::accumulate(dc, detail::linear_backward<T>(p.final_shift, grads.final_shift, cond, d_fsh));
  std::vector<T> dh = detail::normalize_backward<T>(d_fn, f.f_norm, f.f_inv_std);

  for (std::size_t k = p.blocks.size(); k-- > 0;) {
    const auto& blk = p.blocks[k];
    auto& gblk = grads.blocks[k];
    const auto& bf = f.blocks[k];
    std::vector<T> d_gate(d.width), d_out(d.width);
    for (std::size_t i = 0; i < d.width; ++i) {
      d_gate[i] = dh[i] * bf.out[i];
      d_out[i] = dh[i] * bf.gate[i];
    }
    auto d_act = detail::linear_backward<T>(blk.fc2, gblk.fc2, bf.act, d_out);
    std::vector<T> d_pre(d.width);
    for (std::size_t i = 0; i < d.width; ++i) d_pre[i] = d_act[i] * detail::silu_grad(bf.pre_act[i]);
    auto d_mod = detail::linear_backward<T>(blk.fc1, gblk.fc1, bf.mod, d_pre);
    std::vector<T> d_scale(d.width), d_shift(d.width), d_norm(d.width);
    for (std::size_t i = 0; i < d.width; ++i) {
      d_scale[i] = d_mod[i] * bf.norm[i];
      d_shift[i] = d_mod[i];
      d_norm[i] = d_mod[i] * (T{1} + bf.scale[i]);
    }
    detail::accumulate(dc, detail::linear_backward<T>(blk.mod.scale, gblk.mod.scale, cond, d_scale));
    detail::accumulate(dc, detail::linear_backward<T>(blk.mod.shift, gblk.mod.shift, cond, d_shift));
    detail::accumulate(dc, detail::linear_backward<T>(blk.mod.gate, gblk.mod.gate, cond, d_gate));
    detail::accumulate(dh, detail::normalize_backward<T>(d_norm, bf.norm, bf.inv_std));
  }
  detail::linear_backward<T>(p.in, grads.in, x_t, dh);

  std::vector<T> d_cp(d.cond);
  for (std::size_t i = 0; i < d.cond; ++i) d_cp[i] = dc[i] * detail::silu_grad(f.cond_pre[i]);
  detail::linear_backward<T>(p.cond_z, grads.cond_z, z, d_cp);
  detail::linear_backward<T>(p.cond_t, grads.cond_t, f.t_embed, d_cp);
  return loss;
}

// Same as above with x_t built from (target, eps) by the forward process.
template <typename T>
T denoise_loss_backward(const DiffParams<T>& p, std::span<const T> target, std::span<const T> z,
                        std::size_t t, std::span<const T> eps, const NoiseSchedule& sched,
                        DiffGrads<T>& grads) {
  if (t >= sched.train_steps) throw ConfigError("denoise_loss: step out of range");
  auto x_t = forward_noise<T>(target, eps, sched.alpha_bar[t]);
  return diffmlp_backward<T>(p, x_t, static_cast<double>(t), z, eps, grads);
}

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct OptimizerState {
  AdamWConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m, v;
};

template <typename T>
OptimizerState<T> make_optimizer(DiffParams<T>& p, AdamWConfig cfg = {}) {
  OptimizerState<T> s;
  s.cfg = cfg;
  for (auto* t : tensor_list(p)) {
    s.m.emplace_back(t->size(), T{0});
    s.v.emplace_back(t->size(), T{0});
  }
  return s;
}

// Decoupled weight decay: w *= (1 - lr * wd), then the bias-corrected Adam step.
template <typename T>
void adamw_update(std::span<T> w, std::span<const T> g, std::vector<T>& m, std::vector<T>& v,
                  const AdamWConfig& c, std::uint64_t step) {
  if (w.size() != g.size() || m.size() != w.size() || v.size() != w.size()) {
    throw ConfigError("adamw: gradient/moment shapes do not match the weights");
  }
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  const double decay = 1.0 - c.lr * c.weight_decay;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    const double wi = static_cast<double>(w[i]) * decay;
    w[i] = static_cast<T>(wi - c.lr * mhat / (std::sqrt(vhat) + c.eps));
  }
}

template <typename T>
void adamw_step(DiffParams<T>& p, DiffGrads<T>& g, OptimizerState<T>& s) {
  auto pw = tensor_list(p);
  auto gw = tensor_list(g);
  if (pw.size() != gw.size() || pw.size() != s.m.size()) {
    throw ConfigError("adamw: gradient bundle does not match the weights");
  }
  ++s.step;
  for (std::size_t k = 0; k < pw.size(); ++k) {
    if (pw[k]->rows() != gw[k]->rows() || pw[k]->cols() != gw[k]->cols()) {
      throw ConfigError("adamw: shape mismatch " + pw[k]->shape() + " vs " + gw[k]->shape());
    }
    adamw_update<T>(pw[k]->flat(), gw[k]->flat(), s.m[k], s.v[k], s.cfg, s.step);
  }
}

struct GradcheckEntry {
  std::string name;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> tensors;
  double worst = 0.0;
};

// Central differences on every parameter of a double-precision network. Per
// tensor: max|g_a - g_fd| / max(max|g_a|, max|g_fd|, 1e-8).
inline GradcheckReport gradcheck(DiffParams<double>& p, std::span<const double> x_t, double t,
                                 std::span<const double> z, std::span<const double> eps_target,
                                 double step = 1e-5) {
  DiffGrads<double> g = zero_grads<double>(p.dims);
  diffmlp_backward<double>(p, x_t, t, z, eps_target, g);
  auto loss_at = [&] {
    return squared_error<double>(eps_target, denoiser_eps<double>(p, x_t, t, z));
  };
  auto names = tensor_names(p);
  auto pw = tensor_list(p);
  auto gw = tensor_list(g);
  GradcheckReport report;
  for (std::size_t k = 0; k < pw.size(); ++k) {
    GradcheckEntry e;
    e.name = names[k];
    double max_diff = 0.0;
    for (std::size_t i = 0; i < pw[k]->size(); ++i) {
      double& w = pw[k]->data()[i];
      const double saved = w;
      w = saved + step;
      const double up = loss_at();
      w = saved - step;
      const double down = loss_at();
      w = saved;
      const double fd = (up - down) / (2.0 * step);
      const double ga = gw[k]->data()[i];
      e.max_abs_analytic = std::max(e.max_abs_analytic, std::abs(ga));
      e.max_abs_numeric = std::max(e.max_abs_numeric, std::abs(fd));
      max_diff = std::max(max_diff, std::abs(ga - fd));
    }
    e.rel_error = max_diff / std::max({e.max_abs_analytic, e.max_abs_numeric, 1e-8});
    report.worst = std::max(report.worst, e.rel_error);
    report.tensors.push_back(e);
  }
  return report;
}

// Random dim-8 double network with live gates, checked at one random point.
inline GradcheckReport gradcheck_toy(std::uint64_t seed = 7, std::size_t dim = 8) {
  DiffParams<double> p = DiffParams<double>::shaped({dim, dim, dim, dim, dim});
  initialize(p, {seed, /*zero_gates=*/false});
  CounterRng rng(seed, 99);
  std::vector<double> x(dim), z(dim), e(dim);
  rng.fill_normal(std::span<double>(x));
  rng.fill_normal(std::span<double>(z));
  rng.fill_normal(std::span<double>(e));
  return gradcheck(p, x, 137.0, z, e);
}

struct ToyTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch = 64;
  AdamWConfig adam;
  std::size_t dim = 4;          // motion and latent width
  std::size_t classes = 4;      // number of distinct z
  double target_std = 0.3;      // s
  std::size_t width = 64;
  std::size_t cond_dim = 64;
  std::size_t timestep_dim = 256;
  std::size_t train_steps = 1000;
  std::size_t inference_steps = 15;
  std::size_t smooth_window = 100;
  double ema_decay = 0.995;  // samples use the averaged weights; 0 keeps the raw ones
  std::size_t eval_samples = 2000;
  std::uint64_t seed = 1;
};

struct ToyClassReport {
  std::vector<float> z, mu, sample_mean, sample_var;
  double max_mean_error = 0.0;
};

struct ToyTrainReport {
  std::vector<double> losses;  // per-step batch mean
  double initial_smoothed = 0.0;
  double final_smoothed = 0.0;
  std::vector<ToyClassReport> classes;
  double max_mean_error = 0.0;

  double loss_ratio() const { return final_smoothed / initial_smoothed; }
};

// Fixed synthetic task: z_k drawn once per class, mu(z) = A z, targets
// mu(z) + s * N(0, I).
struct ToyTask {
  std::vector<std::vector<float>> z, mu;

  static ToyTask make(const ToyTrainConfig& cfg) {
    CounterRng rng(cfg.seed, fnv1a("toy.task"));
    ToyTask task;
    std::vector<double> a(cfg.dim * cfg.dim);
    for (double& v : a) v = rng.normal() / std::sqrt(static_cast<double>(cfg.dim));
    for (std::size_t k = 0; k < cfg.classes; ++k) {
      std::vector<float> z(cfg.dim), mu(cfg.dim, 0.0f);
      for (float& v : z) v = static_cast<float>(rng.normal());
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cfg.dim; ++j) s += a[i * cfg.dim + j] * z[j];
        mu[i] = static_cast<float>(s);
      }
      task.z.push_back(std::move(z));
      task.mu.push_back(std::move(mu));
    }
    return task;
  }
};

inline double window_mean(const std::vector<double>& v, std::size_t begin, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = begin; i < begin + n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

// Deterministic for a fixed seed: every draw comes from counter streams keyed
// by (seed, step, sample).
inline ToyTrainReport train_toy(const ToyTrainConfig& cfg, DiffParams<float>* trained = nullptr) {
  if (cfg.steps == 0 || cfg.batch == 0 || cfg.classes == 0 || cfg.dim == 0) {
    throw ConfigError("train_toy: steps, batch, classes and dim must be positive");
  }
  const DiffDims dims{cfg.dim, cfg.dim, cfg.width, cfg.cond_dim, cfg.timestep_dim};
  DiffParams<float> p = DiffParams<float>::shaped(dims);
  initialize(p, {cfg.seed, true});
  DiffParams<float> ema = p;
  OptimizerState<float> opt = make_optimizer(p, cfg.adam);
  const NoiseSchedule sched = build_schedule(cfg.train_steps, 1e-4, 0.02, cfg.inference_steps);
  const ToyTask task = ToyTask::make(cfg);

  ToyTrainReport rep;
  const std::size_t win = std::max<std::size_t>(1, std::min(cfg.smooth_window, cfg.steps));
  std::vector<float> x0(cfg.dim), eps(cfg.dim);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    DiffGrads<float> g = zero_grads<float>(dims);
    double total = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      CounterRng rng(cfg.seed, fnv1a("toy.batch") ^ (step * 1000003ULL + b));
      const std::size_t k = static_cast<std::size_t>(rng.next_bits() % cfg.classes);
      const std::size_t t = static_cast<std::size_t>(rng.next_bits() % cfg.train_steps);
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        x0[i] = task.mu[k][i] + static_cast<float>(cfg.target_std * rng.normal());
      }
      rng.fill_normal(std::span<float>(eps));
      total += denoise_loss_backward<float>(p, x0, task.z[k], t, eps, sched, g);
    }
    const float inv = 1.0f / static_cast<float>(cfg.batch);
    for (auto* t : tensor_list(g)) {
      for (float& v : t->flat()) v *= inv;
    }
    const double loss = total / static_cast<double>(cfg.batch);
    if (!std::isfinite(loss)) {
      throw NumericError("train_toy: non-finite loss at step " + std::to_string(step));
    }
    rep.losses.push_back(loss);
    if (step + 1 == win) rep.initial_smoothed = window_mean(rep.losses, 0, win);
    if (step + 1 >= win && rep.initial_smoothed > 0.0) {
      const double cur = window_mean(rep.losses, step + 1 - win, win);
      if (cur > 10.0 * rep.initial_smoothed) {
        throw NumericError("train_toy: diverged at step " + std::to_string(step) +
                           ", smoothed loss " + std::to_string(cur) + " vs initial " +
                           std::to_string(rep.initial_smoothed));
      }
    }
    adamw_step(p, g, opt);
    if (cfg.ema_decay > 0.0) {
      auto src = tensor_list(p);
      auto dst = tensor_list(ema);
      const float a = static_cast<float>(cfg.ema_decay), b = 1.0f - a;
      for (std::size_t k = 0; k < src.size(); ++k) {
        for (std::size_t i = 0; i < src[k]->size(); ++i) {
          dst[k]->data()[i] = a * dst[k]->data()[i] + b * src[k]->data()[i];
        }
      }
    }
    if ((step + 1) % 500 == 0) {
      log_info("train_toy: step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
    }
  }
  rep.final_smoothed = window_mean(rep.losses, rep.losses.size() - win, win);
  if (cfg.ema_decay > 0.0) p = std::move(ema);

  for (std::size_t k = 0; k < cfg.classes; ++k) {
    ToyClassReport cr;
    cr.z = task.z[k];
    cr.mu = task.mu[k];
    std::vector<double> sum(cfg.dim, 0.0), sq(cfg.dim, 0.0);
    for (std::size_t n = 0; n < cfg.eval_samples; ++n) {
      CounterRng rng(cfg.seed, fnv1a("toy.eval") ^ (k * 1000003ULL + n));
      auto x = sample_motion<float>(p, task.z[k], sched, rng);
      for (std::size_t i = 0; i < cfg.dim; ++i) {
        sum[i] += x[i];
        sq[i] += static_cast<double>(x[i]) * x[i];
      }
    }
    const double n = static_cast<double>(cfg.eval_samples);
    for (std::size_t i = 0; i < cfg.dim; ++i) {
      const double mean = sum[i] / n;
      cr.sample_mean.push_back(static_cast<float>(mean));
      cr.sample_var.push_back(static_cast<float>(sq[i] / n - mean * mean));
      cr.max_mean_error = std::max(cr.max_mean_error, std::abs(mean - cr.mu[i]));
    }
    rep.max_mean_error = std::max(rep.max_mean_error, cr.max_mean_error);
    rep.classes.push_back(std::move(cr));
  }
  if (trained) *trained = std::move(p);
  return rep;
}

inline std::string toy_report_text(const ToyTrainConfig& cfg, const ToyTrainReport& r) {
  std::ostringstream os;
  os.precision(6);
  os << "steps " << cfg.steps << "\nbatch " << cfg.batch << "\nlr " << cfg.adam.lr
     << "\nseed " << cfg.seed << "\ninitial_smoothed_loss " << r.initial_smoothed
     << "\nfinal_smoothed_loss " << r.final_smoothed << "\nloss_ratio " << r.loss_ratio()
     << "\nmax_mean_error " << r.max_mean_error << "\n";
  for (std::size_t k = 0; k < r.classes.size(); ++k) {
    const auto& c = r.classes[k];
    os << "class " << k << " mean_error " << c.max_mean_error << "\n";
    for (std::size_t i = 0; i < c.mu.size(); ++i) {
      os << "  dim " << i << " mu " << c.mu[i] << " sample_mean " << c.sample_mean[i]
         << " sample_var " << c.sample_var[i] << "\n";
    }
  }
  return os.str();
}

inline void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path);
  f.precision(9);
  f << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) f << i << "," << losses[i] << "\n";
}

}  // namespace arig
