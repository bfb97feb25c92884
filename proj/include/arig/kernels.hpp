#pragma once

// Dense numeric kernels every network block is built from. All functions are
// pure: identical inputs give bit-identical outputs, and the arithmetic for a
// given output row never depends on how many other rows are in the batch.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "arig/tensor.hpp"

namespace arig {

namespace detail {
inline constexpr std::size_t kRowBlock = 8;
}

// out[i,j] = sum_k x[i,k] * w[k,j] + b[j]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, std::span<const T> b) {
  if (x.cols() != w.rows() || b.size() != w.cols()) {
    throw ConfigError("linear: input " + x.shape() + " weight " + w.shape() + " bias [" +
                      std::to_string(b.size()) + "]");
  }
  const std::size_t n = x.rows(), in = w.rows(), out_dim = w.cols();
  Tensor<T> out(n, out_dim);
  for (std::size_t i0 = 0; i0 < n; i0 += detail::kRowBlock) {
    const std::size_t i1 = std::min(n, i0 + detail::kRowBlock);
    for (std::size_t i = i0; i < i1; ++i) std::copy(b.begin(), b.end(), out.row(i).begin());
    for (std::size_t k = 0; k < in; ++k) {
      const T* wk = w.data() + k * out_dim;
      for (std::size_t i = i0; i < i1; ++i) {
        const T xik = x(i, k);
        T* o = out.data() + i * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) o[j] += xik * wk[j];
      }
    }
  }
  return out;
}

template <typename T>
std::vector<T> linear(std::span<const T> x, const Tensor<T>& w, std::span<const T> b) {
  Tensor<T> out = linear(Tensor<T>::row_vector(x), w, b);
  return {out.flat().begin(), out.flat().end()};
}

// Row-wise normalization to zero mean / unit variance, then gain and shift.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, std::span<const T> gain, std::span<const T> shift,
                     T eps) {
  if (gain.size() != x.cols() || shift.size() != x.cols()) {
    throw ConfigError("layer_norm: input " + x.shape() + " gain [" + std::to_string(gain.size()) +
                      "] shift [" + std::to_string(shift.size()) + "]");
  }
  if (!(eps > T{0})) throw ConfigError("layer_norm: eps must be positive");
  Tensor<T> out(x.rows(), x.cols());
  const T n = static_cast<T>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    T mean{0};
    for (T v : r) mean += v;
    mean /= n;
    T var{0};
    for (T v : r) var += (v - mean) * (v - mean);
    var /= n;
    const T inv = T{1} / std::sqrt(var + eps);
    auto o = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) o[j] = (r[j] - mean) * inv * gain[j] + shift[j];
  }
  return out;
}

// layer_norm without affine parameters.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps) {
  std::vector<T> ones(x.cols(), T{1}), zeros(x.cols(), T{0});
  return layer_norm<T>(x, ones, zeros, eps);
}

template <typename T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  T m = v[0];
  for (T x : v) m = std::max(m, x);
  T sum{0};
  for (T& x : v) {
    x = std::exp(x - m);
    sum += x;
  }
  for (T& x : v) x /= sum;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) softmax_inplace(out.row(i));
  return out;
}

// tanh approximation of GELU.
template <typename T>
T gelu(T x) {
  constexpr T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = static_cast<T>(0.044715);
  return T{0.5} * x * (T{1} + std::tanh(k * (x + c * x * x * x)));
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

template <typename T>
T silu(T x) {
  return x * sigmoid(x);
}

template <typename T>
struct Linear {
  Tensor<T> w;  // [in x out]
  Tensor<T> b;  // [1 x out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : w(in, out), b(1, out) {}

  std::size_t in_dim() const { return w.rows(); }
  std::size_t out_dim() const { return w.cols(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear<T>(x, w, b.row(0)); }
  std::vector<T> operator()(std::span<const T> x) const { return linear<T>(x, w, b.row(0)); }
};

template <typename T>
struct MlpWeights {
  Linear<T> fc1;
  Linear<T> fc2;
};

// linear -> GELU -> linear
template <typename T>
Tensor<T> gelu_mlp(const Tensor<T>& x, const MlpWeights<T>& mlp) {
  Tensor<T> h = mlp.fc1(x);
  for (T& v : h.flat()) v = gelu(v);
  return mlp.fc2(h);
}

struct AttentionMask {
  enum class Kind { None, Causal, Explicit };
  Kind kind = Kind::None;
  // [queries x keys], nonzero = allowed. Only read for Kind::Explicit.
  Tensor<std::uint8_t> allowed;

  static AttentionMask none() { return {}; }
  static AttentionMask causal() { return {Kind::Causal, {}}; }
  static AttentionMask explicit_mask(Tensor<std::uint8_t> m) {
    return {Kind::Explicit, std::move(m)};
  }
};

template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> weights;  // per head, [queries x keys]
  std::size_t all_masked_rows = 0;
};

// Scaled dot-product attention over already projected Q/K/V with `heads`
// heads of `head_dim` each. With a causal mask the queries are aligned to the
// end of the key sequence, so a single query attends to every key.
template <typename T>
Tensor<T> attention_core(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const AttentionMask& mask, std::size_t heads, std::size_t head_dim,
                         AttentionTrace<T>* trace = nullptr) {
  const std::size_t inner = heads * head_dim;
  if (q.cols() != inner || k.cols() != inner || v.cols() != inner || k.rows() != v.rows()) {
    throw ConfigError("attention: q " + q.shape() + " k " + k.shape() + " v " + v.shape() +
                      " for " + std::to_string(heads) + "x" + std::to_string(head_dim));
  }
  const std::size_t nq = q.rows(), nk = k.rows();
  if (mask.kind == AttentionMask::Kind::Causal && nq > nk) {
    throw ConfigError("attention: causal mask needs queries <= keys");
  }
  if (mask.kind == AttentionMask::Kind::Explicit &&
      (mask.allowed.rows() != nq || mask.allowed.cols() != nk)) {
    throw ConfigError("attention: explicit mask " + mask.allowed.shape() + " for " +
                      std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");
  }
  const T scale = T{1} / std::sqrt(static_cast<T>(head_dim));
  Tensor<T> out(nq, inner);
  if (trace) {
    trace->weights.assign(heads, Tensor<T>(nq, nk));
    trace->all_masked_rows = 0;
  }
  std::vector<T> scores(nk);
  std::vector<std::size_t> keys;
  keys.reserve(nk);
  for (std::size_t i = 0; i < nq; ++i) {
    keys.clear();
    for (std::size_t j = 0; j < nk; ++j) {
      bool ok = true;
      if (mask.kind == AttentionMask::Kind::Causal) ok = j <= nk - nq + i;
      if (mask.kind == AttentionMask::Kind::Explicit) ok = mask.allowed(i, j) != 0;
      if (ok) keys.push_back(j);
    }
    if (keys.empty()) {
      if (trace) trace->all_masked_rows += heads;
      continue;
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const T* qi = q.data() + i * inner + h * head_dim;
      for (std::size_t a = 0; a < keys.size(); ++a) {
        const T* kj = k.data() + keys[a] * inner + h * head_dim;
        T s{0};
        for (std::size_t d = 0; d < head_dim; ++d) s += qi[d] * kj[d];
        scores[a] = s * scale;
      }
      std::span<T> sc(scores.data(), keys.size());
      softmax_inplace(sc);
      T* oi = out.data() + i * inner + h * head_dim;
      for (std::size_t a = 0; a < keys.size(); ++a) {
        const T* vj = v.data() + keys[a] * inner + h * head_dim;
        const T wgt = sc[a];
        for (std::size_t d = 0; d < head_dim; ++d) oi[d] += wgt * vj[d];
        if (trace) trace->weights[h](i, keys[a]) = wgt;
      }
    }
  }
  return out;
}

template <typename T>
struct AttentionWeights {
  Linear<T> q, k, v, o;
};

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const AttentionMask& mask, const AttentionWeights<T>& w,
                               std::size_t heads, AttentionTrace<T>* trace = nullptr) {
  const std::size_t inner = w.q.out_dim();
  if (heads == 0 || inner % heads != 0) {
    throw ConfigError("attention: projection width " + std::to_string(inner) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  Tensor<T> q = w.q(q_in);
  Tensor<T> k = w.k(kv_in);
  Tensor<T> v = w.v(kv_in);
  return w.o(attention_core(q, k, v, mask, heads, inner / heads, trace));
}

// adaLN: cond -> SiLU -> three projections giving per-feature scale, shift and
// gate. Gate projections start at zero so a fresh block is the identity.
template <typename T>
struct Modulation {
  Linear<T> scale, shift, gate;
};

template <typename T>
struct ModulationParams {
  std::vector<T> scale, shift, gate;
};

template <typename T>
ModulationParams<T> modulation_params(const Modulation<T>& m, std::span<const T> cond) {
  const std::size_t expect = m.scale.in_dim();
  if (cond.size() != expect) {
    throw ConfigError("adaLN: condition length " + std::to_string(cond.size()) + ", expected " +
                      std::to_string(expect));
  }
  std::vector<T> act(cond.begin(), cond.end());
  for (T& v : act) v = silu(v);
  return {m.scale(std::span<const T>(act)), m.shift(std::span<const T>(act)),
          m.gate(std::span<const T>(act))};
}

// layer_norm(x) * (1 + scale) + shift, row-wise.
template <typename T>
Tensor<T> modulate(const Tensor<T>& x, std::span<const T> scale, std::span<const T> shift,
                   T eps) {
  Tensor<T> n = normalize_rows(x, eps);
  for (std::size_t i = 0; i < n.rows(); ++i) {
    auto r = n.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = r[j] * (T{1} + scale[j]) + shift[j];
  }
  return n;
}

// x + gate * y, row-wise.
template <typename T>
Tensor<T> gated_residual(const Tensor<T>& x, std::span<const T> gate, const Tensor<T>& y) {
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto o = out.row(i);
    auto yr = y.row(i);
    for (std::size_t j = 0; j < o.size(); ++j) o[j] += gate[j] * yr[j];
  }
  return out;
}

// x + gate * f(modulate(x)) with scale/shift/gate computed from `cond`.
template <typename T, typename F>
Tensor<T> adaln_modulate(const Tensor<T>& x, std::span<const T> cond, const Modulation<T>& m,
                         F&& f, T eps = T(1e-6)) {
  ModulationParams<T> p = modulation_params(m, cond);
  if (p.scale.size() != x.cols()) {
    throw ConfigError("adaLN: modulation width " + std::to_string(p.scale.size()) +
                      " for input " + x.shape());
  }
  return gated_residual<T>(x, p.gate, f(modulate<T>(x, p.scale, p.shift, eps)));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("add: " + a.shape() + " vs " + b.shape());
  }
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

// Sinusoidal encoding of a scalar position (cos half, then sin half).
template <typename T>
std::vector<T> sinusoidal_embedding(double position, std::size_t dim, double max_period = 10000.0) {
  std::vector<T> out(dim, T{0});
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(k) /
                                 static_cast<double>(half));
    out[k] = static_cast<T>(std::cos(position * freq));
    out[half + k] = static_cast<T>(std::sin(position * freq));
  }
  return out;
}

}  // namespace arig
