#pragma once

// Parameter containers shared by the network modules and the visitor protocol
// used to name, shape, initialize and serialize them.

#include <string>

#include "arig/kernels.hpp"
#include "arig/rng.hpp"

namespace arig {

enum class Init {
  Kaiming,     // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  Bias,        // same bound as the owning weight
  Zero,        // adaLN gates and gated residual scales
  Ones,        // layer-norm gain
  Embedding,   // U(-1, 1)
  Positional,  // U(-0.1, 0.1)
};

struct InitOptions {
  std::uint64_t seed = 0;
  // When false, gate parameters get random values too so every path carries
  // signal (used by probes that need a non-degenerate network).
  bool zero_gates = true;
};

template <typename T>
struct NormWeights {
  Tensor<T> gain;   // [1 x d]
  Tensor<T> shift;  // [1 x d]

  NormWeights() = default;
  explicit NormWeights(std::size_t d) : gain(1, d, T{1}), shift(1, d, T{0}) {}

  Tensor<T> operator()(const Tensor<T>& x, T eps = T(1e-6)) const {
    return layer_norm<T>(x, gain.row(0), shift.row(0), eps);
  }
};

// Visitor signature: f(name, tensor, init, fan_in).
template <typename T, typename F>
void visit_linear(F&& f, const std::string& prefix, Linear<T>& l, bool gate = false,
                  const std::string& wname = "w", const std::string& bname = "b") {
  const std::size_t fan_in = l.w.rows();
  f(prefix + "." + wname, l.w, gate ? Init::Zero : Init::Kaiming, fan_in);
  f(prefix + "." + bname, l.b, gate ? Init::Zero : Init::Bias, fan_in);
}

template <typename T, typename F>
void visit_norm(F&& f, const std::string& prefix, NormWeights<T>& n) {
  f(prefix + ".gain", n.gain, Init::Ones, n.gain.cols());
  f(prefix + ".shift", n.shift, Init::Zero, n.gain.cols());
}

template <typename T, typename F>
void visit_mlp(F&& f, const std::string& prefix, MlpWeights<T>& m) {
  visit_linear(f, prefix + ".fc1", m.fc1);
  visit_linear(f, prefix + ".fc2", m.fc2);
}

template <typename T, typename F>
void visit_attention(F&& f, const std::string& prefix, AttentionWeights<T>& a) {
  visit_linear(f, prefix + ".q", a.q);
  visit_linear(f, prefix + ".k", a.k);
  visit_linear(f, prefix + ".v", a.v);
  visit_linear(f, prefix + ".o", a.o);
}

template <typename T, typename F>
void visit_modulation(F&& f, const std::string& prefix, Modulation<T>& m) {
  visit_linear(f, prefix + ".scale", m.scale);
  visit_linear(f, prefix + ".shift", m.shift);
  visit_linear(f, prefix + ".gate", m.gate, /*gate=*/true);
}

template <typename T>
MlpWeights<T> make_mlp(std::size_t d, std::size_t hidden) {
  return {Linear<T>(d, hidden), Linear<T>(hidden, d)};
}

template <typename T>
AttentionWeights<T> make_attention(std::size_t d_q, std::size_t d_kv, std::size_t inner,
                                   std::size_t d_out) {
  return {Linear<T>(d_q, inner), Linear<T>(d_kv, inner), Linear<T>(d_kv, inner),
          Linear<T>(inner, d_out)};
}

template <typename T>
Modulation<T> make_modulation(std::size_t cond, std::size_t d) {
  return {Linear<T>(cond, d), Linear<T>(cond, d), Linear<T>(cond, d)};
}

// Deterministic fill keyed on the parameter name, independent of visit order.
template <typename T>
void init_param(const std::string& name, Tensor<T>& t, Init init, std::size_t fan_in,
                const InitOptions& opt) {
  CounterRng rng(opt.seed, fnv1a(name));
  auto uniform = [&](double bound) {
    for (T& v : t.flat()) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  };
  const double kaiming = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  switch (init) {
    case Init::Kaiming:
    case Init::Bias:
      uniform(kaiming);
      break;
    case Init::Zero:
      if (opt.zero_gates || name.find("gate") == std::string::npos) {
        for (T& v : t.flat()) v = T{0};
      } else {
        uniform(kaiming);
      }
      break;
    case Init::Ones:
      for (T& v : t.flat()) v = T{1};
      break;
    case Init::Embedding:
      uniform(1.0);
      break;
    case Init::Positional:
      uniform(0.1);
      break;
  }
}

template <typename Params>
void initialize(Params& p, const InitOptions& opt) {
  p.visit([&](const std::string& name, auto& t, Init init, std::size_t fan_in) {
    init_param(name, t, init, fan_in, opt);
  });
}

}  // namespace arig
