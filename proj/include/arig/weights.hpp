#pragma once

// All engine parameters and the ARIG weight bundle format.

#include <map>
#include <string>
#include <vector>

#include "arig/binio.hpp"
#include "arig/csu.hpp"
#include "arig/diffusion.hpp"
#include "arig/ibu.hpp"
#include "arig/pmp.hpp"

namespace arig {

struct EngineWeights {
  IbuParams ibu;
  CsuParams csu;
  PmpParams pmp;
  DiffParams<float> diff;

  static EngineWeights shaped(const EngineConfig& cfg) {
    return {IbuParams::shaped(cfg), CsuParams::shaped(cfg), PmpParams::shaped(cfg),
            DiffParams<float>::shaped(DiffDims::from(cfg))};
  }

  template <typename F>
  void visit(F&& f) {
    ibu.visit(f);
    csu.visit(f);
    pmp.visit(f);
    diff.visit(f);
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](const std::string&, Tensor<float>& t, Init, std::size_t) { n += t.size(); });
    return n;
  }
};

inline EngineWeights random_weights(const EngineConfig& cfg, const InitOptions& opt) {
  EngineWeights w = EngineWeights::shaped(cfg);
  initialize(w, opt);
  return w;
}

inline EngineWeights random_weights(const EngineConfig& cfg) {
  return random_weights(cfg, {cfg.seed, true});
}

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
};

struct WeightBundle {
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }
  bool operator==(const WeightBundle& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name != o.tensors[i].name || !(tensors[i].tensor == o.tensors[i].tensor)) {
        return false;
      }
    }
    return true;
  }
};

inline constexpr std::uint32_t kWeightsVersion = 1;

inline WeightBundle to_bundle(EngineWeights& w) {
  WeightBundle b;
  w.visit([&](const std::string& name, Tensor<float>& t, Init, std::size_t) {
    b.tensors.push_back({name, t});
  });
  return b;
}

// Every tensor the topology needs must be present with its exact shape, and
// nothing else may be.
inline EngineWeights from_bundle(const EngineConfig& cfg, const WeightBundle& b) {
  EngineWeights w = EngineWeights::shaped(cfg);
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : b.tensors) by_name[t.name] = &t;
  std::size_t used = 0;
  w.visit([&](const std::string& name, Tensor<float>& t, Init, std::size_t) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw MissingTensorError(name);
    const Tensor<float>& src = it->second->tensor;
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw ConfigError("tensor '" + name + "' has shape " + src.shape() + ", topology needs " +
                        t.shape());
    }
    t = src;
    ++used;
  });
  if (used != by_name.size()) {
    std::map<std::string, bool> known;
    w.visit([&](const std::string& name, Tensor<float>&, Init, std::size_t) { known[name] = true; });
    for (const auto& [name, _] : by_name) {
      if (!known.count(name)) throw ConfigError("tensor '" + name + "' is not part of the topology");
    }
  }
  return w;
}

// "ARIG", u32 version, u32 count, then per tensor: name (u32 length + UTF-8),
// u32 rank, rank x u32 dims, f32 values; trailer u32 CRC32 of every preceding byte.
inline std::string encode_weights(const WeightBundle& b) {
  ByteWriter w;
  w.raw("ARIG");
  w.u32(kWeightsVersion);
  w.u32(static_cast<std::uint32_t>(b.tensors.size()));
  for (const auto& t : b.tensors) {
    w.str(t.name);
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(t.tensor.rows()));
    w.u32(static_cast<std::uint32_t>(t.tensor.cols()));
    w.floats(t.tensor.flat());
  }
  std::string bytes = w.take();
  ByteWriter trailer;
  trailer.u32(crc32_of(bytes));
  bytes += trailer.bytes();
  return bytes;
}

inline WeightBundle decode_weights(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 4) != "ARIG") {
    throw FormatError("weights: not an ARIG bundle (bad magic)");
  }
  const std::string_view payload = bytes.substr(0, bytes.size() - 4);
  ByteReader tail(bytes.substr(bytes.size() - 4));
  const std::uint32_t stored = tail.u32();
  const std::uint32_t actual = crc32_of(payload);
  if (stored != actual) {
    throw ChecksumError("weights: checksum mismatch (stored " + std::to_string(stored) +
                        ", computed " + std::to_string(actual) + ")");
  }
  ByteReader r(payload);
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw VersionError("weights: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  WeightBundle b;
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    if (seen[name]) throw FormatError("weights: duplicate tensor '" + name + "'");
    seen[name] = true;
    const std::uint32_t rank = r.u32();
    if (rank != 1 && rank != 2) {
      throw FormatError("weights: tensor '" + name + "' has rank " + std::to_string(rank));
    }
    std::size_t rows = 1, cols = r.u32();
    if (rank == 2) {
      rows = cols;
      cols = r.u32();
    }
    if (rows * cols * 4 > r.remaining()) {
      throw FormatError("weights: tensor '" + name + "' exceeds file size");
    }
    Tensor<float> t(rows, cols);
    r.floats(t.flat());
    b.tensors.push_back({std::move(name), std::move(t)});
  }
  r.expect_done("weights");
  return b;
}

inline void save_weights(const WeightBundle& b, const std::string& path) {
  write_file(path, encode_weights(b));
}

inline WeightBundle load_weights(const std::string& path) { return decode_weights(read_file(path)); }

}  // namespace arig
