#pragma once

// Sliding-window state of the autoregressive process: the two per-track chunk
// caches, the long-range context cache, and the short audio / motion /
// fine-feature windows.

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "arig/binio.hpp"
#include "arig/error.hpp"

namespace arig {

enum class Track : std::uint8_t { Agent = 0, User = 1 };

inline const char* track_name(Track t) { return t == Track::Agent ? "agent" : "user"; }

// Chunk i covers frames [c*i, c*(i+1)).
inline std::uint64_t chunk_index(std::uint64_t t, std::uint64_t c) {
  if (c == 0) throw ConfigError("chunk_index: window size c must be >= 1");
  return t / c;
}

// Fused audio+motion feature of one track at one frame. Tokens seeded at
// session start carry negative frame indices.
struct BehaviorToken {
  std::vector<float> vector;
  Track track = Track::Agent;
  std::int64_t frame_index = 0;

  bool operator==(const BehaviorToken&) const = default;
};

class ChunkCache {
 public:
  ChunkCache() = default;
  ChunkCache(Track track, std::size_t window) : track_(track), window_(window) {
    if (window == 0) throw ConfigError("chunk cache: window size c must be >= 1");
  }

  void push(BehaviorToken token) {
    if (!tokens_.empty() && token.frame_index != tokens_.back().frame_index + 1) {
      throw SequencingError("chunk cache (" + std::string(track_name(track_)) + "): frame " +
                            std::to_string(token.frame_index) + " after " +
                            std::to_string(tokens_.back().frame_index));
    }
    token.track = track_;
    tokens_.push_back(std::move(token));
    if (tokens_.size() > window_) tokens_.pop_front();
  }

  // Tokens with frame_index >= first_frame, oldest first.
  std::vector<const BehaviorToken*> from_frame(std::int64_t first_frame) const {
    std::vector<const BehaviorToken*> out;
    for (const auto& t : tokens_) {
      if (t.frame_index >= first_frame) out.push_back(&t);
    }
    return out;
  }

  const std::deque<BehaviorToken>& tokens() const { return tokens_; }
  Track track() const { return track_; }
  std::size_t window() const { return window_; }
  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }

  std::size_t byte_size() const {
    std::size_t n = sizeof(*this);
    for (const auto& t : tokens_) n += sizeof(t) + t.vector.capacity() * sizeof(float);
    return n;
  }

  bool operator==(const ChunkCache&) const = default;

 private:
  Track track_ = Track::Agent;
  std::size_t window_ = 1;
  std::deque<BehaviorToken> tokens_;
};

struct ChunkSummary {
  std::uint64_t chunk_index = 0;
  std::vector<float> vector;
  bool complete = false;

  bool operator==(const ChunkSummary&) const = default;
};

// Long-range context. The newest entry is refreshed in place until its chunk
// has all c frames; a new chunk index appends and evicts the oldest entry once
// the capacity is exceeded.
class ContextCache {
 public:
  ContextCache() = default;
  explicit ContextCache(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw ConfigError("context cache: capacity w must be >= 1");
  }

  void upsert(ChunkSummary s) {
    if (!entries_.empty()) {
      const auto& newest = entries_.back();
      if (s.chunk_index < newest.chunk_index) {
        throw SequencingError("context cache: chunk " + std::to_string(s.chunk_index) +
                              " after " + std::to_string(newest.chunk_index));
      }
      if (s.chunk_index == newest.chunk_index) {
        entries_.back() = std::move(s);
        return;
      }
      if (!newest.complete) {
        throw SequencingError("context cache: chunk " + std::to_string(newest.chunk_index) +
                              " still incomplete when chunk " + std::to_string(s.chunk_index) +
                              " arrived");
      }
    }
    entries_.push_back(std::move(s));
    if (entries_.size() > capacity_) entries_.pop_front();
  }

  const std::deque<ChunkSummary>& entries() const { return entries_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t byte_size() const {
    std::size_t n = sizeof(*this);
    for (const auto& e : entries_) n += sizeof(e) + e.vector.capacity() * sizeof(float);
    return n;
  }

  bool operator==(const ContextCache&) const = default;

 private:
  std::size_t capacity_ = 1;
  std::deque<ChunkSummary> entries_;
};

// Fixed-capacity FIFO of vectors, oldest first.
class VectorWindow {
 public:
  VectorWindow() = default;
  explicit VectorWindow(std::size_t capacity) : capacity_(capacity) {}

  void push(std::vector<float> v) {
    items_.push_back(std::move(v));
    if (items_.size() > capacity_) items_.pop_front();
  }
  void fill(const std::vector<float>& v) {
    items_.assign(capacity_, v);
  }
  // Replace the newest item.
  void replace_newest(std::vector<float> v) {
    if (items_.empty()) throw SequencingError("window: replace on empty window");
    items_.back() = std::move(v);
  }

  const std::vector<float>& newest() const { return items_.back(); }
  const std::vector<float>& at(std::size_t i) const { return items_[i]; }
  const std::deque<std::vector<float>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }

  // The window left-padded to full capacity by repeating the oldest item.
  std::vector<const std::vector<float>*> padded() const {
    std::vector<const std::vector<float>*> out;
    if (items_.empty()) return out;
    for (std::size_t i = items_.size(); i < capacity_; ++i) out.push_back(&items_.front());
    for (const auto& v : items_) out.push_back(&v);
    return out;
  }

  std::size_t byte_size() const {
    std::size_t n = sizeof(*this);
    for (const auto& v : items_) n += sizeof(v) + v.capacity() * sizeof(float);
    return n;
  }

  bool operator==(const VectorWindow&) const = default;

 private:
  std::size_t capacity_ = 1;
  std::deque<std::vector<float>> items_;
};

struct CacheSet {
  ChunkCache agent;
  ChunkCache user;
  ContextCache context;
  VectorWindow audio;   // agent audio, frames T-2..T
  VectorWindow motion;  // agent motion, frames T-5..T-1
  VectorWindow fine;    // fine-grained PMP features, frames T-4..T

  std::size_t byte_size() const {
    return agent.byte_size() + user.byte_size() + context.byte_size() + audio.byte_size() +
           motion.byte_size() + fine.byte_size();
  }

  bool operator==(const CacheSet&) const = default;
};

// ---- serialization ---------------------------------------------------------

namespace detail {

inline void write_chunk_cache(ByteWriter& w, const ChunkCache& c) {
  w.u8(static_cast<std::uint8_t>(c.track()));
  w.u64(c.window());
  w.u64(c.size());
  for (const auto& t : c.tokens()) {
    w.i64(t.frame_index);
    w.float_vec(t.vector);
  }
}

inline ChunkCache read_chunk_cache(ByteReader& r) {
  const auto track = r.u8();
  if (track > 1) throw FormatError("snapshot: bad track tag");
  const std::uint64_t window = r.u64();
  const std::uint64_t n = r.u64();
  if (window == 0 || n > window) throw FormatError("snapshot: chunk cache size out of range");
  ChunkCache c(static_cast<Track>(track), window);
  for (std::uint64_t i = 0; i < n; ++i) {
    BehaviorToken t;
    t.frame_index = r.i64();
    t.vector = r.float_vec();
    t.track = static_cast<Track>(track);
    try {
      c.push(std::move(t));
    } catch (const SequencingError& e) {
      throw FormatError(std::string("snapshot: ") + e.what());
    }
  }
  return c;
}

inline void write_window(ByteWriter& w, const VectorWindow& v) {
  w.u64(v.capacity());
  w.u64(v.size());
  for (const auto& item : v.items()) w.float_vec(item);
}

inline VectorWindow read_window(ByteReader& r) {
  const std::uint64_t cap = r.u64();
  const std::uint64_t n = r.u64();
  if (n > cap) throw FormatError("snapshot: window size exceeds capacity");
  VectorWindow v(cap);
  for (std::uint64_t i = 0; i < n; ++i) v.push(r.float_vec());
  return v;
}

}  // namespace detail

inline void write_caches(ByteWriter& w, const CacheSet& cs) {
  auto s = w.begin_section(fourcc("CHKA"));
  detail::write_chunk_cache(w, cs.agent);
  w.end_section(s);
  s = w.begin_section(fourcc("CHKU"));
  detail::write_chunk_cache(w, cs.user);
  w.end_section(s);

  s = w.begin_section(fourcc("CTXT"));
  w.u64(cs.context.capacity());
  w.u64(cs.context.size());
  for (const auto& e : cs.context.entries()) {
    w.u64(e.chunk_index);
    w.u8(e.complete ? 1 : 0);
    w.float_vec(e.vector);
  }
  w.end_section(s);

  s = w.begin_section(fourcc("WAUD"));
  detail::write_window(w, cs.audio);
  w.end_section(s);
  s = w.begin_section(fourcc("WMOT"));
  detail::write_window(w, cs.motion);
  w.end_section(s);
  s = w.begin_section(fourcc("WFIN"));
  detail::write_window(w, cs.fine);
  w.end_section(s);
}

inline CacheSet read_caches(ByteReader& r) {
  CacheSet cs;
  {
    auto sec = r.section(fourcc("CHKA"));
    cs.agent = detail::read_chunk_cache(sec);
    sec.expect_done("snapshot agent chunk cache");
  }
  {
    auto sec = r.section(fourcc("CHKU"));
    cs.user = detail::read_chunk_cache(sec);
    sec.expect_done("snapshot user chunk cache");
  }
  {
    auto sec = r.section(fourcc("CTXT"));
    const std::uint64_t cap = sec.u64();
    const std::uint64_t n = sec.u64();
    if (cap == 0 || n > cap) throw FormatError("snapshot: context size out of range");
    cs.context = ContextCache(cap);
    for (std::uint64_t i = 0; i < n; ++i) {
      ChunkSummary e;
      e.chunk_index = sec.u64();
      e.complete = sec.u8() != 0;
      e.vector = sec.float_vec();
      try {
        cs.context.upsert(std::move(e));
      } catch (const SequencingError& err) {
        throw FormatError(std::string("snapshot: ") + err.what());
      }
    }
    sec.expect_done("snapshot context cache");
  }
  auto window = [&r](const char (&tag)[5]) {
    auto sec = r.section(fourcc(tag));
    VectorWindow v = detail::read_window(sec);
    sec.expect_done("snapshot window");
    return v;
  };
  cs.audio = window("WAUD");
  cs.motion = window("WMOT");
  cs.fine = window("WFIN");
  return cs;
}

inline constexpr std::uint32_t kCacheSnapshotVersion = 1;

// Standalone cache snapshot: magic "ARCS", u32 version, sections.
inline std::string snapshot(const CacheSet& cs) {
  ByteWriter w;
  w.raw("ARCS");
  w.u32(kCacheSnapshotVersion);
  write_caches(w, cs);
  return w.take();
}

inline CacheSet restore(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.remaining() < 8 || r.raw(4) != "ARCS") throw FormatError("cache snapshot: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCacheSnapshotVersion) {
    throw VersionError("cache snapshot: unsupported version " + std::to_string(version));
  }
  CacheSet cs = read_caches(r);
  r.expect_done("cache snapshot");
  return cs;
}

}  // namespace arig
