#include <gtest/gtest.h>

#include "arig/caches.hpp"
#include "arig/engine.hpp"
#include "test_util.hpp"

using namespace arig;

namespace {

BehaviorToken tok(std::int64_t frame, float v = 0.0f) {
  return {std::vector<float>{v, v + 1}, Track::Agent, frame};
}

ChunkSummary sum(std::uint64_t i, bool complete, float v = 0.0f) {
  return {i, std::vector<float>{v}, complete};
}

// Drives the caches exactly as a session does, without any model.
struct CacheDriver {
  std::size_t c, w;
  ChunkCache agent, user;
  ContextCache ctx;
  std::uint64_t T = 0;

  CacheDriver(std::size_t c_, std::size_t w_)
      : c(c_), w(w_), agent(Track::Agent, c_), user(Track::User, c_), ctx(w_) {}

  void step() {
    agent.push({std::vector<float>(4, float(T)), Track::Agent, std::int64_t(T)});
    user.push({std::vector<float>(4, -float(T)), Track::User, std::int64_t(T)});
    ctx.upsert({chunk_index(T, c), std::vector<float>(8, float(T)), T % c == c - 1});
    ++T;
  }
};

}  // namespace

TEST(ChunkIndex, Table) {
  EXPECT_EQ(chunk_index(0, 6), 0u);
  EXPECT_EQ(chunk_index(5, 6), 0u);
  EXPECT_EQ(chunk_index(6, 6), 1u);
  EXPECT_EQ(chunk_index(13, 6), 2u);
  EXPECT_THROW(chunk_index(3, 0), ConfigError);
}

TEST(ChunkIndex, FrameRangeOfChunk) {
  for (std::uint64_t c = 1; c <= 9; ++c) {
    for (std::uint64_t i = 0; i < 20; ++i) {
      EXPECT_EQ(chunk_index(c * i, c), i);
      EXPECT_EQ(chunk_index(c * (i + 1) - 1, c), i);
    }
  }
}

TEST(ChunkCache, PushOnEmpty) {
  ChunkCache cc(Track::User, 6);
  cc.push(tok(0));
  EXPECT_EQ(cc.size(), 1u);
  EXPECT_EQ(cc.tokens().front().track, Track::User);
}

TEST(ChunkCache, RingEvictsOldest) {
  ChunkCache cc(Track::Agent, 6);
  for (int t = 0; t <= 5; ++t) cc.push(tok(t));
  cc.push(tok(6));
  ASSERT_EQ(cc.size(), 6u);
  EXPECT_EQ(cc.tokens().front().frame_index, 1);
  EXPECT_EQ(cc.tokens().back().frame_index, 6);
}

TEST(ChunkCache, NonContiguousPushIsSequencingError) {
  ChunkCache cc(Track::Agent, 6);
  for (int t = 0; t <= 5; ++t) cc.push(tok(t));
  EXPECT_THROW(cc.push(tok(3)), SequencingError);
  EXPECT_THROW(cc.push(tok(7)), SequencingError);
  EXPECT_EQ(cc.tokens().back().frame_index, 5);
}

TEST(ChunkCache, ZeroWindowIsConfigError) { EXPECT_THROW(ChunkCache(Track::Agent, 0), ConfigError); }

TEST(ContextCache, RefreshInPlace) {
  ContextCache ctx(8);
  ctx.upsert(sum(0, true));
  ctx.upsert(sum(1, false, 1));
  ctx.upsert(sum(1, false, 2));
  ctx.upsert(sum(1, true, 3));
  ASSERT_EQ(ctx.size(), 2u);
  EXPECT_EQ(ctx.entries()[0].chunk_index, 0u);
  EXPECT_EQ(ctx.entries()[1].chunk_index, 1u);
  EXPECT_TRUE(ctx.entries()[1].complete);
  EXPECT_EQ(ctx.entries()[1].vector, std::vector<float>{3});
}

TEST(ContextCache, FifoEvictionAtCapacity) {
  ContextCache ctx(2);
  ctx.upsert(sum(0, true));
  ctx.upsert(sum(1, true));
  ctx.upsert(sum(2, false));
  ASSERT_EQ(ctx.size(), 2u);
  EXPECT_EQ(ctx.entries()[0].chunk_index, 1u);
  EXPECT_EQ(ctx.entries()[1].chunk_index, 2u);
}

TEST(ContextCache, OlderIndexIsSequencingError) {
  ContextCache ctx(4);
  ctx.upsert(sum(0, true));
  ctx.upsert(sum(1, false));
  EXPECT_THROW(ctx.upsert(sum(0, true)), SequencingError);
}

TEST(ContextCache, NewChunkBeforeCompletionIsSequencingError) {
  ContextCache ctx(4);
  ctx.upsert(sum(0, false));
  EXPECT_THROW(ctx.upsert(sum(1, false)), SequencingError);
}

TEST(ContextCache, ZeroCapacityIsConfigError) { EXPECT_THROW(ContextCache(0), ConfigError); }

TEST(CacheInvariants, ContextLengthAndChunkBound) {
  for (std::size_t c : {1u, 2u, 6u, 7u}) {
    for (std::size_t w : {1u, 3u, 10u}) {
      CacheDriver d(c, w);
      for (std::uint64_t T = 0; T < 200; ++T) {
        d.step();
        const auto& e = d.ctx.entries();
        const std::uint64_t newest = T / c;
        ASSERT_EQ(e.size(), std::min<std::uint64_t>(newest + 1, w)) << "c=" << c << " w=" << w << " T=" << T;
        for (std::size_t k = 0; k < e.size(); ++k) {
          EXPECT_EQ(e[k].chunk_index, newest + 1 - e.size() + k);
          if (k + 1 < e.size()) {
            EXPECT_TRUE(e[k].complete);
          }
        }
        EXPECT_EQ(e.back().complete, T % c == c - 1);
        for (const auto& t : d.agent.tokens()) {
          EXPECT_GE(t.frame_index, std::int64_t(T) - std::int64_t(c) + 1);
        }
        EXPECT_EQ(d.agent.tokens().back().frame_index, std::int64_t(T));
      }
    }
  }
}

TEST(CacheInvariants, MemoryBoundedOver100kFrames) {
  const std::size_t c = 6, w = 16;
  CacheDriver d(c, w);
  std::size_t peak = 0, at_capacity = 0;
  for (std::uint64_t T = 0; T < 100000; ++T) {
    d.step();
    const std::size_t bytes = d.agent.byte_size() + d.user.byte_size() + d.ctx.byte_size();
    peak = std::max(peak, bytes);
    if (T == c * w) at_capacity = bytes;
  }
  EXPECT_EQ(d.agent.size(), c);
  EXPECT_EQ(d.ctx.size(), w);
  // Per-entry bound: token/summary struct plus payload, plus the containers.
  const std::size_t bound = 3 * sizeof(ChunkCache) + 2 * c * (sizeof(BehaviorToken) + 4 * sizeof(float)) +
                            w * (sizeof(ChunkSummary) + 8 * sizeof(float)) + 4096;
  EXPECT_LE(peak, bound);
  EXPECT_EQ(peak, at_capacity);
}

TEST(Snapshot, EmptyRoundTrip) {
  CacheSet cs{ChunkCache(Track::Agent, 6), ChunkCache(Track::User, 6), ContextCache(512),
              VectorWindow(3), VectorWindow(5), VectorWindow(5)};
  const auto blob = snapshot(cs);
  EXPECT_EQ(restore(blob), cs);
  EXPECT_EQ(snapshot(restore(blob)), blob);
}

TEST(Snapshot, MidChunkSessionRoundTrip) {
  auto cfg = arig::testing::tiny_config();
  auto w = arig::testing::live_weights(cfg);
  auto in = arig::testing::random_inputs(cfg, 9, 4);
  Session s(cfg, w);
  s.init(in[0].user_motion, in[0].agent_audio);
  for (std::size_t t = 0; t <= 8; ++t) s.step(in[t]);
  const CacheSet& cs = s.caches();
  ASSERT_EQ(cs.context.size(), 2u);
  EXPECT_FALSE(cs.context.entries().back().complete);
  const auto blob = snapshot(cs);
  const CacheSet back = restore(blob);
  EXPECT_EQ(back, cs);
  EXPECT_EQ(snapshot(back), blob);
}

TEST(Snapshot, CorruptedBlobRejected) {
  CacheDriver d(6, 4);
  for (int i = 0; i < 20; ++i) d.step();
  CacheSet cs{d.agent, d.user, d.ctx, VectorWindow(3), VectorWindow(5), VectorWindow(5)};
  const auto blob = snapshot(cs);

  auto bad_version = blob;
  bad_version[4] = 9;
  EXPECT_THROW(restore(bad_version), VersionError);

  auto bad_magic = blob;
  bad_magic[0] = 'X';
  EXPECT_THROW(restore(bad_magic), FormatError);

  EXPECT_THROW(restore(blob.substr(0, blob.size() - 3)), FormatError);
  EXPECT_THROW(restore(blob + "x"), FormatError);
  EXPECT_THROW(restore(""), FormatError);
}

TEST(Snapshot, BijectiveOnReachableStates) {
  CacheDriver d(6, 5);
  for (int i = 0; i < 80; ++i) {
    d.step();
    VectorWindow a(3), m(5), f(5);
    for (int k = 0; k <= i % 7; ++k) {
      a.push({float(k)});
      m.push({float(i), float(k)});
    }
    CacheSet cs{d.agent, d.user, d.ctx, a, m, f};
    const auto blob = snapshot(cs);
    ASSERT_EQ(restore(blob), cs);
    ASSERT_EQ(snapshot(restore(blob)), blob);
  }
}

TEST(VectorWindow, PaddedRepeatsOldest) {
  VectorWindow v(5);
  v.push({1});
  v.push({2});
  auto p = v.padded();
  ASSERT_EQ(p.size(), 5u);
  EXPECT_EQ(*p[0], std::vector<float>{1});
  EXPECT_EQ(*p[3], std::vector<float>{1});
  EXPECT_EQ(*p[4], std::vector<float>{2});
  for (int i = 3; i <= 9; ++i) v.push({float(i)});
  EXPECT_EQ(v.size(), 5u);
  EXPECT_EQ(v.at(0), std::vector<float>{5});
}
