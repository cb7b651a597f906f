// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <map>
#include <numeric>

#include <gtest/gtest.h>

#include "distillab/noiser.hpp"

using namespace distillab;

namespace {

std::vector<int32_t> iota_sentence(int n) {
  std::vector<int32_t> s(static_cast<size_t>(n));
  std::iota(s.begin(), s.end(), 100);  // distinct, non-special
  return s;
}

std::vector<int32_t> pool_1k() {
  std::vector<int32_t> p(1020);
  std::iota(p.begin(), p.end(), 4);
  return p;
}

}  // namespace

TEST(NoiseProfile, PresetsMatchConfiguredIntensities) {
  NoiseProfile m = NoiseProfile::moderate();
  EXPECT_DOUBLE_EQ(m.delete_p, 0.10);
  EXPECT_DOUBLE_EQ(m.substitute_p, 0.10);
  EXPECT_DOUBLE_EQ(m.swap_sentence_p, 0.50);
  EXPECT_EQ(m.swap_k, 3);
  NoiseProfile h = NoiseProfile::high();
  EXPECT_DOUBLE_EQ(h.swap_sentence_p, 1.00);
  EXPECT_EQ(h.swap_k, 3);
  EXPECT_THROW(NoiseProfile::by_name("extreme"), ConfigError);
}

TEST(Corrupt, IdentityProfileLeavesInputAlone) {
  auto s = iota_sentence(12);
  EXPECT_EQ(corrupt(s, NoiseProfile::none(), pool_1k(), 9), s);
}

TEST(Corrupt, EmptyInputRejected) {
  std::vector<int32_t> empty;
  EXPECT_THROW(corrupt(empty, NoiseProfile::none(), pool_1k(), 1), ValueError);
}

TEST(Corrupt, FullDeletionKeepsExactlyOneToken) {
  NoiseProfile p{1.0, 0.0, 0.0, 0, "all-delete"};
  auto s = iota_sentence(9);
  auto out = corrupt(s, p, pool_1k(), 3);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0], s[0]);
}

TEST(Corrupt, DeterministicPerSeed) {
  auto s = iota_sentence(15);
  NoiseProfile p = NoiseProfile::moderate();
  auto a = corrupt(s, p, pool_1k(), 42);
  auto b = corrupt(s, p, pool_1k(), 42);
  auto c = corrupt(s, p, pool_1k(), 43);
  EXPECT_EQ(a, b);
  EXPECT_TRUE(a != c || corrupt(s, p, pool_1k(), 44) != a);  // some seed differs
}

TEST(Corrupt, SwapOnlyPreservesMultiset) {
  NoiseProfile p{0.0, 0.0, 1.0, 3, "swap-only"};
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> ulen(1, 20);
    auto s = iota_sentence(ulen(rng));
    auto out = corrupt(s, p, pool_1k(), rng());
    auto a = s, b = out;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    ASSERT_EQ(a, b);
  }
}

TEST(Corrupt, LengthPreservedWithoutDeletionNeverGrows) {
  NoiseProfile subswap{0.0, 0.5, 1.0, 3, "sub-swap"};
  NoiseProfile full = NoiseProfile::moderate();
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> ulen(1, 20);
    auto s = iota_sentence(ulen(rng));
    EXPECT_EQ(corrupt(s, subswap, pool_1k(), rng()).size(), s.size());
    EXPECT_LE(corrupt(s, full, pool_1k(), rng()).size(), s.size());
  }
}

TEST(Corrupt, JitterDisplacementBounded) {
  NoiseProfile p{0.0, 0.0, 1.0, 3, "swap-only"};
  Rng rng(7);
  for (int trial = 0; trial < 500; ++trial) {
    std::uniform_int_distribution<int> ulen(1, 16);
    auto s = iota_sentence(ulen(rng));
    auto out = corrupt(s, p, pool_1k(), rng());
    ASSERT_EQ(out.size(), s.size());
    for (size_t j = 0; j < out.size(); ++j) {
      auto it = std::find(s.begin(), s.end(), out[j]);
      ASSERT_NE(it, s.end());
      long src = it - s.begin();
      EXPECT_LE(std::abs(static_cast<long>(j) - src), p.swap_k);
    }
  }
}

TEST(Corrupt, JitterBoundExhaustiveOverDiscretizedDraws) {
  // all (k+1)^5 integer jitter assignments on a length-5 sentence; the
  // stable sort never moves an index more than k
  const int n = 5, k = 3;
  std::vector<int> jit(n, 0);
  int combos = 1;
  for (int i = 0; i < n; ++i) combos *= k + 1;
  for (int c = 0; c < combos; ++c) {
    int rem = c;
    for (int i = 0; i < n; ++i) {
      jit[static_cast<size_t>(i)] = rem % (k + 1);
      rem /= k + 1;
    }
    std::vector<std::pair<int, int>> keyed(n);
    for (int i = 0; i < n; ++i) keyed[static_cast<size_t>(i)] = {i + jit[static_cast<size_t>(i)], i};
    std::stable_sort(keyed.begin(), keyed.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (int pos = 0; pos < n; ++pos) {
      ASSERT_LE(std::abs(pos - keyed[static_cast<size_t>(pos)].second), k);
    }
  }
}

TEST(Corrupt, MonteCarloRatesNearConfigured) {
  // smaller sample than the acceptance run, wider tolerance
  const int sentences = 2000, len = 10;
  const int64_t total = sentences * len;
  NoiseProfile del_only{0.10, 0.0, 0.0, 0, "del"};
  NoiseProfile sub_only{0.0, 0.10, 0.0, 0, "sub"};
  auto pool = pool_1k();
  int64_t deleted = 0, substituted = 0;
  for (int i = 0; i < sentences; ++i) {
    auto s = iota_sentence(len);
    deleted += len - static_cast<int64_t>(corrupt(s, del_only, pool, 1000 + i).size());
    auto sub = corrupt(s, sub_only, pool, 5000 + i);
    for (int j = 0; j < len; ++j) {
      if (sub[static_cast<size_t>(j)] != s[static_cast<size_t>(j)]) ++substituted;
    }
  }
  EXPECT_NEAR(static_cast<double>(deleted) / total, 0.10, 0.015);
  EXPECT_NEAR(static_cast<double>(substituted) / total, 0.10, 0.015);
}

TEST(CorruptSources, TargetsUntouchedAndDeterministic) {
  auto c = generate_task(TaskKind::lexicon_reorder, 64, 30, 4, 9, 8);
  auto noised1 = corrupt_sources(c, NoiseProfile::moderate(), 99);
  auto noised2 = corrupt_sources(c, NoiseProfile::moderate(), 99);
  ASSERT_EQ(noised1.size(), c.size());
  bool any_changed = false;
  for (int64_t i = 0; i < c.size(); ++i) {
    auto idx = static_cast<size_t>(i);
    EXPECT_EQ(noised1.pairs[idx].second, c.pairs[idx].second);
    EXPECT_EQ(noised1.pairs[idx].first, noised2.pairs[idx].first);
    if (noised1.pairs[idx].first != c.pairs[idx].first) any_changed = true;
  }
  EXPECT_TRUE(any_changed);
}
