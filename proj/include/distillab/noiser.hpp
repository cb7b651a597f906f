// SPDX-License-Identifier: Apache-2.0
//
// Text-complexity manipulation: per-token deletion and substitution plus
// a sentence-level index-jitter shuffle whose displacement never exceeds
// the configured swap length. Applied in that order: delete, substitute,
// swap.

#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "distillab/common.hpp"
#include "distillab/corpus.hpp"

namespace distillab {

struct NoiseProfile {
  double delete_p = 0.0;
  double substitute_p = 0.0;
  double swap_sentence_p = 0.0;
  int64_t swap_k = 0;
  std::string name = "none";

  static NoiseProfile none() { return {0.0, 0.0, 0.0, 0, "none"}; }
  static NoiseProfile moderate() { return {0.10, 0.10, 0.50, 3, "moderate"}; }
  static NoiseProfile high() { return {0.10, 0.10, 1.00, 3, "high"}; }

  static NoiseProfile by_name(const std::string& n) {
    if (n == "none") return none();
    if (n == "moderate") return moderate();
    if (n == "high") return high();
    throw ConfigError("unknown noise profile '" + n + "'");
  }

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(delete_p) || !prob(substitute_p) || !prob(swap_sentence_p)) {
      throw ConfigError("noise profile: probabilities must lie in [0,1]");
    }
    if (swap_k < 0) throw ConfigError("noise profile: swap length must be >= 0");
  }
};

namespace detail {

// Stable sort of positions by jittered key i + U[0,k]; the resulting
// permutation moves no token further than k from its origin.
template <class Tok>
std::vector<Tok> jitter_shuffle(const std::vector<Tok>& sent, int64_t k, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<double, size_t>> keyed(sent.size());
  for (size_t i = 0; i < sent.size(); ++i) {
    keyed[i] = {static_cast<double>(i) + u(rng) * static_cast<double>(k), i};
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<Tok> out(sent.size());
  for (size_t i = 0; i < sent.size(); ++i) out[i] = sent[keyed[i].second];
  return out;
}

}  // namespace detail

// Corrupts one sentence. substitution_pool holds the candidate replacement
// tokens (the non-special vocabulary). Deterministic in (input, profile,
// seed); draws happen in a fixed order: deletion marks, substitution marks
// and replacements, swap coin, jitter keys.
template <class Tok>
std::vector<Tok> corrupt(const std::vector<Tok>& sentence, const NoiseProfile& profile,
                         const std::vector<Tok>& substitution_pool, uint64_t seed) {
  profile.validate();
  if (sentence.empty()) throw ValueError("corrupt: empty sentence");
  Rng rng(mix_seed(seed));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // 1) deletion, keeping at least one token (the first, if all marked)
  std::vector<Tok> kept;
  kept.reserve(sentence.size());
  for (const Tok& t : sentence) {
    if (u(rng) >= profile.delete_p) kept.push_back(t);
  }
  if (kept.empty()) kept.push_back(sentence.front());

  // 2) substitution with a uniform pool token
  if (profile.substitute_p > 0.0 && !substitution_pool.empty()) {
    std::uniform_int_distribution<size_t> pick(0, substitution_pool.size() - 1);
    for (Tok& t : kept) {
      if (u(rng) < profile.substitute_p) t = substitution_pool[pick(rng)];
    }
  }

  // 3) sentence-level swap
  if (profile.swap_sentence_p > 0.0 && u(rng) < profile.swap_sentence_p && kept.size() > 1) {
    kept = detail::jitter_shuffle(kept, profile.swap_k, rng);
  }
  return kept;
}

// Corrupts the source side of a corpus; targets stay untouched and the
// evaluation side is expected to remain clean.
inline ParallelCorpus corrupt_sources(const ParallelCorpus& corpus, const NoiseProfile& profile,
                                      uint64_t master_seed) {
  ParallelCorpus out = corpus;
  std::vector<int32_t> pool = corpus.vocab.regular_ids();
  for (size_t i = 0; i < out.pairs.size(); ++i) {
    out.pairs[i].first =
        corrupt(corpus.pairs[i].first, profile, pool, derive_seed(master_seed, i));
  }
  out.task_descriptor += " +noise:" + profile.name;
  return out;
}

}  // namespace distillab
