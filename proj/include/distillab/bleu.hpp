// SPDX-License-Identifier: Apache-2.0
//
// Corpus-level BLEU: clipped n-gram precisions, geometric mean over
// n <= 4, multiplicative brevity penalty, reported on the 0-100 scale.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "distillab/common.hpp"

namespace distillab {

struct BleuReport {
  double bleu = 0.0;                     // 0..100
  std::array<double, 4> precisions{};    // p1..p4, post smoothing
  double brevity_penalty = 1.0;
  int64_t hyp_len = 0;
  int64_t ref_len = 0;

  std::string to_line() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "BLEU = %.2f %.1f/%.1f/%.1f/%.1f (BP = %.3f hyp_len = %lld ref_len = %lld)",
                  bleu, precisions[0] * 100, precisions[1] * 100, precisions[2] * 100,
                  precisions[3] * 100, brevity_penalty, static_cast<long long>(hyp_len),
                  static_cast<long long>(ref_len));
    return buf;
  }
};

namespace detail {

template <class Tok>
std::map<std::vector<Tok>, int64_t> ngram_counts(const std::vector<Tok>& sent, int n) {
  std::map<std::vector<Tok>, int64_t> counts;
  if (static_cast<int64_t>(sent.size()) < n) return counts;
  for (size_t i = 0; i + n <= sent.size(); ++i) {
    counts[std::vector<Tok>(sent.begin() + i, sent.begin() + i + n)] += 1;
  }
  return counts;
}

}  // namespace detail

// Smoothing floors zero-match precisions at 1e-9. Off by default for
// corpus scores; turn it on for per-sentence diagnostics.
template <class Tok>
BleuReport corpus_bleu(const std::vector<std::vector<Tok>>& hyps,
                       const std::vector<std::vector<Tok>>& refs, int max_n = 4,
                       bool smooth = false) {
  if (hyps.empty()) throw ValueError("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) {
    throw ValueError("corpus_bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                     std::to_string(refs.size()) + " references");
  }
  if (max_n < 1 || max_n > 4) throw ValueError("corpus_bleu: max_n must be in [1,4]");

  std::array<int64_t, 4> matched{};
  std::array<int64_t, 4> total{};
  BleuReport rep;
  for (size_t s = 0; s < hyps.size(); ++s) {
    rep.hyp_len += static_cast<int64_t>(hyps[s].size());
    rep.ref_len += static_cast<int64_t>(refs[s].size());
    for (int n = 1; n <= max_n; ++n) {
      auto hc = detail::ngram_counts(hyps[s], n);
      auto rc = detail::ngram_counts(refs[s], n);
      for (const auto& [gram, count] : hc) {
        auto it = rc.find(gram);
        if (it != rc.end()) matched[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
      int64_t h = static_cast<int64_t>(hyps[s].size()) - n + 1;
      if (h > 0) total[static_cast<size_t>(n - 1)] += h;
    }
  }

  bool any_zero = false;
  for (int n = 0; n < max_n; ++n) {
    double p = total[static_cast<size_t>(n)] > 0
                   ? static_cast<double>(matched[static_cast<size_t>(n)]) /
                         static_cast<double>(total[static_cast<size_t>(n)])
                   : 0.0;
    if (p == 0.0) {
      if (smooth) {
        p = 1e-9;
      } else {
        any_zero = true;
      }
    }
    rep.precisions[static_cast<size_t>(n)] = p;
  }

  if (rep.hyp_len == 0) {
    rep.brevity_penalty = 0.0;
    rep.bleu = 0.0;
    return rep;
  }
  rep.brevity_penalty = rep.hyp_len < rep.ref_len
                            ? std::exp(1.0 - static_cast<double>(rep.ref_len) /
                                                 static_cast<double>(rep.hyp_len))
                            : 1.0;
  if (any_zero) {
    rep.bleu = 0.0;
    return rep;
  }
  double log_sum = 0.0;
  for (int n = 0; n < max_n; ++n) log_sum += std::log(rep.precisions[static_cast<size_t>(n)]);
  rep.bleu = 100.0 * rep.brevity_penalty * std::exp(log_sum / max_n);
  return rep;
}

}  // namespace distillab
