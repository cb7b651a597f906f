// SPDX-License-Identifier: Apache-2.0
//
// Independent BLEU computation used as an oracle against bleu.hpp. Counts
// n-grams by string joining and clips with a quadratic scan instead of
// count maps; shares only the metric's published definition.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace naive_bleu {

inline std::string join_gram(const std::vector<std::string>& sent, size_t start, int n) {
  std::string g;
  for (int j = 0; j < n; ++j) {
    g += sent[start + static_cast<size_t>(j)];
    g += '\x1f';
  }
  return g;
}

inline double score(const std::vector<std::vector<std::string>>& hyps,
                    const std::vector<std::vector<std::string>>& refs, bool smooth = false) {
  long long hyp_len = 0, ref_len = 0;
  double log_p_sum = 0.0;
  bool zero = false;
  for (int n = 1; n <= 4; ++n) {
    long long matched = 0, total = 0;
    for (size_t s = 0; s < hyps.size(); ++s) {
      const auto& hyp = hyps[s];
      const auto& ref = refs[s];
      if (n == 1) {
        hyp_len += static_cast<long long>(hyp.size());
        ref_len += static_cast<long long>(ref.size());
      }
      if (static_cast<int>(hyp.size()) < n) continue;
      total += static_cast<long long>(hyp.size()) - n + 1;
      std::unordered_map<std::string, long long> ref_counts;
      if (static_cast<int>(ref.size()) >= n) {
        for (size_t i = 0; i + static_cast<size_t>(n) <= ref.size(); ++i) {
          ref_counts[join_gram(ref, i, n)] += 1;
        }
      }
      std::unordered_map<std::string, long long> used;
      for (size_t i = 0; i + static_cast<size_t>(n) <= hyp.size(); ++i) {
        std::string g = join_gram(hyp, i, n);
        auto it = ref_counts.find(g);
        if (it != ref_counts.end() && used[g] < it->second) {
          used[g] += 1;
          matched += 1;
        }
      }
    }
    double p = total > 0 ? static_cast<double>(matched) / static_cast<double>(total) : 0.0;
    if (p == 0.0) {
      if (smooth) {
        p = 1e-9;
      } else {
        zero = true;
      }
    }
    if (!zero) log_p_sum += std::log(p);
  }
  if (hyp_len == 0 || zero) return 0.0;
  double bp = hyp_len < ref_len
                  ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                  : 1.0;
  return 100.0 * bp * std::exp(log_p_sum / 4.0);
}

}  // namespace naive_bleu
