// SPDX-License-Identifier: Apache-2.0
//
// Inference procedures: greedy decoding, beam search with length
// penalty, and teacher-forced argmax prediction. All of them operate on
// an eval-mode model and never touch the autodiff graph.
//
// Beam scoring: cumulative log-prob divided by len^alpha, where len
// counts generated tokens including the closing EOS. Ties break by
// earlier finishing step, then lexicographically smaller token ids, so
// decoding is fully deterministic.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "distillab/common.hpp"
#include "distillab/corpus.hpp"
#include "distillab/model.hpp"

namespace distillab {

struct BeamConfig {
  int64_t width = 4;
  double length_penalty = 0.6;
  int64_t max_len = 64;

  void validate() const {
    if (width < 1) throw ConfigError("beam config: width must be >= 1");
    if (max_len < 1) throw ConfigError("beam config: max_len must be >= 1");
    if (length_penalty < 0.0) throw ConfigError("beam config: length penalty must be >= 0");
  }
};

struct Hypothesis {
  std::vector<int32_t> tokens;  // generated tokens; ends with EOS when finished
  double log_prob = 0.0;
  bool finished = false;
  int64_t finish_step = std::numeric_limits<int64_t>::max();

  double score(double alpha) const {
    double len = static_cast<double>(std::max<size_t>(tokens.size(), 1));
    return log_prob / std::pow(len, alpha);
  }
};

// score desc, then earlier finish, then lexicographic tokens
inline bool hypothesis_better(const Hypothesis& a, const Hypothesis& b, double alpha) {
  double sa = a.score(alpha), sb = b.score(alpha);
  if (sa != sb) return sa > sb;
  if (a.finish_step != b.finish_step) return a.finish_step < b.finish_step;
  return a.tokens < b.tokens;
}

namespace detail {

template <class S>
std::pair<TensorT<S>, ByteMask> encode_single(TransformerT<S>& model,
                                              const std::vector<int32_t>& src) {
  IdMatrix m(1, static_cast<int64_t>(src.size()));
  for (size_t i = 0; i < src.size(); ++i) m.at(0, static_cast<int64_t>(i)) = src[i];
  ByteMask pad(Shape{1, static_cast<int64_t>(src.size())}, 0);
  NoGradGuard ng;
  return {model.encode(m, pad), pad};
}

template <class S>
std::vector<double> log_probs_from_logits(const std::vector<S>& logits) {
  double m = -std::numeric_limits<double>::infinity();
  for (S x : logits) m = std::max(m, static_cast<double>(x));
  double sum = 0;
  for (S x : logits) sum += std::exp(static_cast<double>(x) - m);
  double lse = m + std::log(sum);
  std::vector<double> lp(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) lp[i] = static_cast<double>(logits[i]) - lse;
  return lp;
}

inline void require_eval(bool training, const char* where) {
  if (training) throw ConfigError(std::string(where) + ": model must be in eval mode");
}

}  // namespace detail

// Argmax continuation until EOS or max_len. Equals beam width 1 with the
// length penalty off, token for token.
template <class S>
std::vector<int32_t> greedy_decode(TransformerT<S>& model, const std::vector<int32_t>& src,
                                   int64_t max_len) {
  detail::require_eval(model.training(), "greedy_decode");
  auto [enc, src_pad] = detail::encode_single(model, src);
  std::vector<int32_t> out;
  std::vector<int32_t> prefix{Vocab::kBos};
  for (int64_t step = 0; step < max_len; ++step) {
    std::vector<S> logits = last_position_logits(model, enc, src_pad, prefix);
    auto arg = std::max_element(logits.begin(), logits.end());
    int32_t tok = static_cast<int32_t>(arg - logits.begin());
    out.push_back(tok);
    if (tok == Vocab::kEos) break;
    prefix.push_back(tok);
  }
  return out;
}

// Full beam state, exposed for the oracle tests; beam_search below returns
// only the winning token sequence.
template <class S>
Hypothesis beam_search_best(TransformerT<S>& model, const std::vector<int32_t>& src,
                            const BeamConfig& cfg) {
  cfg.validate();
  detail::require_eval(model.training(), "beam_search");
  auto [enc, src_pad] = detail::encode_single(model, src);
  const double alpha = cfg.length_penalty;

  std::vector<Hypothesis> active{Hypothesis{}};
  std::vector<Hypothesis> finished;

  for (int64_t step = 0; step < cfg.max_len; ++step) {
    struct Cand {
      double log_prob;
      size_t parent;
      int32_t token;
    };
    std::vector<Cand> cands;
    for (size_t h = 0; h < active.size(); ++h) {
      std::vector<int32_t> prefix{Vocab::kBos};
      prefix.insert(prefix.end(), active[h].tokens.begin(), active[h].tokens.end());
      std::vector<double> lp =
          detail::log_probs_from_logits(last_position_logits(model, enc, src_pad, prefix));
      for (size_t t = 0; t < lp.size(); ++t) {
        cands.push_back({active[h].log_prob + lp[t], h, static_cast<int32_t>(t)});
      }
    }
    // best first; ties resolve toward the lexicographically smaller
    // continuation so runs are reproducible
    std::sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (active[a.parent].tokens != active[b.parent].tokens) {
        return active[a.parent].tokens < active[b.parent].tokens;
      }
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    size_t taken = 0;
    for (const Cand& c : cands) {
      if (taken == static_cast<size_t>(cfg.width)) break;
      ++taken;
      Hypothesis h = active[c.parent];
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == Vocab::kEos) {
        h.finished = true;
        h.finish_step = step;
        finished.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
    if (active.empty()) break;
    if (finished.size() >= static_cast<size_t>(cfg.width)) break;
  }

  auto best = [&](const std::vector<Hypothesis>& hs) {
    const Hypothesis* b = &hs[0];
    for (const Hypothesis& h : hs) {
      if (hypothesis_better(h, *b, alpha)) b = &h;
    }
    return *b;
  };
  if (!finished.empty()) return best(finished);
  return best(active);  // nothing finished within max_len
}

template <class S>
std::vector<int32_t> beam_search(TransformerT<S>& model, const std::vector<int32_t>& src,
                                 const BeamConfig& cfg) {
  return beam_search_best(model, src, cfg).tokens;
}

// Per-position argmax under the gold prefix; output length equals the
// gold length by construction.
template <class S>
std::vector<int32_t> teacher_forced_predict(TransformerT<S>& model,
                                            const std::vector<int32_t>& src,
                                            const std::vector<int32_t>& gold) {
  detail::require_eval(model.training(), "teacher_forced_predict");
  if (gold.empty()) throw ValueError("teacher_forced_predict: empty gold target");
  auto [enc, src_pad] = detail::encode_single(model, src);
  NoGradGuard ng;
  const int64_t m = static_cast<int64_t>(gold.size());
  IdMatrix tgt_in(1, m);
  tgt_in.at(0, 0) = Vocab::kBos;
  for (int64_t j = 1; j < m; ++j) tgt_in.at(0, j) = gold[static_cast<size_t>(j - 1)];
  ByteMask tgt_pad(Shape{1, m}, 0);
  TensorT<S> logits = model.decode(tgt_in, enc, src_pad, tgt_pad);
  const int64_t v = model.config().vocab_size;
  std::vector<int32_t> out(static_cast<size_t>(m));
  for (int64_t j = 0; j < m; ++j) {
    auto begin = logits.values().begin() + j * v;
    out[static_cast<size_t>(j)] = static_cast<int32_t>(std::max_element(begin, begin + v) - begin);
  }
  return out;
}

// Cumulative log-prob of forcing `tokens` (stepwise, matching what the
// beam accumulates); used by the score-consistency checks.
template <class S>
double sequence_log_prob(TransformerT<S>& model, const std::vector<int32_t>& src,
                         const std::vector<int32_t>& tokens) {
  detail::require_eval(model.training(), "sequence_log_prob");
  auto [enc, src_pad] = detail::encode_single(model, src);
  std::vector<int32_t> prefix{Vocab::kBos};
  double total = 0;
  for (int32_t tok : tokens) {
    std::vector<double> lp =
        detail::log_probs_from_logits(last_position_logits(model, enc, src_pad, prefix));
    total += lp[static_cast<size_t>(tok)];
    prefix.push_back(tok);
  }
  return total;
}

// Drops one trailing EOS if present (for scoring decoded output).
inline std::vector<int32_t> strip_trailing_eos(std::vector<int32_t> ids) {
  if (!ids.empty() && ids.back() == Vocab::kEos) ids.pop_back();
  return ids;
}

}  // namespace distillab
