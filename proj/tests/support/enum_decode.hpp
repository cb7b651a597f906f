// SPDX-License-Identifier: Apache-2.0
//
// Exhaustive decoding oracle: enumerates every token sequence up to
// max_len, scores finished ones exactly like the beam does, and returns
// the argmax under the same tie-breaking. Tractable only for tiny
// vocabularies and lengths.

#pragma once

#include <vector>

#include "distillab/decoder.hpp"
#include "distillab/model.hpp"

namespace enum_decode {

using distillab::BeamConfig;
using distillab::Hypothesis;
using distillab::Vocab;

template <class S>
struct Enumerator {
  distillab::TransformerT<S>& model;
  distillab::TensorT<S> enc;
  distillab::ByteMask src_pad;
  const BeamConfig& cfg;
  Hypothesis best;
  bool have_best = false;

  void consider(const Hypothesis& h) {
    if (!have_best || distillab::hypothesis_better(h, best, cfg.length_penalty)) {
      best = h;
      have_best = true;
    }
  }

  void walk(std::vector<int32_t>& tokens, double log_prob, int64_t depth) {
    if (depth >= cfg.max_len) return;
    std::vector<int32_t> prefix{Vocab::kBos};
    prefix.insert(prefix.end(), tokens.begin(), tokens.end());
    std::vector<double> lp = distillab::detail::log_probs_from_logits(
        distillab::last_position_logits(model, enc, src_pad, prefix));
    for (size_t t = 0; t < lp.size(); ++t) {
      double nlp = log_prob + lp[t];
      if (static_cast<int32_t>(t) == Vocab::kEos) {
        Hypothesis h;
        h.tokens = tokens;
        h.tokens.push_back(Vocab::kEos);
        h.log_prob = nlp;
        h.finished = true;
        h.finish_step = depth;
        consider(h);
      } else {
        tokens.push_back(static_cast<int32_t>(t));
        walk(tokens, nlp, depth + 1);
        tokens.pop_back();
      }
    }
  }
};

template <class S>
Hypothesis best_sequence(distillab::TransformerT<S>& model, const std::vector<int32_t>& src,
                         const BeamConfig& cfg) {
  auto [enc, pad] = distillab::detail::encode_single(model, src);
  Enumerator<S> e{model, enc, pad, cfg, {}, false};
  std::vector<int32_t> tokens;
  e.walk(tokens, 0.0, 0);
  return e.best;
}

}  // namespace enum_decode
