// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "distillab/decoder.hpp"
#include "support/enum_decode.hpp"

using namespace distillab;

namespace {

// Random tiny model over a 5-token vocab; untrained weights give a
// nontrivial, deterministic distribution.
Transformer random_model(uint64_t seed, int64_t vocab = 5) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 16;
  c.dropout_p = 0.0;
  c.max_len = 16;
  Transformer m(c, seed);
  m.set_train(false);
  return m;
}

std::vector<int32_t> random_src(Rng& rng, int64_t vocab, int len) {
  std::uniform_int_distribution<int32_t> u(0, static_cast<int32_t>(vocab - 1));
  std::vector<int32_t> s(static_cast<size_t>(len));
  for (auto& t : s) t = u(rng);
  return s;
}

}  // namespace

TEST(BeamConfig, Validation) {
  BeamConfig bad;
  bad.width = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = BeamConfig{};
  bad.length_penalty = -0.5;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Decoders, RequireEvalMode) {
  Transformer m = random_model(1);
  m.set_train(true);
  BeamConfig cfg;
  EXPECT_THROW(greedy_decode(m, {4}, 8), ConfigError);
  EXPECT_THROW(beam_search(m, {4}, cfg), ConfigError);
  EXPECT_THROW(teacher_forced_predict(m, {4}, {4}), ConfigError);
}

TEST(Greedy, DeterministicAcrossRuns) {
  Transformer m = random_model(5);
  auto a = greedy_decode(m, {4, 3, 4}, 8);
  auto b = greedy_decode(m, {4, 3, 4}, 8);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.empty());
}

TEST(Greedy, EqualsBeamWidthOneTokenForToken) {
  Rng rng(17);
  for (int trial = 0; trial < 25; ++trial) {
    Transformer m = random_model(100 + static_cast<uint64_t>(trial));
    auto src = random_src(rng, 5, 3);
    BeamConfig cfg;
    cfg.width = 1;
    cfg.length_penalty = 0.0;
    cfg.max_len = 6;
    EXPECT_EQ(greedy_decode(m, src, 6), beam_search(m, src, cfg)) << "trial " << trial;
  }
}

TEST(Beam, SaturatingWidthMatchesExhaustiveEnumeration) {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Transformer m = random_model(300 + static_cast<uint64_t>(trial));
    auto src = random_src(rng, 5, 3);
    BeamConfig cfg;
    cfg.width = 700;  // > 5^4 reachable hypotheses
    cfg.length_penalty = (trial % 2) ? 0.6 : 0.0;
    cfg.max_len = 4;
    Hypothesis beam = beam_search_best(m, src, cfg);
    Hypothesis oracle = enum_decode::best_sequence(m, src, cfg);
    ASSERT_EQ(beam.tokens, oracle.tokens) << "trial " << trial;
    EXPECT_NEAR(beam.log_prob, oracle.log_prob, 1e-9);
  }
}

TEST(Beam, AlphaZeroIsPureLogProbRanking) {
  Transformer m = random_model(7);
  std::vector<int32_t> src{4, 4};
  BeamConfig cfg;
  cfg.width = 700;
  cfg.length_penalty = 0.0;
  cfg.max_len = 4;
  Hypothesis h = beam_search_best(m, src, cfg);
  // with alpha 0 the score IS the cumulative log-prob
  EXPECT_DOUBLE_EQ(h.score(0.0), h.log_prob);
  Hypothesis oracle = enum_decode::best_sequence(m, src, cfg);
  EXPECT_EQ(h.tokens, oracle.tokens);
}

TEST(Beam, ScoreConsistencyAgainstRecomputation) {
  Rng rng(41);
  for (int trial = 0; trial < 10; ++trial) {
    Transformer m = random_model(500 + static_cast<uint64_t>(trial));
    auto src = random_src(rng, 5, 3);
    BeamConfig cfg;
    cfg.width = 4;
    cfg.length_penalty = 0.6;
    cfg.max_len = 6;
    Hypothesis h = beam_search_best(m, src, cfg);
    double recomputed = sequence_log_prob(m, src, h.tokens);
    EXPECT_NEAR(recomputed, h.log_prob, 1e-6);
    double want_score = recomputed / std::pow(static_cast<double>(h.tokens.size()), 0.6);
    EXPECT_NEAR(h.score(0.6), want_score, 1e-6);
  }
}

TEST(Beam, WiderBeamNeverScoresWorse) {
  // the property concerns the finished regime (a returned unfinished
  // fallback is not comparable to a finished hypothesis), so scan seeds
  // and keep the first trials where every width finishes
  Rng rng(59);
  int qualifying = 0;
  for (uint64_t seed = 700; seed < 1400 && qualifying < 8; ++seed) {
    ModelConfig c;
    c.vocab_size = 5;
    c.d_model = 8;
    c.n_heads = 2;
    c.n_enc_layers = 1;
    c.n_dec_layers = 1;
    c.d_ffn = 16;
    c.dropout_p = 0.0;
    c.max_len = 32;
    Transformer m(c, seed);
    m.set_train(false);
    auto src = random_src(rng, 5, 3);
    std::vector<Hypothesis> results;
    bool all_finished = true;
    for (int64_t w : {1, 2, 4, 8, 32}) {
      BeamConfig cfg;
      cfg.width = w;
      cfg.length_penalty = 0.6;
      cfg.max_len = 14;
      results.push_back(beam_search_best(m, src, cfg));
      if (!results.back().finished) all_finished = false;
    }
    if (!all_finished) continue;
    ++qualifying;
    for (size_t i = 1; i < results.size(); ++i) {
      EXPECT_GE(results[i].score(0.6), results[i - 1].score(0.6) - 1e-12)
          << "seed " << seed << " step " << i;
    }
  }
  ASSERT_GE(qualifying, 5) << "not enough all-finished trials to exercise the property";
}

TEST(TeacherForced, OutputLengthEqualsGold) {
  Transformer m = random_model(3);
  std::vector<int32_t> gold{4, 3, 4, 4, 2};
  auto out = teacher_forced_predict(m, {4, 4}, gold);
  EXPECT_EQ(out.size(), gold.size());
}

TEST(TeacherForced, MatchesIncrementalLoop) {
  // batched causal forward == feeding gold prefixes one token at a time
  Rng rng(71);
  for (int trial = 0; trial < 10; ++trial) {
    Transformer m = random_model(900 + static_cast<uint64_t>(trial));
    auto src = random_src(rng, 5, 3);
    auto gold = random_src(rng, 5, 4);
    auto batched = teacher_forced_predict(m, src, gold);

    auto [enc, src_pad] = detail::encode_single(m, src);
    std::vector<int32_t> prefix{Vocab::kBos};
    std::vector<int32_t> stepwise;
    for (size_t j = 0; j < gold.size(); ++j) {
      auto logits = last_position_logits(m, enc, src_pad, prefix);
      stepwise.push_back(
          static_cast<int32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()));
      prefix.push_back(gold[j]);
    }
    ASSERT_EQ(batched, stepwise) << "trial " << trial;
  }
}

TEST(StripEos, OnlyTrailing) {
  std::vector<int32_t> ids{4, 2, 5, 2};
  auto out = strip_trailing_eos(ids);
  std::vector<int32_t> want{4, 2, 5};
  EXPECT_EQ(out, want);
}
