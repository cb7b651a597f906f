// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include <gtest/gtest.h>

#include "distillab/distill.hpp"

using namespace distillab;

namespace {

// random normalized teacher rows over (b, m, v)
TensorD random_dists(Rng& rng, int64_t b, int64_t m, int64_t v) {
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> d(static_cast<size_t>(b * m * v));
  for (int64_t r = 0; r < b * m; ++r) {
    double s = 0;
    for (int64_t j = 0; j < v; ++j) {
      d[static_cast<size_t>(r * v + j)] = u(rng);
      s += d[static_cast<size_t>(r * v + j)];
    }
    for (int64_t j = 0; j < v; ++j) d[static_cast<size_t>(r * v + j)] /= s;
  }
  return TensorD::from({b, m, v}, std::move(d));
}

TensorD random_log_probs(Rng& rng, int64_t b, int64_t m, int64_t v, bool with_grad = false) {
  TensorD logits = TensorD::uniform({b, m, v}, rng, -2, 2);
  logits.set_requires_grad(with_grad);
  return log_softmax(logits);
}

Transformer tiny_teacher(uint64_t seed, int64_t vocab = 12) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 16;
  c.dropout_p = 0.0;
  c.max_len = 20;
  Transformer m(c, seed);
  m.set_train(false);
  return m;
}

Batch small_batch(int64_t vocab = 12) {
  ParallelCorpus c;
  c.vocab = Vocab::synthetic(vocab);
  c.pairs.push_back({{4, 5, 6}, {5, 6}});
  c.pairs.push_back({{7, 8}, {8, 9, 10}});
  return batchify(c, 1000, 1)[0];
}

}  // namespace

TEST(TeacherSignals, FullTopKEqualsSoftmaxRows) {
  Transformer t = tiny_teacher(3);
  Batch b = small_batch();
  BeamConfig beam;
  beam.max_len = 8;
  auto sig = extract_teacher_signals(t, b, beam, /*top_k=*/12);
  NoGradGuard ng;
  Tensor enc = t.encode(b.src, b.src_pad);
  Tensor probs = softmax(t.decode(b.tgt_in, enc, b.src_pad, b.tgt_pad));
  ASSERT_EQ(sig.dists.shape(), probs.shape());
  for (size_t i = 0; i < probs.values().size(); ++i) {
    EXPECT_FLOAT_EQ(sig.dists.values()[i], probs.values()[i]);
  }
}

TEST(TeacherSignals, TopOneIsArgmaxOneHot) {
  Transformer t = tiny_teacher(5);
  Batch b = small_batch();
  BeamConfig beam;
  beam.max_len = 8;
  auto full = extract_teacher_signals(t, b, beam, 12);
  auto one = extract_teacher_signals(t, b, beam, 1);
  const int64_t v = 12;
  const int64_t rows = one.dists.numel() / v;
  for (int64_t r = 0; r < rows; ++r) {
    auto fb = full.dists.values().begin() + r * v;
    int64_t argmax = std::max_element(fb, fb + v) - fb;
    for (int64_t j = 0; j < v; ++j) {
      float want = j == argmax ? 1.0f : 0.0f;
      ASSERT_FLOAT_EQ(one.dists.values()[static_cast<size_t>(r * v + j)], want) << r << "," << j;
    }
  }
}

TEST(TeacherSignals, TopKRowsNormalizedAndKeepLargest) {
  Transformer t = tiny_teacher(9);
  Batch b = small_batch();
  BeamConfig beam;
  beam.max_len = 8;
  const int64_t k = 4, v = 12;
  auto full = extract_teacher_signals(t, b, beam, v);
  auto trunc = extract_teacher_signals(t, b, beam, k);
  const int64_t rows = trunc.dists.numel() / v;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    std::vector<std::pair<float, int64_t>> ranked;
    std::set<int64_t> support;
    for (int64_t j = 0; j < v; ++j) {
      float p = trunc.dists.values()[static_cast<size_t>(r * v + j)];
      s += p;
      if (p > 0) support.insert(j);
      ranked.push_back({full.dists.values()[static_cast<size_t>(r * v + j)], j});
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
    ASSERT_EQ(support.size(), static_cast<size_t>(k));
    // sort oracle: the support must be the k largest full-softmax entries
    std::sort(ranked.begin(), ranked.end(), [](auto& a, auto& b2) { return a.first > b2.first; });
    for (int64_t i = 0; i < k; ++i) EXPECT_TRUE(support.count(ranked[static_cast<size_t>(i)].second));
  }
}

TEST(TeacherSignals, PseudoTargetsEndWithEos) {
  Transformer t = tiny_teacher(11);
  Batch b = small_batch();
  BeamConfig beam;
  beam.max_len = 6;
  auto sig = extract_teacher_signals(t, b, beam, 12);
  ASSERT_EQ(sig.pseudo_targets.size(), 2u);
  for (const auto& y : sig.pseudo_targets) {
    ASSERT_FALSE(y.empty());
    EXPECT_EQ(y.back(), Vocab::kEos);
    EXPECT_LE(static_cast<int64_t>(y.size()), beam.max_len + 1);
  }
}

TEST(TokenLoss, EqualsTeacherEntropyAtEquality) {
  Rng rng(21);
  const int64_t b = 2, m = 3, v = 6;
  TensorD pt = random_dists(rng, b, m, v);
  TensorD logp = log(pt);  // P_s == P_t
  ByteMask pad(Shape{b, m}, 0);
  double loss = token_level_loss(logp, pt, pad).item();
  double entropy = 0;
  for (int64_t r = 0; r < b * m; ++r) {
    for (int64_t j = 0; j < v; ++j) {
      double p = pt.values()[static_cast<size_t>(r * v + j)];
      entropy -= p * std::log(p);
    }
  }
  entropy /= static_cast<double>(b * m);
  EXPECT_NEAR(loss, entropy, 1e-9);
}

TEST(TokenLoss, OneHotTeacherGivesNegLogProb) {
  const int64_t v = 5;
  std::vector<double> row(v, 0.0);
  row[2] = 1.0;
  TensorD pt = TensorD::from({1, 1, v}, row);
  Rng rng(4);
  TensorD logp = random_log_probs(rng, 1, 1, v);
  ByteMask pad(Shape{1, 1}, 0);
  double loss = token_level_loss(logp, pt, pad).item();
  EXPECT_NEAR(loss, -logp.values()[2], 1e-12);
}

TEST(TokenLoss, MatchesBruteForceDoubleSummation) {
  Rng rng(20240601);
  const int64_t b = 4, m = 5, v = 11;
  for (int trial = 0; trial < 10; ++trial) {
    TensorD pt = random_dists(rng, b, m, v);
    TensorD logp = random_log_probs(rng, b, m, v);
    ByteMask pad(Shape{b, m}, 0);
    std::uniform_int_distribution<int> coin(0, 3);
    for (int64_t r = 0; r < b; ++r) {
      for (int64_t j = 1; j < m; ++j) {  // keep position 0 unmasked
        pad.v[static_cast<size_t>(r * m + j)] = coin(rng) == 0 ? 1 : 0;
      }
    }
    double mine = token_level_loss(logp, pt, pad).item();
    // independent double loop over positions and vocabulary
    double total = 0;
    int64_t count = 0;
    for (int64_t r = 0; r < b * m; ++r) {
      if (pad.v[static_cast<size_t>(r)]) continue;
      ++count;
      for (int64_t y = 0; y < v; ++y) {
        total += pt.values()[static_cast<size_t>(r * v + y)] *
                 logp.values()[static_cast<size_t>(r * v + y)];
      }
    }
    double want = -total / static_cast<double>(count);
    ASSERT_NEAR(mine, want, 1e-9) << "trial " << trial;
  }
}

TEST(TokenLoss, UnnormalizedTeacherRowRejected) {
  Rng rng(9);
  TensorD logp = random_log_probs(rng, 1, 1, 4);
  TensorD bad = TensorD::from({1, 1, 4}, {0.4, 0.4, 0.4, 0.4});
  ByteMask pad(Shape{1, 1}, 0);
  EXPECT_THROW(token_level_loss(logp, bad, pad), ValueError);
}

TEST(TokenLoss, GibbsInequalityOnRandomDistributions) {
  Rng rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t v = 7;
    TensorD pt = random_dists(rng, 1, 4, v);
    TensorD logp = random_log_probs(rng, 1, 4, v);
    ByteMask pad(Shape{1, 4}, 0);
    double loss = token_level_loss(logp, pt, pad).item();
    double entropy = 0;
    for (int64_t r = 0; r < 4; ++r) {
      for (int64_t j = 0; j < v; ++j) {
        double p = pt.values()[static_cast<size_t>(r * v + j)];
        entropy -= p * std::log(p);
      }
    }
    entropy /= 4.0;
    EXPECT_GE(loss, entropy - 1e-9);
  }
}

TEST(SentenceLoss, PerfectStudentScoresZero) {
  const int64_t v = 6;
  // log prob 0 (prob 1) at the label everywhere
  std::vector<double> lp(static_cast<size_t>(2 * v), -40.0);
  IdMatrix labels(1, 2);
  labels.at(0, 0) = 4;
  labels.at(0, 1) = 2;
  lp[4] = 0.0;
  lp[static_cast<size_t>(v + 2)] = 0.0;
  TensorD logp = TensorD::from({1, 2, v}, lp);
  ByteMask pad(Shape{1, 2}, 0);
  EXPECT_NEAR(sentence_level_loss(logp, labels, pad).item(), 0.0, 1e-12);
}

TEST(SentenceLoss, UniformStudentScoresLogV) {
  const int64_t v = 8;
  TensorD logits = TensorD::zeros({1, 3, v});
  TensorD logp = log_softmax(logits);
  IdMatrix labels(1, 3, 4);
  ByteMask pad(Shape{1, 3}, 0);
  EXPECT_NEAR(sentence_level_loss(logp, labels, pad).item(), std::log(static_cast<double>(v)),
              1e-12);
}

TEST(SentenceLoss, MatchesIndexAndSumOracle) {
  Rng rng(55);
  const int64_t b = 3, m = 4, v = 9;
  TensorD logp = random_log_probs(rng, b, m, v);
  IdMatrix labels(b, m);
  ByteMask pad(Shape{b, m}, 0);
  std::uniform_int_distribution<int32_t> utok(4, static_cast<int32_t>(v - 1));
  for (int64_t r = 0; r < b; ++r) {
    for (int64_t j = 0; j < m; ++j) labels.at(r, j) = utok(rng);
  }
  pad.v[3] = 1;  // mask one position
  labels.v[3] = Vocab::kPad;
  double got = sentence_level_loss(logp, labels, pad).item();
  double total = 0;
  int64_t count = 0;
  for (int64_t r = 0; r < b * m; ++r) {
    if (pad.v[static_cast<size_t>(r)]) continue;
    ++count;
    total += logp.values()[static_cast<size_t>(r * v + labels.v[static_cast<size_t>(r)])];
  }
  EXPECT_NEAR(got, -total / static_cast<double>(count), 1e-9);
}

TEST(SentenceLoss, InteriorPadRejected) {
  Rng rng(66);
  TensorD logp = random_log_probs(rng, 1, 3, 5);
  IdMatrix labels(1, 3);
  labels.at(0, 0) = 4;
  labels.at(0, 1) = Vocab::kPad;
  labels.at(0, 2) = 4;
  ByteMask pad(Shape{1, 3}, 0);
  EXPECT_THROW(sentence_level_loss(logp, labels, pad), ValueError);
}

TEST(Gate, ScalarZeroGivesHalfEverywhere) {
  auto g = GateStateT<double>::scalar_init(0.0);
  TensorD none;
  TensorD out = gate(g, none, 4);
  Shape want{4, 1};
  ASSERT_EQ(out.shape(), want);
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Gate, PooledWithZeroWeightsReducesToScalar) {
  auto g = GateStateT<double>::pooled_init(6, /*bias=*/0.3);
  Rng rng(8);
  TensorD summary = TensorD::uniform({3, 6}, rng, -2, 2);
  TensorD out = gate(g, summary, 3);
  double want = 1.0 / (1.0 + std::exp(-0.3));
  for (double v : out.values()) EXPECT_NEAR(v, want, 1e-12);
}

TEST(Gate, DefaultInitStartsNearPaperValue) {
  auto g = GateStateT<double>::scalar_init();
  TensorD none;
  EXPECT_NEAR(gate(g, none, 1).item(), 0.72, 5e-4);
  auto p = GateStateT<double>::pooled_init(8);
  Rng rng(2);
  TensorD summary = TensorD::uniform({2, 8}, rng, -1, 1);
  TensorD gp = gate(p, summary, 2);
  for (double v : gp.values()) EXPECT_NEAR(v, 0.72, 5e-4);
}

TEST(Gate, PooledSummaryMatchesHandMean) {
  Rng rng(14);
  TensorD states = TensorD::uniform({2, 3, 4}, rng, -1, 1);
  ByteMask pad(Shape{2, 3}, 0);
  pad.v[5] = 1;  // row 1, position 2 padded
  TensorD pooled = masked_mean_pool(states, pad);
  for (int64_t c = 0; c < 4; ++c) {
    double want0 = (states.at({0, 0, c}) + states.at({0, 1, c}) + states.at({0, 2, c})) / 3.0;
    double want1 = (states.at({1, 0, c}) + states.at({1, 1, c})) / 2.0;
    EXPECT_NEAR(pooled.at({0, c}), want0, 1e-12);
    EXPECT_NEAR(pooled.at({1, c}), want1, 1e-12);
  }
}

TEST(Hybrid, BoundaryIdentities) {
  TensorD lt = TensorD::from({1, 1}, {2.0});
  TensorD ls = TensorD::from({1, 1}, {4.0});
  EXPECT_DOUBLE_EQ(hybrid_loss(TensorD::ones({1, 1}), lt, ls).item(), 2.0);
  EXPECT_DOUBLE_EQ(hybrid_loss(TensorD::zeros({1, 1}), lt, ls).item(), 4.0);
  EXPECT_DOUBLE_EQ(hybrid_loss(TensorD::full({1, 1}, 0.5), lt, ls).item(), 3.0);
}

TEST(Hybrid, ConvexCombinationBound) {
  Rng rng(91);
  std::uniform_real_distribution<double> ug(1e-6, 1.0 - 1e-6);
  std::uniform_real_distribution<double> ul(0.1, 5.0);
  for (int i = 0; i < 1000; ++i) {
    double lt = ul(rng), ls = ul(rng), gv = ug(rng);
    double l = hybrid_loss(TensorD::full({1, 1}, gv), TensorD::full({1, 1}, lt),
                           TensorD::full({1, 1}, ls))
                   .item();
    EXPECT_GE(l, std::min(lt, ls) - 1e-12);
    EXPECT_LE(l, std::max(lt, ls) + 1e-12);
  }
}

TEST(Hybrid, GateDirectionLaw) {
  // constant losses; the sign of the z0 update equals sign(Ls - Lt)
  for (auto [lt, ls] : {std::pair<double, double>{1.0, 2.0}, {2.0, 1.0}}) {
    auto gs = GateStateT<double>::scalar_init(0.0);
    TensorD none;
    TensorD g = gate(gs, none, 1);
    TensorD loss = hybrid_loss(g, TensorD::full({1, 1}, lt), TensorD::full({1, 1}, ls));
    loss.backward();
    double dz = -gs.z0.grad()[0];  // gradient-descent step direction
    if (ls > lt) {
      EXPECT_GT(dz, 0.0);
    } else {
      EXPECT_LT(dz, 0.0);
    }
  }
}

TEST(Hybrid, ScalarGateClimbsUnderConstantLosses) {
  // 1-D gradient-descent oracle for the Fig. 2 dynamic: Lt=1 < Ls=2
  // pushes g up monotonically
  auto gs = GateStateT<double>::scalar_init(0.9445);
  TensorD none;
  double prev_g = 0.0;
  const double lr = 1.0;
  for (int step = 0; step < 100; ++step) {
    gs.z0.zero_grad();
    TensorD g = gate(gs, none, 1);
    double gv = g.item();
    EXPECT_GT(gv, prev_g);
    prev_g = gv;
    TensorD loss = hybrid_loss(g, TensorD::full({1, 1}, 1.0), TensorD::full({1, 1}, 2.0));
    loss.backward();
    gs.z0.values_mutable()[0] -= lr * gs.z0.grad()[0];
  }
  TensorD g = gate(gs, none, 1);
  EXPECT_GT(g.item(), 0.95);
}

TEST(Hybrid, FrozenGateGradientsDecompose) {
  // with g frozen, student gradients equal g * grad(Lt) + (1-g) * grad(Ls)
  ModelConfig c;
  c.vocab_size = 10;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.d_ffn = 16;
  c.dropout_p = 0.0;
  c.max_len = 12;
  TransformerD model(c, 31);
  model.set_train(false);  // no dropout; grads still flow to parameters

  ParallelCorpus corpus;
  corpus.vocab = Vocab::synthetic(10);
  corpus.pairs.push_back({{4, 5, 6}, {5, 6, 7}});
  corpus.pairs.push_back({{6, 7, 8}, {7, 8, 9}});
  Batch b = batchify(corpus, 1000, 3)[0];

  Rng rng(77);
  TensorD dists = random_dists(rng, b.rows(), b.tgt_in.cols, 10);

  // pseudo-targets: reuse the label view (already EOS-terminated)
  const IdMatrix& pseudo = b.tgt_labels;

  auto forward_losses = [&]() {
    TensorD enc = model.encode(b.src, b.src_pad);
    TensorD logp = log_softmax(model.decode(b.tgt_in, enc, b.src_pad, b.tgt_pad));
    TensorD lt = token_level_loss_per_seq(logp, dists, b.tgt_pad);
    TensorD ls = sentence_level_loss_per_seq(logp, pseudo, b.tgt_pad);
    return std::make_pair(lt, ls);
  };

  const double gv = 0.7;
  auto [lt, ls] = forward_losses();
  TensorD g_frozen = TensorD::full({2, 1}, gv);  // not a parameter: frozen
  TensorD hybrid = hybrid_loss(g_frozen, lt, ls);
  hybrid.backward();
  auto collect = [&]() {
    std::map<std::string, std::vector<double>> grads;
    for (const auto& [name, t] : model.parameters()) {
      if (t.has_grad()) grads[name] = t.grad();
    }
    model.zero_grad();
    return grads;
  };
  auto hybrid_grads = collect();

  mean(lt).backward();
  auto token_grads = collect();
  mean(ls).backward();
  auto sent_grads = collect();

  for (auto& [name, gh] : hybrid_grads) {
    const auto& gt = token_grads[name];
    const auto& gs2 = sent_grads[name];
    ASSERT_EQ(gh.size(), gt.size());
    for (size_t i = 0; i < gh.size(); ++i) {
      double want = gv * gt[i] + (1 - gv) * gs2[i];
      double diff = std::abs(gh[i] - want);
      double denom = std::max({std::abs(want), std::abs(gh[i]), 1e-12});
      // near-zero gradients cancel catastrophically; fall back to an
      // absolute floor there
      ASSERT_TRUE(diff <= 1e-9 || diff / denom <= 1e-6)
          << name << "[" << i << "] hybrid " << gh[i] << " vs " << want;
    }
  }
}

TEST(GateTrace, CsvRoundTripAndRowCount) {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "distillab_trace_test";
  fs::create_directories(dir);
  std::vector<GateTraceRow> rows;
  for (int e = 1; e <= 5; ++e) {
    rows.push_back({e, 0.7 + 0.01 * e, 2.0 / e, 10.0 * e});
  }
  std::string path = (dir / "gate_trace.csv").string();
  write_gate_trace_csv(path, rows);
  auto back = read_gate_trace_csv(path);
  ASSERT_EQ(back.size(), rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].epoch, rows[i].epoch);
    EXPECT_NEAR(back[i].mean_g, rows[i].mean_g, 1e-6);
  }
  fs::remove_all(dir);
}
