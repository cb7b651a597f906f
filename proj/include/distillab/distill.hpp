// SPDX-License-Identifier: Apache-2.0
//
// Distillation losses and the learnable gate.
//
//   token level:    L = -sum_j sum_{y in V} P_t(y|x) log P_s(y|x)
//   sentence level: L = -log P_s(yhat|x), yhat = teacher beam output
//   gate:           g(x) = sigmoid(z(x))
//   hybrid:         L = g(x) * L_token + (1 - g(x)) * L_sentence
//
// Both losses are normalized per masked position before mixing so the
// gate responds to relative difficulty rather than raw magnitudes. No
// gradient is detached anywhere: the gate parameters, and in pooled mode
// the encoder states feeding it, all train jointly.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "distillab/common.hpp"
#include "distillab/corpus.hpp"
#include "distillab/decoder.hpp"
#include "distillab/model.hpp"
#include "distillab/tensor.hpp"

namespace distillab {

template <class S>
struct TeacherSignalsT {
  // teacher beam outputs per batch row, each ending with EOS
  std::vector<std::vector<int32_t>> pseudo_targets;
  // (B, m, V) rows aligned to gold label positions; every non-pad row
  // sums to 1 (over the top-k support after renormalization)
  TensorT<S> dists;
  int64_t positions = 0;
};

using TeacherSignals = TeacherSignalsT<float>;

namespace detail {

// keep the k largest entries of each row and renormalize
template <class S>
void topk_renormalize(std::vector<S>& row, int64_t k) {
  const int64_t v = static_cast<int64_t>(row.size());
  if (k >= v) return;
  std::vector<int64_t> idx(static_cast<size_t>(v));
  std::iota(idx.begin(), idx.end(), 0);
  std::nth_element(idx.begin(), idx.begin() + k, idx.end(),
                   [&](int64_t a, int64_t b) { return row[static_cast<size_t>(a)] > row[static_cast<size_t>(b)]; });
  std::vector<S> kept(static_cast<size_t>(v), S(0));
  S total = 0;
  for (int64_t i = 0; i < k; ++i) {
    kept[static_cast<size_t>(idx[static_cast<size_t>(i)])] = row[static_cast<size_t>(idx[static_cast<size_t>(i)])];
    total += row[static_cast<size_t>(idx[static_cast<size_t>(i)])];
  }
  for (auto& x : kept) x /= total;
  row = std::move(kept);
}

}  // namespace detail

// Teacher-forced distributions on the gold prefix plus beam-searched
// pseudo-targets for each batch row. top_k < V truncates and
// renormalizes each row.
template <class S>
TeacherSignalsT<S> extract_teacher_signals(TransformerT<S>& teacher, const Batch& batch,
                                           const BeamConfig& beam_cfg, int64_t top_k) {
  detail::require_eval(teacher.training(), "extract_teacher_signals");
  if (top_k < 1) throw ConfigError("extract_teacher_signals: top_k must be >= 1");
  const int64_t v = teacher.config().vocab_size;
  NoGradGuard ng;

  TeacherSignalsT<S> sig;
  sig.positions = batch.tgt_in.cols;

  TensorT<S> enc = teacher.encode(batch.src, batch.src_pad);
  TensorT<S> probs = softmax(teacher.decode(batch.tgt_in, enc, batch.src_pad, batch.tgt_pad));
  std::vector<S> rows = probs.values();
  const int64_t b = batch.rows(), m = sig.positions;
  for (int64_t r = 0; r < b * m; ++r) {
    std::vector<S> row(rows.begin() + r * v, rows.begin() + (r + 1) * v);
    detail::topk_renormalize(row, top_k);
    std::copy(row.begin(), row.end(), rows.begin() + r * v);
  }
  sig.dists = TensorT<S>::from({b, m, v}, std::move(rows));

  for (int64_t r = 0; r < b; ++r) {
    std::vector<int32_t> src;
    for (int64_t j = 0; j < batch.src.cols; ++j) {
      if (!batch.src_pad.v[static_cast<size_t>(r * batch.src.cols + j)]) {
        src.push_back(batch.src.at(r, j));
      }
    }
    std::vector<int32_t> hyp = beam_search(teacher, src, beam_cfg);
    // an unfinished fallback hypothesis carries no EOS; normalize here so
    // downstream consumers can rely on the terminator
    if (hyp.empty() || hyp.back() != Vocab::kEos) hyp.push_back(Vocab::kEos);
    sig.pseudo_targets.push_back(std::move(hyp));
  }
  return sig;
}

namespace detail {

template <class S>
void check_teacher_rows(const TensorT<S>& dists, const ByteMask& label_pad) {
  const int64_t v = dists.shape().back();
  const int64_t rows = dists.numel() / v;
  for (int64_t r = 0; r < rows; ++r) {
    if (label_pad.v[static_cast<size_t>(r)]) continue;
    double s = 0;
    for (int64_t j = 0; j < v; ++j) s += dists.values()[static_cast<size_t>(r * v + j)];
    if (std::abs(s - 1.0) > 1e-4) {
      throw ValueError("token_level_loss: teacher row " + std::to_string(r) +
                       " sums to " + std::to_string(s));
    }
  }
}

inline std::vector<int64_t> masked_counts_per_row(const ByteMask& pad, int64_t b, int64_t m) {
  std::vector<int64_t> counts(static_cast<size_t>(b), 0);
  for (int64_t r = 0; r < b; ++r) {
    for (int64_t j = 0; j < m; ++j) {
      if (!pad.v[static_cast<size_t>(r * m + j)]) ++counts[static_cast<size_t>(r)];
    }
  }
  return counts;
}

// label pad runs must be trailing; an interior PAD means a malformed
// pseudo-target
inline void check_no_interior_pad(const IdMatrix& labels) {
  for (int64_t r = 0; r < labels.rows; ++r) {
    bool pad_seen = false;
    for (int64_t j = 0; j < labels.cols; ++j) {
      if (labels.at(r, j) == Vocab::kPad) {
        pad_seen = true;
      } else if (pad_seen) {
        throw ValueError("sentence_level_loss: interior PAD in target row " + std::to_string(r));
      }
    }
  }
}

// (B,m,V) weight tensor: rows_weight[b,j] spread across V
template <class S>
TensorT<S> expand_row_weights(const std::vector<S>& row_w, int64_t b, int64_t m, int64_t v) {
  std::vector<S> w(static_cast<size_t>(b * m * v));
  for (int64_t r = 0; r < b * m; ++r) {
    std::fill(w.begin() + r * v, w.begin() + (r + 1) * v, row_w[static_cast<size_t>(r)]);
  }
  return TensorT<S>::from({b, m, v}, std::move(w));
}

// shared core: loss contributions = weights . (dists * logp); returns
// either the global scalar or the per-sequence (B,1) reduction
template <class S>
TensorT<S> weighted_cross_sum(const TensorT<S>& logp, const TensorT<S>& weights, bool per_seq) {
  TensorT<S> prod = mul(logp, weights);
  if (!per_seq) return scale(sum(prod), S(-1));
  const int64_t b = logp.dim(0);
  const int64_t cols = logp.dim(1) * logp.dim(2);
  TensorT<S> ones_col = TensorT<S>::ones({cols, 1});
  return scale(matmul(reshape(prod, {b, cols}), ones_col), S(-1));
}

}  // namespace detail

// Eq. 2 as a batch scalar: full-distribution cross-entropy against the
// teacher, summed over masked positions and vocabulary, divided by the
// masked-position count. Differentiable w.r.t. the student only (the
// teacher rows enter as constants).
template <class S>
TensorT<S> token_level_loss(const TensorT<S>& student_log_probs, const TensorT<S>& teacher_dists,
                            const ByteMask& label_pad) {
  if (student_log_probs.shape() != teacher_dists.shape()) {
    throw ShapeError("token_level_loss: student " + shape_str(student_log_probs.shape()) +
                     " vs teacher " + shape_str(teacher_dists.shape()));
  }
  detail::check_teacher_rows(teacher_dists, label_pad);
  const int64_t b = student_log_probs.dim(0), m = student_log_probs.dim(1),
                v = student_log_probs.dim(2);
  int64_t count = 0;
  for (uint8_t p : label_pad.v) count += p == 0 ? 1 : 0;
  if (count == 0) throw ValueError("token_level_loss: no unmasked positions");
  std::vector<S> row_w(static_cast<size_t>(b * m));
  for (int64_t r = 0; r < b * m; ++r) {
    row_w[static_cast<size_t>(r)] = label_pad.v[static_cast<size_t>(r)] ? S(0) : S(1) / static_cast<S>(count);
  }
  TensorT<S> w = mul(detail::expand_row_weights(row_w, b, m, v), teacher_dists);
  return detail::weighted_cross_sum(student_log_probs, w, /*per_seq=*/false);
}

// Per-sequence variant, each row normalized by its own masked count;
// feeds the gated combination.
template <class S>
TensorT<S> token_level_loss_per_seq(const TensorT<S>& student_log_probs,
                                    const TensorT<S>& teacher_dists, const ByteMask& label_pad) {
  if (student_log_probs.shape() != teacher_dists.shape()) {
    throw ShapeError("token_level_loss: student " + shape_str(student_log_probs.shape()) +
                     " vs teacher " + shape_str(teacher_dists.shape()));
  }
  detail::check_teacher_rows(teacher_dists, label_pad);
  const int64_t b = student_log_probs.dim(0), m = student_log_probs.dim(1),
                v = student_log_probs.dim(2);
  std::vector<int64_t> counts = detail::masked_counts_per_row(label_pad, b, m);
  std::vector<S> row_w(static_cast<size_t>(b * m));
  for (int64_t r = 0; r < b; ++r) {
    if (counts[static_cast<size_t>(r)] == 0) {
      throw ValueError("token_level_loss: sequence " + std::to_string(r) + " fully masked");
    }
    for (int64_t j = 0; j < m; ++j) {
      row_w[static_cast<size_t>(r * m + j)] =
          label_pad.v[static_cast<size_t>(r * m + j)] ? S(0)
                                                      : S(1) / static_cast<S>(counts[static_cast<size_t>(r)]);
    }
  }
  TensorT<S> w = mul(detail::expand_row_weights(row_w, b, m, v), teacher_dists);
  return detail::weighted_cross_sum(student_log_probs, w, /*per_seq=*/true);
}

// Eq. 3: negative log-likelihood of the pseudo-target under the student,
// per masked position.
template <class S>
TensorT<S> sentence_level_loss(const TensorT<S>& student_log_probs, const IdMatrix& labels,
                               const ByteMask& label_pad) {
  detail::check_no_interior_pad(labels);
  const int64_t b = student_log_probs.dim(0), m = student_log_probs.dim(1),
                v = student_log_probs.dim(2);
  if (labels.rows != b || labels.cols != m) {
    throw ShapeError("sentence_level_loss: labels (" + std::to_string(labels.rows) + "," +
                     std::to_string(labels.cols) + ") vs log-probs " +
                     shape_str(student_log_probs.shape()));
  }
  int64_t count = 0;
  for (uint8_t p : label_pad.v) count += p == 0 ? 1 : 0;
  if (count == 0) throw ValueError("sentence_level_loss: no unmasked positions");
  std::vector<S> w(static_cast<size_t>(b * m * v), S(0));
  for (int64_t r = 0; r < b * m; ++r) {
    if (label_pad.v[static_cast<size_t>(r)]) continue;
    int32_t id = labels.v[static_cast<size_t>(r)];
    w[static_cast<size_t>(r * v + id)] = S(1) / static_cast<S>(count);
  }
  return detail::weighted_cross_sum(student_log_probs, TensorT<S>::from({b, m, v}, std::move(w)),
                                    /*per_seq=*/false);
}

template <class S>
TensorT<S> sentence_level_loss_per_seq(const TensorT<S>& student_log_probs, const IdMatrix& labels,
                                       const ByteMask& label_pad) {
  detail::check_no_interior_pad(labels);
  const int64_t b = student_log_probs.dim(0), m = student_log_probs.dim(1),
                v = student_log_probs.dim(2);
  if (labels.rows != b || labels.cols != m) {
    throw ShapeError("sentence_level_loss: labels (" + std::to_string(labels.rows) + "," +
                     std::to_string(labels.cols) + ") vs log-probs " +
                     shape_str(student_log_probs.shape()));
  }
  std::vector<int64_t> counts = detail::masked_counts_per_row(label_pad, b, m);
  std::vector<S> w(static_cast<size_t>(b * m * v), S(0));
  for (int64_t r = 0; r < b; ++r) {
    if (counts[static_cast<size_t>(r)] == 0) {
      throw ValueError("sentence_level_loss: sequence " + std::to_string(r) + " fully masked");
    }
    for (int64_t j = 0; j < m; ++j) {
      if (label_pad.v[static_cast<size_t>(r * m + j)]) continue;
      int32_t id = labels.at(r, j);
      w[static_cast<size_t>((r * m + j) * v + id)] = S(1) / static_cast<S>(counts[static_cast<size_t>(r)]);
    }
  }
  return detail::weighted_cross_sum(student_log_probs, TensorT<S>::from({b, m, v}, std::move(w)),
                                    /*per_seq=*/true);
}

// ---------------------------------------------------------------------------
// Gate (Eq. 1)
// ---------------------------------------------------------------------------

enum class GateMode { scalar, pooled_linear };

inline const char* gate_mode_name(GateMode m) {
  return m == GateMode::scalar ? "scalar" : "pooled-linear";
}

inline GateMode gate_mode_from_name(const std::string& n) {
  if (n == "scalar") return GateMode::scalar;
  if (n == "pooled-linear") return GateMode::pooled_linear;
  throw ConfigError("unknown gate mode '" + n + "'");
}

// z(x) parameterization. Scalar mode holds one logit z0 shared by every
// sequence; pooled-linear computes z = w . meanpool(enc states) + b per
// sequence. Initialization puts the initial gate near 0.72.
template <class S>
struct GateStateT {
  GateMode mode = GateMode::scalar;
  TensorT<S> z0;  // (1,1), scalar mode
  TensorT<S> w;   // (d,1), pooled-linear
  TensorT<S> b;   // (1,),  pooled-linear
  double last_epoch_mean_g = 0.0;

  static GateStateT scalar_init(double z = 0.9445) {
    GateStateT g;
    g.mode = GateMode::scalar;
    g.z0 = TensorT<S>::full({1, 1}, static_cast<S>(z));
    g.z0.set_requires_grad(true);
    return g;
  }

  static GateStateT pooled_init(int64_t d_model, double bias = 0.9445) {
    GateStateT g;
    g.mode = GateMode::pooled_linear;
    g.w = TensorT<S>::zeros({d_model, 1});
    g.w.set_requires_grad(true);
    g.b = TensorT<S>::full({1}, static_cast<S>(bias));
    g.b.set_requires_grad(true);
    return g;
  }

  std::vector<std::pair<std::string, TensorT<S>>> parameters() {
    if (mode == GateMode::scalar) return {{"gate.z0", z0}};
    return {{"gate.w", w}, {"gate.b", b}};
  }
};

using GateState = GateStateT<float>;

// Mean over non-pad source positions of the encoder states: (B,S,d) ->
// (B,d), differentiable through the states.
template <class S>
TensorT<S> masked_mean_pool(const TensorT<S>& enc_states, const ByteMask& src_pad) {
  const int64_t b = enc_states.dim(0), s = enc_states.dim(1);
  std::vector<S> w(static_cast<size_t>(b * s), S(0));
  for (int64_t r = 0; r < b; ++r) {
    int64_t count = 0;
    for (int64_t j = 0; j < s; ++j) {
      if (!src_pad.v[static_cast<size_t>(r * s + j)]) ++count;
    }
    if (count == 0) throw ValueError("masked_mean_pool: fully padded sequence " + std::to_string(r));
    for (int64_t j = 0; j < s; ++j) {
      if (!src_pad.v[static_cast<size_t>(r * s + j)]) {
        w[static_cast<size_t>(r * s + j)] = S(1) / static_cast<S>(count);
      }
    }
  }
  TensorT<S> weights = TensorT<S>::from({b, s, 1}, std::move(w));
  return reshape(matmul(transpose(enc_states), weights), {b, enc_states.dim(2)});
}

// g values per sequence, shape (B,1), each in (0,1), on the autodiff
// graph of the gate parameters (and the pooled summary, in pooled mode).
template <class S>
TensorT<S> gate(GateStateT<S>& state, const TensorT<S>& pooled_summary, int64_t batch_size) {
  if (state.mode == GateMode::scalar) {
    TensorT<S> ones_col = TensorT<S>::ones({batch_size, 1});
    return sigmoid(matmul(ones_col, state.z0));
  }
  if (!pooled_summary.defined()) {
    throw ValueError("gate: pooled-linear mode needs the encoder summary");
  }
  return sigmoid(add(matmul(pooled_summary, state.w), state.b));
}

// Eq. 4: convex combination per sequence, averaged over the batch. g and
// the two losses must share a shape ((B,1) vectors or (1,1) scalars);
// gradients flow into the gate and both loss paths.
template <class S>
TensorT<S> hybrid_loss(const TensorT<S>& g, const TensorT<S>& loss_token,
                       const TensorT<S>& loss_sentence) {
  if (g.shape() != loss_token.shape() || g.shape() != loss_sentence.shape()) {
    throw ShapeError("hybrid_loss: shapes disagree, g " + shape_str(g.shape()) + ", token " +
                     shape_str(loss_token.shape()) + ", sentence " +
                     shape_str(loss_sentence.shape()));
  }
  TensorT<S> one_minus_g = add(TensorT<S>::ones(g.shape()), scale(g, S(-1)));
  return mean(add(mul(g, loss_token), mul(one_minus_g, loss_sentence)));
}

// ---------------------------------------------------------------------------
// Gate trace (Fig. 2-style diagnostics)
// ---------------------------------------------------------------------------

struct GateTraceRow {
  int64_t epoch = 0;
  double mean_g = 0.0;
  double train_loss = 0.0;
  double dev_bleu = 0.0;
};

inline void write_gate_trace_csv(const std::string& path, const std::vector<GateTraceRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "epoch,mean_g,train_loss,dev_bleu\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.6f,%.6f,%.6f\n", static_cast<long long>(r.epoch),
                  r.mean_g, r.train_loss, r.dev_bleu);
    out << buf;
  }
}

inline std::vector<GateTraceRow> read_gate_trace_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,mean_g,train_loss,dev_bleu") {
    throw FormatError("gate trace: bad header in " + path);
  }
  std::vector<GateTraceRow> rows;
  while (std::getline(in, line)) {
    GateTraceRow r;
    if (std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", reinterpret_cast<long long*>(&r.epoch),
                    &r.mean_g, &r.train_loss, &r.dev_bleu) != 4) {
      throw FormatError("gate trace: bad row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace distillab
