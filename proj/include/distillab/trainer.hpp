// SPDX-License-Identifier: Apache-2.0
//
// Optimization loop: Adam with linear-warmup inverse-sqrt learning rate,
// gradient accumulation (averaged over the group), and the four training
// regimes: plain teacher training, token-level KD, sentence-level KD on
// precomputed pseudo-targets, and the gated hybrid.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distillab/bleu.hpp"
#include "distillab/checkpoint.hpp"
#include "distillab/corpus.hpp"
#include "distillab/decoder.hpp"
#include "distillab/distill.hpp"
#include "distillab/model.hpp"

namespace distillab {

// Linear warmup to base_lr, then inverse-sqrt decay. Continuous at the
// junction and strictly decreasing after it.
inline double lr_at(int64_t step, double base_lr, int64_t warmup_steps) {
  if (step < 1) throw ValueError("lr_at: step must be >= 1");
  if (warmup_steps < 1) throw ValueError("lr_at: warmup_steps must be >= 1");
  if (step <= warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return base_lr * std::sqrt(static_cast<double>(warmup_steps) / static_cast<double>(step));
}

// One bias-corrected Adam update over named parameters carrying fresh
// gradients. Parameters without a gradient buffer are skipped (not every
// tensor is on every loss path).
template <class S>
void adam_step(std::vector<std::pair<std::string, TensorT<S>>>& params, AdamStateT<S>& state,
               double lr, const TrainConfig& cfg) {
  state.step_count += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2, eps = cfg.adam_eps;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step_count));
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    const std::vector<S>& g = t.grad();
    for (S x : g) {
      if (!std::isfinite(static_cast<double>(x))) {
        throw DivergenceError("adam_step: non-finite gradient in tensor '" + name + "'");
      }
    }
    std::vector<S>& m = state.m[name];
    std::vector<S>& v = state.v[name];
    if (m.empty()) m.assign(g.size(), S(0));
    if (v.empty()) v.assign(g.size(), S(0));
    std::vector<S>& p = t.values_mutable();
    for (size_t i = 0; i < g.size(); ++i) {
      double gi = static_cast<double>(g[i]);
      double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
      double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
      p[i] = static_cast<S>(static_cast<double>(p[i]) - update);
    }
  }
}

template <class S>
void scale_grads(std::vector<std::pair<std::string, TensorT<S>>>& params, double factor) {
  for (auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (S& g : t.grad_mutable()) g = static_cast<S>(static_cast<double>(g) * factor);
  }
}

template <class S>
double global_grad_norm(const std::vector<std::pair<std::string, TensorT<S>>>& params) {
  double total = 0;
  for (const auto& [name, t] : params) {
    if (!t.has_grad()) continue;
    for (S g : t.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

enum class Regime { teacher, token_kd, sentence_kd, hybrid };

inline Regime regime_from_name(const std::string& n) {
  if (n == "teacher") return Regime::teacher;
  if (n == "token_kd") return Regime::token_kd;
  if (n == "sentence_kd") return Regime::sentence_kd;
  if (n == "hybrid") return Regime::hybrid;
  throw ConfigError("unknown regime '" + n + "'");
}

// Beam-searches a pseudo-target for every corpus pair; done once per
// (teacher, corpus) before student training so epochs stay deterministic.
template <class S>
std::vector<std::vector<int32_t>> make_pseudo_targets(TransformerT<S>& teacher,
                                                      const ParallelCorpus& corpus,
                                                      const BeamConfig& beam_cfg) {
  detail::require_eval(teacher.training(), "make_pseudo_targets");
  std::vector<std::vector<int32_t>> out;
  out.reserve(corpus.pairs.size());
  for (const auto& [src, tgt] : corpus.pairs) {
    std::vector<int32_t> hyp = beam_search(teacher, src, beam_cfg);
    if (hyp.empty() || hyp.back() != Vocab::kEos) hyp.push_back(Vocab::kEos);
    out.push_back(std::move(hyp));
  }
  return out;
}

struct EpochMetrics {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double lr = 0.0;
  double mean_g = 0.0;
  double dev_bleu = 0.0;
};

template <class S>
struct TrainResultT {
  bool diverged = false;
  int64_t steps_done = 0;
  int64_t best_epoch = 0;
  double best_dev_bleu = 0.0;
  std::vector<EpochMetrics> epochs;
  std::vector<GateTraceRow> gate_trace;
};

using TrainResult = TrainResultT<float>;

template <class S>
struct TrainJob {
  TransformerT<S>* student = nullptr;
  const ParallelCorpus* train_corpus = nullptr;
  const ParallelCorpus* dev_corpus = nullptr;
  TrainConfig config;
  TransformerT<S>* teacher = nullptr;  // token_kd / hybrid
  const std::vector<std::vector<int32_t>>* pseudo_targets = nullptr;  // sentence_kd / hybrid
  GateStateT<S>* gate = nullptr;  // hybrid
  int64_t top_k = 64;
};

namespace detail {

// decoder views for the pseudo-targets of one batch
inline void build_pseudo_views(const std::vector<int64_t>& pair_indices,
                               const std::vector<std::vector<int32_t>>& pseudo, IdMatrix& tgt_in,
                               IdMatrix& labels, ByteMask& pad) {
  int64_t width = 0;
  for (int64_t i : pair_indices) {
    width = std::max<int64_t>(width, static_cast<int64_t>(pseudo[static_cast<size_t>(i)].size()));
  }
  const int64_t b = static_cast<int64_t>(pair_indices.size());
  tgt_in = IdMatrix(b, width, Vocab::kPad);
  labels = IdMatrix(b, width, Vocab::kPad);
  pad = ByteMask(Shape{b, width}, 1);
  for (int64_t r = 0; r < b; ++r) {
    const auto& y = pseudo[static_cast<size_t>(pair_indices[static_cast<size_t>(r)])];
    tgt_in.at(r, 0) = Vocab::kBos;
    for (size_t j = 0; j < y.size(); ++j) {
      labels.at(r, static_cast<int64_t>(j)) = y[j];
      pad.v[static_cast<size_t>(r * width + static_cast<int64_t>(j))] = 0;
      if (j + 1 < y.size()) tgt_in.at(r, static_cast<int64_t>(j) + 1) = y[j];
    }
  }
}

}  // namespace detail

// Drives one model through batches under a config. The class exposes the
// micro-batch level so tests can pin the accumulation semantics.
template <class S>
class Trainer {
 public:
  explicit Trainer(TrainJob<S> job) : job_(job), regime_(regime_from_name(job.config.regime)) {
    job_.config.validate();
    if (!job_.student || !job_.train_corpus) {
      throw ConfigError("trainer: student model and train corpus are required");
    }
    if ((regime_ == Regime::token_kd || regime_ == Regime::hybrid) && !job_.teacher) {
      throw ConfigError("trainer: regime '" + job_.config.regime + "' needs a teacher");
    }
    if ((regime_ == Regime::sentence_kd || regime_ == Regime::hybrid) && !job_.pseudo_targets) {
      throw ConfigError("trainer: regime '" + job_.config.regime + "' needs pseudo-targets");
    }
    if (regime_ == Regime::hybrid && !job_.gate) {
      throw ConfigError("trainer: hybrid regime needs a gate state");
    }
    if (job_.teacher &&
        job_.teacher->config().vocab_size != job_.student->config().vocab_size) {
      throw ConfigError("trainer: teacher vocab " +
                        std::to_string(job_.teacher->config().vocab_size) +
                        " does not match student vocab " +
                        std::to_string(job_.student->config().vocab_size));
    }
    // the teacher is shared read-only across concurrent trainers; it must
    // arrive in eval mode and is never mutated here
    if (job_.teacher && job_.teacher->training()) {
      throw ConfigError("trainer: teacher must be in eval mode");
    }
    params_.assign(job_.student->parameters().begin(), job_.student->parameters().end());
    if (regime_ == Regime::hybrid) {
      for (auto& [name, t] : job_.gate->parameters()) params_.emplace_back(name, t);
    }
  }

  // Forward + backward for one micro-batch; gradients accumulate on the
  // parameters. Returns the (already per-token normalized) loss value.
  double micro_batch(const Batch& batch) {
    TransformerT<S>& student = *job_.student;
    TensorT<S> loss;
    double batch_mean_g = 0.0;
    switch (regime_) {
      case Regime::teacher: {
        TensorT<S> enc = student.encode(batch.src, batch.src_pad);
        TensorT<S> logp =
            log_softmax(student.decode(batch.tgt_in, enc, batch.src_pad, batch.tgt_pad));
        loss = sentence_level_loss(logp, batch.tgt_labels, batch.tgt_pad);
        break;
      }
      case Regime::token_kd: {
        TensorT<S> dists = teacher_distributions(batch);
        TensorT<S> enc = student.encode(batch.src, batch.src_pad);
        TensorT<S> logp =
            log_softmax(student.decode(batch.tgt_in, enc, batch.src_pad, batch.tgt_pad));
        loss = token_level_loss(logp, dists, batch.tgt_pad);
        break;
      }
      case Regime::sentence_kd: {
        IdMatrix ps_in, ps_labels;
        ByteMask ps_pad;
        detail::build_pseudo_views(batch.pair_indices, *job_.pseudo_targets, ps_in, ps_labels,
                                   ps_pad);
        TensorT<S> enc = student.encode(batch.src, batch.src_pad);
        TensorT<S> logp = log_softmax(student.decode(ps_in, enc, batch.src_pad, ps_pad));
        loss = sentence_level_loss(logp, ps_labels, ps_pad);
        break;
      }
      case Regime::hybrid: {
        TensorT<S> dists = teacher_distributions(batch);
        IdMatrix ps_in, ps_labels;
        ByteMask ps_pad;
        detail::build_pseudo_views(batch.pair_indices, *job_.pseudo_targets, ps_in, ps_labels,
                                   ps_pad);
        TensorT<S> enc = student.encode(batch.src, batch.src_pad);
        TensorT<S> logp_gold =
            log_softmax(student.decode(batch.tgt_in, enc, batch.src_pad, batch.tgt_pad));
        TensorT<S> logp_pseudo = log_softmax(student.decode(ps_in, enc, batch.src_pad, ps_pad));
        TensorT<S> lt = token_level_loss_per_seq(logp_gold, dists, batch.tgt_pad);
        TensorT<S> ls = sentence_level_loss_per_seq(logp_pseudo, ps_labels, ps_pad);
        TensorT<S> summary = masked_mean_pool(enc, batch.src_pad);
        TensorT<S> g = gate(*job_.gate, summary, batch.rows());
        loss = hybrid_loss(g, lt, ls);
        for (S gv : g.values()) batch_mean_g += static_cast<double>(gv);
        batch_mean_g /= static_cast<double>(batch.rows());
        break;
      }
    }
    double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw DivergenceError("training loss is non-finite");
    loss.backward();
    ++accumulated_;
    epoch_g_sum_ += batch_mean_g * static_cast<double>(batch.rows());
    epoch_g_count_ += regime_ == Regime::hybrid ? batch.rows() : 0;
    return lv;
  }

  // Optimizer step over the accumulated group (gradients averaged).
  void optimizer_step() {
    if (accumulated_ == 0) return;
    scale_grads(params_, 1.0 / static_cast<double>(accumulated_));
    if (job_.config.clip_norm > 0) {
      double norm = global_grad_norm(params_);
      if (norm > job_.config.clip_norm) scale_grads(params_, job_.config.clip_norm / norm);
    }
    ++steps_done_;
    adam_step(params_, opt_, lr_at(steps_done_, job_.config.base_lr, job_.config.warmup_steps),
              job_.config);
    for (auto& [name, t] : params_) t.zero_grad();
    accumulated_ = 0;
  }

  // One pass over the given batches with accumulation boundaries; a
  // trailing partial group still steps (averaged over its actual size).
  double run_batches(const std::vector<Batch>& batches) {
    double loss_sum = 0;
    int64_t n = 0;
    for (const Batch& b : batches) {
      loss_sum += micro_batch(b);
      ++n;
      if (accumulated_ == job_.config.accumulation_steps) optimizer_step();
    }
    optimizer_step();
    return n ? loss_sum / static_cast<double>(n) : 0.0;
  }

  double evaluate_dev_bleu() {
    if (!job_.dev_corpus || job_.dev_corpus->pairs.empty()) return 0.0;
    TransformerT<S>& student = *job_.student;
    bool was_training = student.training();
    student.set_train(false);
    std::vector<std::vector<int32_t>> hyps, refs;
    for (const auto& [src, tgt] : job_.dev_corpus->pairs) {
      hyps.push_back(strip_trailing_eos(
          greedy_decode(student, src, student.config().max_len - 1)));
      refs.push_back(tgt);
    }
    student.set_train(was_training);
    return corpus_bleu(hyps, refs, 4, /*smooth=*/true).bleu;
  }

  int64_t steps_done() const { return steps_done_; }
  const AdamStateT<S>& optimizer_state() const { return opt_; }
  AdamStateT<S>& optimizer_state() { return opt_; }
  double epoch_mean_g() const {
    return epoch_g_count_ ? epoch_g_sum_ / static_cast<double>(epoch_g_count_) : 0.0;
  }
  void reset_epoch_stats() {
    epoch_g_sum_ = 0;
    epoch_g_count_ = 0;
  }

 private:
  TrainJob<S> job_;
  Regime regime_;
  std::vector<std::pair<std::string, TensorT<S>>> params_;
  AdamStateT<S> opt_;
  int64_t accumulated_ = 0;
  int64_t steps_done_ = 0;
  double epoch_g_sum_ = 0;
  int64_t epoch_g_count_ = 0;

  TensorT<S> teacher_distributions(const Batch& batch) {
    TransformerT<S>& teacher = *job_.teacher;
    NoGradGuard ng;
    TensorT<S> enc = teacher.encode(batch.src, batch.src_pad);
    TensorT<S> probs = softmax(teacher.decode(batch.tgt_in, enc, batch.src_pad, batch.tgt_pad));
    const int64_t v = teacher.config().vocab_size;
    std::vector<S> rows = probs.values();
    const int64_t n_rows = probs.numel() / v;
    for (int64_t r = 0; r < n_rows; ++r) {
      std::vector<S> row(rows.begin() + r * v, rows.begin() + (r + 1) * v);
      detail::topk_renormalize(row, job_.top_k);
      std::copy(row.begin(), row.end(), rows.begin() + r * v);
    }
    return TensorT<S>::from(probs.shape(), std::move(rows));
  }
};

// Full training run: epochs of shuffled token-budget batches, per-epoch
// dev BLEU (greedy), best-checkpoint tracking. On divergence the student
// rolls back to the last finished epoch and the result carries the flag.
template <class S>
TrainResultT<S> train(TrainJob<S> job) {
  Trainer<S> trainer(job);
  TransformerT<S>& student = *job.student;
  student.set_train(true);
  student.reset_dropout_rng(job.config.seed);

  TrainResultT<S> result;
  std::map<std::string, std::vector<S>> best = student.snapshot();
  std::map<std::string, std::vector<S>> last_good = best;
  double best_bleu = -1.0;

  for (int64_t epoch = 1; epoch <= job.config.max_epochs; ++epoch) {
    trainer.reset_epoch_stats();
    std::vector<Batch> batches =
        batchify(*job.train_corpus, job.config.token_budget, derive_seed(job.config.seed, epoch));
    double epoch_loss = 0;
    try {
      epoch_loss = trainer.run_batches(batches);
    } catch (const DivergenceError&) {
      student.restore(last_good);
      result.diverged = true;
      break;
    } catch (const ValueError&) {  // non-finite activations surface here
      student.restore(last_good);
      result.diverged = true;
      break;
    }
    double dev = trainer.evaluate_dev_bleu();
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = epoch_loss;
    m.lr = lr_at(std::max<int64_t>(trainer.steps_done(), 1), job.config.base_lr,
                 job.config.warmup_steps);
    m.mean_g = trainer.epoch_mean_g();
    m.dev_bleu = dev;
    result.epochs.push_back(m);
    if (job.gate) {
      job.gate->last_epoch_mean_g = m.mean_g;
      result.gate_trace.push_back({epoch, m.mean_g, m.train_loss, m.dev_bleu});
    }
    last_good = student.snapshot();
    if (dev > best_bleu) {
      best_bleu = dev;
      best = last_good;
      result.best_epoch = epoch;
    }
  }
  result.steps_done = trainer.steps_done();
  result.best_dev_bleu = best_bleu < 0 ? 0.0 : best_bleu;
  student.restore(best);
  student.set_train(false);
  return result;
}

}  // namespace distillab
