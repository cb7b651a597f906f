// SPDX-License-Identifier: Apache-2.0
//
// Encoder-decoder transformer of configurable size. Pre-norm residual
// blocks, sinusoidal positions, optional tying of the decoder input
// embedding with the output projection. Both teacher and student are
// instances of this model; only the config differs.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distillab/common.hpp"
#include "distillab/tensor.hpp"

namespace distillab {

struct ModelConfig {
  int64_t vocab_size = 0;
  int64_t d_model = 64;
  int64_t n_heads = 4;
  int64_t n_enc_layers = 2;
  int64_t n_dec_layers = 2;
  int64_t d_ffn = 128;
  double dropout_p = 0.1;
  int64_t max_len = 64;
  bool tie_embeddings = true;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("model config: vocab_size must be >= 1");
    if (d_model < 1 || n_heads < 1 || n_enc_layers < 1 || n_dec_layers < 1 || d_ffn < 1 ||
        max_len < 1) {
      throw ConfigError("model config: all counts must be >= 1");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (dropout_p < 0.0 || dropout_p >= 1.0) {
      throw ConfigError("model config: dropout_p must lie in [0,1)");
    }
  }
};

// Closed-form trainable-parameter count for a config. Kept as arithmetic
// on the config (not a walk over built tensors) so tests can cross-check
// it against the actual build.
inline int64_t param_count(const ModelConfig& c) {
  c.validate();
  const int64_t d = c.d_model, f = c.d_ffn, v = c.vocab_size;
  const int64_t attn = 4 * d * d + 3 * d;  // q/v/o biases only
  const int64_t ffn = d * f + f + f * d + d;
  const int64_t ln = 2 * d;
  const int64_t enc_layer = attn + ffn + 2 * ln;
  const int64_t dec_layer = 2 * attn + ffn + 3 * ln;
  int64_t total = 2 * v * d;  // src + tgt embeddings
  if (!c.tie_embeddings) total += v * d;  // standalone output projection
  total += c.n_enc_layers * enc_layer + c.n_dec_layers * dec_layer;
  total += 2 * ln;  // final encoder + decoder norms
  return total;
}

template <class S>
class TransformerT {
 public:
  using Tensor = TensorT<S>;

  TransformerT(ModelConfig cfg, uint64_t seed) : cfg_(cfg), dropout_rng_(mix_seed(seed ^ 0x517c)) {
    cfg_.validate();
    Rng rng(mix_seed(seed));
    build_params(rng);
    build_positional_table();
  }

  const ModelConfig& config() const { return cfg_; }

  bool training() const { return training_; }
  void set_train(bool on) { training_ = on; }
  void reset_dropout_rng(uint64_t seed) { dropout_rng_ = Rng(mix_seed(seed ^ 0x517c)); }

  // Named parameters in (stable) creation order.
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  Tensor& param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("model: unknown parameter '" + name + "'");
    return params_[it->second].second;
  }
  const Tensor& param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("model: unknown parameter '" + name + "'");
    return params_[it->second].second;
  }

  void set_requires_grad(bool on) {
    for (auto& [name, t] : params_) t.set_requires_grad(on);
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  int64_t actual_param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  std::map<std::string, std::vector<S>> snapshot() const {
    std::map<std::string, std::vector<S>> snap;
    for (const auto& [name, t] : params_) snap[name] = t.values();
    return snap;
  }

  void restore(const std::map<std::string, std::vector<S>>& snap) {
    for (auto& [name, t] : params_) {
      auto it = snap.find(name);
      if (it == snap.end()) throw FormatError("model restore: missing tensor '" + name + "'");
      if (it->second.size() != t.values().size()) {
        throw FormatError("model restore: size mismatch for '" + name + "'");
      }
      t.values_mutable() = it->second;
    }
  }

  // (B, src_len, d_model); padded key positions cannot leak into others.
  Tensor encode(const IdMatrix& src, const ByteMask& src_pad) {
    check_ids(src, "encode");
    Tensor x = embed(param("src_embed"), src);
    for (int64_t l = 0; l < cfg_.n_enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      Tensor h = norm(x, p + "ln1");
      Tensor att = attention(h, h, src_pad, /*causal=*/false, p + "attn");
      x = add(x, drop(att));
      h = norm(x, p + "ln2");
      x = add(x, drop(ffn(h, p)));
    }
    return norm(x, "enc.ln");
  }

  // Logits (B, tgt_len, vocab) for every prefix position. Causal: position
  // j sees target inputs <= j and the full (non-pad) source.
  Tensor decode(const IdMatrix& tgt_in, const Tensor& enc_states, const ByteMask& src_pad,
                const ByteMask& tgt_in_pad) {
    check_ids(tgt_in, "decode");
    if (tgt_in.cols > cfg_.max_len) {
      throw ConfigError("decode: prefix length " + std::to_string(tgt_in.cols) +
                        " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    Tensor x = embed(param("tgt_embed"), tgt_in);
    for (int64_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      Tensor h = norm(x, p + "ln1");
      Tensor att = attention(h, h, tgt_in_pad, /*causal=*/true, p + "self");
      x = add(x, drop(att));
      h = norm(x, p + "ln2");
      Tensor cross = attention(h, enc_states, src_pad, /*causal=*/false, p + "cross");
      x = add(x, drop(cross));
      h = norm(x, p + "ln3");
      x = add(x, drop(ffn(h, p)));
    }
    x = norm(x, "dec.ln");
    if (cfg_.tie_embeddings) {
      return matmul(x, transpose(param("tgt_embed")));
    }
    return matmul(x, param("out_proj"));
  }

 private:
  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::map<std::string, size_t> index_;
  std::vector<S> pos_table_;  // (max_len, d_model), constant
  bool training_ = false;
  Rng dropout_rng_;

  void add_param(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    index_[name] = params_.size();
    params_.emplace_back(name, std::move(t));
  }

  Tensor xavier(Shape shape, Rng& rng) {
    double fan_in = static_cast<double>(shape[0]);
    double fan_out = static_cast<double>(shape[shape.size() - 1]);
    S limit = static_cast<S>(std::sqrt(6.0 / (fan_in + fan_out)));
    return Tensor::uniform(std::move(shape), rng, -limit, limit);
  }

  // no key bias: softmax shift invariance makes its gradient identically
  // zero, so it would only accumulate update noise
  void add_attn_params(const std::string& prefix, Rng& rng) {
    const int64_t d = cfg_.d_model;
    for (const char* w : {"wq", "wk", "wv", "wo"}) add_param(prefix + "." + w, xavier({d, d}, rng));
    for (const char* b : {"bq", "bv", "bo"}) add_param(prefix + "." + b, Tensor::zeros({d}));
  }

  void add_ln_params(const std::string& prefix) {
    add_param(prefix + ".g", Tensor::ones({cfg_.d_model}));
    add_param(prefix + ".b", Tensor::zeros({cfg_.d_model}));
  }

  void add_ffn_params(const std::string& prefix, Rng& rng) {
    const int64_t d = cfg_.d_model, f = cfg_.d_ffn;
    add_param(prefix + "ffn.w1", xavier({d, f}, rng));
    add_param(prefix + "ffn.b1", Tensor::zeros({f}));
    add_param(prefix + "ffn.w2", xavier({f, d}, rng));
    add_param(prefix + "ffn.b2", Tensor::zeros({d}));
  }

  void build_params(Rng& rng) {
    const int64_t d = cfg_.d_model, v = cfg_.vocab_size;
    const S embed_std = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d)));
    add_param("src_embed", Tensor::normal({v, d}, rng, S(0), embed_std));
    add_param("tgt_embed", Tensor::normal({v, d}, rng, S(0), embed_std));
    for (int64_t l = 0; l < cfg_.n_enc_layers; ++l) {
      const std::string p = "enc." + std::to_string(l) + ".";
      add_attn_params(p + "attn", rng);
      add_ln_params(p + "ln1");
      add_ffn_params(p, rng);
      add_ln_params(p + "ln2");
    }
    add_ln_params("enc.ln");
    for (int64_t l = 0; l < cfg_.n_dec_layers; ++l) {
      const std::string p = "dec." + std::to_string(l) + ".";
      add_attn_params(p + "self", rng);
      add_ln_params(p + "ln1");
      add_attn_params(p + "cross", rng);
      add_ln_params(p + "ln2");
      add_ffn_params(p, rng);
      add_ln_params(p + "ln3");
    }
    add_ln_params("dec.ln");
    if (!cfg_.tie_embeddings) add_param("out_proj", xavier({d, v}, rng));
  }

  void build_positional_table() {
    const int64_t d = cfg_.d_model;
    pos_table_.assign(static_cast<size_t>(cfg_.max_len * d), S(0));
    for (int64_t pos = 0; pos < cfg_.max_len; ++pos) {
      for (int64_t i = 0; i < d; i += 2) {
        double angle = static_cast<double>(pos) /
                       std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        pos_table_[static_cast<size_t>(pos * d + i)] = static_cast<S>(std::sin(angle));
        if (i + 1 < d) {
          pos_table_[static_cast<size_t>(pos * d + i + 1)] = static_cast<S>(std::cos(angle));
        }
      }
    }
  }

  void check_ids(const IdMatrix& ids, const char* where) const {
    for (int32_t id : ids.v) {
      if (id < 0 || id >= cfg_.vocab_size) {
        throw ValueError(std::string(where) + ": token id " + std::to_string(id) +
                         " out of range [0," + std::to_string(cfg_.vocab_size) + ")");
      }
    }
    if (ids.cols > cfg_.max_len) {
      throw ConfigError(std::string(where) + ": sequence length " + std::to_string(ids.cols) +
                        " exceeds max_len " + std::to_string(cfg_.max_len));
    }
  }

  Tensor drop(const Tensor& x) { return dropout(x, cfg_.dropout_p, dropout_rng_, training_); }

  Tensor embed(const Tensor& table, const IdMatrix& ids) {
    const int64_t d = cfg_.d_model;
    Tensor x = scale(embedding(table, ids), static_cast<S>(std::sqrt(static_cast<double>(d))));
    std::vector<S> pe(static_cast<size_t>(ids.rows * ids.cols * d));
    for (int64_t r = 0; r < ids.rows; ++r) {
      std::copy(pos_table_.begin(), pos_table_.begin() + ids.cols * d,
                pe.begin() + r * ids.cols * d);
    }
    Tensor pos = Tensor::from({ids.rows, ids.cols, d}, std::move(pe));
    return drop(add(x, pos));
  }

  Tensor norm(const Tensor& x, const std::string& prefix) {
    return layer_norm(x, param(prefix + ".g"), param(prefix + ".b"), S(1e-5));
  }

  Tensor ffn(const Tensor& x, const std::string& prefix) {
    Tensor h = relu(add(matmul(x, param(prefix + "ffn.w1")), param(prefix + "ffn.b1")));
    return add(matmul(drop(h), param(prefix + "ffn.w2")), param(prefix + "ffn.b2"));
  }

  // Multi-head attention. key_pad marks padded KEY positions (B, Lk);
  // causal additionally hides keys beyond the query index.
  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const ByteMask& key_pad, bool causal,
                   const std::string& prefix) {
    const int64_t b = q_in.dim(0), lq = q_in.dim(1), lk = kv_in.dim(1);
    const int64_t h = cfg_.n_heads, d = cfg_.d_model, dh = d / h;

    Tensor q = add(matmul(q_in, param(prefix + ".wq")), param(prefix + ".bq"));
    Tensor k = matmul(kv_in, param(prefix + ".wk"));
    Tensor v = add(matmul(kv_in, param(prefix + ".wv")), param(prefix + ".bv"));

    auto split_heads = [&](const Tensor& t, int64_t len) {
      // (B,L,d) -> (B,L,h,dh) -> (B,h,L,dh) -> (B*h,L,dh)
      return reshape(transpose(reshape(t, {b, len, h, dh}), 1, 2), {b * h, len, dh});
    };
    Tensor qh = split_heads(q, lq);
    Tensor kh = split_heads(k, lk);
    Tensor vh = split_heads(v, lk);

    Tensor scores = scale(matmul(qh, transpose(kh)), static_cast<S>(1.0 / std::sqrt(dh)));

    ByteMask mask(Shape{b * h, lq, lk});
    for (int64_t bi = 0; bi < b; ++bi) {
      for (int64_t hi = 0; hi < h; ++hi) {
        for (int64_t qi = 0; qi < lq; ++qi) {
          for (int64_t ki = 0; ki < lk; ++ki) {
            bool hide = key_pad.v[static_cast<size_t>(bi * lk + ki)] != 0;
            if (causal && ki > qi) hide = true;
            mask.v[static_cast<size_t>(((bi * h + hi) * lq + qi) * lk + ki)] = hide ? 1 : 0;
          }
        }
      }
    }
    Tensor weights = drop(softmax(masked_fill(scores, mask, S(-1e9))));
    Tensor ctx = matmul(weights, vh);  // (B*h, Lq, dh)
    Tensor merged = reshape(transpose(reshape(ctx, {b, h, lq, dh}), 1, 2), {b, lq, d});
    return add(matmul(merged, param(prefix + ".wo")), param(prefix + ".bo"));
  }
};

using Transformer = TransformerT<float>;
using TransformerD = TransformerT<double>;

// Full-vocab logits for a single prefix, eval mode, no graph. Convenience
// for the decoders.
template <class S>
std::vector<S> last_position_logits(TransformerT<S>& model, const TensorT<S>& enc_states,
                                    const ByteMask& src_pad, const std::vector<int32_t>& prefix) {
  NoGradGuard ng;
  IdMatrix tgt_in(1, static_cast<int64_t>(prefix.size()));
  for (size_t i = 0; i < prefix.size(); ++i) tgt_in.at(0, static_cast<int64_t>(i)) = prefix[i];
  ByteMask tgt_pad(Shape{1, static_cast<int64_t>(prefix.size())}, 0);
  TensorT<S> logits = model.decode(tgt_in, enc_states, src_pad, tgt_pad);
  const int64_t v = model.config().vocab_size;
  const int64_t t = static_cast<int64_t>(prefix.size());
  std::vector<S> row(static_cast<size_t>(v));
  std::copy(logits.values().begin() + (t - 1) * v, logits.values().begin() + t * v, row.begin());
  return row;
}

}  // namespace distillab
