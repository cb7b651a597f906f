// SPDX-License-Identifier: Apache-2.0
//
// Vocabulary, synthetic parallel tasks, token-budget batching and the
// plain-text corpus file format (parallel .src/.tgt, one sentence per
// line, whitespace tokens).

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "distillab/common.hpp"
#include "distillab/tensor.hpp"

namespace distillab {

struct Vocab {
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kBos = 1;
  static constexpr int32_t kEos = 2;
  static constexpr int32_t kUnk = 3;
  static constexpr int32_t kNumSpecials = 4;

  std::vector<std::string> token_of;  // index == id; [0..3] are specials
  std::unordered_map<std::string, int32_t> id_of;

  Vocab() { init_specials(); }

  static Vocab synthetic(int64_t vocab_size) {
    if (vocab_size < 8) throw ConfigError("vocab: size must be >= 8");
    Vocab v;
    for (int64_t i = kNumSpecials; i < vocab_size; ++i) v.add("w" + std::to_string(i - kNumSpecials));
    return v;
  }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const auto& t : tokens) {
      if (!v.id_of.count(t)) v.add(t);
    }
    return v;
  }

  int64_t size() const { return static_cast<int64_t>(token_of.size()); }
  static bool is_special(int32_t id) { return id >= 0 && id < kNumSpecials; }

  int32_t encode_token(const std::string& t) const {
    auto it = id_of.find(t);
    return it == id_of.end() ? kUnk : it->second;
  }

  std::vector<int32_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<int32_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(encode_token(t));
    return ids;
  }

  // Strips trailing PAD and one trailing EOS; interior PAD is an error.
  std::vector<std::string> decode(std::vector<int32_t> ids) const {
    while (!ids.empty() && ids.back() == kPad) ids.pop_back();
    if (!ids.empty() && ids.back() == kEos) ids.pop_back();
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int32_t id : ids) {
      if (id == kPad) throw ValueError("decode: interior PAD id");
      if (id < 0 || id >= size()) throw ValueError("decode: id " + std::to_string(id) + " out of range");
      out.push_back(token_of[static_cast<size_t>(id)]);
    }
    return out;
  }

  // ids of all non-special tokens, the substitution pool for the noiser
  std::vector<int32_t> regular_ids() const {
    std::vector<int32_t> ids;
    for (int32_t i = kNumSpecials; i < size(); ++i) ids.push_back(i);
    return ids;
  }

 private:
  void init_specials() {
    token_of = {"<pad>", "<bos>", "<eos>", "<unk>"};
    for (int32_t i = 0; i < kNumSpecials; ++i) id_of[token_of[static_cast<size_t>(i)]] = i;
  }
  void add(const std::string& t) {
    id_of[t] = static_cast<int32_t>(token_of.size());
    token_of.push_back(t);
  }
};

enum class TaskKind { copy, reverse, lexicon_reorder };

inline TaskKind task_kind_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "lexicon-reorder") return TaskKind::lexicon_reorder;
  throw ConfigError("unknown task kind '" + name + "'");
}

inline const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::lexicon_reorder: return "lexicon-reorder";
  }
  return "?";
}

struct ParallelCorpus {
  Vocab vocab;
  std::vector<std::pair<std::vector<int32_t>, std::vector<int32_t>>> pairs;
  std::string task_descriptor;

  int64_t size() const { return static_cast<int64_t>(pairs.size()); }
};

namespace detail {

// +1 cyclic shift over the regular-token range, identity on specials.
inline int32_t lexicon_pi(int32_t id, int64_t vocab_size) {
  if (Vocab::is_special(id)) return id;
  int64_t n_regular = vocab_size - Vocab::kNumSpecials;
  return static_cast<int32_t>(Vocab::kNumSpecials +
                              (id - Vocab::kNumSpecials + 1) % n_regular);
}

inline std::vector<int32_t> task_target(TaskKind kind, const std::vector<int32_t>& x,
                                        int64_t vocab_size) {
  std::vector<int32_t> y = x;
  switch (kind) {
    case TaskKind::copy:
      break;
    case TaskKind::reverse:
      std::reverse(y.begin(), y.end());
      break;
    case TaskKind::lexicon_reorder:
      for (auto& t : y) t = lexicon_pi(t, vocab_size);
      for (size_t i = 0; i + 1 < y.size(); i += 2) std::swap(y[i], y[i + 1]);
      break;
  }
  return y;
}

}  // namespace detail

inline ParallelCorpus generate_task(TaskKind kind, int64_t vocab_size, int64_t n_pairs,
                                    int64_t len_lo, int64_t len_hi, uint64_t seed) {
  if (vocab_size < 8) throw ConfigError("generate_task: vocab_size must be >= 8");
  if (len_lo < 1 || len_hi < len_lo) {
    throw ConfigError("generate_task: bad length range [" + std::to_string(len_lo) + "," +
                      std::to_string(len_hi) + "]");
  }
  if (n_pairs < 1) throw ConfigError("generate_task: n_pairs must be >= 1");
  ParallelCorpus c;
  c.vocab = Vocab::synthetic(vocab_size);
  Rng rng(mix_seed(seed));
  std::uniform_int_distribution<int64_t> ulen(len_lo, len_hi);
  std::uniform_int_distribution<int32_t> utok(Vocab::kNumSpecials,
                                              static_cast<int32_t>(vocab_size - 1));
  c.pairs.reserve(static_cast<size_t>(n_pairs));
  for (int64_t i = 0; i < n_pairs; ++i) {
    int64_t len = ulen(rng);
    std::vector<int32_t> x(static_cast<size_t>(len));
    for (auto& t : x) t = utok(rng);
    c.pairs.emplace_back(x, detail::task_target(kind, x, vocab_size));
  }
  std::ostringstream desc;
  desc << task_kind_name(kind) << " vocab=" << vocab_size << " pairs=" << n_pairs << " len=["
       << len_lo << "," << len_hi << "] seed=" << seed;
  c.task_descriptor = desc.str();
  return c;
}

// One training batch: padded id matrices plus the masks the losses need.
// tgt_in is the BOS-prefixed decoder input, tgt_labels the EOS-suffixed
// label view; both have the same width.
struct Batch {
  IdMatrix src;         // (B,S)
  ByteMask src_pad;     // 1 at PAD positions of src
  IdMatrix tgt_in;      // (B,T)
  IdMatrix tgt_labels;  // (B,T)
  ByteMask tgt_pad;     // 1 at PAD positions of tgt_labels
  std::vector<int64_t> pair_indices;
  int64_t n_label_tokens = 0;

  int64_t rows() const { return src.rows; }
};

namespace detail {

inline Batch build_batch(const ParallelCorpus& corpus, const std::vector<int64_t>& idxs) {
  int64_t s_width = 0, t_width = 0;
  for (int64_t i : idxs) {
    const auto& [x, y] = corpus.pairs[static_cast<size_t>(i)];
    s_width = std::max<int64_t>(s_width, static_cast<int64_t>(x.size()));
    t_width = std::max<int64_t>(t_width, static_cast<int64_t>(y.size()) + 1);
  }
  int64_t b = static_cast<int64_t>(idxs.size());
  Batch batch;
  batch.src = IdMatrix(b, s_width, Vocab::kPad);
  batch.src_pad = ByteMask(Shape{b, s_width}, 1);
  batch.tgt_in = IdMatrix(b, t_width, Vocab::kPad);
  batch.tgt_labels = IdMatrix(b, t_width, Vocab::kPad);
  batch.tgt_pad = ByteMask(Shape{b, t_width}, 1);
  batch.pair_indices = idxs;
  for (int64_t r = 0; r < b; ++r) {
    const auto& [x, y] = corpus.pairs[static_cast<size_t>(idxs[static_cast<size_t>(r)])];
    for (size_t j = 0; j < x.size(); ++j) {
      batch.src.at(r, static_cast<int64_t>(j)) = x[j];
      batch.src_pad.v[static_cast<size_t>(r * s_width + static_cast<int64_t>(j))] = 0;
    }
    batch.tgt_in.at(r, 0) = Vocab::kBos;
    for (size_t j = 0; j < y.size(); ++j) {
      batch.tgt_in.at(r, static_cast<int64_t>(j) + 1) = y[j];
      batch.tgt_labels.at(r, static_cast<int64_t>(j)) = y[j];
      batch.tgt_pad.v[static_cast<size_t>(r * t_width + static_cast<int64_t>(j))] = 0;
    }
    batch.tgt_labels.at(r, static_cast<int64_t>(y.size())) = Vocab::kEos;
    batch.tgt_pad.v[static_cast<size_t>(r * t_width + static_cast<int64_t>(y.size()))] = 0;
    batch.n_label_tokens += static_cast<int64_t>(y.size()) + 1;
  }
  return batch;
}

}  // namespace detail

// Shuffles with the seed, then packs greedily under the token budget,
// counting the padded width max(src_len, tgt_len + 1).
inline std::vector<Batch> batchify(const ParallelCorpus& corpus, int64_t max_tokens,
                                   uint64_t seed) {
  if (corpus.pairs.empty()) throw ConfigError("batchify: empty corpus");
  std::vector<int64_t> order(corpus.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  std::vector<int64_t> current;
  int64_t cur_width = 0;
  for (int64_t i : order) {
    const auto& [x, y] = corpus.pairs[static_cast<size_t>(i)];
    int64_t w = std::max<int64_t>(static_cast<int64_t>(x.size()),
                                  static_cast<int64_t>(y.size()) + 1);
    if (w > max_tokens) {
      throw ConfigError("batchify: pair " + std::to_string(i) + " needs width " +
                        std::to_string(w) + " exceeding the budget of " +
                        std::to_string(max_tokens) + " tokens");
    }
    int64_t new_width = std::max(cur_width, w);
    if (!current.empty() &&
        (static_cast<int64_t>(current.size()) + 1) * new_width > max_tokens) {
      batches.push_back(detail::build_batch(corpus, current));
      current.clear();
      cur_width = 0;
      new_width = w;
    }
    current.push_back(i);
    cur_width = new_width;
  }
  if (!current.empty()) batches.push_back(detail::build_batch(corpus, current));
  return batches;
}

// ---------------------------------------------------------------------------
// Plain-text corpus IO
// ---------------------------------------------------------------------------

inline std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> toks;
  std::string t;
  while (is >> t) toks.push_back(t);
  return toks;
}

inline std::vector<std::vector<std::string>> read_token_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<std::vector<std::string>> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(split_ws(line));
  return lines;
}

inline void write_token_lines(const std::string& path,
                              const std::vector<std::vector<std::string>>& lines) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& toks : lines) {
    for (size_t i = 0; i < toks.size(); ++i) {
      if (i) out << ' ';
      out << toks[i];
    }
    out << '\n';
  }
}

inline void write_parallel(const ParallelCorpus& corpus, const std::string& prefix) {
  std::vector<std::vector<std::string>> src, tgt;
  for (const auto& [x, y] : corpus.pairs) {
    src.push_back(corpus.vocab.decode(x));
    tgt.push_back(corpus.vocab.decode(y));
  }
  write_token_lines(prefix + ".src", src);
  write_token_lines(prefix + ".tgt", tgt);
}

// Reads .src/.tgt with an externally supplied vocab (OOV becomes UNK).
inline ParallelCorpus read_parallel(const std::string& src_path, const std::string& tgt_path,
                                    Vocab vocab) {
  auto src = read_token_lines(src_path);
  auto tgt = read_token_lines(tgt_path);
  if (src.size() != tgt.size()) {
    throw FormatError("parallel corpus line counts differ: " + std::to_string(src.size()) +
                      " vs " + std::to_string(tgt.size()));
  }
  ParallelCorpus c;
  c.vocab = std::move(vocab);
  for (size_t i = 0; i < src.size(); ++i) {
    if (src[i].empty() || tgt[i].empty()) {
      throw FormatError("empty sentence at line " + std::to_string(i + 1));
    }
    c.pairs.emplace_back(c.vocab.encode(src[i]), c.vocab.encode(tgt[i]));
  }
  c.task_descriptor = "file:" + src_path;
  return c;
}

// Builds the vocab from file content (token order of first appearance).
inline ParallelCorpus read_parallel(const std::string& src_path, const std::string& tgt_path) {
  auto src = read_token_lines(src_path);
  auto tgt = read_token_lines(tgt_path);
  std::vector<std::string> toks;
  for (const auto& l : src) toks.insert(toks.end(), l.begin(), l.end());
  for (const auto& l : tgt) toks.insert(toks.end(), l.begin(), l.end());
  return read_parallel(src_path, tgt_path, Vocab::from_tokens(toks));
}

}  // namespace distillab
