// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint format: a directory holding
//   manifest.json  - format version, model/train config, vocab, counters,
//                    gate state, and the blob index (name/shape/offset)
//   blobs.bin      - named tensors as little-endian float32, row-major,
//                    concatenated in index order
//
// Model parameters are stored under "model.<name>", optimizer moments
// under "opt.m.<name>" / "opt.v.<name>", gate parameters under "gate.*".
// A float-storage round trip reproduces forward outputs bitwise.

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillab/common.hpp"
#include "distillab/corpus.hpp"
#include "distillab/distill.hpp"
#include "distillab/model.hpp"

namespace distillab {

constexpr int kCheckpointFormatVersion = 1;

struct TrainConfig {
  double base_lr = 5e-4;
  int64_t warmup_steps = 400;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  int64_t accumulation_steps = 4;
  int64_t max_epochs = 10;
  int64_t token_budget = 256;
  double clip_norm = 0.0;  // 0 disables clipping
  uint64_t seed = 1;
  std::string regime = "teacher";  // teacher|token_kd|sentence_kd|hybrid

  void validate() const {
    if (base_lr <= 0) throw ConfigError("train config: base_lr must be > 0");
    if (warmup_steps < 1) throw ConfigError("train config: warmup_steps must be >= 1");
    if (accumulation_steps < 1) throw ConfigError("train config: accumulation_steps must be >= 1");
    if (max_epochs < 1) throw ConfigError("train config: max_epochs must be >= 1");
    if (token_budget < 4) throw ConfigError("train config: token_budget too small");
    if (clip_norm < 0) throw ConfigError("train config: clip_norm must be >= 0");
    if (regime != "teacher" && regime != "token_kd" && regime != "sentence_kd" &&
        regime != "hybrid") {
      throw ConfigError("train config: unknown regime '" + regime + "'");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
       {"n_heads", c.n_heads},       {"n_enc_layers", c.n_enc_layers},
       {"n_dec_layers", c.n_dec_layers}, {"d_ffn", c.d_ffn},
       {"dropout_p", c.dropout_p},   {"max_len", c.max_len},
       {"tie_embeddings", c.tie_embeddings}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("d_model").get_to(c.d_model);
  j.at("n_heads").get_to(c.n_heads);
  j.at("n_enc_layers").get_to(c.n_enc_layers);
  j.at("n_dec_layers").get_to(c.n_dec_layers);
  j.at("d_ffn").get_to(c.d_ffn);
  j.at("dropout_p").get_to(c.dropout_p);
  j.at("max_len").get_to(c.max_len);
  j.at("tie_embeddings").get_to(c.tie_embeddings);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"base_lr", c.base_lr},
       {"warmup_steps", c.warmup_steps},
       {"adam_beta1", c.adam_beta1},
       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},
       {"accumulation_steps", c.accumulation_steps},
       {"max_epochs", c.max_epochs},
       {"token_budget", c.token_budget},
       {"clip_norm", c.clip_norm},
       {"seed", c.seed},
       {"regime", c.regime}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig defaults;
  c.base_lr = j.value("base_lr", defaults.base_lr);
  c.warmup_steps = j.value("warmup_steps", defaults.warmup_steps);
  c.adam_beta1 = j.value("adam_beta1", defaults.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", defaults.adam_beta2);
  c.adam_eps = j.value("adam_eps", defaults.adam_eps);
  c.accumulation_steps = j.value("accumulation_steps", defaults.accumulation_steps);
  c.max_epochs = j.value("max_epochs", defaults.max_epochs);
  c.token_budget = j.value("token_budget", defaults.token_budget);
  c.clip_norm = j.value("clip_norm", defaults.clip_norm);
  c.seed = j.value("seed", defaults.seed);
  c.regime = j.value("regime", defaults.regime);
}

template <class S>
struct AdamStateT {
  std::map<std::string, std::vector<S>> m;
  std::map<std::string, std::vector<S>> v;
  int64_t step_count = 0;
};

using AdamState = AdamStateT<float>;

namespace detail {

inline void write_f32_le(std::ofstream& out, float x) {
  uint32_t bits;
  std::memcpy(&bits, &x, 4);
  char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
               static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  out.write(b, 4);
}

inline float read_f32_le(const unsigned char* p) {
  uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                  (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  float x;
  std::memcpy(&x, &bits, 4);
  return x;
}

}  // namespace detail

// Everything needed to rebuild a training state from disk.
template <class S>
struct LoadedCheckpointT {
  ModelConfig model_config;
  Vocab vocab;
  TrainConfig train_config;
  bool has_train_config = false;
  int64_t step = 0;
  int64_t epoch = 0;
  GateMode gate_mode = GateMode::scalar;
  bool has_gate = false;
  bool has_optimizer = false;
  int64_t optimizer_step_count = 0;
  std::map<std::string, std::vector<S>> tensors;

  TransformerT<S> build_model() const {
    TransformerT<S> model(model_config, /*seed=*/0);
    std::map<std::string, std::vector<S>> params;
    for (const auto& [name, data] : tensors) {
      if (name.rfind("model.", 0) == 0) params[name.substr(6)] = data;
    }
    model.restore(params);
    return model;
  }

  GateStateT<S> build_gate() const {
    if (!has_gate) throw FormatError("checkpoint holds no gate state");
    if (gate_mode == GateMode::scalar) {
      auto g = GateStateT<S>::scalar_init(0.0);
      g.z0.values_mutable() = tensors.at("gate.z0");
      return g;
    }
    auto g = GateStateT<S>::pooled_init(model_config.d_model);
    g.w.values_mutable() = tensors.at("gate.w");
    g.b.values_mutable() = tensors.at("gate.b");
    return g;
  }

  AdamStateT<S> build_optimizer() const {
    AdamStateT<S> opt;
    opt.step_count = optimizer_step_count;
    for (const auto& [name, data] : tensors) {
      if (name.rfind("opt.m.", 0) == 0) opt.m[name.substr(6)] = data;
      if (name.rfind("opt.v.", 0) == 0) opt.v[name.substr(6)] = data;
    }
    return opt;
  }
};

using LoadedCheckpoint = LoadedCheckpointT<float>;

template <class S>
void save_checkpoint(const std::string& dir, const TransformerT<S>& model, const Vocab& vocab,
                     int64_t step, int64_t epoch, const TrainConfig* train_config = nullptr,
                     const AdamStateT<S>* optimizer = nullptr,
                     GateStateT<S>* gate_state = nullptr) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);

  // assemble named blobs in a deterministic order
  std::vector<std::pair<std::string, const std::vector<S>*>> blobs;
  for (const auto& [name, t] : model.parameters()) blobs.emplace_back("model." + name, &t.values());
  std::vector<std::pair<std::string, TensorT<S>>> gate_params;
  if (gate_state) {
    gate_params = gate_state->parameters();
    for (auto& [name, t] : gate_params) blobs.emplace_back(name, &t.values());
  }
  if (optimizer) {
    for (const auto& [name, data] : optimizer->m) blobs.emplace_back("opt.m." + name, &data);
    for (const auto& [name, data] : optimizer->v) blobs.emplace_back("opt.v." + name, &data);
  }

  const std::string blob_path = dir + "/blobs.bin";
  std::ofstream bin(blob_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + blob_path + " for writing");

  nlohmann::json index = nlohmann::json::array();
  int64_t offset = 0;
  for (const auto& [name, data] : blobs) {
    for (S x : *data) detail::write_f32_le(bin, static_cast<float>(x));
    int64_t bytes = static_cast<int64_t>(data->size()) * 4;
    index.push_back({{"name", name},
                     {"numel", data->size()},
                     {"byte_offset", offset},
                     {"byte_len", bytes}});
    offset += bytes;
  }
  bin.close();

  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["model_config"] = model.config();
  if (train_config) manifest["train_config"] = *train_config;
  manifest["vocab"] = vocab.token_of;
  manifest["step"] = step;
  manifest["epoch"] = epoch;
  if (optimizer) manifest["optimizer"] = {{"step_count", optimizer->step_count}};
  if (gate_state) manifest["gate"] = {{"mode", gate_mode_name(gate_state->mode)}};
  manifest["tensor_count"] = index.size();
  manifest["tensors"] = index;

  const std::string man_path = dir + "/manifest.json";
  std::ofstream man(man_path);
  if (!man) throw IoError("cannot open " + man_path + " for writing");
  man << manifest.dump(2) << "\n";
}

template <class S>
LoadedCheckpointT<S> load_checkpoint(const std::string& dir) {
  const std::string man_path = dir + "/manifest.json";
  std::ifstream man(man_path);
  if (!man) throw IoError("cannot open " + man_path);
  nlohmann::json manifest;
  try {
    man >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }

  LoadedCheckpointT<S> out;
  try {
    int version = manifest.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw VersionError("checkpoint format version " + std::to_string(version) +
                         " unsupported (expected " + std::to_string(kCheckpointFormatVersion) +
                         ")");
    }
    out.model_config = manifest.at("model_config").get<ModelConfig>();
    std::vector<std::string> tokens = manifest.at("vocab").get<std::vector<std::string>>();
    if (tokens.size() < 4) throw FormatError("checkpoint vocab too small");
    out.vocab = Vocab::from_tokens(std::vector<std::string>(tokens.begin() + 4, tokens.end()));
    out.step = manifest.at("step").get<int64_t>();
    out.epoch = manifest.at("epoch").get<int64_t>();
    if (manifest.contains("train_config")) {
      out.train_config = manifest.at("train_config").get<TrainConfig>();
      out.has_train_config = true;
    }
    if (manifest.contains("optimizer")) {
      out.has_optimizer = true;
      out.optimizer_step_count = manifest.at("optimizer").at("step_count").get<int64_t>();
    }
    if (manifest.contains("gate")) {
      out.has_gate = true;
      out.gate_mode = gate_mode_from_name(manifest.at("gate").at("mode").get<std::string>());
    }

    const auto& index = manifest.at("tensors");
    if (manifest.at("tensor_count").get<size_t>() != index.size()) {
      throw FormatError("checkpoint manifest: tensor_count " +
                        manifest.at("tensor_count").dump() + " disagrees with index size " +
                        std::to_string(index.size()));
    }

    const std::string blob_path = dir + "/blobs.bin";
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw IoError("cannot open " + blob_path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(bin)),
                                   std::istreambuf_iterator<char>());
    for (const auto& entry : index) {
      std::string name = entry.at("name").get<std::string>();
      int64_t numel = entry.at("numel").get<int64_t>();
      int64_t off = entry.at("byte_offset").get<int64_t>();
      int64_t len = entry.at("byte_len").get<int64_t>();
      if (len != numel * 4) {
        throw FormatError("checkpoint index: '" + name + "' byte_len " + std::to_string(len) +
                          " inconsistent with numel " + std::to_string(numel));
      }
      if (off + len > static_cast<int64_t>(raw.size())) {
        throw IoError("checkpoint blob file truncated: '" + name + "' needs bytes [" +
                      std::to_string(off) + "," + std::to_string(off + len) + ") but file has " +
                      std::to_string(raw.size()));
      }
      std::vector<S> data(static_cast<size_t>(numel));
      for (int64_t i = 0; i < numel; ++i) {
        data[static_cast<size_t>(i)] = static_cast<S>(detail::read_f32_le(raw.data() + off + i * 4));
      }
      out.tensors[name] = std::move(data);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint manifest: " + std::string(e.what()));
  }
  return out;
}

}  // namespace distillab
