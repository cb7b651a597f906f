// SPDX-License-Identifier: Apache-2.0
//
// distillab command line: synthetic data generation, noise corruption,
// teacher training, distillation, translation, BLEU scoring, experiment
// studies, and gate-trace inspection.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "distillab/bleu.hpp"
#include "distillab/checkpoint.hpp"
#include "distillab/corpus.hpp"
#include "distillab/decoder.hpp"
#include "distillab/distill.hpp"
#include "distillab/harness.hpp"
#include "distillab/model.hpp"
#include "distillab/noiser.hpp"
#include "distillab/trainer.hpp"

namespace {

using namespace distillab;

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

struct GenDataArgs {
  std::string task = "lexicon-reorder";
  int64_t vocab = 512;
  int64_t pairs = 1000;
  int64_t len_min = 4;
  int64_t len_max = 24;
  uint64_t seed = 1;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  auto corpus = generate_task(task_kind_from_name(a.task), a.vocab, a.pairs, a.len_min, a.len_max,
                              a.seed);
  write_parallel(corpus, a.out);
  std::cout << "wrote " << corpus.size() << " pairs to " << a.out << ".src / " << a.out
            << ".tgt (" << corpus.task_descriptor << ")\n";
  return 0;
}

struct CorruptArgs {
  std::string in, out;
  std::string profile;
  double delete_p = 0.0, substitute_p = 0.0, swap_p = 0.0;
  int64_t swap_k = 0;
  uint64_t seed = 1;
};

int cmd_corrupt(const CorruptArgs& a) {
  NoiseProfile profile;
  if (!a.profile.empty()) {
    profile = NoiseProfile::by_name(a.profile);
  } else {
    profile = NoiseProfile{a.delete_p, a.substitute_p, a.swap_p, a.swap_k, "custom"};
    profile.validate();
  }
  auto lines = read_token_lines(a.in);
  // substitution pool: every distinct token seen in the file
  std::vector<std::string> pool;
  {
    std::set<std::string> seen;
    for (const auto& l : lines) {
      for (const auto& t : l) {
        if (seen.insert(t).second) pool.push_back(t);
      }
    }
  }
  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) {
      out.push_back(lines[i]);
      continue;
    }
    out.push_back(corrupt(lines[i], profile, pool, derive_seed(a.seed, i)));
  }
  write_token_lines(a.out, out);
  std::cout << "corrupted " << lines.size() << " sentences (" << profile.name << ") -> " << a.out
            << "\n";
  return 0;
}

ModelConfig model_config_from_file_or_default(const std::string& path, int64_t vocab_size) {
  ModelConfig cfg;
  cfg.d_model = 64;
  cfg.n_heads = 4;
  cfg.n_enc_layers = 2;
  cfg.n_dec_layers = 2;
  cfg.d_ffn = 128;
  cfg.dropout_p = 0.1;
  cfg.max_len = 64;
  if (!path.empty()) cfg = read_json_file(path).get<ModelConfig>();
  cfg.vocab_size = vocab_size;
  return cfg;
}

struct TrainTeacherArgs {
  std::string train_src, train_tgt, dev_src, dev_tgt;
  std::string train_config, model_config;
  std::string out;
};

int cmd_train_teacher(const TrainTeacherArgs& a) {
  ParallelCorpus corpus = read_parallel(a.train_src, a.train_tgt);
  ParallelCorpus dev;
  bool has_dev = !a.dev_src.empty();
  if (has_dev) dev = read_parallel(a.dev_src, a.dev_tgt, corpus.vocab);

  TrainConfig tcfg;
  if (!a.train_config.empty()) tcfg = read_json_file(a.train_config).get<TrainConfig>();
  tcfg.regime = "teacher";
  ModelConfig mcfg = model_config_from_file_or_default(a.model_config, corpus.vocab.size());

  Transformer model(mcfg, tcfg.seed);
  TrainJob<float> job;
  job.student = &model;
  job.train_corpus = &corpus;
  job.dev_corpus = has_dev ? &dev : nullptr;
  job.config = tcfg;
  TrainResult result = train(job);
  save_checkpoint(a.out, model, corpus.vocab, result.steps_done,
                  static_cast<int64_t>(result.epochs.size()), &tcfg);
  std::cout << "teacher trained: " << result.steps_done << " steps, best dev BLEU "
            << result.best_dev_bleu << (result.diverged ? " (diverged, rolled back)" : "")
            << ", checkpoint at " << a.out << "\n";
  return result.diverged ? 1 : 0;
}

struct DistillArgs {
  std::string teacher_ckpt;
  std::string train_src, train_tgt, dev_src, dev_tgt;
  std::string train_config, model_config;
  std::string regime = "hybrid";
  std::string gate_mode = "pooled-linear";
  std::string gate_trace;
  int64_t top_k = 64;
  int64_t beam_width = 4;
  double length_penalty = 0.6;
  std::string out;
};

int cmd_distill(const DistillArgs& a) {
  LoadedCheckpoint loaded = load_checkpoint<float>(a.teacher_ckpt);
  Transformer teacher = loaded.build_model();
  teacher.set_train(false);

  ParallelCorpus corpus = read_parallel(a.train_src, a.train_tgt, loaded.vocab);
  ParallelCorpus dev;
  bool has_dev = !a.dev_src.empty();
  if (has_dev) dev = read_parallel(a.dev_src, a.dev_tgt, loaded.vocab);

  TrainConfig tcfg;
  if (!a.train_config.empty()) tcfg = read_json_file(a.train_config).get<TrainConfig>();
  tcfg.regime = a.regime;
  ModelConfig mcfg = model_config_from_file_or_default(a.model_config, loaded.vocab.size());

  Transformer student(mcfg, tcfg.seed);
  GateState gs = gate_mode_from_name(a.gate_mode) == GateMode::scalar
                     ? GateState::scalar_init()
                     : GateState::pooled_init(mcfg.d_model);

  BeamConfig beam;
  beam.width = a.beam_width;
  beam.length_penalty = a.length_penalty;
  beam.max_len = mcfg.max_len - 1;
  std::vector<std::vector<int32_t>> pseudo;
  if (a.regime == "sentence_kd" || a.regime == "hybrid") {
    pseudo = make_pseudo_targets(teacher, corpus, beam);
  }

  TrainJob<float> job;
  job.student = &student;
  job.train_corpus = &corpus;
  job.dev_corpus = has_dev ? &dev : nullptr;
  job.config = tcfg;
  job.teacher = (a.regime == "token_kd" || a.regime == "hybrid") ? &teacher : nullptr;
  job.pseudo_targets = pseudo.empty() ? nullptr : &pseudo;
  job.gate = a.regime == "hybrid" ? &gs : nullptr;
  job.top_k = a.top_k;
  TrainResult result = train(job);
  save_checkpoint(a.out, student, loaded.vocab, result.steps_done,
                  static_cast<int64_t>(result.epochs.size()), &tcfg,
                  static_cast<const AdamState*>(nullptr),
                  a.regime == "hybrid" ? &gs : nullptr);
  if (!a.gate_trace.empty() && !result.gate_trace.empty()) {
    write_gate_trace_csv(a.gate_trace, result.gate_trace);
  }
  std::cout << "student (" << a.regime << ") trained: " << result.steps_done
            << " steps, best dev BLEU " << result.best_dev_bleu
            << (result.diverged ? " (diverged, rolled back)" : "") << ", checkpoint at " << a.out
            << "\n";
  return result.diverged ? 1 : 0;
}

struct TranslateArgs {
  std::string model_ckpt;
  std::string in, out;
  std::string mode = "beam";
  int64_t width = 4;
  double alpha = 0.6;
  int64_t max_len = 0;
  std::string reference;
};

int cmd_translate(const TranslateArgs& a) {
  LoadedCheckpoint loaded = load_checkpoint<float>(a.model_ckpt);
  Transformer model = loaded.build_model();
  model.set_train(false);
  auto lines = read_token_lines(a.in);
  int64_t max_len = a.max_len > 0 ? a.max_len : model.config().max_len - 1;

  std::vector<std::vector<std::string>> refs;
  if (a.mode == "tf") {
    if (a.reference.empty()) throw ConfigError("translate: tf mode needs --reference");
    refs = read_token_lines(a.reference);
    if (refs.size() != lines.size()) {
      throw FormatError("translate: reference line count differs from input");
    }
  }

  BeamConfig beam;
  beam.width = a.width;
  beam.length_penalty = a.alpha;
  beam.max_len = max_len;

  std::vector<std::vector<std::string>> out;
  out.reserve(lines.size());
  for (size_t i = 0; i < lines.size(); ++i) {
    std::vector<int32_t> src = loaded.vocab.encode(lines[i]);
    std::vector<int32_t> hyp;
    if (a.mode == "greedy") {
      hyp = strip_trailing_eos(greedy_decode(model, src, max_len));
    } else if (a.mode == "beam") {
      hyp = strip_trailing_eos(beam_search(model, src, beam));
    } else if (a.mode == "tf") {
      hyp = teacher_forced_predict(model, src, loaded.vocab.encode(refs[i]));
    } else {
      throw ConfigError("translate: unknown mode '" + a.mode + "'");
    }
    std::vector<std::string> toks;
    for (int32_t id : hyp) toks.push_back(loaded.vocab.token_of[static_cast<size_t>(id)]);
    out.push_back(std::move(toks));
  }
  write_token_lines(a.out, out);
  std::cout << "translated " << lines.size() << " sentences (" << a.mode << ") -> " << a.out
            << "\n";
  return 0;
}

struct ScoreArgs {
  std::string hyp, ref;
  bool smooth = false;
};

int cmd_score(const ScoreArgs& a) {
  auto hyps = read_token_lines(a.hyp);
  auto refs = read_token_lines(a.ref);
  BleuReport r = corpus_bleu(hyps, refs, 4, a.smooth);
  std::cout << r.to_line() << "\n";
  std::printf("  bleu            %.6f\n", r.bleu);
  for (int n = 0; n < 4; ++n) std::printf("  p%d              %.6f\n", n + 1, r.precisions[static_cast<size_t>(n)]);
  std::printf("  brevity_penalty %.6f\n", r.brevity_penalty);
  std::printf("  hyp_len         %lld\n", static_cast<long long>(r.hyp_len));
  std::printf("  ref_len         %lld\n", static_cast<long long>(r.ref_len));
  return 0;
}

struct ExperimentArgs {
  std::string study;
  std::string spec_path;
  std::string out_dir;
  int64_t jobs = 0;
};

int cmd_experiment(const ExperimentArgs& a) {
  ExperimentSpec spec;
  if (!a.spec_path.empty()) {
    nlohmann::json j = read_json_file(a.spec_path);
    if (!j.contains("study")) j["study"] = a.study;
    spec = j.get<ExperimentSpec>();
  } else {
    nlohmann::json j = {{"study", a.study}};
    spec = j.get<ExperimentSpec>();
  }
  spec.study = study_from_name(a.study);
  if (!a.out_dir.empty()) spec.out_dir = a.out_dir;
  if (a.jobs > 0) spec.jobs = a.jobs;
  ExperimentReport report = run_experiment(spec);
  std::cout << "study " << report.study << " finished in "
            << report.metadata["wall_seconds"].get<double>() << " s\n\n"
            << emit_markdown(report.table) << "\nreport written to " << spec.out_dir << "\n";
  return 0;
}

int cmd_gate_trace(const std::string& path) {
  auto rows = read_gate_trace_csv(path);
  std::printf("%8s %10s %12s %10s\n", "epoch", "mean_g", "train_loss", "dev_bleu");
  for (const auto& r : rows) {
    std::printf("%8lld %10.6f %12.6f %10.6f\n", static_cast<long long>(r.epoch), r.mean_g,
                r.train_loss, r.dev_bleu);
  }
  if (rows.size() >= 2) {
    std::printf("gate moved %.6f -> %.6f over %zu epochs\n", rows.front().mean_g,
                rows.back().mean_g, rows.size());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"distillab: sequence-level vs token-level distillation laboratory"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* sc_gen = app.add_subcommand("gen-data", "generate a synthetic parallel corpus");
  sc_gen->add_option("--task", gen.task, "copy|reverse|lexicon-reorder")->capture_default_str();
  sc_gen->add_option("--vocab", gen.vocab, "vocabulary size incl. specials")->capture_default_str();
  sc_gen->add_option("--pairs", gen.pairs, "number of sentence pairs")->capture_default_str();
  sc_gen->add_option("--len-min", gen.len_min)->capture_default_str();
  sc_gen->add_option("--len-max", gen.len_max)->capture_default_str();
  sc_gen->add_option("--seed", gen.seed)->capture_default_str();
  sc_gen->add_option("--out", gen.out, "output prefix (.src/.tgt)")->required();

  CorruptArgs cor;
  auto* sc_cor = app.add_subcommand("corrupt", "apply token noise to a text file");
  sc_cor->add_option("--in", cor.in)->required();
  sc_cor->add_option("--out", cor.out)->required();
  sc_cor->add_option("--profile", cor.profile, "none|moderate|high");
  sc_cor->add_option("--delete-p", cor.delete_p)->capture_default_str();
  sc_cor->add_option("--substitute-p", cor.substitute_p)->capture_default_str();
  sc_cor->add_option("--swap-p", cor.swap_p)->capture_default_str();
  sc_cor->add_option("--swap-k", cor.swap_k)->capture_default_str();
  sc_cor->add_option("--seed", cor.seed)->capture_default_str();

  TrainTeacherArgs tt;
  auto* sc_tt = app.add_subcommand("train-teacher", "train a teacher model");
  sc_tt->add_option("--train-src", tt.train_src)->required();
  sc_tt->add_option("--train-tgt", tt.train_tgt)->required();
  sc_tt->add_option("--dev-src", tt.dev_src);
  sc_tt->add_option("--dev-tgt", tt.dev_tgt);
  sc_tt->add_option("--config", tt.train_config, "train config JSON (TrainConfig keys)");
  sc_tt->add_option("--model", tt.model_config, "model config JSON (ModelConfig keys)");
  sc_tt->add_option("--out", tt.out, "checkpoint directory")->required();

  DistillArgs di;
  auto* sc_di = app.add_subcommand("distill", "train a student against a teacher");
  sc_di->add_option("--teacher", di.teacher_ckpt, "teacher checkpoint dir")->required();
  sc_di->add_option("--regime", di.regime, "token_kd|sentence_kd|hybrid")->capture_default_str();
  sc_di->add_option("--train-src", di.train_src)->required();
  sc_di->add_option("--train-tgt", di.train_tgt)->required();
  sc_di->add_option("--dev-src", di.dev_src);
  sc_di->add_option("--dev-tgt", di.dev_tgt);
  sc_di->add_option("--config", di.train_config, "train config JSON");
  sc_di->add_option("--model", di.model_config, "student model config JSON");
  sc_di->add_option("--gate-mode", di.gate_mode, "scalar|pooled-linear")->capture_default_str();
  sc_di->add_option("--gate-trace", di.gate_trace, "write per-epoch gate trace CSV here");
  sc_di->add_option("--top-k", di.top_k, "teacher distribution truncation")->capture_default_str();
  sc_di->add_option("--beam-width", di.beam_width)->capture_default_str();
  sc_di->add_option("--length-penalty", di.length_penalty)->capture_default_str();
  sc_di->add_option("--out", di.out, "student checkpoint directory")->required();

  TranslateArgs tr;
  auto* sc_tr = app.add_subcommand("translate", "decode a file with a trained model");
  sc_tr->add_option("--model", tr.model_ckpt, "checkpoint dir")->required();
  sc_tr->add_option("--in", tr.in)->required();
  sc_tr->add_option("--out", tr.out)->required();
  sc_tr->add_option("--mode", tr.mode, "greedy|beam|tf")->capture_default_str();
  sc_tr->add_option("--width", tr.width)->capture_default_str();
  sc_tr->add_option("--alpha", tr.alpha, "length penalty")->capture_default_str();
  sc_tr->add_option("--max-len", tr.max_len, "0 = model max_len - 1")->capture_default_str();
  sc_tr->add_option("--reference", tr.reference, "gold file for tf mode");

  ScoreArgs sco;
  auto* sc_sco = app.add_subcommand("score", "corpus BLEU of hypothesis vs reference");
  sc_sco->add_option("--hyp", sco.hyp)->required();
  sc_sco->add_option("--ref", sco.ref)->required();
  sc_sco->add_flag("--smooth", sco.smooth, "add-epsilon smoothing on zero matches");

  ExperimentArgs ex;
  auto* sc_ex = app.add_subcommand("experiment", "run a study and emit its report");
  sc_ex->add_option("study", ex.study, "size_sweep|noise_sweep|decoding|hybrid_vs_single")
      ->required();
  sc_ex->add_option("--spec", ex.spec_path, "experiment spec JSON");
  sc_ex->add_option("--out", ex.out_dir, "run directory override");
  sc_ex->add_option("--jobs", ex.jobs, "parallel cells (0 = hardware)")->capture_default_str();

  std::string trace_path;
  auto* sc_gt = app.add_subcommand("gate-trace", "pretty-print a gate trace CSV");
  sc_gt->add_option("--file", trace_path)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (sc_gen->parsed()) return cmd_gen_data(gen);
    if (sc_cor->parsed()) return cmd_corrupt(cor);
    if (sc_tt->parsed()) return cmd_train_teacher(tt);
    if (sc_di->parsed()) return cmd_distill(di);
    if (sc_tr->parsed()) return cmd_translate(tr);
    if (sc_sco->parsed()) return cmd_score(sco);
    if (sc_ex->parsed()) return cmd_experiment(ex);
    if (sc_gt->parsed()) return cmd_gate_trace(trace_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad JSON: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
