// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: the four studies (student-size sweep, noise
// sweep, decoding comparison, hybrid-vs-single ablation) over synthetic
// tasks, with paper-shaped report tables (BLEU mean +- stdev over seeds,
// delta and delta-rate columns) written as CSV and markdown under a run
// directory together with checkpoints and a manifest.
//
// Independent (condition x seed) cells run on a small thread pool; each
// cell is deterministic in its recorded (config, seed), and assembly is
// an ordered reduction, so reports reproduce exactly.

#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distillab/bleu.hpp"
#include "distillab/checkpoint.hpp"
#include "distillab/corpus.hpp"
#include "distillab/decoder.hpp"
#include "distillab/distill.hpp"
#include "distillab/model.hpp"
#include "distillab/noiser.hpp"
#include "distillab/trainer.hpp"

namespace distillab {

struct TaskSpec {
  std::string kind = "lexicon-reorder";
  int64_t vocab_size = 512;
  int64_t train_pairs = 20000;
  int64_t dev_pairs = 1000;
  int64_t test_pairs = 1000;
  int64_t len_lo = 4;
  int64_t len_hi = 24;
  uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"kind", t.kind},           {"vocab_size", t.vocab_size},
       {"train_pairs", t.train_pairs}, {"dev_pairs", t.dev_pairs},
       {"test_pairs", t.test_pairs},   {"len_lo", t.len_lo},
       {"len_hi", t.len_hi},           {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  TaskSpec d;
  t.kind = j.value("kind", d.kind);
  t.vocab_size = j.value("vocab_size", d.vocab_size);
  t.train_pairs = j.value("train_pairs", d.train_pairs);
  t.dev_pairs = j.value("dev_pairs", d.dev_pairs);
  t.test_pairs = j.value("test_pairs", d.test_pairs);
  t.len_lo = j.value("len_lo", d.len_lo);
  t.len_hi = j.value("len_hi", d.len_hi);
  t.seed = j.value("seed", d.seed);
}

struct StudentSpec {
  std::string name;
  ModelConfig config;
  // capacity-matched budget overrides; 0 inherits the shared student
  // train config (small models need more steps to converge)
  int64_t max_epochs = 0;
  double base_lr = 0.0;
};

inline void to_json(nlohmann::json& j, const StudentSpec& s) {
  j = {{"name", s.name}, {"config", s.config}};
  if (s.max_epochs > 0) j["max_epochs"] = s.max_epochs;
  if (s.base_lr > 0) j["base_lr"] = s.base_lr;
}

inline void from_json(const nlohmann::json& j, StudentSpec& s) {
  j.at("name").get_to(s.name);
  j.at("config").get_to(s.config);
  s.max_epochs = j.value("max_epochs", int64_t{0});
  s.base_lr = j.value("base_lr", 0.0);
}

enum class Study { size_sweep, noise_sweep, decoding, hybrid_vs_single };

inline Study study_from_name(const std::string& n) {
  if (n == "size_sweep") return Study::size_sweep;
  if (n == "noise_sweep") return Study::noise_sweep;
  if (n == "decoding") return Study::decoding;
  if (n == "hybrid_vs_single") return Study::hybrid_vs_single;
  throw ConfigError("unknown study '" + n + "'");
}

inline const char* study_name(Study s) {
  switch (s) {
    case Study::size_sweep: return "size_sweep";
    case Study::noise_sweep: return "noise_sweep";
    case Study::decoding: return "decoding";
    case Study::hybrid_vs_single: return "hybrid_vs_single";
  }
  return "?";
}

// Desk-scale student ladder: XS..L spanning a >=16x parameter range, with
// the teacher shaped like L.
inline std::vector<StudentSpec> default_student_ladder(int64_t vocab_size, int64_t max_len) {
  auto mk = [&](const char* name, int64_t d, int64_t h, int64_t layers, int64_t ffn) {
    StudentSpec s;
    s.name = name;
    s.config.vocab_size = vocab_size;
    s.config.d_model = d;
    s.config.n_heads = h;
    s.config.n_enc_layers = layers;
    s.config.n_dec_layers = layers;
    s.config.d_ffn = ffn;
    s.config.dropout_p = 0.1;
    s.config.max_len = max_len;
    return s;
  };
  return {mk("XS", 16, 2, 1, 32), mk("S", 32, 2, 1, 64), mk("M", 64, 4, 2, 128),
          mk("L", 128, 4, 4, 256)};
}

struct ExperimentSpec {
  Study study = Study::size_sweep;
  TaskSpec task;
  ModelConfig teacher_config;
  TrainConfig teacher_train;
  std::vector<StudentSpec> students;
  std::vector<std::string> noise_profiles{"none", "moderate", "high"};
  std::vector<uint64_t> seeds{1, 2, 3};
  TrainConfig student_train;
  BeamConfig beam;  // width 4, penalty 0.6 defaults
  int64_t top_k = 64;
  std::string gate_mode = "pooled-linear";
  std::string out_dir = "runs/study";
  int64_t jobs = 0;  // 0 = hardware concurrency
  bool save_checkpoints = true;

  void validate() const {
    if (seeds.empty()) throw ConfigError("experiment: at least one seed required");
    if (students.empty()) throw ConfigError("experiment: at least one student config required");
    if (study == Study::noise_sweep && noise_profiles.empty()) {
      throw ConfigError("experiment: noise sweep needs profiles");
    }
    beam.validate();
    teacher_train.validate();
    student_train.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  j = {{"study", study_name(s.study)},
       {"task", s.task},
       {"teacher_config", s.teacher_config},
       {"teacher_train", s.teacher_train},
       {"students", s.students},
       {"noise_profiles", s.noise_profiles},
       {"seeds", s.seeds},
       {"student_train", s.student_train},
       {"beam", {{"width", s.beam.width}, {"length_penalty", s.beam.length_penalty}, {"max_len", s.beam.max_len}}},
       {"top_k", s.top_k},
       {"gate_mode", s.gate_mode},
       {"out_dir", s.out_dir},
       {"jobs", s.jobs},
       {"save_checkpoints", s.save_checkpoints}};
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  s.study = study_from_name(j.at("study").get<std::string>());
  if (j.contains("task")) j.at("task").get_to(s.task);
  if (j.contains("students")) j.at("students").get_to(s.students);
  if (s.students.empty()) {
    s.students = default_student_ladder(s.task.vocab_size, s.task.len_hi * 2 + 8);
  }
  if (j.contains("teacher_config")) {
    j.at("teacher_config").get_to(s.teacher_config);
  } else {
    s.teacher_config = s.students.back().config;  // teacher = L
  }
  if (j.contains("teacher_train")) j.at("teacher_train").get_to(s.teacher_train);
  if (j.contains("student_train")) j.at("student_train").get_to(s.student_train);
  if (j.contains("noise_profiles")) j.at("noise_profiles").get_to(s.noise_profiles);
  if (j.contains("seeds")) j.at("seeds").get_to(s.seeds);
  s.beam.max_len = s.task.len_hi + 8;
  if (j.contains("beam")) {
    s.beam.width = j.at("beam").value("width", int64_t{4});
    s.beam.length_penalty = j.at("beam").value("length_penalty", 0.6);
    s.beam.max_len = j.at("beam").value("max_len", s.beam.max_len);
  }
  s.top_k = j.value("top_k", s.top_k);
  s.gate_mode = j.value("gate_mode", s.gate_mode);
  s.out_dir = j.value("out_dir", s.out_dir);
  s.jobs = j.value("jobs", s.jobs);
  s.save_checkpoints = j.value("save_checkpoints", s.save_checkpoints);
}

// ---------------------------------------------------------------------------
// Report tables
// ---------------------------------------------------------------------------

struct ReportTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

struct ExperimentReport {
  std::string study;
  ReportTable table;
  nlohmann::json metadata;
  // raw BLEU per "<condition>/<regime>/<seed>" for arithmetic recomputation
  std::map<std::string, double> raw_bleu;
  // gate traces per hybrid seed
  std::map<std::string, std::vector<GateTraceRow>> gate_traces;
};

inline std::string format_cell(double v, int decimals = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string emit_csv(const ReportTable& t) {
  std::ostringstream os;
  for (size_t i = 0; i < t.header.size(); ++i) {
    if (i) os << ',';
    os << t.header[i];
  }
  os << '\n';
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << row[i];
    }
    os << '\n';
  }
  return os.str();
}

inline ReportTable parse_csv(const std::string& text) {
  ReportTable t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

inline std::string emit_markdown(const ReportTable& t) {
  std::ostringstream os;
  os << '|';
  for (const auto& h : t.header) os << ' ' << h << " |";
  os << "\n|";
  for (size_t i = 0; i < t.header.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& row : t.rows) {
    os << '|';
    for (const auto& c : row) os << ' ' << (c.empty() ? "-" : c) << " |";
    os << '\n';
  }
  return os.str();
}

// FNV-1a, for the manifest's artifact hashes.
inline std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Scoring helpers
// ---------------------------------------------------------------------------

template <class S>
double beam_bleu(TransformerT<S>& model, const ParallelCorpus& corpus, const BeamConfig& beam) {
  std::vector<std::vector<int32_t>> hyps, refs;
  for (const auto& [src, tgt] : corpus.pairs) {
    hyps.push_back(strip_trailing_eos(beam_search(model, src, beam)));
    refs.push_back(tgt);
  }
  return corpus_bleu(hyps, refs, 4, /*smooth=*/true).bleu;
}

template <class S>
double teacher_forced_bleu(TransformerT<S>& model, const ParallelCorpus& corpus) {
  std::vector<std::vector<int32_t>> hyps, refs;
  for (const auto& [src, tgt] : corpus.pairs) {
    hyps.push_back(teacher_forced_predict(model, src, tgt));
    refs.push_back(tgt);
  }
  return corpus_bleu(hyps, refs, 4, /*smooth=*/true).bleu;
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

namespace detail {

struct SplitCorpora {
  ParallelCorpus train, dev, test;
};

inline SplitCorpora make_splits(const TaskSpec& t) {
  int64_t total = t.train_pairs + t.dev_pairs + t.test_pairs;
  ParallelCorpus all = generate_task(task_kind_from_name(t.kind), t.vocab_size, total, t.len_lo,
                                     t.len_hi, t.seed);
  SplitCorpora s;
  s.train.vocab = s.dev.vocab = s.test.vocab = all.vocab;
  s.train.task_descriptor = all.task_descriptor + " [train]";
  s.dev.task_descriptor = all.task_descriptor + " [dev]";
  s.test.task_descriptor = all.task_descriptor + " [test]";
  for (int64_t i = 0; i < t.train_pairs; ++i) s.train.pairs.push_back(all.pairs[static_cast<size_t>(i)]);
  for (int64_t i = 0; i < t.dev_pairs; ++i) {
    s.dev.pairs.push_back(all.pairs[static_cast<size_t>(t.train_pairs + i)]);
  }
  for (int64_t i = 0; i < t.test_pairs; ++i) {
    s.test.pairs.push_back(all.pairs[static_cast<size_t>(t.train_pairs + t.dev_pairs + i)]);
  }
  return s;
}

// deterministic parallel map over indices [0, n)
inline void parallel_cells(int64_t n, int64_t jobs, const std::function<void(int64_t)>& fn) {
  if (jobs <= 0) jobs = static_cast<int64_t>(std::thread::hardware_concurrency());
  jobs = std::max<int64_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  for (int64_t w = 0; w < jobs; ++w) {
    pool.emplace_back([&]() {
      for (int64_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

struct CellOutcome {
  bool failed = false;
  std::string error;
  double bleu = 0.0;
  double tf_bleu = 0.0;
  TrainResultT<float> metrics;
};

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= static_cast<double>(xs.size());
  return {mean, std::sqrt(var)};
}

}  // namespace detail

class ExperimentRunner {
 public:
  explicit ExperimentRunner(ExperimentSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  ExperimentReport run() {
    auto t0 = std::chrono::steady_clock::now();
    splits_ = detail::make_splits(spec_.task);
    train_teacher();
    ExperimentReport report;
    report.study = study_name(spec_.study);
    switch (spec_.study) {
      case Study::size_sweep: run_size_sweep(report); break;
      case Study::noise_sweep: run_noise_sweep(report); break;
      case Study::decoding: run_decoding(report); break;
      case Study::hybrid_vs_single: run_hybrid(report); break;
    }
    auto t1 = std::chrono::steady_clock::now();
    report.metadata["spec"] = spec_;
    report.metadata["teacher_test_bleu"] = teacher_test_bleu_;
    report.metadata["teacher_params"] = param_count(spec_.teacher_config);
    report.metadata["wall_seconds"] =
        std::chrono::duration<double>(t1 - t0).count();
    {
      nlohmann::json raw = nlohmann::json::object();
      for (const auto& [k, v] : report.raw_bleu) raw[k] = v;
      report.metadata["raw_bleu"] = raw;
    }
    return report;
  }

  // Writes report.csv / report.md / gate traces / manifest under out_dir.
  static void emit(const ExperimentReport& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::string csv = emit_csv(report.table);
    {
      std::ofstream f(out_dir + "/report.csv");
      if (!f) throw IoError("cannot write " + out_dir + "/report.csv");
      f << csv;
    }
    {
      std::ofstream f(out_dir + "/report.md");
      if (!f) throw IoError("cannot write " + out_dir + "/report.md");
      f << emit_markdown(report.table);
    }
    nlohmann::json manifest = report.metadata;
    manifest["study"] = report.study;
    manifest["artifacts"]["report.csv"] = fnv1a_hex(csv);
    for (const auto& [name, rows] : report.gate_traces) {
      std::string path = out_dir + "/" + name;
      write_gate_trace_csv(path, rows);
      std::ifstream f(path);
      std::stringstream ss;
      ss << f.rdbuf();
      manifest["artifacts"][name] = fnv1a_hex(ss.str());
    }
    std::ofstream mf(out_dir + "/manifest.json");
    if (!mf) throw IoError("cannot write " + out_dir + "/manifest.json");
    mf << manifest.dump(2) << "\n";
  }

  const ParallelCorpus& train_corpus() const { return splits_.train; }
  const ParallelCorpus& test_corpus() const { return splits_.test; }
  Transformer& teacher() { return *teacher_; }
  double teacher_test_bleu() const { return teacher_test_bleu_; }

 private:
  ExperimentSpec spec_;
  detail::SplitCorpora splits_;
  std::unique_ptr<Transformer> teacher_;
  double teacher_test_bleu_ = 0.0;

  void train_teacher() {
    teacher_ = std::make_unique<Transformer>(spec_.teacher_config, spec_.teacher_train.seed);
    TrainConfig cfg = spec_.teacher_train;
    cfg.regime = "teacher";
    TrainJob<float> job;
    job.student = teacher_.get();
    job.train_corpus = &splits_.train;
    job.dev_corpus = &splits_.dev;
    job.config = cfg;
    train(job);
    teacher_->set_train(false);
    teacher_->set_requires_grad(false);
    teacher_test_bleu_ = beam_bleu(*teacher_, splits_.test, spec_.beam);
    if (spec_.save_checkpoints) {
      save_checkpoint(spec_.out_dir + "/ckpt/teacher", *teacher_, splits_.train.vocab, 0, 0,
                      &cfg);
    }
  }

  // one student training cell; shared by the studies
  detail::CellOutcome run_cell(const StudentSpec& stud, const std::string& regime, uint64_t seed,
                               const ParallelCorpus& train_corpus,
                               const std::vector<std::vector<int32_t>>* pseudo,
                               const std::string& ckpt_tag, bool also_tf = false,
                               std::vector<GateTraceRow>* trace_out = nullptr) {
    const ModelConfig& cfg = stud.config;
    detail::CellOutcome out;
    try {
      Transformer student(cfg, seed);
      TrainConfig tcfg = spec_.student_train;
      if (stud.max_epochs > 0) tcfg.max_epochs = stud.max_epochs;
      if (stud.base_lr > 0) tcfg.base_lr = stud.base_lr;
      tcfg.regime = regime;
      tcfg.seed = seed;
      GateState gs = gate_mode_from_name(spec_.gate_mode) == GateMode::scalar
                         ? GateState::scalar_init()
                         : GateState::pooled_init(cfg.d_model);
      TrainJob<float> job;
      job.student = &student;
      job.train_corpus = &train_corpus;
      job.dev_corpus = &splits_.dev;
      job.config = tcfg;
      job.teacher = (regime == "token_kd" || regime == "hybrid") ? teacher_.get() : nullptr;
      job.pseudo_targets = (regime == "sentence_kd" || regime == "hybrid") ? pseudo : nullptr;
      job.gate = regime == "hybrid" ? &gs : nullptr;
      job.top_k = spec_.top_k;
      out.metrics = train(job);
      if (out.metrics.diverged) {
        out.failed = true;
        out.error = "diverged";
        return out;
      }
      out.bleu = beam_bleu(student, splits_.test, spec_.beam);
      if (also_tf) out.tf_bleu = teacher_forced_bleu(student, splits_.test);
      if (trace_out) *trace_out = out.metrics.gate_trace;
      if (spec_.save_checkpoints) {
        save_checkpoint(spec_.out_dir + "/ckpt/" + ckpt_tag, student, splits_.train.vocab,
                        out.metrics.steps_done, static_cast<int64_t>(out.metrics.epochs.size()),
                        &tcfg);
      }
    } catch (const Error& e) {
      out.failed = true;
      out.error = e.what();
    }
    return out;
  }

  void run_size_sweep(ExperimentReport& report) {
    report.table.header = {"condition", "regime", "params",  "bleu_mean",
                           "bleu_std",  "delta",  "status"};
    const auto& sizes = spec_.students;
    const std::vector<std::string> regimes{"token_kd", "sentence_kd"};
    auto pseudo = make_pseudo_targets(*teacher_, splits_.train, spec_.beam);

    struct Cell {
      size_t size_idx;
      size_t regime_idx;
      size_t seed_idx;
    };
    std::vector<Cell> cells;
    for (size_t si = 0; si < sizes.size(); ++si) {
      for (size_t ri = 0; ri < regimes.size(); ++ri) {
        for (size_t ki = 0; ki < spec_.seeds.size(); ++ki) cells.push_back({si, ri, ki});
      }
    }
    std::vector<detail::CellOutcome> outcomes(cells.size());
    detail::parallel_cells(static_cast<int64_t>(cells.size()), spec_.jobs, [&](int64_t i) {
      const Cell& c = cells[static_cast<size_t>(i)];
      uint64_t seed = spec_.seeds[c.seed_idx];
      outcomes[static_cast<size_t>(i)] = run_cell(
          sizes[c.size_idx], regimes[c.regime_idx], seed, splits_.train,
          regimes[c.regime_idx] == "sentence_kd" ? &pseudo : nullptr,
          sizes[c.size_idx].name + "_" + regimes[c.regime_idx] + "_seed" + std::to_string(seed));
    });

    // teacher row first
    report.table.rows.push_back({"teacher", "teacher",
                                 std::to_string(param_count(spec_.teacher_config)),
                                 format_cell(teacher_test_bleu_), format_cell(0.0), "", "ok"});
    for (size_t si = 0; si < sizes.size(); ++si) {
      std::map<std::string, std::vector<double>> by_regime;
      bool any_failed = false;
      std::string error;
      for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].size_idx != si) continue;
        const auto& o = outcomes[i];
        const std::string& regime = regimes[cells[i].regime_idx];
        if (o.failed) {
          any_failed = true;
          error = o.error;
          continue;
        }
        by_regime[regime].push_back(o.bleu);
        report.raw_bleu[sizes[si].name + "/" + regime + "/" +
                        std::to_string(spec_.seeds[cells[i].seed_idx])] = o.bleu;
      }
      auto [tok_mean, tok_std] = detail::mean_std(by_regime["token_kd"]);
      auto [sen_mean, sen_std] = detail::mean_std(by_regime["sentence_kd"]);
      double delta = tok_mean - sen_mean;
      for (const std::string& regime : regimes) {
        auto [m, sd] = regime == "token_kd" ? std::pair{tok_mean, tok_std}
                                            : std::pair{sen_mean, sen_std};
        report.table.rows.push_back(
            {sizes[si].name, regime, std::to_string(param_count(sizes[si].config)),
             format_cell(m), format_cell(sd), format_cell(delta),
             any_failed ? "failed:" + error : "ok"});
      }
    }
  }

  void run_noise_sweep(ExperimentReport& report) {
    report.table.header = {"condition", "regime",     "params", "bleu_mean", "bleu_std",
                           "delta",     "delta_rate", "status"};
    const StudentSpec& stud = spec_.students.front();
    const ModelConfig& cfg = stud.config;
    const std::vector<std::string> regimes{"token_kd", "sentence_kd"};

    // per profile: corrupted training sources + matching pseudo-targets
    std::vector<ParallelCorpus> corpora;
    std::vector<std::vector<std::vector<int32_t>>> pseudos;
    for (const std::string& pname : spec_.noise_profiles) {
      NoiseProfile profile = NoiseProfile::by_name(pname);
      ParallelCorpus noised = profile.name == "none"
                                  ? splits_.train
                                  : corrupt_sources(splits_.train, profile, spec_.task.seed);
      pseudos.push_back(make_pseudo_targets(*teacher_, noised, spec_.beam));
      corpora.push_back(std::move(noised));
    }

    struct Cell {
      size_t profile_idx;
      size_t regime_idx;
      size_t seed_idx;
    };
    std::vector<Cell> cells;
    for (size_t pi = 0; pi < spec_.noise_profiles.size(); ++pi) {
      for (size_t ri = 0; ri < regimes.size(); ++ri) {
        for (size_t ki = 0; ki < spec_.seeds.size(); ++ki) cells.push_back({pi, ri, ki});
      }
    }
    std::vector<detail::CellOutcome> outcomes(cells.size());
    detail::parallel_cells(static_cast<int64_t>(cells.size()), spec_.jobs, [&](int64_t i) {
      const Cell& c = cells[static_cast<size_t>(i)];
      uint64_t seed = spec_.seeds[c.seed_idx];
      outcomes[static_cast<size_t>(i)] =
          run_cell(stud, regimes[c.regime_idx], seed, corpora[c.profile_idx],
                   &pseudos[c.profile_idx],
                   spec_.noise_profiles[c.profile_idx] + "_" + regimes[c.regime_idx] + "_seed" +
                       std::to_string(seed));
    });

    std::map<std::string, double> regime_mean_at_none;
    for (size_t pi = 0; pi < spec_.noise_profiles.size(); ++pi) {
      std::map<std::string, std::vector<double>> by_regime;
      bool any_failed = false;
      std::string error;
      for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].profile_idx != pi) continue;
        const auto& o = outcomes[i];
        if (o.failed) {
          any_failed = true;
          error = o.error;
          continue;
        }
        const std::string& regime = regimes[cells[i].regime_idx];
        by_regime[regime].push_back(o.bleu);
        report.raw_bleu[spec_.noise_profiles[pi] + "/" + regime + "/" +
                        std::to_string(spec_.seeds[cells[i].seed_idx])] = o.bleu;
      }
      auto [tok_mean, tok_std] = detail::mean_std(by_regime["token_kd"]);
      auto [sen_mean, sen_std] = detail::mean_std(by_regime["sentence_kd"]);
      double delta = tok_mean - sen_mean;
      if (pi == 0) {
        regime_mean_at_none["token_kd"] = tok_mean;
        regime_mean_at_none["sentence_kd"] = sen_mean;
      }
      for (const std::string& regime : regimes) {
        auto [m, sd] = regime == "token_kd" ? std::pair{tok_mean, tok_std}
                                            : std::pair{sen_mean, sen_std};
        std::string rate;
        if (pi != 0 && regime_mean_at_none[regime] > 0) {
          rate = format_cell(
              100.0 * (m - regime_mean_at_none[regime]) / regime_mean_at_none[regime], 4);
        }
        report.table.rows.push_back({spec_.noise_profiles[pi], regime,
                                     std::to_string(param_count(cfg)), format_cell(m),
                                     format_cell(sd), format_cell(delta), rate,
                                     any_failed ? "failed:" + error : "ok"});
      }
    }
  }

  void run_decoding(ExperimentReport& report) {
    report.table.header = {"condition", "params",   "bs_token", "bs_sentence", "delta_bs",
                           "tf_token",  "tf_sentence", "delta_tf", "status"};
    const StudentSpec& stud = spec_.students.front();
    const ModelConfig& cfg = stud.config;
    const std::vector<std::string> regimes{"token_kd", "sentence_kd"};
    auto pseudo = make_pseudo_targets(*teacher_, splits_.train, spec_.beam);

    struct Cell {
      size_t regime_idx;
      size_t seed_idx;
    };
    std::vector<Cell> cells;
    for (size_t ri = 0; ri < regimes.size(); ++ri) {
      for (size_t ki = 0; ki < spec_.seeds.size(); ++ki) cells.push_back({ri, ki});
    }
    std::vector<detail::CellOutcome> outcomes(cells.size());
    detail::parallel_cells(static_cast<int64_t>(cells.size()), spec_.jobs, [&](int64_t i) {
      const Cell& c = cells[static_cast<size_t>(i)];
      uint64_t seed = spec_.seeds[c.seed_idx];
      outcomes[static_cast<size_t>(i)] =
          run_cell(stud, regimes[c.regime_idx], seed, splits_.train,
                   regimes[c.regime_idx] == "sentence_kd" ? &pseudo : nullptr,
                   "decoding_" + regimes[c.regime_idx] + "_seed" + std::to_string(seed),
                   /*also_tf=*/true);
    });

    std::map<std::string, std::vector<double>> bs, tf;
    bool any_failed = false;
    std::string error;
    for (size_t i = 0; i < cells.size(); ++i) {
      const auto& o = outcomes[i];
      const std::string& regime = regimes[cells[i].regime_idx];
      if (o.failed) {
        any_failed = true;
        error = o.error;
        continue;
      }
      bs[regime].push_back(o.bleu);
      tf[regime].push_back(o.tf_bleu);
      std::string seed_s = std::to_string(spec_.seeds[cells[i].seed_idx]);
      report.raw_bleu["bs/" + regime + "/" + seed_s] = o.bleu;
      report.raw_bleu["tf/" + regime + "/" + seed_s] = o.tf_bleu;
    }
    double bs_tok = detail::mean_std(bs["token_kd"]).first;
    double bs_sen = detail::mean_std(bs["sentence_kd"]).first;
    double tf_tok = detail::mean_std(tf["token_kd"]).first;
    double tf_sen = detail::mean_std(tf["sentence_kd"]).first;
    report.table.rows.push_back({spec_.task.kind, std::to_string(param_count(cfg)),
                                 format_cell(bs_tok), format_cell(bs_sen),
                                 format_cell(bs_tok - bs_sen), format_cell(tf_tok),
                                 format_cell(tf_sen), format_cell(tf_tok - tf_sen),
                                 any_failed ? "failed:" + error : "ok"});
  }

  void run_hybrid(ExperimentReport& report) {
    report.table.header = {"condition", "params", "bleu_mean", "bleu_std", "status"};
    const StudentSpec& stud = spec_.students.front();
    const ModelConfig& cfg = stud.config;
    const std::vector<std::string> regimes{"sentence_kd", "token_kd", "hybrid"};
    auto pseudo = make_pseudo_targets(*teacher_, splits_.train, spec_.beam);

    struct Cell {
      size_t regime_idx;
      size_t seed_idx;
    };
    std::vector<Cell> cells;
    for (size_t ri = 0; ri < regimes.size(); ++ri) {
      for (size_t ki = 0; ki < spec_.seeds.size(); ++ki) cells.push_back({ri, ki});
    }
    std::vector<detail::CellOutcome> outcomes(cells.size());
    std::vector<std::vector<GateTraceRow>> traces(cells.size());
    detail::parallel_cells(static_cast<int64_t>(cells.size()), spec_.jobs, [&](int64_t i) {
      const Cell& c = cells[static_cast<size_t>(i)];
      uint64_t seed = spec_.seeds[c.seed_idx];
      const std::string& regime = regimes[c.regime_idx];
      outcomes[static_cast<size_t>(i)] = run_cell(
          stud, regime, seed, splits_.train,
          regime == "token_kd" ? nullptr : &pseudo,
          "hybrid_study_" + regime + "_seed" + std::to_string(seed), /*also_tf=*/false,
          regime == "hybrid" ? &traces[static_cast<size_t>(i)] : nullptr);
    });

    for (size_t ri = 0; ri < regimes.size(); ++ri) {
      std::vector<double> bleus;
      bool any_failed = false;
      std::string error;
      for (size_t i = 0; i < cells.size(); ++i) {
        if (cells[i].regime_idx != ri) continue;
        const auto& o = outcomes[i];
        uint64_t seed = spec_.seeds[cells[i].seed_idx];
        if (o.failed) {
          any_failed = true;
          error = o.error;
          continue;
        }
        bleus.push_back(o.bleu);
        report.raw_bleu[regimes[ri] + "/" + std::to_string(seed)] = o.bleu;
        if (regimes[ri] == "hybrid") {
          report.gate_traces["gate_trace_seed" + std::to_string(seed) + ".csv"] =
              traces[i];
        }
      }
      auto [m, sd] = detail::mean_std(bleus);
      report.table.rows.push_back({regimes[ri], std::to_string(param_count(cfg)), format_cell(m),
                                   format_cell(sd), any_failed ? "failed:" + error : "ok"});
    }
    // the representative trace mirrors the first seed
    if (!spec_.seeds.empty()) {
      auto it = report.gate_traces.find("gate_trace_seed" + std::to_string(spec_.seeds[0]) +
                                        ".csv");
      if (it != report.gate_traces.end()) report.gate_traces["gate_trace.csv"] = it->second;
    }
  }
};

inline ExperimentReport run_experiment(const ExperimentSpec& spec) {
  ExperimentRunner runner(spec);
  ExperimentReport report = runner.run();
  ExperimentRunner::emit(report, spec.out_dir);
  return report;
}

}  // namespace distillab
