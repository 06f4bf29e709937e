#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "m3bind/evaluation.hpp"
#include "m3bind/training.hpp"

namespace m3bind {

namespace fs = std::filesystem;

// One directory per run, addressed by a prefix of the config fingerprint so
// distinct configurations never overwrite each other. Corpora are keyed by
// the dataset fingerprint and shared between runs that differ only in
// training settings.
struct RunPaths {
  fs::path corpora_dir;
  fs::path run_dir;
  fs::path checkpoints_dir;
  fs::path logs_dir;
  fs::path eval_dir;

  fs::path corpus_file(const std::string& modality) const {
    return corpora_dir / (modality + ".m3bd");
  }
  fs::path corpus_meta(const std::string& modality) const {
    return corpora_dir / (modality + ".meta.json");
  }
  fs::path phase0_ckpt() const { return checkpoints_dir / "phase0.m3ck"; }
  fs::path bind_ckpt() const { return checkpoints_dir / "bind.m3ck"; }
  fs::path bind_step_ckpt(std::uint64_t step) const {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "bind_step%06llu.m3ck",
                  static_cast<unsigned long long>(step));
    return checkpoints_dir / buf;
  }
  fs::path student_ckpt() const { return checkpoints_dir / "student.m3ck"; }
};

inline RunPaths run_paths(const RunConfig& cfg) {
  RunPaths p;
  const fs::path root(cfg.out_dir);
  p.corpora_dir = root / "corpora" / dataset_fingerprint(cfg).substr(0, 12);
  p.run_dir = root / config_fingerprint(cfg).substr(0, 12);
  p.checkpoints_dir = p.run_dir / "checkpoints";
  p.logs_dir = p.run_dir / "logs";
  p.eval_dir = p.run_dir / "eval";
  return p;
}

inline void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataFormatError("cannot write " + path.string());
  out << content;
}

inline Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataFormatError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw DataFormatError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// generate: one corpus file per modality plus a JSON sidecar carrying the
// seed, the dataset spec and its fingerprint. Rerunning with the same config
// produces bit-identical files.
// ---------------------------------------------------------------------------

inline Json do_generate(const RunConfig& cfg) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  fs::create_directories(paths.corpora_dir);
  const GeneratedData data = generate_dataset(cfg.dataset, cfg.master_seed);
  Json files = Json::array();
  for (const auto& shape : cfg.dataset.modalities) {
    const ModalityData& md = data.modalities.at(shape.id);
    const fs::path file = paths.corpus_file(shape.id);
    save_corpus(file.string(), md.train, static_cast<std::uint32_t>(cfg.dataset.num_classes),
                static_cast<std::uint32_t>(shape.obs_dim),
                static_cast<std::uint32_t>(cfg.dataset.vocab_size));
    const Json meta{{"modality_id", shape.id},
                    {"master_seed", cfg.master_seed},
                    {"dataset", cfg.dataset},
                    {"dataset_fingerprint", dataset_fingerprint(cfg)},
                    {"record_count", md.train.size()},
                    {"format_version", kCorpusVersion}};
    write_text_file(paths.corpus_meta(shape.id), meta.dump() + "\n");
    files.push_back(file.string());
  }
  return Json{{"corpora_dir", paths.corpora_dir.string()},
              {"dataset_fingerprint", dataset_fingerprint(cfg)},
              {"files", files}};
}

// Loads the persisted corpora into the run state, verifying the sidecar
// fingerprint and the header fields against the active config.
inline void load_corpora_into(RunState& rs, const RunPaths& paths) {
  const std::string expect = dataset_fingerprint(rs.cfg);
  for (auto& b : rs.bundles) {
    const fs::path file = paths.corpus_file(b.id);
    if (!fs::exists(file)) {
      throw DataFormatError("corpus file missing: " + file.string() + " (run `generate` first)");
    }
    const Json meta = read_json_file(paths.corpus_meta(b.id));
    const std::string got = meta.value("dataset_fingerprint", std::string());
    if (got != expect) {
      throw DataFormatError("corpus/config fingerprint mismatch for '" + b.id + "': corpus " +
                            got.substr(0, 12) + "... vs config " + expect.substr(0, 12) + "...");
    }
    auto [header, corpus] = load_corpus(file.string(), b.id);
    if (header.num_classes != rs.cfg.dataset.num_classes ||
        header.vocab_size != rs.cfg.dataset.vocab_size ||
        header.obs_dim != rs.cfg.dataset.shape_of(b.id).obs_dim ||
        header.record_count != rs.cfg.dataset.shape_of(b.id).corpus_size) {
      throw DataFormatError("corpus header mismatch for '" + b.id + "' in " + file.string());
    }
    rs.data.modalities.at(b.id).train = std::move(corpus);
  }
}

// ---------------------------------------------------------------------------
// train: phase 0 then the binding phase, with checkpoints and metrics logs.
// ---------------------------------------------------------------------------

struct TrainOutputs {
  RunPaths paths;
  std::map<std::string, PretrainResult> phase0;
  std::string base_sha_before_bind;
  std::string base_sha_after_bind;
};

inline TrainOutputs do_train(const RunConfig& cfg, const std::string& resume_path = "",
                             bool force = false) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  fs::create_directories(paths.checkpoints_dir);
  fs::create_directories(paths.logs_dir);
  write_text_file(paths.run_dir / "config.json", canonical_json(cfg) + "\n");

  RunState rs = build_run_state(cfg);
  load_corpora_into(rs, paths);

  TrainOutputs out;
  out.paths = paths;

  BindState bs;
  bool bind_initialized = false;

  if (!resume_path.empty()) {
    const auto peek = load_archive(resume_path);
    const std::string phase = peek.archive.get_str("meta/phase");
    if (phase == kPhase0) {
      load_checkpoint(rs, nullptr, nullptr, resume_path, force);
      for (auto& b : rs.bundles) {
        b.img.mlp.frozen = true;
        b.txt.mlp.frozen = true;
      }
      rs.phase0_done = true;
    } else if (phase == kPhaseBind) {
      for (auto& b : rs.bundles) {
        b.img.mlp.frozen = true;
        b.txt.mlp.frozen = true;
      }
      rs.phase0_done = true;
      bs = init_bind_state(rs);
      bind_initialized = true;
      load_checkpoint(rs, &bs, nullptr, resume_path, force);
    } else {
      throw ConfigError("cannot resume training from a '" + phase + "' checkpoint");
    }
  } else {
    std::map<std::string, std::string> phase0_logs;
    for (const auto& b : rs.bundles) {
      phase0_logs[b.id] = (paths.logs_dir / ("phase0_" + b.id + ".jsonl")).string();
    }
    out.phase0 = phase0_all(rs, phase0_logs);
    save_checkpoint(rs, kPhase0, nullptr, nullptr, paths.phase0_ckpt().string());
  }

  if (!bind_initialized) bs = init_bind_state(rs);
  out.base_sha_before_bind = base_weights_sha(rs);

  JsonlLog bind_log((paths.logs_dir / "bind.jsonl").string());
  bind_log.write(bind_log_header(rs, bs));
  while (bs.step < cfg.bind.iters) {
    bind_step(rs, bs, &bind_log);
    if (cfg.bind.checkpoint_every > 0 && bs.step % cfg.bind.checkpoint_every == 0 &&
        bs.step < cfg.bind.iters) {
      save_checkpoint(rs, kPhaseBind, &bs, nullptr, paths.bind_step_ckpt(bs.step).string());
    }
  }
  rs.bind_done = true;
  out.base_sha_after_bind = base_weights_sha(rs);
  save_checkpoint(rs, kPhaseBind, &bs, nullptr, paths.bind_ckpt().string());
  return out;
}

// ---------------------------------------------------------------------------
// distill: loads the bind checkpoint and runs the two-stage schedule.
// ---------------------------------------------------------------------------

struct DistillOutputs {
  RunPaths paths;
  DistillResult result;
};

inline DistillOutputs do_distill(const RunConfig& cfg, bool force = false) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  if (!fs::exists(paths.bind_ckpt())) {
    throw DataFormatError("bind checkpoint missing: " + paths.bind_ckpt().string() +
                          " (run `train` first)");
  }
  fs::create_directories(paths.logs_dir);

  RunState rs = build_run_state(cfg);
  load_corpora_into(rs, paths);
  for (auto& b : rs.bundles) {
    b.img.mlp.frozen = true;
    b.txt.mlp.frozen = true;
  }
  rs.phase0_done = true;
  BindState bs = init_bind_state(rs);
  const LoadedCheckpoint info = load_checkpoint(rs, &bs, nullptr, paths.bind_ckpt().string(), force);
  if (info.phase != kPhaseBind || info.bind_step != cfg.bind.iters) {
    throw ConfigError("distill requires a completed bind checkpoint (found phase '" + info.phase +
                      "' at step " + std::to_string(info.bind_step) + ")");
  }
  rs.bind_done = true;

  DistillState ds = init_distill_state(rs);
  JsonlLog log((paths.logs_dir / "distill.jsonl").string());
  log.write({{"type", "header"},
             {"phase", "distill"},
             {"config_fingerprint", config_fingerprint(cfg)}});
  DistillOutputs out;
  out.paths = paths;
  out.result = distill_phase(rs, ds, &log);
  save_checkpoint(rs, kPhaseStudent, &bs, &ds, paths.student_ckpt().string());
  return out;
}

// ---------------------------------------------------------------------------
// eval: restores the most advanced checkpoint (or a named one) and emits the
// metrics suite as JSON plus a flat CSV.
// ---------------------------------------------------------------------------

// Rebuilds structural state to match a checkpoint's phase, then restores it.
inline std::string restore_any_checkpoint(RunState& rs, const std::string& path,
                                          bool force = false) {
  const auto peek = load_archive(path);
  const std::string phase = peek.archive.get_str("meta/phase");
  if (phase == kPhase0) {
    load_checkpoint(rs, nullptr, nullptr, path, force);
    for (auto& b : rs.bundles) {
      b.img.mlp.frozen = true;
      b.txt.mlp.frozen = true;
    }
    rs.phase0_done = true;
  } else if (phase == kPhaseBind || phase == kPhaseStudent) {
    for (auto& b : rs.bundles) {
      b.img.mlp.frozen = true;
      b.txt.mlp.frozen = true;
    }
    rs.phase0_done = true;
    BindState bs = init_bind_state(rs);
    load_checkpoint(rs, &bs, nullptr, path, force);
    rs.bind_done = true;
    if (phase == kPhaseStudent) rs.distill_done = true;
  } else {
    throw DataFormatError("unknown checkpoint phase tag '" + phase + "' in " + path);
  }
  return phase;
}

namespace detail {

inline std::vector<std::uint32_t> eval_labels(const ModalityBundle& b) {
  std::vector<std::uint32_t> labels;
  labels.reserve(b.data->eval.size());
  for (const auto& r : b.data->eval) labels.push_back(r.label);
  return labels;
}

inline Tensor eval_signals(const ModalityBundle& b) {
  std::vector<std::size_t> idx(b.data->eval.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return signals_of(b.data->eval, idx);
}

inline Json recall_json(const std::map<std::size_t, double>& recall) {
  Json j = Json::object();
  for (const auto& [k, v] : recall) j["recall@" + std::to_string(k)] = v;
  return j;
}

}  // namespace detail

struct EvalOutputs {
  Json report;
  fs::path json_path;
  fs::path csv_path;
};

inline EvalOutputs do_eval(const RunConfig& cfg, const std::string& task = "all",
                           const std::string& pair_filter = "",
                           const std::string& checkpoint_override = "", bool force = false) {
  cfg.validate();
  const RunPaths paths = run_paths(cfg);
  RunState rs = build_run_state(cfg);

  std::string ckpt = checkpoint_override;
  if (ckpt.empty()) {
    if (fs::exists(paths.student_ckpt())) {
      ckpt = paths.student_ckpt().string();
    } else if (fs::exists(paths.bind_ckpt())) {
      ckpt = paths.bind_ckpt().string();
    } else if (fs::exists(paths.phase0_ckpt())) {
      ckpt = paths.phase0_ckpt().string();
    } else {
      throw DataFormatError("no checkpoint found under " + paths.checkpoints_dir.string());
    }
  }
  const std::string phase = restore_any_checkpoint(rs, ckpt, force);

  const PromptSet prompts =
      PromptSet::from_templates(rs.data.templates, cfg.eval.prompt_mode == "multi");
  const std::size_t K = cfg.dataset.num_classes;

  Json records = Json::array();
  std::vector<std::string> csv_rows;
  auto csv = [&](const std::string& task_name, const std::string& modality,
                 const std::string& pair, const std::string& shots, const std::string& seed,
                 const std::string& metric, double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", value);
    csv_rows.push_back(task_name + "," + modality + "," + pair + "," + shots + "," + seed + "," +
                       metric + "," + buf);
  };

  const bool want_all = task == "all";

  if (want_all || task == "zero-shot") {
    for (const auto& b : rs.bundles) {
      const Tensor embeds = encode_images(b.img, detail::eval_signals(b));
      const MetricsReport r = zero_shot_classify(embeds, detail::eval_labels(b), prompts, b.txt,
                                                 cfg.eval.recall_ks);
      Json rec{{"task", "zero-shot"},
               {"modality", b.id},
               {"accuracy", r.accuracy},
               {"macro_f1", r.macro_f1},
               {"macro_precision", r.macro_precision},
               {"recall", detail::recall_json(r.recall_at)},
               {"per_class_counts", r.per_class_counts}};
      records.push_back(rec);
      csv("zero-shot", b.id, "", "", "", "accuracy", r.accuracy);
      csv("zero-shot", b.id, "", "", "", "macro_f1", r.macro_f1);
      csv("zero-shot", b.id, "", "", "", "macro_precision", r.macro_precision);
      for (const auto& [k, v] : r.recall_at) {
        csv("zero-shot", b.id, "", "", "", "recall@" + std::to_string(k), v);
      }
    }
  }

  if (want_all || task == "few-shot") {
    for (const auto& b : rs.bundles) {
      const Tensor embeds = encode_images(b.img, detail::eval_signals(b));
      const auto labels = detail::eval_labels(b);
      for (std::size_t shots : cfg.eval.shots) {
        double sum = 0.0, sumsq = 0.0;
        Json per_seed = Json::array();
        for (std::size_t s = 0; s < cfg.eval.probe_seeds; ++s) {
          const std::uint64_t seed = derive_seed(
              cfg.master_seed, "fewshot/" + b.id + "/" + std::to_string(shots) + "/" +
                                   std::to_string(s));
          const FewShotResult r = few_shot_probe(embeds, labels, K, shots, seed);
          per_seed.push_back(r.test_accuracy);
          csv("few-shot", b.id, "", std::to_string(shots), std::to_string(s), "accuracy",
              r.test_accuracy);
          sum += r.test_accuracy;
          sumsq += r.test_accuracy * r.test_accuracy;
        }
        const double n = static_cast<double>(cfg.eval.probe_seeds);
        const double mean = sum / n;
        const double var = std::max(0.0, sumsq / n - mean * mean);
        records.push_back(Json{{"task", "few-shot"},
                               {"modality", b.id},
                               {"shots", shots},
                               {"mean_accuracy", mean},
                               {"std_accuracy", std::sqrt(var)},
                               {"per_seed", per_seed}});
        csv("few-shot", b.id, "", std::to_string(shots), "mean", "accuracy", mean);
      }
    }
  }

  if (want_all || task == "cross-image") {
    for (std::size_t i = 0; i < rs.bundles.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.bundles.size(); ++j) {
        const auto& a = rs.bundles[i];
        const auto& b = rs.bundles[j];
        const std::string pair_name = a.id + ":" + b.id;
        if (!pair_filter.empty() && pair_filter != pair_name &&
            pair_filter != b.id + ":" + a.id) {
          continue;
        }
        const CrossModalRecall r =
            cross_image_retrieval(a.img, b.img, rs.data.probe, cfg.eval.recall_ks);
        records.push_back(Json{{"task", "cross-image"},
                               {"pair", pair_name},
                               {"a_to_b", detail::recall_json(r.a_to_b)},
                               {"b_to_a", detail::recall_json(r.b_to_a)},
                               {"mean", detail::recall_json(r.mean)}});
        for (const auto& [k, v] : r.mean) {
          csv("cross-image", "", pair_name, "", "", "recall@" + std::to_string(k), v);
        }
      }
    }
  }

  if ((want_all && rs.distill_done) || task == "student") {
    if (!rs.distill_done) {
      throw ConfigError("student evaluation requires a distilled checkpoint");
    }
    StudentConsistency sc;
    for (const auto& b : rs.bundles) {
      const Tensor embeds = encode_images(b.img, detail::eval_signals(b));
      const auto labels = detail::eval_labels(b);
      sc.teacher_acc[b.id] =
          zero_shot_classify(embeds, labels, prompts, b.txt, cfg.eval.recall_ks).accuracy;
      sc.student_acc[b.id] =
          zero_shot_classify(embeds, labels, prompts, rs.student, cfg.eval.recall_ks).accuracy;
      sc.delta[b.id] = sc.student_acc[b.id] - sc.teacher_acc[b.id];
      sc.mean_delta += sc.delta[b.id];
      csv("student", b.id, "", "", "", "teacher_accuracy", sc.teacher_acc[b.id]);
      csv("student", b.id, "", "", "", "student_accuracy", sc.student_acc[b.id]);
      csv("student", b.id, "", "", "", "delta", sc.delta[b.id]);
    }
    sc.mean_delta /= static_cast<double>(rs.bundles.size());
    records.push_back(Json{{"task", "student"},
                           {"teacher_accuracy", sc.teacher_acc},
                           {"student_accuracy", sc.student_acc},
                           {"delta", sc.delta},
                           {"mean_delta", sc.mean_delta}});
    csv("student", "", "", "", "", "mean_delta", sc.mean_delta);
  }

  EvalOutputs out;
  out.report = Json{{"config", Json(cfg)},
                    {"config_fingerprint", config_fingerprint(cfg)},
                    {"checkpoint", ckpt},
                    {"checkpoint_phase", phase},
                    {"records", records}};
  fs::create_directories(paths.eval_dir);
  out.json_path = paths.eval_dir / "eval.json";
  out.csv_path = paths.eval_dir / "eval.csv";
  write_text_file(out.json_path, out.report.dump(2) + "\n");
  std::string csv_text = "task,modality,pair,shots,seed,metric,value\n";
  for (const auto& row : csv_rows) csv_text += row + "\n";
  write_text_file(out.csv_path, csv_text);
  return out;
}

// ---------------------------------------------------------------------------
// inspect: checkpoint header, tensor names and shapes, fingerprint.
// ---------------------------------------------------------------------------

inline Json do_inspect(const std::string& path) {
  const auto loaded = load_archive(path);
  Json entries = Json::object();
  for (const auto& name : loaded.archive.names()) {
    const auto& e = loaded.archive.entry(name);
    const char* dtype = e.dtype == Archive::Dtype::kF64   ? "f64"
                        : e.dtype == Archive::Dtype::kU64 ? "u64"
                                                          : "str";
    entries[name] = Json{{"dtype", dtype}, {"dims", e.dims}};
  }
  return Json{{"magic", "M3CK"},
              {"version", kCheckpointVersion},
              {"config_fingerprint", loaded.fingerprint_hex},
              {"phase", loaded.archive.get_str("meta/phase")},
              {"entries", entries}};
}

}  // namespace m3bind
