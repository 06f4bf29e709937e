#pragma once

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <thread>
#include <unordered_map>
#include <unordered_set>

#include "m3bind/balancing.hpp"
#include "m3bind/checkpoint.hpp"
#include "m3bind/config.hpp"
#include "m3bind/corpus_io.hpp"
#include "m3bind/encoders.hpp"
#include "m3bind/objectives.hpp"
#include "m3bind/optim.hpp"
#include "m3bind/synthdata.hpp"

namespace m3bind {

// ---------------------------------------------------------------------------
// Worker parallelism. M3BIND_THREADS caps the pool; tasks are independent, so
// results are identical to the serial order.
// ---------------------------------------------------------------------------

inline std::size_t worker_count(std::size_t n_tasks) {
  std::size_t cap = std::thread::hardware_concurrency();
  if (cap == 0) cap = 1;
  if (const char* env = std::getenv("M3BIND_THREADS")) {
    const long v = std::atol(env);
    if (v >= 1) cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, n_tasks));
}

template <typename Fn>
void parallel_tasks(std::size_t n_tasks, Fn&& fn) {
  const std::size_t workers = worker_count(n_tasks);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n_tasks) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Metrics logging: one JSON object per line. No timestamps anywhere, so logs
// from identical runs are byte-identical.
// ---------------------------------------------------------------------------

class JsonlLog {
 public:
  JsonlLog() = default;

  explicit JsonlLog(const std::string& path) : out_(std::make_unique<std::ofstream>(path)) {
    if (!*out_) throw DataFormatError("cannot open log for writing: " + path);
  }

  void write(const Json& j) {
    records.push_back(j);
    if (out_) {
      *out_ << j.dump() << '\n';
      out_->flush();
    }
  }

  std::vector<Json> records;

 private:
  std::unique_ptr<std::ofstream> out_;
};

// ---------------------------------------------------------------------------
// Run state: one bundle per bound modality, plus the student text encoder.
// ---------------------------------------------------------------------------

struct ModalityBundle {
  std::string id;
  ImageEncoder img;
  TextEncoder txt;
  const ModalityData* data = nullptr;

  std::uint64_t corpus_size() const { return data->train.size(); }
};

struct RunState {
  RunConfig cfg;
  GeneratedData data;
  std::vector<ModalityBundle> bundles;  // sorted by id
  TextEncoder student;
  bool phase0_done = false;
  bool bind_done = false;
  bool distill_done = false;

  ModalityBundle& bundle(const std::string& id) {
    for (auto& b : bundles) {
      if (b.id == id) return b;
    }
    throw ConfigError("unknown bundle '" + id + "'");
  }

  const ModalityBundle& bundle(const std::string& id) const {
    return const_cast<RunState*>(this)->bundle(id);
  }
};

inline RunState build_run_state(const RunConfig& cfg) {
  cfg.validate();
  RunState rs;
  rs.cfg = cfg;
  rs.data = generate_dataset(cfg.dataset, cfg.master_seed);
  for (const auto& id : cfg.bound_modalities()) {
    const ModalityData& md = rs.data.modalities.at(id);
    ModalityBundle b;
    b.id = id;
    b.img = make_image_encoder(id, md.shape.obs_dim, cfg.model.hidden_width,
                               cfg.model.hidden_layers, cfg.model.embed_dim,
                               derive_seed(cfg.master_seed, "init/img/" + id));
    b.txt = make_text_encoder(id, cfg.dataset.vocab_size, cfg.model.token_dim,
                              cfg.model.hidden_width, cfg.model.hidden_layers,
                              cfg.model.embed_dim, derive_seed(cfg.master_seed, "init/txt/" + id));
    b.data = &md;
    rs.bundles.push_back(std::move(b));
  }
  rs.student = make_text_encoder("student", cfg.dataset.vocab_size, cfg.model.token_dim,
                                 cfg.model.hidden_width, cfg.model.hidden_layers,
                                 cfg.model.embed_dim,
                                 derive_seed(cfg.master_seed, "init/txt/student"));
  return rs;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor signals_of(const std::vector<Record>& records, const std::vector<std::size_t>& idx) {
  const std::size_t d = records.at(idx.at(0)).signal.size();
  Tensor out({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Tensor& s = records[idx[i]].signal;
    for (std::size_t c = 0; c < d; ++c) out.at(i, c) = s[c];
  }
  return out;
}

inline std::vector<std::vector<std::uint32_t>> tokens_of(const std::vector<Record>& records,
                                                         const std::vector<std::size_t>& idx) {
  std::vector<std::vector<std::uint32_t>> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(records[i].tokens);
  return out;
}

inline std::vector<std::size_t> draw_indices(std::size_t count, std::size_t upper, Rng& rng) {
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = rng.below(upper);
  return idx;
}

inline std::string draw_from(const std::map<std::string, double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  const std::string* last = nullptr;
  for (const auto& [id, p] : probs) {
    acc += p;
    last = &id;
    if (u < acc) return id;
  }
  return *last;
}

inline std::unordered_map<const Tensor*, Tensor> gather_grads(
    const Binding& bind, const GradMap& gm, const std::vector<ParamEntry>& trainable) {
  std::unordered_map<const Tensor*, Tensor> grads;
  for (const auto& p : trainable) {
    if (!bind.bound(*p.tensor)) continue;
    grads.emplace(p.tensor, gm.at(bind.id_of(*p.tensor)));
  }
  return grads;
}

}  // namespace detail

// Fixed held-out probe batch for a modality; phase-0 progress is measured on
// this batch, never on training draws.
inline std::pair<Tensor, std::vector<std::vector<std::uint32_t>>> probe_batch(
    const ModalityBundle& b, std::size_t max_size) {
  const auto& recs = b.data->eval;
  const std::size_t n = std::min(max_size, recs.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return {detail::signals_of(recs, idx), detail::tokens_of(recs, idx)};
}

inline double probe_clip_loss(const ModalityBundle& b, const RunConfig& cfg) {
  auto [signals, tokens] = probe_batch(b, cfg.bind.batch_pair);
  const Tensor img = encode_images(b.img, signals);
  const Tensor txt = encode_texts(b.txt, tokens);
  return clip_contrastive_loss(img, txt, cfg.bind.tau, cfg.bind.symmetric_loss);
}

// ---------------------------------------------------------------------------
// Phase 0: each modality's encoder pair trains alone on its own corpus with
// the contrastive objective, standing in for an externally pretrained
// image-text model. Encoders are frozen afterwards.
// ---------------------------------------------------------------------------

struct PretrainResult {
  double initial_probe_loss = 0.0;
  double final_probe_loss = 0.0;
  std::size_t steps = 0;
};

inline PretrainResult pretrain_modality(ModalityBundle& b, const RunConfig& cfg, JsonlLog* log) {
  if (b.img.mlp.frozen || b.txt.mlp.frozen) {
    throw ConfigError("pretrain_modality(" + b.id + "): encoders are already frozen");
  }
  const PretrainConfig& pc = cfg.pretrain;
  std::vector<ParamEntry> params;
  collect_params(b.img, b.id, b.id, params);
  collect_params(b.txt, b.id, b.id, params);
  std::unordered_set<const Tensor*> trainable;
  for (const auto& p : params) trainable.insert(p.tensor);

  AdamW opt(params, {.weight_decay = pc.weight_decay, .clip_norm = pc.clip_norm});
  const Schedule sched{pc.iters, pc.warmup_frac};
  const std::map<std::string, double> group_lr{{b.id, pc.lr}};
  Rng rng(derive_seed(cfg.master_seed, "phase0/" + b.id));

  PretrainResult result;
  result.steps = pc.iters;
  result.initial_probe_loss = probe_clip_loss(b, cfg);

  const auto& records = b.data->train.records;
  for (std::size_t s = 0; s < pc.iters; ++s) {
    const auto idx = detail::draw_indices(pc.batch, records.size(), rng);
    try {
      Tape tape;
      Binding bind(tape, &trainable);
      const NodeId img = encode_images(tape, bind, b.img, detail::signals_of(records, idx));
      const NodeId txt = encode_texts(tape, bind, b.txt, detail::tokens_of(records, idx));
      const NodeId loss =
          clip_contrastive_node(tape, img, txt, cfg.bind.tau, cfg.bind.symmetric_loss);
      const NodeId opt_loss = tape.scale(loss, 1.0 / static_cast<double>(pc.batch));
      const GradMap gm = tape.backward(opt_loss);
      opt.step(detail::gather_grads(bind, gm, params), group_lr, sched.multiplier(s));
      if (log) {
        log->write({{"type", "step"},
                    {"phase", "phase0"},
                    {"modality", b.id},
                    {"step", s},
                    {"clip", tape.value(loss).item()},
                    {"lr_mult", sched.multiplier(s)}});
      }
    } catch (const NumericError& e) {
      throw NumericError("phase0[" + b.id + "] diverged at step " + std::to_string(s) + ": " +
                         e.what());
    }
  }
  result.final_probe_loss = probe_clip_loss(b, cfg);
  b.img.mlp.frozen = true;
  b.txt.mlp.frozen = true;
  return result;
}

// Pretrains all bundles; independent per modality, so bundles run in
// parallel up to the worker cap. Logs are written per modality afterwards in
// sorted order.
inline std::map<std::string, PretrainResult> phase0_all(
    RunState& rs, const std::map<std::string, std::string>& log_paths = {}) {
  std::map<std::string, PretrainResult> results;
  std::vector<JsonlLog> logs(rs.bundles.size());
  std::vector<PretrainResult> res(rs.bundles.size());
  parallel_tasks(rs.bundles.size(), [&](std::size_t i) {
    res[i] = pretrain_modality(rs.bundles[i], rs.cfg, &logs[i]);
  });
  for (std::size_t i = 0; i < rs.bundles.size(); ++i) {
    const std::string& id = rs.bundles[i].id;
    results[id] = res[i];
    auto it = log_paths.find(id);
    if (it != log_paths.end()) {
      JsonlLog file_log(it->second);
      file_log.write({{"type", "header"},
                      {"phase", "phase0"},
                      {"modality", id},
                      {"config_fingerprint", config_fingerprint(rs.cfg)}});
      for (const auto& j : logs[i].records) file_log.write(j);
    }
  }
  rs.phase0_done = true;
  return results;
}

// ---------------------------------------------------------------------------
// Phase A: text-anchored binding. Frozen encoder pairs adapt through LoRA;
// per step one modality's image-text batch keeps its own alignment while a
// shared text batch (same texts through every text encoder) pulls the text
// spaces together.
// ---------------------------------------------------------------------------

struct BindState {
  std::vector<ParamEntry> all_params;
  std::vector<ParamEntry> trainable_params;
  std::unordered_set<const Tensor*> trainable_set;
  std::unique_ptr<AdamW> opt;
  Rng rng{0};
  std::uint64_t step = 0;
  BalancePlan plan;
  std::map<std::string, double> pair_probs;
  std::map<std::string, double> text_probs;
  std::map<std::string, double> group_lr;
  Tensor log_tau;

  double tau(const BindConfig& bc) const {
    if (!bc.learnable_tau) return bc.tau;
    return Temperature{std::exp(log_tau[0]), true}.clamped();
  }
};

inline BindState init_bind_state(RunState& rs) {
  const BindConfig& bc = rs.cfg.bind;
  bc.validate();
  if (!rs.phase0_done) throw ConfigError("bind phase requires completed phase-0 encoders");
  BindState bs;

  for (auto& b : rs.bundles) {
    if (!b.img.mlp.frozen || !b.txt.mlp.frozen) {
      throw ConfigError("bind phase: bundle '" + b.id + "' is not frozen");
    }
    Rng lora_img(derive_seed(rs.cfg.master_seed, "lora/img/" + b.id));
    Rng lora_txt(derive_seed(rs.cfg.master_seed, "lora/txt/" + b.id));
    attach_lora(b.img, bc.lora_rank, bc.lora_alpha, lora_img);
    attach_lora(b.txt, bc.lora_rank, bc.lora_alpha, lora_txt);
  }

  std::unordered_set<const Tensor*> head_params;
  for (auto& b : rs.bundles) {
    collect_params(b.img, b.id, b.id, bs.all_params);
    collect_params(b.txt, b.id, b.id, bs.all_params);
    if (bc.train_projection_heads) {
      for (Tensor* t : projection_params(b.img.mlp)) head_params.insert(t);
      for (Tensor* t : projection_params(b.txt.mlp)) head_params.insert(t);
    }
  }

  ModalityStats stats;
  stats.beta = bc.beta;
  stats.eta0 = bc.eta0;
  for (const auto& b : rs.bundles) stats.sizes[b.id] = b.corpus_size();
  bs.plan = make_balance_plan(stats, bc.amb);
  bs.pair_probs = (bc.amb && bc.amb_pair_batches)
                      ? bs.plan.probs
                      : make_balance_plan(stats, false).probs;
  bs.text_probs = bs.plan.probs;
  bs.group_lr = bs.plan.lrs;

  for (const auto& p : bs.all_params) {
    if (p.trainable || head_params.count(p.tensor)) {
      ParamEntry e = p;
      e.trainable = true;
      bs.trainable_params.push_back(e);
      bs.trainable_set.insert(p.tensor);
    }
  }
  if (bc.learnable_tau) {
    bs.log_tau = Tensor::scalar(std::log(bc.tau));
    bs.trainable_params.push_back({"tau/log_tau", &bs.log_tau, true, "tau"});
    bs.trainable_set.insert(&bs.log_tau);
    bs.group_lr["tau"] = bc.eta0;
  }

  bs.opt = std::make_unique<AdamW>(bs.trainable_params,
                                   AdamWConfig{.weight_decay = bc.weight_decay,
                                               .clip_norm = bc.clip_norm});
  bs.rng = Rng(derive_seed(rs.cfg.master_seed, "bind"));
  return bs;
}

inline Json bind_log_header(const RunState& rs, const BindState& bs) {
  Json plan{{"probs", bs.plan.probs}, {"lrs", bs.plan.lrs}, {"weights", bs.plan.weights}};
  return Json{{"type", "header"},
              {"phase", "bind"},
              {"config_fingerprint", config_fingerprint(rs.cfg)},
              {"balance_plan", plan}};
}

inline void bind_step(RunState& rs, BindState& bs, JsonlLog* log) {
  const BindConfig& bc = rs.cfg.bind;
  const Schedule sched{bc.iters, bc.warmup_frac};
  const double mult = sched.multiplier(bs.step);

  // All draws happen up front in a fixed order so the stream is identical
  // regardless of how the losses are evaluated.
  const std::string drawn = detail::draw_from(bs.pair_probs, bs.rng);
  ModalityBundle& pb = rs.bundle(drawn);
  const auto pair_idx = detail::draw_indices(bc.batch_pair, pb.corpus_size(), bs.rng);
  std::vector<std::vector<std::uint32_t>> texts;
  texts.reserve(bc.batch_text);
  for (std::size_t j = 0; j < bc.batch_text; ++j) {
    const std::string m = detail::draw_from(bs.text_probs, bs.rng);
    const ModalityBundle& tb = rs.bundle(m);
    const std::size_t idx = bs.rng.below(tb.corpus_size());
    texts.push_back(tb.data->train.records[idx].tokens);
  }

  try {
    Tape tape;
    Binding bind(tape, &bs.trainable_set);
    const NodeId img =
        encode_images(tape, bind, pb.img, detail::signals_of(pb.data->train.records, pair_idx));
    const NodeId txt =
        encode_texts(tape, bind, pb.txt, detail::tokens_of(pb.data->train.records, pair_idx));

    NodeId clip_node;
    if (bc.learnable_tau) {
      const NodeId lt = bind.node(bs.log_tau);
      const NodeId inv_tau = tape.exp(tape.scale(lt, -1.0));
      clip_node = clip_contrastive_node(tape, img, txt, inv_tau, bc.symmetric_loss);
    } else {
      clip_node = clip_contrastive_node(tape, img, txt, bc.tau, bc.symmetric_loss);
    }

    std::map<std::string, NodeId> text_embeds;
    for (auto& b : rs.bundles) {
      text_embeds[b.id] = encode_texts(tape, bind, b.txt, texts);
    }
    const auto mse_nodes = pairwise_text_mse_nodes(tape, text_embeds);

    // The optimizer target divides the contrastive sum by its batch size so
    // batch size and learning rate stay decoupled; the logged report keeps
    // the plain sum form.
    const NodeId clip_mean = tape.scale(clip_node, 1.0 / static_cast<double>(bc.batch_pair));
    const NodeId opt_node =
        total_bind_loss_node(tape, {{drawn, clip_mean}}, mse_nodes, bs.plan.weights, bc.lambda,
                             bc.weight_mse_pairs);
    const GradMap gm = tape.backward(opt_node);
    bs.opt->step(detail::gather_grads(bind, gm, bs.trainable_params), bs.group_lr, mult);
    if (bc.learnable_tau) {
      bs.log_tau[0] = std::log(Temperature{std::exp(bs.log_tau[0]), true}.clamped());
    }

    if (log) {
      std::map<std::string, double> clips{{drawn, tape.value(clip_node).item()}};
      std::map<ModalityPair, double> mses;
      for (const auto& [pair, node] : mse_nodes) mses[pair] = tape.value(node).item();
      const BindLossReport report =
          total_bind_loss(clips, mses, bs.plan.weights, bc.lambda, bc.weight_mse_pairs);
      Json mse_json = Json::object();
      for (const auto& [pair, v] : report.per_pair_mse) {
        mse_json[pair.first + "|" + pair.second] = v;
      }
      log->write({{"type", "step"},
                  {"phase", "bind"},
                  {"step", bs.step},
                  {"drawn", drawn},
                  {"clip", report.per_modality_clip},
                  {"mse", mse_json},
                  {"total", report.total},
                  {"opt_total", tape.value(opt_node).item()},
                  {"tau", bs.tau(bc)},
                  {"lr_mult", mult}});
    }
  } catch (const NumericError& e) {
    throw NumericError("bind diverged at step " + std::to_string(bs.step) + ": " + e.what());
  }
  ++bs.step;
}

// ---------------------------------------------------------------------------
// Phase B: two-stage distillation of the bound text encoders into the
// student. Stage one matches teacher embeddings; stage two adds the
// image-anchored contrastive term per modality in the batch.
// ---------------------------------------------------------------------------

struct DistillState {
  std::vector<ParamEntry> student_params;
  std::unordered_set<const Tensor*> trainable_set;
  std::unique_ptr<AdamW> opt;
  Rng rng{0};
  std::uint64_t step = 0;
  std::map<std::string, double> text_probs;
};

// Mean teacher-student embedding MSE on a fixed held-out text batch; the
// progress metric for distillation.
inline double student_teacher_eval_mse(const RunState& rs) {
  std::vector<std::vector<std::uint32_t>> texts;
  for (const auto& b : rs.bundles) {
    const std::size_t n = std::min<std::size_t>(24, b.data->eval.size());
    for (std::size_t i = 0; i < n; ++i) texts.push_back(b.data->eval[i].tokens);
  }
  const Tensor student = encode_texts(rs.student, texts);
  double acc = 0.0;
  for (const auto& b : rs.bundles) {
    acc += mse(encode_texts(b.txt, texts), student).item();
  }
  return acc / static_cast<double>(rs.bundles.size());
}

inline DistillState init_distill_state(RunState& rs) {
  if (!rs.bind_done) throw ConfigError("distill phase requires a completed bind phase");
  DistillState ds;
  collect_params(rs.student, "student", "student", ds.student_params);
  for (const auto& p : ds.student_params) ds.trainable_set.insert(p.tensor);
  ds.opt = std::make_unique<AdamW>(
      ds.student_params, AdamWConfig{.weight_decay = rs.cfg.distill.weight_decay,
                                     .clip_norm = rs.cfg.distill.clip_norm});
  ds.rng = Rng(derive_seed(rs.cfg.master_seed, "distill"));

  ModalityStats stats;
  stats.beta = rs.cfg.bind.beta;
  stats.eta0 = rs.cfg.bind.eta0;
  for (const auto& b : rs.bundles) stats.sizes[b.id] = b.corpus_size();
  ds.text_probs = make_balance_plan(stats, rs.cfg.bind.amb).probs;
  return ds;
}

inline void distill_step(RunState& rs, DistillState& ds, JsonlLog* log) {
  const DistillConfig& dc = rs.cfg.distill;
  const std::size_t total = dc.iters_stage1 + dc.iters_stage2;
  const Schedule sched{total, dc.warmup_frac};
  const double mult = sched.multiplier(ds.step);
  const bool stage2 = ds.step >= dc.iters_stage1;

  // Draw the text batch: per slot a modality (balanced sampling) and a
  // record within it; the record also supplies the image for stage two.
  std::vector<std::vector<std::uint32_t>> texts;
  std::map<std::string, std::vector<std::size_t>> per_modality_slots;
  std::vector<std::pair<std::string, std::size_t>> slots;
  for (std::size_t j = 0; j < dc.batch; ++j) {
    const std::string m = detail::draw_from(ds.text_probs, ds.rng);
    const std::size_t idx = ds.rng.below(rs.bundle(m).corpus_size());
    slots.emplace_back(m, idx);
    per_modality_slots[m].push_back(j);
    texts.push_back(rs.bundle(m).data->train.records[idx].tokens);
  }

  try {
    Tape tape;
    Binding bind(tape, &ds.trainable_set);
    const NodeId student_emb = encode_texts(tape, bind, rs.student, texts);

    // Teachers are entirely frozen: their embeddings enter as constants.
    std::map<std::string, NodeId> teacher_nodes;
    for (const auto& b : rs.bundles) {
      teacher_nodes[b.id] = tape.constant(encode_texts(b.txt, texts));
    }
    const NodeId kd_node = kd_mse_node(tape, teacher_nodes, student_emb);

    NodeId opt_node = kd_node;
    double contrastive_sum = 0.0;
    if (stage2) {
      for (const auto& [m, slot_ids] : per_modality_slots) {
        if (slot_ids.size() < 2) continue;  // a single pair has zero loss
        const ModalityBundle& b = rs.bundle(m);
        std::vector<std::vector<std::uint32_t>> sub_texts;
        std::vector<std::size_t> rec_idx;
        for (std::size_t j : slot_ids) {
          sub_texts.push_back(texts[j]);
          rec_idx.push_back(slots[j].second);
        }
        const NodeId sub_student = encode_texts(tape, bind, rs.student, sub_texts);
        const NodeId imgs = tape.constant(
            encode_images(b.img, detail::signals_of(b.data->train.records, rec_idx)));
        const NodeId contrast = kd_contrastive_node(tape, sub_student, imgs, dc.tau);
        contrastive_sum += tape.value(contrast).item();
        opt_node = tape.add(
            opt_node, tape.scale(contrast, 1.0 / static_cast<double>(slot_ids.size())));
      }
    }

    const GradMap gm = tape.backward(opt_node);
    ds.opt->step(detail::gather_grads(bind, gm, ds.student_params), {{"student", dc.lr}}, mult);

    if (log) {
      const double kd_v = tape.value(kd_node).item();
      log->write({{"type", "step"},
                  {"phase", "distill"},
                  {"step", ds.step},
                  {"stage", stage2 ? 2 : 1},
                  {"kd", kd_v},
                  {"contrastive", contrastive_sum},
                  {"total", seskd_loss(kd_v, contrastive_sum)},
                  {"lr_mult", mult}});
    }
  } catch (const NumericError& e) {
    throw NumericError("distill diverged at step " + std::to_string(ds.step) + ": " + e.what());
  }
  ++ds.step;
}

struct DistillResult {
  double initial_eval_mse = 0.0;
  double final_eval_mse = 0.0;
};

inline DistillResult distill_phase(RunState& rs, DistillState& ds, JsonlLog* log) {
  const std::size_t total = rs.cfg.distill.iters_stage1 + rs.cfg.distill.iters_stage2;
  DistillResult result;
  result.initial_eval_mse = student_teacher_eval_mse(rs);
  while (ds.step < total) distill_step(rs, ds, log);
  result.final_eval_mse = student_teacher_eval_mse(rs);
  rs.distill_done = true;
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: full parameter set plus the active phase's optimizer moments,
// rng state and step counter. Loading verifies the config fingerprint.
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<ParamEntry> all_run_params(RunState& rs) {
  std::vector<ParamEntry> params;
  for (auto& b : rs.bundles) {
    collect_params(b.img, b.id, b.id, params);
    collect_params(b.txt, b.id, b.id, params);
  }
  collect_params(rs.student, "student", "student", params);
  return params;
}

inline void put_optimizer(Archive& ar, const std::string& ns, const AdamW& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& slot = opt.slot(i);
    ar.put_tensor("opt/" + ns + "/" + params[i].name + "/m", slot.m);
    ar.put_tensor("opt/" + ns + "/" + params[i].name + "/v", slot.v);
    ar.put_u64s("opt/" + ns + "/" + params[i].name + "/t", {slot.t});
  }
  ar.put_u64s("opt/" + ns + "/step_count", {opt.step_count()});
}

inline void get_optimizer(const Archive& ar, const std::string& ns, AdamW& opt) {
  const auto& params = opt.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& slot = opt.slot(i);
    slot.m = ar.get_tensor("opt/" + ns + "/" + params[i].name + "/m");
    slot.v = ar.get_tensor("opt/" + ns + "/" + params[i].name + "/v");
    slot.t = ar.get_u64s("opt/" + ns + "/" + params[i].name + "/t").at(0);
  }
  opt.set_step_count(ar.get_u64s("opt/" + ns + "/step_count").at(0));
}

inline std::vector<std::uint64_t> rng_words(const Rng& rng) {
  const auto& s = rng.state();
  return {s[0], s[1], s[2], s[3]};
}

inline Rng rng_from_words(const std::vector<std::uint64_t>& w) {
  if (w.size() != 4) throw DataFormatError("checkpoint: bad rng state length");
  return Rng(Rng::State{w[0], w[1], w[2], w[3]});
}

}  // namespace detail

// Phase tags stored in checkpoints.
inline constexpr const char* kPhase0 = "phase0";
inline constexpr const char* kPhaseBind = "bind";
inline constexpr const char* kPhaseStudent = "student";

inline void save_checkpoint(RunState& rs, const std::string& phase, const BindState* bs,
                            const DistillState* ds, const std::string& path) {
  Archive ar;
  ar.put_str("meta/phase", phase);
  for (const auto& p : detail::all_run_params(rs)) {
    ar.put_tensor("param/" + p.name, *p.tensor);
  }
  if (bs) {
    ar.put_u64s("meta/bind_step", {bs->step});
    ar.put_u64s("rng/bind", detail::rng_words(bs->rng));
    detail::put_optimizer(ar, "bind", *bs->opt);
    if (rs.cfg.bind.learnable_tau) ar.put_tensor("param/tau/log_tau", bs->log_tau);
  }
  if (ds) {
    ar.put_u64s("meta/distill_step", {ds->step});
    ar.put_u64s("rng/distill", detail::rng_words(ds->rng));
    detail::put_optimizer(ar, "distill", *ds->opt);
  }
  ar.save(path, config_fingerprint(rs.cfg));
}

struct LoadedCheckpoint {
  std::string phase;
  std::uint64_t bind_step = 0;
  std::uint64_t distill_step = 0;
};

// Restores parameters (and, for a matching phase, optimizer/rng state) into
// an already-built run state. The checkpoint's config fingerprint must match
// unless force is set.
inline LoadedCheckpoint load_checkpoint(RunState& rs, BindState* bs, DistillState* ds,
                                        const std::string& path, bool force = false) {
  auto loaded = load_archive(path);
  const std::string expect = config_fingerprint(rs.cfg);
  if (loaded.fingerprint_hex != expect && !force) {
    throw ConfigError("checkpoint fingerprint mismatch: file " + loaded.fingerprint_hex.substr(0, 12) +
                      "... vs config " + expect.substr(0, 12) + "... (use force to override)");
  }
  LoadedCheckpoint info;
  info.phase = loaded.archive.get_str("meta/phase");
  for (const auto& p : detail::all_run_params(rs)) {
    const Tensor t = loaded.archive.get_tensor("param/" + p.name);
    if (!t.same_shape(*p.tensor)) {
      throw DataFormatError("checkpoint: parameter '" + p.name + "' has shape " + t.shape_str() +
                            ", expected " + p.tensor->shape_str());
    }
    *p.tensor = t;
  }
  if (bs && loaded.archive.has("meta/bind_step")) {
    info.bind_step = loaded.archive.get_u64s("meta/bind_step").at(0);
    bs->step = info.bind_step;
    bs->rng = detail::rng_from_words(loaded.archive.get_u64s("rng/bind"));
    detail::get_optimizer(loaded.archive, "bind", *bs->opt);
    if (rs.cfg.bind.learnable_tau) bs->log_tau = loaded.archive.get_tensor("param/tau/log_tau");
  }
  if (ds && loaded.archive.has("meta/distill_step")) {
    info.distill_step = loaded.archive.get_u64s("meta/distill_step").at(0);
    ds->step = info.distill_step;
    ds->rng = detail::rng_from_words(loaded.archive.get_u64s("rng/distill"));
    detail::get_optimizer(loaded.archive, "distill", *ds->opt);
  }
  return info;
}

// SHA-256 over the frozen base encoder weights (adapters and the student
// excluded), in sorted name order: the freeze-discipline witness for the
// binding phase.
inline std::string base_weights_sha(RunState& rs) {
  std::map<std::string, const Tensor*> ordered;
  for (const auto& p : detail::all_run_params(rs)) {
    if (p.name.find("lora_") != std::string::npos) continue;
    if (p.name.rfind("student/", 0) == 0) continue;
    ordered[p.name] = p.tensor;
  }
  Sha256Stream h;
  for (const auto& [name, t] : ordered) {
    h.update(name);
    ByteWriter w;
    for (std::size_t i = 0; i < t->size(); ++i) w.f64((*t)[i]);
    h.update(w.data().data(), w.data().size());
  }
  return to_hex(h.finish());
}

}  // namespace m3bind
