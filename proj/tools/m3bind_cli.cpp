// Command-line surface for the binding pipeline: generate synthetic corpora,
// train (phase 0 + binding), distill the student encoder, evaluate, and
// inspect checkpoints. A run is fully described by a JSON config; flags
// override individual keys and the merged config is fingerprinted into every
// output.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "m3bind/m3bind.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonArgs {
  std::string config_path;
  std::string out_dir;
  bool has_out = false;
  std::uint64_t master_seed = 0;
  bool has_seed = false;
  std::string modalities;
  bool has_modalities = false;
};

struct TrainArgs {
  long iters_bind = -1;
  double lambda = -1.0;
  double eta0 = -1.0;
  double tau = -1.0;
  double beta = -1.0;
  long lora_rank = -1;
  long checkpoint_every = -1;
  int amb = -1;        // -1 unset, 0 off, 1 on
  int symmetric = -1;
  std::string resume;
  bool force = false;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

m3bind::RunConfig assemble_config(const CommonArgs& common, const TrainArgs* train) {
  m3bind::RunConfig cfg = m3bind::desk_run_config();
  if (!common.config_path.empty()) {
    std::ifstream in(common.config_path);
    if (!in) throw m3bind::ConfigError("cannot open config file: " + common.config_path);
    m3bind::Json j;
    try {
      j = m3bind::Json::parse(in);
    } catch (const m3bind::Json::parse_error& e) {
      throw m3bind::ConfigError("malformed config JSON: " + std::string(e.what()));
    }
    j.get_to(cfg);
  }
  if (common.has_out) cfg.out_dir = common.out_dir;
  if (common.has_seed) cfg.master_seed = common.master_seed;
  if (common.has_modalities) cfg.bind.modalities = split_csv(common.modalities);
  if (train) {
    if (train->iters_bind >= 0) cfg.bind.iters = static_cast<std::size_t>(train->iters_bind);
    if (train->lambda >= 0.0) cfg.bind.lambda = train->lambda;
    if (train->eta0 > 0.0) cfg.bind.eta0 = train->eta0;
    if (train->tau > 0.0) cfg.bind.tau = train->tau;
    if (train->beta >= 0.0) cfg.bind.beta = train->beta;
    if (train->lora_rank > 0) cfg.bind.lora_rank = static_cast<std::size_t>(train->lora_rank);
    if (train->checkpoint_every >= 0) {
      cfg.bind.checkpoint_every = static_cast<std::size_t>(train->checkpoint_every);
    }
    if (train->amb >= 0) cfg.bind.amb = train->amb == 1;
    if (train->symmetric >= 0) cfg.bind.symmetric_loss = train->symmetric == 1;
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file; flags override its keys");
  cmd->add_option("--out", args.out_dir, "output directory root")
      ->each([&](const std::string&) { args.has_out = true; });
  cmd->add_option("--master-seed", args.master_seed, "master seed for the whole run")
      ->each([&](const std::string&) { args.has_seed = true; });
  cmd->add_option("--modalities", args.modalities,
                  "comma-separated modality subset for binding (default: all)")
      ->each([&](const std::string&) { args.has_modalities = true; });
}

void add_train_flags(CLI::App* cmd, TrainArgs& args) {
  cmd->add_option("--iters-bind", args.iters_bind, "binding-phase iterations");
  cmd->add_option("--lambda", args.lambda, "text-alignment balance factor");
  cmd->add_option("--eta0", args.eta0, "base learning rate for the binding phase");
  cmd->add_option("--tau", args.tau, "contrastive temperature");
  cmd->add_option("--beta", args.beta, "balancing exponent for inverse-size sampling");
  cmd->add_option("--lora-rank", args.lora_rank, "adapter rank");
  cmd->add_option("--checkpoint-every", args.checkpoint_every,
                  "write a mid-run checkpoint every N binding steps (0 = off)");
  cmd->add_flag("--amb,!--no-amb",
                [&args](std::int64_t count) { args.amb = count > 0 ? 1 : 0; },
                "adaptive modality balancing (sampling, lr scaling, loss weights)");
  cmd->add_flag("--symmetric,!--no-symmetric",
                [&args](std::int64_t count) { args.symmetric = count > 0 ? 1 : 0; },
                "bidirectional contrastive loss");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-anchored multimodal binding on synthetic corpora"};
  app.require_subcommand(1);

  CommonArgs gen_common, train_common, distill_common, eval_common;
  TrainArgs train_args, distill_train_args;

  auto* gen = app.add_subcommand("generate", "write per-modality corpus files");
  add_common(gen, gen_common);

  auto* train = app.add_subcommand("train", "run phase 0 pretraining and the binding phase");
  add_common(train, train_common);
  add_train_flags(train, train_args);
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");
  train->add_flag("--force", train_args.force, "ignore checkpoint fingerprint mismatch");

  auto* distill = app.add_subcommand("distill", "distill bound text encoders into the student");
  add_common(distill, distill_common);
  add_train_flags(distill, distill_train_args);
  bool distill_force = false;
  long iters_stage1 = -1, iters_stage2 = -1;
  distill->add_option("--iters-stage1", iters_stage1, "embedding-matching iterations");
  distill->add_option("--iters-stage2", iters_stage2, "combined-objective iterations");
  distill->add_flag("--force", distill_force, "ignore checkpoint fingerprint mismatch");

  auto* eval = app.add_subcommand("eval", "emit the metrics suite for a trained run");
  add_common(eval, eval_common);
  std::string eval_task = "all", eval_pair, eval_ckpt;
  bool eval_force = false;
  eval->add_option("--task", eval_task, "all|zero-shot|few-shot|cross-image|student");
  eval->add_option("--pair", eval_pair, "restrict cross-image retrieval to one pair, e.g. xray:ecg");
  eval->add_option("--checkpoint", eval_ckpt, "evaluate a specific checkpoint file");
  eval->add_flag("--force", eval_force, "ignore checkpoint fingerprint mismatch");

  auto* inspect = app.add_subcommand("inspect", "print checkpoint header and tensor table");
  std::string inspect_path;
  inspect->add_option("path", inspect_path, "checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = assemble_config(gen_common, nullptr);
      std::cout << m3bind::do_generate(cfg).dump(2) << "\n";
    } else if (train->parsed()) {
      const auto cfg = assemble_config(train_common, &train_args);
      const auto out = m3bind::do_train(cfg, train_args.resume, train_args.force);
      m3bind::Json j{{"run_dir", out.paths.run_dir.string()},
                     {"bind_checkpoint", out.paths.bind_ckpt().string()},
                     {"base_sha_before_bind", out.base_sha_before_bind},
                     {"base_sha_after_bind", out.base_sha_after_bind}};
      std::cout << j.dump(2) << "\n";
    } else if (distill->parsed()) {
      auto cfg = assemble_config(distill_common, &distill_train_args);
      if (iters_stage1 >= 0) cfg.distill.iters_stage1 = static_cast<std::size_t>(iters_stage1);
      if (iters_stage2 >= 0) cfg.distill.iters_stage2 = static_cast<std::size_t>(iters_stage2);
      const auto out = m3bind::do_distill(cfg, distill_force);
      m3bind::Json j{{"run_dir", out.paths.run_dir.string()},
                     {"student_checkpoint", out.paths.student_ckpt().string()},
                     {"initial_eval_mse", out.result.initial_eval_mse},
                     {"final_eval_mse", out.result.final_eval_mse}};
      std::cout << j.dump(2) << "\n";
    } else if (eval->parsed()) {
      const auto cfg = assemble_config(eval_common, nullptr);
      const auto out = m3bind::do_eval(cfg, eval_task, eval_pair, eval_ckpt, eval_force);
      std::cout << out.report.dump(2) << "\n";
    } else if (inspect->parsed()) {
      std::cout << m3bind::do_inspect(inspect_path).dump(2) << "\n";
    }
  } catch (const m3bind::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const m3bind::ValueError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const m3bind::ShapeError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const m3bind::DataFormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const m3bind::NumericError& e) {
    std::cerr << "numerical divergence: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitOk;
}
