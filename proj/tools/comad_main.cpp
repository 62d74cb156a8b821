#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "comad/comad.hpp"

namespace fs = std::filesystem;
using comad::Config;

namespace {

// f32 drives training-scale commands; verification runs in f64 separately.
using Scalar = float;

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  std::int64_t seed = -1;  // -1 keeps the config's seed
};

Config load_config(const CommonFlags& flags) {
  Config cfg;
  if (!flags.config_path.empty())
    cfg = comad::parse_config_file(flags.config_path);
  if (flags.seed >= 0) cfg.seed = static_cast<std::uint64_t>(flags.seed);
  cfg.validate();
  return cfg;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw comad::IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw comad::IoError("write failed for '" + path + "'");
}

comad::Dataset<Scalar> dataset_from(const Config& cfg) {
  if (cfg.data_kind == "synthetic")
    return comad::make_synthetic_dataset<Scalar>(cfg.data_count,
                                                 cfg.data_classes,
                                                 cfg.image_size, cfg.channels,
                                                 cfg.data_seed);
  return comad::load_dataset_binary<Scalar>(cfg.data_path);
}

int cmd_init_teachers(const CommonFlags& flags, const std::string& mode,
                      std::int64_t pretrain_steps) {
  Config cfg = load_config(flags);
  const fs::path dir = flags.out_dir.empty() ? fs::path(cfg.teacher_dir)
                                             : fs::path(flags.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec)
    throw comad::IoError("cannot create teacher directory '" + dir.string() +
                         "': " + ec.message());

  comad::Dataset<Scalar> ds;
  if (mode == "toy-pretrain") ds = dataset_from(cfg);

  for (std::int64_t id = 0; id < cfg.teacher_count; ++id) {
    comad::Rng rng(comad::mix_seed(cfg.seed, 0x7EACull,
                                   static_cast<std::uint64_t>(id)));
    comad::ViTEncoder<Scalar> teacher(cfg.teacher_vit(), rng);
    if (mode == "toy-pretrain") {
      const double ratio = cfg.mask_teachers.empty()
                               ? 0.5
                               : cfg.mask_teachers[static_cast<std::size_t>(
                                     id % static_cast<std::int64_t>(
                                              cfg.mask_teachers.size()))];
      auto report = comad::toy_pretrain(
          teacher, ds, ratio, pretrain_steps, cfg.batch_size,
          comad::mix_seed(cfg.seed, 0x70BEull, static_cast<std::uint64_t>(id)));
      std::cout << "teacher " << id << ": reconstruction "
                << report.first_loss << " -> " << report.last_loss << " ("
                << static_cast<int>(report.improvement() * 100.0)
                << "% lower)\n";
      teacher.set_frozen(true);
    }

    comad::Checkpoint<Scalar> ck;
    ck.config_digest = cfg.digest();
    ck.tensors = teacher.named_params("encoder");
    ck.rng_state = rng.serialize();
    ck.step = 0;
    const std::string path =
        (dir / ("teacher_" + std::to_string(id) + ".ckpt")).string();
    comad::save_checkpoint(path, ck);
    std::cout << "wrote " << path << "\n";
  }
  return 0;
}

int cmd_distill(const CommonFlags& flags, const std::string& teachers_dir,
                const std::string& resume_path) {
  Config cfg = load_config(flags);
  const std::string out_dir =
      flags.out_dir.empty() ? std::string("run") : flags.out_dir;

  comad::Trainer<Scalar> trainer(cfg, out_dir);
  const std::string tdir =
      teachers_dir.empty() ? cfg.teacher_dir : teachers_dir;
  if (!tdir.empty() && fs::exists(tdir)) {
    trainer.load_teachers(tdir);
    std::cout << "teachers loaded from " << tdir << "\n";
  } else {
    std::cout << "teachers initialized from seed (no checkpoint directory)\n";
  }
  if (!resume_path.empty()) {
    trainer.resume(resume_path);
    std::cout << "resumed from " << resume_path << " at step "
              << trainer.current_step() << "\n";
  }

  fs::create_directories(out_dir);
  write_text_file((fs::path(out_dir) / "config.txt").string(),
                  cfg.canonical_string());

  std::cout << "training " << trainer.total_steps() << " steps, batch "
            << cfg.batch_size << ", " << trainer.dataset().count()
            << " samples\n";
  auto reports = trainer.run();
  if (!reports.empty()) {
    const auto& first = reports.front();
    const auto& last = reports.back();
    std::cout << "loss " << first.total << " -> " << last.total << " over "
              << reports.size() << " steps\n";
  }
  std::cout << "checkpoint written to "
            << (fs::path(out_dir) / "checkpoint.ckpt").string() << "\n";
  return 0;
}

int cmd_verify(const CommonFlags& flags, const std::string& fault) {
  Config cfg = load_config(flags);
  comad::VerifyOptions opts;
  if (fault == "flip-kl-sign") {
    opts.fault_flip_kl_sign = true;
  } else if (!fault.empty()) {
    throw comad::ConfigError("unknown fault '" + fault +
                             "' (known: flip-kl-sign)");
  }
  const int failures = comad::run_verification(cfg, opts, std::cout);
  return failures == 0 ? 0 : 1;
}

int cmd_inspect_gating(const CommonFlags& flags,
                       const std::string& checkpoint_path,
                       const std::string& teachers_dir, std::int64_t batches,
                       const std::string& out_path) {
  Config cfg = load_config(flags);
  comad::DistillModel<Scalar> model(cfg);

  const std::string tdir =
      teachers_dir.empty() ? cfg.teacher_dir : teachers_dir;
  if (!tdir.empty() && fs::exists(tdir)) {
    for (std::size_t k = 0;
         k < static_cast<std::size_t>(model.teacher_count()); ++k) {
      const std::int64_t id = model.teacher_ids()[k];
      comad::Checkpoint<Scalar> ck = comad::load_checkpoint<Scalar>(
          (fs::path(tdir) / ("teacher_" + std::to_string(id) + ".ckpt"))
              .string());
      comad::restore_params(ck, model.teacher_params(k));
    }
  }
  if (!checkpoint_path.empty()) {
    comad::Checkpoint<Scalar> ck =
        comad::load_checkpoint<Scalar>(checkpoint_path);
    std::set<std::string> adapter_slots;
    for (const auto& [name, t] : ck.tensors)
      if (name.rfind("adapter", 0) == 0)
        adapter_slots.insert(name.substr(0, name.find('.')));
    if (!adapter_slots.empty() &&
        adapter_slots.size() !=
            static_cast<std::size_t>(model.teacher_count()))
      throw comad::ConfigError(
          "checkpoint '" + checkpoint_path + "' carries " +
          std::to_string(adapter_slots.size()) +
          " teacher adapters but the config selects " +
          std::to_string(model.teacher_count()) + " teachers");
    comad::restore_params(ck, model.trainable_params());
  }

  comad::Dataset<Scalar> ds = dataset_from(cfg);
  auto stats = comad::collect_gating_stats(model, ds, batches, cfg.batch_size,
                                           cfg.seed);

  std::ostringstream lines;
  for (const auto& st : stats) {
    nlohmann::json j;
    j["teacher"] = st.teacher_id;
    j["count"] = st.count;
    j["mean"] = st.mean;
    j["std"] = st.stddev;
    j["min"] = st.min;
    j["max"] = st.max;
    j["histogram"] = st.histogram;
    lines << j.dump() << "\n";
  }
  if (!out_path.empty()) write_text_file(out_path, lines.str());

  std::cout << "fusion weights over " << batches << " batches ("
            << comad::gating_variant_name(cfg.gating.variant) << " gating):\n";
  for (const auto& st : stats) {
    std::cout << "  teacher " << st.teacher_id << ": mean " << st.mean
              << "  std " << st.stddev << "  range [" << st.min << ", "
              << st.max << "]  tokens " << st.count << "\n";
  }
  if (!out_path.empty()) std::cout << "statistics written to " << out_path << "\n";
  return 0;
}

int cmd_probe(const CommonFlags& flags, const std::string& checkpoint_path) {
  Config cfg = load_config(flags);
  comad::DistillModel<Scalar> model(cfg);
  if (!checkpoint_path.empty()) {
    comad::Checkpoint<Scalar> ck =
        comad::load_checkpoint<Scalar>(checkpoint_path);
    comad::restore_params(ck, model.trainable_params());
    std::cout << "student restored from " << checkpoint_path << "\n";
  } else {
    std::cout << "probing the untrained seed-initialized student\n";
  }
  comad::Dataset<Scalar> ds = dataset_from(cfg);
  const double acc = comad::linear_probe(model.student(), ds, cfg.probe_epochs,
                                         cfg.probe_lr, cfg.probe_split);
  std::cout << "linear probe top-1 accuracy: " << acc << " (chance "
            << 1.0 / static_cast<double>(ds.num_classes) << ")\n";
  if (!flags.out_dir.empty()) {
    fs::create_directories(flags.out_dir);
    nlohmann::json j;
    j["accuracy"] = acc;
    j["classes"] = ds.num_classes;
    j["chance"] = 1.0 / static_cast<double>(ds.num_classes);
    write_text_file((fs::path(flags.out_dir) / "probe.json").string(),
                    j.dump() + "\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-teacher masked distillation for compact ViT students"};
  app.require_subcommand(0, 1);
  app.fallthrough();  // lets --config/--out-dir/--seed follow the subcommand

  CommonFlags flags;
  app.add_option("--config", flags.config_path, "Key=value config file");
  app.add_option("--out-dir", flags.out_dir, "Output directory");
  app.add_option("--seed", flags.seed, "Override the config seed");

  auto* init = app.add_subcommand("init-teachers",
                                  "Create per-teacher encoder checkpoints");
  std::string mode = "random";
  std::int64_t pretrain_steps = 100;
  init->add_option("--mode", mode, "random or toy-pretrain")
      ->check(CLI::IsMember({"random", "toy-pretrain"}));
  init->add_option("--steps", pretrain_steps,
                   "Warm-up steps in toy-pretrain mode");

  auto* distill = app.add_subcommand("distill", "Run the distillation loop");
  std::string teachers_dir, resume_path;
  distill->add_option("--teachers", teachers_dir,
                      "Directory with teacher_<id>.ckpt files");
  distill->add_option("--resume", resume_path, "Checkpoint to resume from");

  auto* verify = app.add_subcommand(
      "verify", "Run the double-precision property and gradient suite");
  std::string fault;
  verify->add_option("--fault", fault,
                     "Inject a deliberate fault (flip-kl-sign)");

  auto* inspect = app.add_subcommand("inspect-gating",
                                     "Aggregate per-teacher fusion weights");
  std::string inspect_ckpt, inspect_out;
  std::int64_t inspect_batches = 4;
  inspect->add_option("--checkpoint", inspect_ckpt,
                      "Trained checkpoint (optional)");
  inspect->add_option("--teachers", teachers_dir,
                      "Directory with teacher checkpoints");
  inspect->add_option("--batches", inspect_batches, "Batches to aggregate");
  inspect->add_option("--out", inspect_out, "JSONL output path");

  auto* probe = app.add_subcommand(
      "probe", "Linear-probe the student's class-token features");
  std::string probe_ckpt;
  probe->add_option("--checkpoint", probe_ckpt,
                    "Trained checkpoint (optional; default probes a fresh "
                    "student)");

  CLI11_PARSE(app, argc, argv);
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }

  try {
    if (init->parsed())
      return cmd_init_teachers(flags, mode, pretrain_steps);
    if (distill->parsed())
      return cmd_distill(flags, teachers_dir, resume_path);
    if (verify->parsed()) return cmd_verify(flags, fault);
    if (inspect->parsed())
      return cmd_inspect_gating(flags, inspect_ckpt, teachers_dir,
                                inspect_batches, inspect_out);
    if (probe->parsed()) return cmd_probe(flags, probe_ckpt);
  } catch (const comad::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
