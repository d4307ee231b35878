#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "uetrack/bench.hpp"
#include "uetrack/harness.hpp"

using namespace uetrack;
namespace fs = std::filesystem;

namespace {

struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigArgs {
  std::string config;
  std::string preset;
  std::vector<std::string> overrides;

  void add(CLI::App* app, const std::string& default_preset) {
    preset = default_preset;
    app->add_option("--config,-c", config, "Config file (key = value, [sections])");
    app->add_option("--preset", preset, "Model preset: teacher or student")->check(CLI::IsMember({"teacher", "student"}));
    app->add_option("--set", overrides, "Override, e.g. --set optim.lr_rest=5e-4");
  }

  harness::RunConfig load() const {
    harness::RunConfig base;
    base.model = preset == "teacher" ? TrackerConfig::teacher() : TrackerConfig::student();
    harness::RunConfig cfg = config.empty() ? base : harness::load_config(config, base);
    for (const auto& o : overrides) harness::apply_override(cfg, o);
    cfg.validate();
    return cfg;
  }
};

std::string out_path(const harness::RunConfig& cfg, const std::string& name) {
  const fs::path dir = harness::output_dir(cfg.out_dir);
  fs::create_directories(dir);
  return (dir / name).string();
}

void print_eval(const harness::EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& s : r.per_modality)
    std::cout << "  " << std::left << std::setw(9) << modality_name(s.modality) << " mean IoU " << s.mean_iou << "  AUC "
              << s.auc << "\n";
  std::cout << "  all       mean IoU " << r.mean_iou << "  AUC " << r.auc << "\n";
}

int cmd_gradcheck(int bits) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = harness::grad_suite(bits);
  const double tol = harness::grad_tolerance(bits);
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_rel_error < tol;
    ok = ok && pass;
    std::cout << std::left << std::setw(16) << r.component << " max rel err " << std::scientific << std::setprecision(3)
              << r.max_rel_error << (pass ? "  ok" : "  FAIL") << "\n";
  }
  std::cout << std::fixed << std::setprecision(2) << "bits " << bits << ", tolerance " << std::scientific << tol
            << std::fixed << ", " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()
            << " s\n";
  if (!ok) throw CheckFailed("gradient check failed");
  return 0;
}

int cmd_train_teacher(const ConfigArgs& ca, const std::string& out, bool eval) {
  const auto cfg = ca.load();
  model::Tracker teacher(cfg.model, cfg.seed);
  std::ofstream metrics(out_path(cfg, "teacher_metrics.jsonl"));
  std::ofstream(out_path(cfg, "teacher.cfg")) << harness::dump_config(cfg);
  std::cout << "teacher " << cfg.model.descriptor() << " D=" << cfg.model.dim << ", " << teacher.parameter_count()
            << " parameters, " << cfg.steps << " steps\n";
  const auto s = harness::train_teacher(teacher, cfg, &metrics);
  const std::string ckpt = out.empty() ? out_path(cfg, "teacher.ckpt") : out;
  harness::save_checkpoint(ckpt, teacher.params());
  std::cout << "trained in " << s.seconds << " s (data " << s.data_seconds << " s), final loss " << s.final_loss
            << ", checkpoint " << ckpt << "\n";
  if (eval) print_eval(harness::evaluate(teacher, cfg.eval));
  return 0;
}

int cmd_train_student(const ConfigArgs& ca, const std::string& teacher_path, const ConfigArgs& tca, bool no_distill,
                      const std::string& out, bool eval) {
  auto cfg = ca.load();
  if (!teacher_path.empty()) cfg.teacher_checkpoint = teacher_path;
  std::unique_ptr<model::Tracker> teacher;
  if (!no_distill) {
    if (cfg.teacher_checkpoint.empty()) throw ConfigError("train-student needs --teacher or teacher_checkpoint");
    const auto tcfg = tca.load();
    teacher = std::make_unique<model::Tracker>(tcfg.model, 0);
    harness::load_checkpoint(cfg.teacher_checkpoint, teacher->params());
  }
  model::Tracker student(cfg.model, cfg.seed);
  std::ofstream metrics(out_path(cfg, "student_metrics.jsonl"));
  std::ofstream(out_path(cfg, "student.cfg")) << harness::dump_config(cfg);
  std::cout << "student " << cfg.model.descriptor() << " D=" << cfg.model.dim << (teacher ? ", TAD" : ", no distillation")
            << ", " << cfg.steps << " steps\n";
  const auto s = harness::train_student(student, teacher.get(), cfg, &metrics);
  const std::string ckpt = out.empty() ? out_path(cfg, "student.ckpt") : out;
  harness::save_checkpoint(ckpt, student.params());
  std::cout << "trained in " << s.seconds << " s, final loss " << s.final_loss << ", mean distill rate "
            << s.mean_distill_rate << ", checkpoint " << ckpt << "\n";
  if (eval) print_eval(harness::evaluate(student, cfg.eval));
  return 0;
}

int cmd_eval(const ConfigArgs& ca, const std::string& ckpt, const std::string& csv, double min_iou) {
  const auto cfg = ca.load();
  model::Tracker m(cfg.model, 0);
  harness::load_checkpoint(ckpt, m.params());
  const auto r = harness::evaluate(m, cfg.eval);
  print_eval(r);
  harness::write_eval_csv(csv.empty() ? out_path(cfg, "eval.csv") : csv, fs::path(ckpt).stem().string(), r);
  if (r.mean_iou < min_iou) throw CheckFailed("mean IoU below --min-iou");
  return 0;
}

int cmd_ablate(const ConfigArgs& ca, const ConfigArgs& tca, const std::string& teacher_path, int seeds,
               const std::string& csv) {
  const auto cfg = ca.load();
  model::Tracker teacher(tca.load().model, 0);
  harness::load_checkpoint(teacher_path, teacher.params());
  harness::RunConfig no_moe = cfg;
  no_moe.model.moe_layers.clear();
  std::vector<harness::Variant> variants{{"no_distill", cfg, false}, {"tad", cfg, true}, {"no_tpmoe", no_moe, false}};
  std::vector<std::uint64_t> s;
  for (int i = 0; i < seeds; ++i) s.push_back(cfg.seed + i);
  const auto rows = harness::eval_ablations(variants, s, &teacher, &std::cout);
  for (const auto& r : rows) std::cout << r.name << ": mean IoU " << r.mean_iou << " delta " << r.delta << "\n";
  harness::write_ablation_csv(csv.empty() ? out_path(cfg, "ablations.csv") : csv, rows);
  return 0;
}

int cmd_infer(const ConfigArgs& ca, const std::string& ckpt, std::uint64_t seed, const std::string& modality, int length,
              const std::string& difficulty, const std::string& out) {
  const auto cfg = ca.load();
  model::Tracker m(cfg.model, 0);
  harness::load_checkpoint(ckpt, m.params());
  const auto seq = synth::generate(seed, parse_modality(modality), length, synth::parse_difficulty(difficulty));
  const auto r = harness::track_sequence(m, seq);
  const std::string path = out.empty() ? out_path(cfg, "boxes.txt") : out;
  std::ofstream os(path);
  harness::write_boxes(os, r.boxes);
  std::cout << "tracked " << seq.frames.size() << " frames, mean IoU " << r.mean_iou << ", boxes in " << path << "\n";
  return 0;
}

int cmd_bench(const bench::BenchConfig& bc, const std::string& jsonl, const std::string& csv) {
  const auto [tp, gated] = bench::run_bench(bc);
  std::vector<bench::BenchReport> reports{tp, gated};
  bench::write_jsonl(std::cout, reports);
  if (!jsonl.empty()) {
    std::ofstream os(jsonl);
    bench::write_jsonl(os, reports);
  }
  if (!csv.empty()) {
    std::ofstream os(csv);
    bench::write_csv(os, reports);
  }
  std::cerr << "tpmoe/gated median time ratio " << tp.median_ns / gated.median_ns << "\n";
  return 0;
}

int cmd_gen_data(std::uint64_t seed, const std::string& modality, int length, const std::string& difficulty, int count,
                 const std::string& dir) {
  const Modality m = parse_modality(modality);
  const auto d = synth::parse_difficulty(difficulty);
  for (int i = 0; i < count; ++i) {
    const auto seq = synth::generate(seed + i, m, length, d);
    const std::string sub = count == 1 ? dir : (fs::path(dir) / ("seq_" + std::to_string(seed + i))).string();
    synth::export_sequence(seq, sub);
    std::cout << "wrote " << sub << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale multi-modal tracker: training, evaluation, benchmarks"};
  app.require_subcommand(1);

  int bits = 64;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--bits", bits, "32 or 64")->check(CLI::IsMember({32, 64}));

  ConfigArgs tt_cfg;
  std::string tt_out;
  bool tt_eval = false;
  auto* tt = app.add_subcommand("train-teacher", "Train the teacher and write a checkpoint");
  tt_cfg.add(tt, "teacher");
  tt->add_option("--out,-o", tt_out, "Checkpoint path");
  tt->add_flag("--eval", tt_eval, "Evaluate after training");

  ConfigArgs ts_cfg, ts_tcfg;
  std::string ts_teacher, ts_out, ts_tconfig;
  bool ts_nodistill = false, ts_eval = false;
  auto* ts = app.add_subcommand("train-student", "Train a student with TAD (or without distillation)");
  ts_cfg.add(ts, "student");
  ts->add_option("--teacher,-t", ts_teacher, "Teacher checkpoint");
  ts->add_option("--teacher-config", ts_tconfig, "Teacher config file (teacher preset when omitted)");
  ts->add_flag("--no-distill", ts_nodistill, "Plain supervised baseline");
  ts->add_option("--out,-o", ts_out, "Checkpoint path");
  ts->add_flag("--eval", ts_eval, "Evaluate after training");

  ConfigArgs ev_cfg, ev_tcfg;
  std::string ev_ckpt, ev_csv, ev_teacher, ev_tconfig;
  double ev_min = 0;
  int ev_seeds = 3;
  bool ev_ablate = false;
  auto* ev = app.add_subcommand("eval", "Per-modality mean IoU and success AUC on held-out sequences");
  ev_cfg.add(ev, "student");
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint");
  ev->add_option("--csv", ev_csv, "CSV output path");
  ev->add_option("--min-iou", ev_min, "Exit 1 when the mean IoU is lower");
  ev->add_flag("--ablations", ev_ablate, "Train and compare no-distill, TAD and no-TP-MoE students");
  ev->add_option("--teacher", ev_teacher, "Teacher checkpoint for --ablations");
  ev->add_option("--teacher-config", ev_tconfig, "Teacher config file for --ablations");
  ev->add_option("--seeds", ev_seeds, "Seeds per variant for --ablations")->check(CLI::PositiveNumber);

  ConfigArgs in_cfg;
  std::string in_ckpt, in_mod = "rgb", in_diff = "medium", in_out;
  std::uint64_t in_seed = 1;
  int in_len = 60;
  auto* in = app.add_subcommand("infer", "Track one synthetic sequence and write per-frame boxes");
  in_cfg.add(in, "student");
  in->add_option("--checkpoint", in_ckpt, "Model checkpoint")->required();
  in->add_option("--seed", in_seed);
  in->add_option("--modality", in_mod);
  in->add_option("--length", in_len)->check(CLI::Range(2, 100000));
  in->add_option("--difficulty", in_diff);
  in->add_option("--out,-o", in_out, "Box file (frame cx cy w h)");

  bench::BenchConfig bc;
  std::string b_jsonl, b_csv;
  auto* bn = app.add_subcommand("bench", "TP-MoE vs gated top-1 MoE latency and work");
  bn->add_option("--l1", bc.l1);
  bn->add_option("--experts", bc.experts);
  bn->add_option("--dim", bc.dim);
  bn->add_option("--ratio", bc.ratio);
  bn->add_option("--l2", bc.l2);
  bn->add_option("--reps", bc.reps);
  bn->add_option("--warmup", bc.warmup);
  bn->add_option("--inputs", bc.inputs);
  bn->add_option("--seed", bc.seed);
  bn->add_flag("--parallel", bc.parallel, "Parallel experts for both variants");
  bn->add_option("--jsonl", b_jsonl);
  bn->add_option("--csv", b_csv);

  std::uint64_t g_seed = 1;
  std::string g_mod = "rgb", g_diff = "medium", g_dir = "synth";
  int g_len = 60, g_count = 1;
  auto* gd = app.add_subcommand("gen-data", "Export synthetic sequences as PPM/PGM plus boxes.txt");
  gd->add_option("--seed", g_seed);
  gd->add_option("--modality", g_mod);
  gd->add_option("--length", g_len)->check(CLI::Range(2, 100000));
  gd->add_option("--difficulty", g_diff);
  gd->add_option("--count", g_count)->check(CLI::PositiveNumber);
  gd->add_option("--out,-o", g_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (!ts_tconfig.empty()) ts_tcfg.config = ts_tconfig;
    ts_tcfg.preset = "teacher";
    if (!ev_tconfig.empty()) ev_tcfg.config = ev_tconfig;
    ev_tcfg.preset = "teacher";
    if (*gc) return cmd_gradcheck(bits);
    if (*tt) return cmd_train_teacher(tt_cfg, tt_out, tt_eval);
    if (*ts) return cmd_train_student(ts_cfg, ts_teacher, ts_tcfg, ts_nodistill, ts_out, ts_eval);
    if (*ev) {
      if (ev_ablate) {
        if (ev_teacher.empty()) throw ConfigError("eval --ablations needs --teacher");
        return cmd_ablate(ev_cfg, ev_tcfg, ev_teacher, ev_seeds, ev_csv);
      }
      if (ev_ckpt.empty()) throw ConfigError("eval needs --checkpoint");
      return cmd_eval(ev_cfg, ev_ckpt, ev_csv, ev_min);
    }
    if (*in) return cmd_infer(in_cfg, in_ckpt, in_seed, in_mod, in_len, in_diff, in_out);
    if (*bn) return cmd_bench(bc, b_jsonl, b_csv);
    if (*gd) return cmd_gen_data(g_seed, g_mod, g_len, g_diff, g_count, g_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const harness::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 2;
  } catch (const CheckFailed& e) {
    std::cerr << "check failed: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
