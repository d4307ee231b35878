#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "uetrack/config.hpp"
#include "uetrack/model.hpp"
#include "uetrack/optim.hpp"
#include "uetrack/synth.hpp"
#include "uetrack/tad.hpp"

namespace uetrack::harness {

struct DataConfig {
  std::array<double, kNumModalities> modality_mix = {1, 1, 1, 1, 1};
  std::array<double, 3> difficulty_mix = {1, 1, 1};  // low, medium, high
  int train_scenes = 64;  // distinct scene seeds per (modality, difficulty)
  int scene_length = 200;
  int max_gap = 40;
  double center_jitter = 1.5;
  double scale_jitter = 0.15;
  bool augment = true;
};

struct EvalConfig {
  int sequences_per_modality = 6;
  int length = 60;
  std::uint64_t seed_base = 1000000;
  synth::Difficulty difficulty = synth::Difficulty::medium;
};

struct RunConfig {
  TrackerConfig model = TrackerConfig::student();
  std::uint64_t seed = 1;
  int steps = 2000;
  int batch = 16;
  optim::AdamWConfig optim;
  double lr_drop_at = 0.8;
  double lr_drop_factor = 0.1;
  int warmup_steps = 50;
  std::string teacher_checkpoint;
  std::string out_dir = "runs";
  DataConfig data;
  EvalConfig eval;
  tad::GateMode gate = tad::GateMode::learned;
  int adaptive_hidden = 64;
  int log_every = 1;

  void validate() const;
  double lr_scale(int step) const;
};

/// `key = value` lines, `[section]` headers, `#` comments. Keys outside a
/// section are run-level; [model], [optim], [loss], [data], [eval] follow.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path, RunConfig base = {});
/// Applies one `section.key=value` override.
void apply_override(RunConfig& cfg, const std::string& assignment);
std::string dump_config(const RunConfig& cfg);

/// Descriptor form "[i,[j,...],k]".
void parse_descriptor(const std::string& s, TrackerConfig& cfg);

/// UETRACK_OUT_DIR overrides `fallback` when set.
std::string output_dir(const std::string& fallback);

// Checkpoints: "UETK", u32 version, u32 count, then per entry u32 name
// length, name bytes, u32 rank, u32 dims, little-endian f32 values.
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<char> serialize(const ParamStore& ps);
/// Throws CheckpointError naming every missing, extra or reshaped tensor.
void deserialize(const std::vector<char>& bytes, ParamStore& ps);
void save_checkpoint(const std::string& path, const ParamStore& ps);
void load_checkpoint(const std::string& path, ParamStore& ps);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Draws training pairs from a lazily built pool of procedural scenes.
/// Batch k depends only on (seed, k).
class BatchSampler {
 public:
  BatchSampler(const RunConfig& cfg, std::uint64_t seed);
  tad::Batch batch(std::int64_t index);

 private:
  const synth::Scene& scene(Modality m, synth::Difficulty d, int idx);

  RunConfig cfg_;
  std::uint64_t seed_;
  std::map<std::uint64_t, std::unique_ptr<synth::Scene>> pool_;
};

/// Scene seed used for training; evaluation seeds start at EvalConfig::seed_base.
std::uint64_t train_scene_seed(Modality m, synth::Difficulty d, int idx);

struct TrainSummary {
  int steps = 0;
  double seconds = 0;
  double data_seconds = 0;
  double final_loss = 0;
  double mean_distill_rate = 0;
};

/// Metrics records go to `metrics` as JSON lines (may be null).
TrainSummary train_teacher(model::Tracker& teacher, const RunConfig& cfg, std::ostream* metrics);
/// Full TAD when `teacher` is given (it is frozen first), plain supervision otherwise.
TrainSummary train_student(model::Tracker& student, model::Tracker* teacher, const RunConfig& cfg,
                           std::ostream* metrics);

struct TrackResult {
  std::vector<BBox> boxes;
  std::vector<double> ious;  // per frame, frame 0 included (== 1)
  double mean_iou = 0;       // frames 1..n-1
};

TrackResult track_sequence(const model::Tracker& m, const synth::SynthSequence& seq);
/// Tracks several sequences of equal length in lockstep, batching the forward pass.
std::vector<TrackResult> track_sequences(const model::Tracker& m, const std::vector<synth::SynthSequence>& seqs);

/// Mean success rate (IoU > threshold) over thresholds 0, 0.05, ..., 1.
double success_auc(const std::vector<double>& ious);

struct ModalityScore {
  Modality modality = Modality::RGB;
  double mean_iou = 0;
  double auc = 0;
  int sequences = 0;
};

struct EvalReport {
  std::vector<ModalityScore> per_modality;
  double mean_iou = 0;  // average of the per-modality means
  double auc = 0;
  double min_modality_iou() const;
};

std::vector<synth::SynthSequence> eval_sequences(const EvalConfig& cfg, Modality m);
EvalReport evaluate(const model::Tracker& m, const EvalConfig& cfg);

void write_eval_csv(const std::string& path, const std::string& label, const EvalReport& r);
void write_boxes(std::ostream& os, const std::vector<BBox>& boxes);

struct Variant {
  std::string name;
  RunConfig cfg;
  bool distill = false;
};

struct AblationRow {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<double> ious;
  double mean_iou = 0;
  double delta = 0;  // vs the first variant
};

/// Trains each variant once per seed and evaluates it. `teacher` is used by
/// variants with distill set.
std::vector<AblationRow> eval_ablations(const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                                        model::Tracker* teacher, std::ostream* log = nullptr);
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

struct GradResult {
  std::string component;
  double max_rel_error = 0;
};

/// tpmoe_forward, one backbone block, the center head and every loss.
std::vector<GradResult> grad_suite(int bits);
inline double grad_tolerance(int bits) { return bits == 64 ? 1e-6 : 1e-3; }

}  // namespace uetrack::harness
