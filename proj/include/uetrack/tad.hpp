#pragma once

#include <cstdint>
#include <vector>

#include "uetrack/losses.hpp"
#include "uetrack/model.hpp"
#include "uetrack/optim.hpp"

namespace uetrack::tad {

inline constexpr int kDistillClass = 0;

enum class GateMode { learned, force_off, force_on };

/// GAP of student and teacher search features, concatenated, MLP to 2 logits.
class AdaptiveNet {
 public:
  AdaptiveNet(int student_dim, int teacher_dim, int hidden, std::uint64_t seed, double tau = 1.0);
  AdaptiveNet(const AdaptiveNet&) = delete;
  AdaptiveNet& operator=(const AdaptiveNet&) = delete;

  /// [B, L, Ds], [B, L, Dt] -> [B, 2]. Inputs are detached.
  Tensor logits(const Tensor& student_feat, const Tensor& teacher_feat) const;
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  double tau() const { return tau_; }

 private:
  ParamStore params_;
  Linear fc1_, fc2_;
  double tau_;
};

struct GateDecision {
  Tensor onehot;               // [B, 2], exactly one-hot, straight-through gradient
  Tensor logits;               // [B, 2]
  std::vector<double> alpha;   // 1 when the distill class is selected
  std::vector<std::uint64_t> sample_seeds;
};

/// Gumbel-softmax with a hard straight-through sample when `train`; plain
/// argmax without noise otherwise. Noise for sample b derives from (seed, b).
GateDecision gate_from_logits(const Tensor& logits, std::uint64_t seed, bool train, double tau = 1.0);
GateDecision gate(const Tensor& student_feat, const Tensor& teacher_feat, const AdaptiveNet& net, std::uint64_t seed,
                  bool train = true);

/// alpha * teacher + (1 - alpha) * student, both sides detached; `alpha` is
/// a [B] tensor (e.g. the distill column of a gate one-hot).
model::Prediction surrogate_prediction(const model::Prediction& teacher, const model::Prediction& student,
                                       const Tensor& alpha);

/// Student objective without distillation terms, averaged over the batch.
Tensor adaptive_loss(const model::Prediction& pred_a, const loss::Targets& t, const LossWeights& w);

struct Batch {
  model::ModelInput input;
  loss::Targets targets;
};

struct StepMetrics {
  double student_loss = 0;
  double adaptive_loss = 0;
  double focal = 0, giou = 0, l1 = 0, task = 0, kd = 0, feat = 0;
  double distill_rate = 0;
  bool separation_ok = true;
};

/// Holds everything the distillation loop updates besides the student.
struct Distiller {
  const model::Tracker* teacher = nullptr;
  AdaptiveNet* net = nullptr;
  Linear adapter;
  ParamStore adapter_params;
  GateMode mode = GateMode::learned;

  Distiller(const model::Tracker& teacher, AdaptiveNet& net, int student_dim, std::uint64_t seed, GateMode mode);
};

/// Student parameters plus the feature adapter, for the student optimizer.
std::vector<Parameter> student_parameters(model::Tracker& student, Distiller& d);

/// One alternating update (student on L_S, gate on L_A).
StepMetrics train_step(const Batch& batch, model::Tracker& student, Distiller& d, optim::AdamW& opt_s,
                       optim::AdamW& opt_a, std::uint64_t step_seed, double lr_scale = 1.0);

/// Plain supervised step without a teacher.
StepMetrics baseline_step(const Batch& batch, model::Tracker& student, optim::AdamW& opt, double lr_scale = 1.0);

/// Throws std::logic_error unless every teacher parameter is frozen.
void assert_frozen(const model::Tracker& teacher);

}  // namespace uetrack::tad
