#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "uetrack/tpmoe.hpp"

namespace uetrack::bench {

/// Top-1 gate over the experts of a bank: logits = x W, W is [D, E].
struct GatedMoE {
  moe::ExpertBank bank;
  Tensor gate_weight;
};

GatedMoE make_gated(ParamStore& ps, const std::string& name, int l1, int dim, int experts, int l2, Rng& rng,
                    int ratio = 4);

struct GatedStats {
  std::vector<std::int64_t> group_sizes;
  std::uint64_t sort_comparisons = 0;
};

/// Each token goes to its argmax expert. Tokens are grouped by a stable sort
/// on expert id, run through that expert, scaled by the gate probability and
/// scattered back. [L1, D] -> [L1, D].
Tensor gated_moe_forward(const Tensor& t_in, const GatedMoE& g, GatedStats* stats = nullptr);

struct BenchConfig {
  int l1 = 81;
  int experts = 8;
  int dim = 64;
  int ratio = 4;
  int l2 = 0;  // 0 selects 4 * experts
  int reps = 100;
  int warmup = 10;
  int inputs = 10;
  std::uint64_t seed = 0;
  bool parallel = false;
};

struct BenchReport {
  std::string variant;
  int l1 = 0, experts = 0, dim = 0, l2 = 0;
  double median_ns = 0, p95_ns = 0;
  std::uint64_t flop_count = 0;         // on the first input
  double work_variance = 0;             // variance of counted work over inputs
  double group_size_variance = 0;       // per-expert batch-size variance over inputs, averaged over experts
  std::vector<std::uint64_t> work_per_input;
  std::string notes;
};

std::pair<BenchReport, BenchReport> run_bench(const BenchConfig& cfg);

std::string to_json_line(const BenchReport& r);
void write_jsonl(std::ostream& os, const std::vector<BenchReport>& reports);
void write_csv(std::ostream& os, const std::vector<BenchReport>& reports);

}  // namespace uetrack::bench
