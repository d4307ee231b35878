#include "uetrack/bench.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "uetrack/ops.hpp"

namespace uetrack::bench {

GatedMoE make_gated(ParamStore& ps, const std::string& name, int l1, int dim, int experts, int l2, Rng& rng, int ratio) {
  GatedMoE g;
  g.bank = moe::make_bank(ps, name, l1, dim, experts, l2, rng, ratio);
  g.gate_weight = ps.normal(name + ".gate.weight", {dim, experts}, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  return g;
}

Tensor gated_moe_forward(const Tensor& t_in, const GatedMoE& g, GatedStats* stats) {
  const auto& bank = g.bank;
  if (t_in.rank() != 2 || t_in.dim(1) != bank.dim)
    throw ShapeError("gated_moe_forward: expected [L1, " + std::to_string(bank.dim) + "], got " + shape_str(t_in.shape()));
  const auto L = t_in.dim(0);
  const int E = bank.experts;
  Tensor probs = softmax(matmul(t_in, g.gate_weight), 1);

  std::vector<int> choice(static_cast<std::size_t>(L));
  for (std::int64_t i = 0; i < L; ++i) {
    int best = 0;
    for (int e = 1; e < E; ++e)
      if (probs.value(i * E + e) > probs.value(i * E + best)) best = e;
    choice[i] = best;
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(L));
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t comparisons = 0;
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    ++comparisons;
    return choice[a] < choice[b];
  });
  add_flops(comparisons);

  std::vector<std::vector<std::int64_t>> groups(E);
  for (std::int64_t i : order) groups[choice[i]].push_back(i);
  std::vector<Tensor> outs(E);
  auto run = [&](int e) {
    const auto& idx = groups[e];
    if (idx.empty()) return;
    std::vector<std::int64_t> flat(idx.size());
    for (std::size_t k = 0; k < idx.size(); ++k) flat[k] = idx[k] * E + e;
    Tensor gate_p = index_select(reshape(probs, {L * E, 1}), flat);
    Tensor y = mul(bank.ffn[e](index_select(t_in, idx)), expand(gate_p, {static_cast<std::int64_t>(idx.size()), bank.dim}));
    outs[e] = index_scatter(y, idx, L);
  };
  if (bank.parallel && E > 1) {
    const bool grad = grad_enabled();
    std::vector<std::thread> pool;
    for (int e = 0; e < E; ++e)
      pool.emplace_back([&, e] {
        if (grad) {
          run(e);
        } else {
          NoGradGuard ng;
          run(e);
        }
      });
    for (auto& t : pool) t.join();
  } else {
    for (int e = 0; e < E; ++e) run(e);
  }
  Tensor out;
  for (int e = 0; e < E; ++e)
    if (outs[e].defined()) out = out.defined() ? add(out, outs[e]) : outs[e];

  if (stats) {
    stats->group_sizes.assign(E, 0);
    for (int e = 0; e < E; ++e) stats->group_sizes[e] = static_cast<std::int64_t>(groups[e].size());
    stats->sort_comparisons = comparisons;
  }
  return out;
}

namespace {

double variance(const std::vector<double>& v) {
  if (v.empty()) return 0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

template <class F>
std::pair<double, double> time_it(F&& f, int reps, int warmup) {
  for (int i = 0; i < warmup; ++i) f();
  std::vector<double> ns;
  ns.reserve(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    const auto t1 = std::chrono::steady_clock::now();
    ns.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  std::sort(ns.begin(), ns.end());
  const double median = ns.size() % 2 ? ns[ns.size() / 2] : 0.5 * (ns[ns.size() / 2 - 1] + ns[ns.size() / 2]);
  const auto p95_idx = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(ns.size()))) - 1;
  return {std::max(median, 1.0), std::max(ns[std::min(p95_idx, ns.size() - 1)], 1.0)};
}

}  // namespace

std::pair<BenchReport, BenchReport> run_bench(const BenchConfig& cfg) {
  if (cfg.reps < 10) throw std::invalid_argument("run_bench: reps must be >= 10");
  if (cfg.inputs < 2) throw std::invalid_argument("run_bench: at least two inputs are needed for variance");
  const int l2 = cfg.l2 > 0 ? cfg.l2 : 4 * cfg.experts;
  NoGradGuard ng;
  ParamStore ps;
  Rng rng(cfg.seed);
  // Both variants share the same expert weights.
  GatedMoE gated = make_gated(ps, "moe", cfg.l1, cfg.dim, cfg.experts, l2, rng, cfg.ratio);
  gated.bank.parallel = cfg.parallel;
  const moe::ExpertBank& bank = gated.bank;

  std::vector<Tensor> inputs;
  for (int i = 0; i < cfg.inputs; ++i) inputs.push_back(randn({cfg.l1, cfg.dim}, rng));

  BenchReport tp, gt;
  for (BenchReport* r : {&tp, &gt}) {
    r->l1 = cfg.l1;
    r->experts = cfg.experts;
    r->dim = cfg.dim;
    r->l2 = l2;
  }
  tp.variant = "tpmoe";
  gt.variant = "gated";
  tp.notes = "soft dispatch/combine over L2 expert slots";
  gt.notes = "top-1 gate, stable sort by expert, no capacity limit; work counts sort comparisons";

  std::vector<double> tp_work, gt_work;
  std::vector<std::vector<double>> sizes(static_cast<std::size_t>(cfg.experts));
  for (const auto& x : inputs) {
    {
      FlopScope s;
      moe::tpmoe_forward(x, bank);
      tp.work_per_input.push_back(s.elapsed());
      tp_work.push_back(static_cast<double>(s.elapsed()));
    }
    {
      GatedStats st;
      FlopScope s;
      gated_moe_forward(x, gated, &st);
      gt.work_per_input.push_back(s.elapsed());
      gt_work.push_back(static_cast<double>(s.elapsed()));
      for (int e = 0; e < cfg.experts; ++e) sizes[e].push_back(static_cast<double>(st.group_sizes[e]));
    }
  }
  tp.flop_count = tp.work_per_input.front();
  gt.flop_count = gt.work_per_input.front();
  tp.work_variance = variance(tp_work);
  gt.work_variance = variance(gt_work);
  double gv = 0;
  for (const auto& s : sizes) gv += variance(s);
  gt.group_size_variance = gv / cfg.experts;
  tp.group_size_variance = 0;  // every slot always receives a full soft batch

  std::size_t k = 0;
  std::tie(tp.median_ns, tp.p95_ns) = time_it([&] { moe::tpmoe_forward(inputs[k++ % inputs.size()], bank); }, cfg.reps, cfg.warmup);
  k = 0;
  std::tie(gt.median_ns, gt.p95_ns) = time_it([&] { gated_moe_forward(inputs[k++ % inputs.size()], gated); }, cfg.reps, cfg.warmup);
  return {tp, gt};
}

std::string to_json_line(const BenchReport& r) {
  nlohmann::json j = {{"variant", r.variant},
                      {"l1", r.l1},
                      {"experts", r.experts},
                      {"dim", r.dim},
                      {"l2", r.l2},
                      {"median_ns", r.median_ns},
                      {"p95_ns", r.p95_ns},
                      {"flop_count", r.flop_count},
                      {"work_variance_across_inputs", r.work_variance},
                      {"group_size_variance", r.group_size_variance},
                      {"work_per_input", r.work_per_input},
                      {"notes", r.notes}};
  return j.dump();
}

void write_jsonl(std::ostream& os, const std::vector<BenchReport>& reports) {
  for (const auto& r : reports) os << to_json_line(r) << "\n";
}

void write_csv(std::ostream& os, const std::vector<BenchReport>& reports) {
  os << "variant,l1,experts,dim,l2,median_ns,p95_ns,flop_count,work_variance,group_size_variance\n";
  for (const auto& r : reports)
    os << r.variant << "," << r.l1 << "," << r.experts << "," << r.dim << "," << r.l2 << "," << r.median_ns << ","
       << r.p95_ns << "," << r.flop_count << "," << r.work_variance << "," << r.group_size_variance << "\n";
}

}  // namespace uetrack::bench
