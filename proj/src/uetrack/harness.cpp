#include "uetrack/harness.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace uetrack::harness {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

int to_int(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != std::floor(d)) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return static_cast<int>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& p : split(v, ','))
    if (!p.empty()) out.push_back(to_int(key, p));
  return out;
}

template <std::size_t N>
std::array<double, N> to_mix(const std::string& key, const std::string& v) {
  const auto parts = split(v, ',');
  if (parts.size() != N) throw ConfigError(key + ": expected " + std::to_string(N) + " comma-separated weights");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = to_double(key, parts[i]);
  return out;
}

const char* gate_name(tad::GateMode g) {
  switch (g) {
    case tad::GateMode::learned: return "learned";
    case tad::GateMode::force_off: return "off";
    case tad::GateMode::force_on: return "on";
  }
  return "?";
}

tad::GateMode parse_gate(const std::string& v) {
  if (v == "learned") return tad::GateMode::learned;
  if (v == "off") return tad::GateMode::force_off;
  if (v == "on") return tad::GateMode::force_on;
  throw ConfigError("gate: expected learned, off or on, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Key {
  Setter set;
  Getter get;
};

// Shortest text that reads back to the same double.
std::string num(double v) {
  char buf[32];
  return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

template <std::size_t N>
std::string join(const std::array<double, N>& a) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + num(a[i]);
  return s;
}

#define UETK_NUM(field, conv)                                                            \
  Key {                                                                                  \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = conv(k, v); }, \
        [](const RunConfig& c) { return num(static_cast<double>(c.field)); }            \
  }
#define UETK_BOOL(field)                                                                    \
  Key {                                                                                     \
    [](RunConfig& c, const std::string& k, const std::string& v) { c.field = to_bool(k, v); }, \
        [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }         \
  }

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> t;
    t["seed"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(to_double(k, v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};
    t["steps"] = UETK_NUM(steps, to_int);
    t["batch"] = UETK_NUM(batch, to_int);
    t["lr_drop_at"] = UETK_NUM(lr_drop_at, to_double);
    t["lr_drop_factor"] = UETK_NUM(lr_drop_factor, to_double);
    t["warmup_steps"] = UETK_NUM(warmup_steps, to_int);
    t["adaptive_hidden"] = UETK_NUM(adaptive_hidden, to_int);
    t["log_every"] = UETK_NUM(log_every, to_int);
    t["teacher_checkpoint"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.teacher_checkpoint = v; },
                               [](const RunConfig& c) { return c.teacher_checkpoint; }};
    t["out_dir"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
                    [](const RunConfig& c) { return c.out_dir; }};
    t["gate"] = {[](RunConfig& c, const std::string&, const std::string& v) { c.gate = parse_gate(v); },
                 [](const RunConfig& c) { return std::string(gate_name(c.gate)); }};

    t["model.descriptor"] = {[](RunConfig& c, const std::string&, const std::string& v) { parse_descriptor(v, c.model); },
                             [](const RunConfig& c) { return c.model.descriptor(); }};
    t["model.layers"] = UETK_NUM(model.layers, to_int);
    t["model.moe_layers"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                               c.model.moe_layers = to_int_list(k, v);
                             },
                             [](const RunConfig& c) {
                               std::string s;
                               for (std::size_t i = 0; i < c.model.moe_layers.size(); ++i)
                                 s += (i ? "," : "") + std::to_string(c.model.moe_layers[i]);
                               return s;
                             }};
    t["model.experts"] = UETK_NUM(model.experts, to_int);
    t["model.dim"] = UETK_NUM(model.dim, to_int);
    t["model.heads"] = UETK_NUM(model.heads, to_int);
    t["model.mlp_ratio"] = UETK_NUM(model.mlp_ratio, to_int);
    t["model.l2"] = UETK_NUM(model.l2, to_int);
    t["model.scale_similarity"] = UETK_BOOL(model.scale_similarity);
    t["model.parallel_experts"] = UETK_BOOL(model.parallel_experts);
    t["model.template_res"] = UETK_NUM(model.template_res, to_int);
    t["model.search_res"] = UETK_NUM(model.search_res, to_int);
    t["model.crop_factor_template"] = UETK_NUM(model.crop_factor_template, to_double);
    t["model.crop_factor_search"] = UETK_NUM(model.crop_factor_search, to_double);
    t["model.hanning"] = UETK_BOOL(model.hanning);

    t["loss.giou"] = UETK_NUM(model.weights.giou, to_double);
    t["loss.l1"] = UETK_NUM(model.weights.l1, to_double);
    t["loss.kd"] = UETK_NUM(model.weights.kd, to_double);
    t["loss.feat"] = UETK_NUM(model.weights.feat, to_double);
    t["loss.kd_temperature"] = UETK_NUM(model.weights.kd_temperature, to_double);

    t["optim.lr_backbone"] = UETK_NUM(optim.lr_backbone, to_double);
    t["optim.lr_rest"] = UETK_NUM(optim.lr_rest, to_double);
    t["optim.weight_decay"] = UETK_NUM(optim.weight_decay, to_double);
    t["optim.beta1"] = UETK_NUM(optim.beta1, to_double);
    t["optim.beta2"] = UETK_NUM(optim.beta2, to_double);
    t["optim.eps"] = UETK_NUM(optim.eps, to_double);
    t["optim.grad_clip"] = UETK_NUM(optim.grad_clip, to_double);

    t["data.modality_mix"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                c.data.modality_mix = to_mix<kNumModalities>(k, v);
                              },
                              [](const RunConfig& c) { return join(c.data.modality_mix); }};
    t["data.difficulty_mix"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                                  c.data.difficulty_mix = to_mix<3>(k, v);
                                },
                                [](const RunConfig& c) { return join(c.data.difficulty_mix); }};
    t["data.train_scenes"] = UETK_NUM(data.train_scenes, to_int);
    t["data.scene_length"] = UETK_NUM(data.scene_length, to_int);
    t["data.max_gap"] = UETK_NUM(data.max_gap, to_int);
    t["data.center_jitter"] = UETK_NUM(data.center_jitter, to_double);
    t["data.scale_jitter"] = UETK_NUM(data.scale_jitter, to_double);
    t["data.augment"] = UETK_BOOL(data.augment);

    t["eval.sequences_per_modality"] = UETK_NUM(eval.sequences_per_modality, to_int);
    t["eval.length"] = UETK_NUM(eval.length, to_int);
    t["eval.seed_base"] = {[](RunConfig& c, const std::string& k, const std::string& v) {
                             c.eval.seed_base = static_cast<std::uint64_t>(to_double(k, v));
                           },
                           [](const RunConfig& c) { return std::to_string(c.eval.seed_base); }};
    t["eval.difficulty"] = {[](RunConfig& c, const std::string&, const std::string& v) {
                              try {
                                c.eval.difficulty = synth::parse_difficulty(v);
                              } catch (const std::exception& e) {
                                throw ConfigError(std::string("eval.difficulty: ") + e.what());
                              }
                            },
                            [](const RunConfig& c) { return std::string(synth::difficulty_name(c.eval.difficulty)); }};
    return t;
  }();
  return table;
}

#undef UETK_NUM
#undef UETK_BOOL

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& t = keys();
  auto it = t.find(key);
  if (it == t.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, key, value);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (optim.lr_backbone <= 0 || optim.lr_rest <= 0) throw ConfigError("both learning rates must be positive");
  if (optim.weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (lr_drop_at < 0 || lr_drop_at > 1) throw ConfigError("lr_drop_at must lie in [0, 1]");
  if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (log_every < 1) throw ConfigError("log_every must be >= 1");
  if (adaptive_hidden < 1) throw ConfigError("adaptive_hidden must be >= 1");
  auto check_mix = [](const auto& m, const char* what) {
    double total = 0;
    for (double w : m) {
      if (w < 0) throw ConfigError(std::string(what) + " weights must be >= 0");
      total += w;
    }
    if (total <= 0) throw ConfigError(std::string(what) + " weights sum to zero");
  };
  check_mix(data.modality_mix, "modality_mix");
  check_mix(data.difficulty_mix, "difficulty_mix");
  if (data.train_scenes < 1 || data.scene_length < 2) throw ConfigError("data: need train_scenes >= 1 and scene_length >= 2");
  if (data.max_gap < 0) throw ConfigError("data.max_gap must be >= 0");
  if (eval.sequences_per_modality < 1 || eval.length < 2) throw ConfigError("eval: need >= 1 sequence of length >= 2");
}

double RunConfig::lr_scale(int step) const {
  double s = warmup_steps > 0 ? std::min(1.0, (step + 1.0) / warmup_steps) : 1.0;
  if (step >= static_cast<int>(std::lround(lr_drop_at * steps))) s *= lr_drop_factor;
  return s;
}

void parse_descriptor(const std::string& s, TrackerConfig& cfg) {
  std::string t;
  for (char c : s)
    if (c != ' ') t += c;
  const auto open = t.find('['), inner_open = t.find('[', open + 1), inner_close = t.find(']');
  if (open != 0 || inner_open == std::string::npos || inner_close == std::string::npos || t.back() != ']')
    throw ConfigError("descriptor '" + s + "' is not of the form [i,[j,...],k]");
  const std::string head = t.substr(1, inner_open - 1);
  const std::string inner = t.substr(inner_open + 1, inner_close - inner_open - 1);
  const std::string tail = t.substr(inner_close + 1, t.size() - inner_close - 2);
  if (head.empty() || head.back() != ',' || tail.empty() || tail.front() != ',')
    throw ConfigError("descriptor '" + s + "' is not of the form [i,[j,...],k]");
  cfg.layers = to_int("descriptor", head.substr(0, head.size() - 1));
  cfg.moe_layers = to_int_list("descriptor", inner);
  cfg.experts = to_int("descriptor", tail.substr(1));
}

RunConfig parse_config(const std::string& text, RunConfig cfg) {
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    set_key(cfg, section.empty() ? key : section + "." + key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string dump_config(const RunConfig& cfg) {
  std::map<std::string, std::vector<std::pair<std::string, std::string>>> sections;
  for (const auto& [name, key] : keys()) {
    if (name == "model.layers" || name == "model.moe_layers" || name == "model.experts") continue;
    const auto dot = name.find('.');
    const std::string sec = dot == std::string::npos ? "" : name.substr(0, dot);
    sections[sec].emplace_back(dot == std::string::npos ? name : name.substr(dot + 1), key.get(cfg));
  }
  std::ostringstream os;
  for (const auto& [sec, entries] : sections) {
    if (!sec.empty()) os << "\n[" << sec << "]\n";
    for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
  }
  return os.str();
}

std::string output_dir(const std::string& fallback) {
  const char* env = std::getenv("UETRACK_OUT_DIR");
  return env && *env ? std::string(env) : fallback;
}

// ---------------------------------------------------------------- checkpoint

namespace {

void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::vector<char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

struct Reader {
  const std::vector<char>& bytes;
  std::size_t pos = 0;

  std::uint32_t u32() {
    if (pos + 4 > bytes.size()) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::string str(std::size_t n) {
    if (pos + n > bytes.size()) throw CheckpointError("checkpoint truncated in a tensor name");
    std::string s(bytes.data() + pos, n);
    pos += n;
    return s;
  }
};

struct Entry {
  Shape shape;
  std::vector<float> values;
};

}  // namespace

std::vector<char> serialize(const ParamStore& ps) {
  std::vector<char> out{'U', 'E', 'T', 'K'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ps.params().size()));
  for (const auto& p : ps.params()) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u32(out, static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    dispatch(p.tensor.dtype(), [&]<class T>() {
      for (T v : p.tensor.data<T>()) put_f32(out, static_cast<float>(v));
    });
  }
  return out;
}

void deserialize(const std::vector<char>& bytes, ParamStore& ps) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "UETK", 4) != 0) throw CheckpointError("not a UETK checkpoint");
  Reader r{bytes, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::map<std::string, Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u32());
    Entry e;
    const std::uint32_t rank = r.u32();
    std::int64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.shape.push_back(r.u32());
      n *= e.shape.back();
    }
    e.values.resize(static_cast<std::size_t>(n));
    for (auto& v : e.values) v = std::bit_cast<float>(r.u32());
    entries.emplace(name, std::move(e));
  }
  if (r.pos != bytes.size()) throw CheckpointError("trailing bytes after the last checkpoint entry");

  std::vector<std::string> diff;
  for (const auto& p : ps.params()) {
    auto it = entries.find(p.name);
    if (it == entries.end())
      diff.push_back("missing " + p.name + " " + shape_str(p.tensor.shape()));
    else if (it->second.shape != p.tensor.shape())
      diff.push_back("shape " + p.name + ": checkpoint " + shape_str(it->second.shape) + " vs model " +
                     shape_str(p.tensor.shape()));
  }
  for (const auto& [name, e] : entries)
    if (!ps.contains(name)) diff.push_back("unexpected " + name + " " + shape_str(e.shape));
  if (!diff.empty()) {
    std::string msg = "checkpoint does not match the model (" + std::to_string(diff.size()) + " differences):";
    for (const auto& d : diff) msg += "\n  " + d;
    throw CheckpointError(msg);
  }
  for (const auto& p : ps.params()) {
    Tensor t = p.tensor;
    const auto& src = entries.at(p.name).values;
    dispatch(t.dtype(), [&]<class T>() {
      auto dst = t.mutable_buffer().span<T>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    });
  }
}

void save_checkpoint(const std::string& path, const ParamStore& ps) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const auto bytes = serialize(ps);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void load_checkpoint(const std::string& path, ParamStore& ps) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  deserialize(bytes, ps);
}

// ------------------------------------------------------------------ sampling

std::uint64_t train_scene_seed(Modality m, synth::Difficulty d, int idx) {
  return mix(mix(0x7452414eull, static_cast<std::uint64_t>(m) * 3 + static_cast<std::uint64_t>(d)),
             static_cast<std::uint64_t>(idx));
}

BatchSampler::BatchSampler(const RunConfig& cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {}

const synth::Scene& BatchSampler::scene(Modality m, synth::Difficulty d, int idx) {
  const std::uint64_t key = (static_cast<std::uint64_t>(m) * 3 + static_cast<std::uint64_t>(d)) * 1000003ull + idx;
  auto& slot = pool_[key];
  if (!slot) slot = std::make_unique<synth::Scene>(train_scene_seed(m, d, idx), m, d);
  return *slot;
}

tad::Batch BatchSampler::batch(std::int64_t index) {
  const auto& dc = cfg_.data;
  std::discrete_distribution<int> pick_m(dc.modality_mix.begin(), dc.modality_mix.end());
  std::discrete_distribution<int> pick_d(dc.difficulty_mix.begin(), dc.difficulty_mix.end());
  synth::PairOptions opt;
  opt.augment = dc.augment;
  opt.center_jitter = dc.center_jitter;
  opt.scale_jitter = dc.scale_jitter;

  std::vector<synth::SamplePair> pairs;
  pairs.reserve(static_cast<std::size_t>(cfg_.batch));
  for (int b = 0; b < cfg_.batch; ++b) {
    Rng rng(mix(mix(seed_, static_cast<std::uint64_t>(index)), static_cast<std::uint64_t>(b)));
    const auto m = static_cast<Modality>(pick_m(rng));
    const auto d = static_cast<synth::Difficulty>(pick_d(rng));
    const int idx = std::uniform_int_distribution<int>(0, dc.train_scenes - 1)(rng);
    const int t = std::uniform_int_distribution<int>(0, dc.scene_length - 1)(rng);
    const int gap = std::uniform_int_distribution<int>(-dc.max_gap, dc.max_gap)(rng);
    const int s = std::clamp(t + gap, 0, dc.scene_length - 1);
    pairs.push_back(synth::make_pair(scene(m, d, idx), t, s, cfg_.model, opt, rng));
  }
  std::vector<const tokens::CompositeImage*> zs, xs;
  std::vector<BBox> boxes;
  std::vector<int> labels;
  tad::Batch out;
  for (const auto& p : pairs) {
    zs.push_back(&p.template_crop);
    xs.push_back(&p.search_crop);
    boxes.push_back(p.gt_box_in_search);
    labels.push_back(static_cast<int>(p.modality));
    out.input.texts.push_back(p.text);
  }
  out.input.template_images = tokens::batch_images(zs);
  out.input.search_images = tokens::batch_images(xs);
  out.targets = loss::make_targets(boxes, labels, cfg_.model.search_res, cfg_.model.search_grid(), default_dtype());
  return out;
}

// ------------------------------------------------------------------ training

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void emit(std::ostream* os, int step, double lr_scale, const tad::StepMetrics& m, double grad_norm, double seconds,
          bool distill) {
  if (!os) return;
  nlohmann::json j;
  j["step"] = step;
  j["lr_scale"] = lr_scale;
  j["loss"] = m.student_loss;
  j["focal"] = m.focal;
  j["giou"] = m.giou;
  j["l1"] = m.l1;
  j["task"] = m.task;
  j["kd"] = m.kd;
  j["feat"] = m.feat;
  j["adaptive_loss"] = m.adaptive_loss;
  j["distill_rate"] = m.distill_rate;
  j["distill"] = distill;
  j["grad_norm"] = grad_norm;
  j["seconds"] = seconds;
  *os << j.dump() << std::endl;
}

}  // namespace

TrainSummary train_teacher(model::Tracker& teacher, const RunConfig& cfg, std::ostream* metrics) {
  cfg.validate();
  teacher.params().set_requires_grad(true);
  optim::AdamW opt(teacher.params().params(), cfg.optim);
  BatchSampler sampler(cfg, mix(cfg.seed, 0x7465616368ull));
  TrainSummary s;
  const auto t0 = Clock::now();
  for (int step = 0; step < cfg.steps; ++step) {
    const auto td = Clock::now();
    tad::Batch b = sampler.batch(step);
    s.data_seconds += since(td);
    const double lr = cfg.lr_scale(step);
    tad::StepMetrics m = tad::baseline_step(b, teacher, opt, lr);
    s.final_loss = m.student_loss;
    if (step % cfg.log_every == 0 || step + 1 == cfg.steps) emit(metrics, step, lr, m, opt.last_grad_norm(), since(t0), false);
    ++s.steps;
  }
  s.seconds = since(t0);
  return s;
}

TrainSummary train_student(model::Tracker& student, model::Tracker* teacher, const RunConfig& cfg,
                           std::ostream* metrics) {
  cfg.validate();
  student.params().set_requires_grad(true);
  BatchSampler sampler(cfg, mix(cfg.seed, 0x73747564ull));
  TrainSummary s;
  const auto t0 = Clock::now();
  double rate_sum = 0;
  if (!teacher) {
    optim::AdamW opt(student.params().params(), cfg.optim);
    for (int step = 0; step < cfg.steps; ++step) {
      const auto td = Clock::now();
      tad::Batch b = sampler.batch(step);
      s.data_seconds += since(td);
      const double lr = cfg.lr_scale(step);
      tad::StepMetrics m = tad::baseline_step(b, student, opt, lr);
      s.final_loss = m.student_loss;
      if (step % cfg.log_every == 0 || step + 1 == cfg.steps) emit(metrics, step, lr, m, opt.last_grad_norm(), since(t0), false);
      ++s.steps;
    }
  } else {
    teacher->params().set_requires_grad(false);
    tad::AdaptiveNet net(student.config().dim, teacher->config().dim, cfg.adaptive_hidden, mix(cfg.seed, 0x6e6574ull));
    tad::Distiller d(*teacher, net, student.config().dim, mix(cfg.seed, 0x616470ull), cfg.gate);
    optim::AdamW opt_s(tad::student_parameters(student, d), cfg.optim);
    optim::AdamWConfig acfg = cfg.optim;
    acfg.allow_missing_grad = true;
    optim::AdamW opt_a(net.params().params(), acfg);
    for (int step = 0; step < cfg.steps; ++step) {
      const auto td = Clock::now();
      tad::Batch b = sampler.batch(step);
      s.data_seconds += since(td);
      const double lr = cfg.lr_scale(step);
      tad::StepMetrics m = tad::train_step(b, student, d, opt_s, opt_a, mix(cfg.seed, 0x10000ull + step), lr);
      if (!m.separation_ok) throw std::logic_error("gradient separation violated at step " + std::to_string(step));
      s.final_loss = m.student_loss;
      rate_sum += m.distill_rate;
      if (step % cfg.log_every == 0 || step + 1 == cfg.steps) emit(metrics, step, lr, m, opt_s.last_grad_norm(), since(t0), true);
      ++s.steps;
    }
  }
  s.mean_distill_rate = s.steps ? rate_sum / s.steps : 0;
  s.seconds = since(t0);
  return s;
}

// ------------------------------------------------------------------ tracking

namespace {

BBox clamp_to_frame(BBox b, int width, int height) {
  b.w = std::clamp(b.w, 4.0, static_cast<double>(width));
  b.h = std::clamp(b.h, 4.0, static_cast<double>(height));
  b.cx = std::clamp(b.cx, 0.0, static_cast<double>(width));
  b.cy = std::clamp(b.cy, 0.0, static_cast<double>(height));
  return b;
}

}  // namespace

std::vector<TrackResult> track_sequences(const model::Tracker& m, const std::vector<synth::SynthSequence>& seqs) {
  std::vector<TrackResult> out(seqs.size());
  if (seqs.empty()) return out;
  const TrackerConfig& c = m.config();
  const std::size_t n = seqs[0].frames.size();
  for (const auto& s : seqs)
    if (s.frames.size() != n || s.frames.empty()) throw std::invalid_argument("track_sequences: sequences differ in length");
  NoGradGuard ng;
  std::vector<tokens::CompositeImage> templates;
  std::vector<std::string> texts;
  for (std::size_t k = 0; k < seqs.size(); ++k) {
    const auto& s = seqs[k];
    const auto comp = tokens::make_composite(s.frames[0].rgb, s.frames[0].aux, s.modality);
    templates.push_back({synth::crop(comp.pixels, s.boxes[0], c.crop_factor_template, c.template_res).image, s.modality});
    texts.push_back(s.modality == Modality::Language ? s.text : "");
    out[k].boxes.push_back(s.boxes[0]);
    out[k].ious.push_back(1.0);
  }
  std::vector<const tokens::CompositeImage*> zp;
  for (const auto& t : templates) zp.push_back(&t);
  const Tensor z = tokens::batch_images(zp);
  const auto window = model::hanning_window(c.search_grid());
  for (std::size_t t = 1; t < n; ++t) {
    std::vector<tokens::CompositeImage> search;
    std::vector<synth::CropWindow> windows;
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const auto& s = seqs[k];
      const auto comp = tokens::make_composite(s.frames[t].rgb, s.frames[t].aux, s.modality);
      auto cr = synth::crop(comp.pixels, out[k].boxes.back(), c.crop_factor_search, c.search_res);
      search.push_back({std::move(cr.image), s.modality});
      windows.push_back(cr.window);
    }
    std::vector<const tokens::CompositeImage*> xp;
    for (const auto& x : search) xp.push_back(&x);
    model::ModelInput in{z, tokens::batch_images(xp), texts};
    const model::Prediction pred = m.forward(in);
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      const auto& f = seqs[k].frames[t].rgb;
      const BBox local = model::decode_box(pred, static_cast<int>(k), c.search_res, c.hanning ? &window : nullptr);
      const BBox box = clamp_to_frame(windows[k].to_frame(local), f.width, f.height);
      out[k].boxes.push_back(box);
      out[k].ious.push_back(iou(box, seqs[k].boxes[t]));
    }
  }
  for (auto& r : out)
    r.mean_iou = n > 1 ? std::accumulate(r.ious.begin() + 1, r.ious.end(), 0.0) / static_cast<double>(n - 1) : 1.0;
  return out;
}

TrackResult track_sequence(const model::Tracker& m, const synth::SynthSequence& seq) {
  return track_sequences(m, {seq}).front();
}

double success_auc(const std::vector<double>& ious) {
  if (ious.empty()) return 0;
  double total = 0;
  int count = 0;
  for (int k = 0; k <= 20; ++k, ++count) {
    const double thr = 0.05 * k;
    const auto hit = std::count_if(ious.begin(), ious.end(), [&](double v) { return v > thr; });
    total += static_cast<double>(hit) / static_cast<double>(ious.size());
  }
  return total / count;
}

double EvalReport::min_modality_iou() const {
  double m = 1.0;
  for (const auto& s : per_modality) m = std::min(m, s.mean_iou);
  return m;
}

std::vector<synth::SynthSequence> eval_sequences(const EvalConfig& cfg, Modality m) {
  std::vector<synth::SynthSequence> seqs;
  for (int i = 0; i < cfg.sequences_per_modality; ++i)
    seqs.push_back(synth::generate(cfg.seed_base + static_cast<std::uint64_t>(m) * 1000 + i, m, cfg.length, cfg.difficulty));
  return seqs;
}

EvalReport evaluate(const model::Tracker& m, const EvalConfig& cfg) {
  EvalReport r;
  for (Modality mod : kAllModalities) {
    const auto results = track_sequences(m, eval_sequences(cfg, mod));
    ModalityScore s;
    s.modality = mod;
    s.sequences = static_cast<int>(results.size());
    std::vector<double> all;
    for (const auto& tr : results) {
      s.mean_iou += tr.mean_iou / static_cast<double>(results.size());
      all.insert(all.end(), tr.ious.begin() + 1, tr.ious.end());
    }
    s.auc = success_auc(all);
    r.per_modality.push_back(s);
    r.mean_iou += s.mean_iou / kNumModalities;
    r.auc += s.auc / kNumModalities;
  }
  return r;
}

void write_eval_csv(const std::string& path, const std::string& label, const EvalReport& r) {
  const bool fresh = !std::filesystem::exists(path);
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path, std::ios::app);
  if (fresh) os << "model,modality,sequences,mean_iou,auc\n";
  for (const auto& s : r.per_modality)
    os << label << "," << modality_name(s.modality) << "," << s.sequences << "," << s.mean_iou << "," << s.auc << "\n";
  os << label << ",all," << r.per_modality.size() << "," << r.mean_iou << "," << r.auc << "\n";
}

void write_boxes(std::ostream& os, const std::vector<BBox>& boxes) {
  os << std::setprecision(9);
  for (std::size_t i = 0; i < boxes.size(); ++i)
    os << i << " " << boxes[i].cx << " " << boxes[i].cy << " " << boxes[i].w << " " << boxes[i].h << "\n";
}

// ----------------------------------------------------------------- ablations

std::vector<AblationRow> eval_ablations(const std::vector<Variant>& variants, const std::vector<std::uint64_t>& seeds,
                                        model::Tracker* teacher, std::ostream* log) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    if (v.distill && !teacher) throw std::invalid_argument("eval_ablations: variant " + v.name + " needs a teacher");
    AblationRow row;
    row.name = v.name;
    for (std::uint64_t seed : seeds) {
      RunConfig cfg = v.cfg;
      cfg.seed = seed;
      model::Tracker student(cfg.model, seed);
      const TrainSummary ts = train_student(student, v.distill ? teacher : nullptr, cfg, nullptr);
      const EvalReport er = evaluate(student, cfg.eval);
      row.seeds.push_back(seed);
      row.ious.push_back(er.mean_iou);
      if (log)
        *log << v.name << " seed " << seed << ": mean IoU " << er.mean_iou << " (" << ts.seconds << " s, distill rate "
             << ts.mean_distill_rate << ")\n";
    }
    row.mean_iou = std::accumulate(row.ious.begin(), row.ious.end(), 0.0) / static_cast<double>(row.ious.size());
    row.delta = rows.empty() ? 0.0 : row.mean_iou - rows.front().mean_iou;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream os(path);
  os << "variant,seeds,per_seed_iou,mean_iou,delta\n";
  for (const auto& r : rows) {
    os << r.name << ",";
    for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? ";" : "") << r.seeds[i];
    os << ",";
    for (std::size_t i = 0; i < r.ious.size(); ++i) os << (i ? ";" : "") << r.ious[i];
    os << "," << r.mean_iou << "," << r.delta << "\n";
  }
}

}  // namespace uetrack::harness
