#include <gtest/gtest.h>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "uetrack/harness.hpp"

using namespace uetrack;
using namespace uetrack::harness;

namespace {

RunConfig tiny_run() {
  RunConfig c;
  c.model.dim = 16;
  c.model.heads = 2;
  c.model.template_res = 32;
  c.model.search_res = 64;
  c.steps = 4;
  c.batch = 2;
  c.warmup_steps = 0;
  c.data.train_scenes = 2;
  c.eval.sequences_per_modality = 1;
  c.eval.length = 4;
  return c;
}

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("uetrack_test_" + name)).string();
}

}  // namespace

TEST(Config, ParsesSectionsAndDescriptor) {
  RunConfig c = parse_config(R"(
seed = 7
steps = 12   # inline comment
[model]
descriptor = [6,[6],8]
dim = 128
heads = 4
[optim]
lr_backbone = 1e-5
lr_rest = 1e-4
[data]
modality_mix = 1, 0, 0, 0, 2
)");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.steps, 12);
  EXPECT_EQ(c.model.descriptor(), "[6,[6],8]");
  EXPECT_EQ(c.model.dim, 128);
  EXPECT_DOUBLE_EQ(c.optim.lr_backbone, 1e-5);
  EXPECT_DOUBLE_EQ(c.optim.lr_rest, 1e-4);
  EXPECT_DOUBLE_EQ(c.data.modality_mix[4], 2.0);
}

TEST(Config, DumpRoundTrips) {
  RunConfig c = tiny_run();
  c.model.moe_layers = {1, 2};
  c.gate = tad::GateMode::force_on;
  c.optim.lr_rest = 3.3e-4;
  c.eval.difficulty = synth::Difficulty::high;
  const RunConfig r = parse_config(dump_config(c));
  EXPECT_EQ(dump_config(r), dump_config(c));
  EXPECT_EQ(r.model.moe_layers, c.model.moe_layers);
  EXPECT_EQ(r.gate, tad::GateMode::force_on);
}

TEST(Config, EmptyMoeList) {
  RunConfig c = parse_config("[model]\ndescriptor = [4,[],0]\n");
  EXPECT_TRUE(c.model.moe_layers.empty());
  EXPECT_EQ(c.model.layers, 4);
}

TEST(Config, Errors) {
  EXPECT_THROW(parse_config("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nsteps = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("steps = ten\n"), ConfigError);
  EXPECT_THROW(parse_config("steps 10\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\ndescriptor = 6,6,8\n"), ConfigError);
  EXPECT_THROW(parse_config("[model]\nmoe_layers = 9\n"), ConfigError);
  EXPECT_THROW(parse_config("[data]\nmodality_mix = 1,1\n"), ConfigError);
  EXPECT_THROW(parse_config("[optim]\nlr_rest = 0\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/file.cfg"), ConfigError);
  RunConfig c;
  EXPECT_THROW(apply_override(c, "model.bogus=1"), ConfigError);
  apply_override(c, "optim.weight_decay = 0.5");
  EXPECT_DOUBLE_EQ(c.optim.weight_decay, 0.5);
}

TEST(Config, TwoLearningRatesAndSchedule) {
  RunConfig c;
  c.steps = 100;
  c.warmup_steps = 10;
  EXPECT_NE(c.optim.lr_backbone, c.optim.lr_rest);
  EXPECT_DOUBLE_EQ(c.lr_scale(0), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_scale(9), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_scale(79), 1.0);
  EXPECT_DOUBLE_EQ(c.lr_scale(80), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_scale(99), 0.1);
}

TEST(Config, OutputDirOverride) {
  ::unsetenv("UETRACK_OUT_DIR");
  EXPECT_EQ(output_dir("runs"), "runs");
  ::setenv("UETRACK_OUT_DIR", "/tmp/elsewhere", 1);
  EXPECT_EQ(output_dir("runs"), "/tmp/elsewhere");
  ::unsetenv("UETRACK_OUT_DIR");
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const RunConfig c = tiny_run();
  model::Tracker a(c.model, 1), b(c.model, 2);
  ASSERT_NE(a.params().checksum(), b.params().checksum());
  deserialize(serialize(a.params()), b.params());
  EXPECT_EQ(a.params().checksum(), b.params().checksum());
  const std::string path = tmp_path("roundtrip.ckpt");
  save_checkpoint(path, a.params());
  model::Tracker d(c.model, 3);
  load_checkpoint(path, d.params());
  EXPECT_EQ(d.params().checksum(), a.params().checksum());
  std::filesystem::remove(path);
}

TEST(Checkpoint, Layout) {
  ParamStore ps;
  ps.add("w", Tensor::from_values({2}, {1.5, -2.0}, Dtype::f32));
  const auto bytes = serialize(ps);
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 4 + 1 + 4 + 4 + 8);
  EXPECT_EQ(std::string(bytes.data(), 4), "UETK");
  auto u32 = [&](std::size_t at) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + at, 4);
    return v;
  };
  EXPECT_EQ(u32(4), kCheckpointVersion);
  EXPECT_EQ(u32(8), 1u);
  EXPECT_EQ(u32(12), 1u);
  EXPECT_EQ(bytes[16], 'w');
  EXPECT_EQ(u32(17), 1u);
  EXPECT_EQ(u32(21), 2u);
  float f;
  std::memcpy(&f, bytes.data() + 25, 4);
  EXPECT_EQ(f, 1.5f);
}

TEST(Checkpoint, MismatchNamesTensors) {
  RunConfig c = tiny_run();
  model::Tracker small(c.model, 1);
  c.model.dim = 32;
  model::Tracker wide(c.model, 1);
  try {
    deserialize(serialize(small.params()), wide.params());
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("backbone.norm.gamma"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[16]"), std::string::npos);
  }
  c.model.dim = 16;
  c.model.layers = 3;
  model::Tracker deeper(c.model, 1);
  try {
    deserialize(serialize(small.params()), deeper.params());
    FAIL() << "expected CheckpointError";
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("missing backbone.block2"), std::string::npos);
  }
  auto bytes = serialize(small.params());
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize(bytes, small.params()), CheckpointError);
  bytes[0] = 'X';
  EXPECT_THROW(deserialize(bytes, small.params()), CheckpointError);
}

TEST(Sampler, DeterministicBatches) {
  const RunConfig c = tiny_run();
  BatchSampler s1(c, 5), s2(c, 5), s3(c, 6);
  const tad::Batch a = s1.batch(3), b = s2.batch(3);
  s2.batch(0);
  const tad::Batch again = s2.batch(3);
  EXPECT_EQ(a.input.search_images.values(), b.input.search_images.values());
  EXPECT_EQ(a.input.search_images.values(), again.input.search_images.values());
  EXPECT_NE(a.input.search_images.values(), s3.batch(3).input.search_images.values());
  EXPECT_EQ(a.input.template_images.shape(), (Shape{2, 32, 32, 6}));
  EXPECT_EQ(a.input.search_images.shape(), (Shape{2, 64, 64, 6}));
  EXPECT_EQ(a.targets.gt_map.shape(), (Shape{2, 4, 4}));
}

TEST(Sampler, ModalityMixAndLabels) {
  RunConfig c = tiny_run();
  c.batch = 6;
  c.data.modality_mix = {0, 0, 0, 0, 1};
  BatchSampler s(c, 1);
  const tad::Batch b = s.batch(0);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(b.targets.labels[i], static_cast<int>(Modality::Language));
    EXPECT_FALSE(b.input.texts[i].empty());
  }
  c.data.modality_mix = {1, 0, 0, 0, 0};
  BatchSampler r(c, 1);
  for (const auto& t : r.batch(0).input.texts) EXPECT_TRUE(t.empty());
}

TEST(Tracking, UntrainedModelSmoke) {
  const RunConfig c = tiny_run();
  model::Tracker m(c.model, 1);
  const auto seq = synth::generate(3, Modality::Thermal, 5, synth::Difficulty::medium);
  const TrackResult r = track_sequence(m, seq);
  ASSERT_EQ(r.boxes.size(), 5u);
  ASSERT_EQ(r.ious.size(), 5u);
  EXPECT_EQ(r.ious[0], 1.0);
  EXPECT_GE(r.mean_iou, 0.0);
  EXPECT_LE(r.mean_iou, 1.0);
  for (const auto& b : r.boxes) {
    EXPECT_GE(b.cx, 0);
    EXPECT_LE(b.cx, 192);
    EXPECT_GT(b.w, 0);
  }
  const TrackResult again = track_sequence(m, seq);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(again.boxes[i].cx, r.boxes[i].cx);
}

TEST(Tracking, LockstepMatchesSingle) {
  const RunConfig c = tiny_run();
  model::Tracker m(c.model, 4);
  std::vector<synth::SynthSequence> seqs{synth::generate(1, Modality::RGB, 4, synth::Difficulty::low),
                                         synth::generate(2, Modality::Language, 4, synth::Difficulty::low)};
  const auto both = track_sequences(m, seqs);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto one = track_sequence(m, seqs[k]);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(one.ious[i], both[k].ious[i], 1e-5);
  }
  seqs[1] = synth::generate(2, Modality::RGB, 5, synth::Difficulty::low);
  EXPECT_THROW(track_sequences(m, seqs), std::invalid_argument);
}

TEST(Tracking, BoxFileFormat) {
  std::ostringstream os;
  write_boxes(os, {BBox{1, 2, 3, 4}, BBox{5.5, 6, 7, 8}});
  EXPECT_EQ(os.str(), "0 1 2 3 4\n1 5.5 6 7 8\n");
}

TEST(Metrics, SuccessAuc) {
  EXPECT_NEAR(success_auc({1.0, 1.0}), 20.0 / 21.0, 1e-12);  // overlap > threshold, threshold 1 never met
  EXPECT_DOUBLE_EQ(success_auc({0.0}), 0.0);
  EXPECT_NEAR(success_auc({0.5}), 10.0 / 21.0, 1e-12);
  EXPECT_NEAR(success_auc({0.5, 0.0}), 5.0 / 21.0, 1e-12);
}

TEST(Training, MetricsStreamIsJsonLines) {
  RunConfig c = tiny_run();
  model::Tracker teacher(c.model, 1);
  std::stringstream tm;
  train_teacher(teacher, c, &tm);
  model::Tracker student(c.model, 2);
  std::stringstream sm;
  const TrainSummary s = train_student(student, &teacher, c, &sm);
  EXPECT_EQ(s.steps, 4);
  for (auto* stream : {&tm, &sm}) {
    std::string line;
    int n = 0;
    while (std::getline(*stream, line)) {
      const auto j = nlohmann::json::parse(line);
      for (const char* k : {"step", "loss", "focal", "giou", "l1", "task", "kd", "feat", "distill_rate"})
        EXPECT_TRUE(j.contains(k)) << k;
      EXPECT_EQ(j["step"].get<int>(), n);
      ++n;
    }
    EXPECT_EQ(n, 4);
  }
}

TEST(Training, SaveLoadEvalMatchesDirectEval) {
  const RunConfig c = tiny_run();
  model::Tracker m(c.model, 9);
  train_student(m, nullptr, c, nullptr);
  const EvalReport direct = evaluate(m, c.eval);
  const std::string path = tmp_path("trained.ckpt");
  save_checkpoint(path, m.params());
  model::Tracker loaded(c.model, 1234);
  load_checkpoint(path, loaded.params());
  const EvalReport via = evaluate(loaded, c.eval);
  ASSERT_EQ(direct.per_modality.size(), via.per_modality.size());
  for (std::size_t i = 0; i < via.per_modality.size(); ++i) EXPECT_EQ(direct.per_modality[i].mean_iou, via.per_modality[i].mean_iou);
  EXPECT_EQ(direct.mean_iou, via.mean_iou);
  std::filesystem::remove(path);
}

TEST(Ablations, SameSeedSameNumbers) {
  RunConfig c = tiny_run();
  c.steps = 2;
  model::Tracker teacher(c.model, 3);
  std::vector<Variant> v{{"base", c, false}, {"tad", c, true}, {"base_again", c, false}};
  const auto rows = eval_ablations(v, {1, 2}, &teacher);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].ious, rows[2].ious);
  EXPECT_EQ(rows[0].delta, 0.0);
  EXPECT_DOUBLE_EQ(rows[1].delta, rows[1].mean_iou - rows[0].mean_iou);
  const std::string path = tmp_path("ablations.csv");
  write_ablation_csv(path, rows);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "variant,seeds,per_seed_iou,mean_iou,delta");
  std::filesystem::remove(path);
  EXPECT_THROW(eval_ablations(v, {1}, nullptr), std::invalid_argument);
}

TEST(GradSuite, AllComponentsWithinTolerance) {
  for (int bits : {32, 64}) {
    const auto results = grad_suite(bits);
    EXPECT_GE(results.size(), 10u);
    for (const auto& r : results) EXPECT_LT(r.max_rel_error, grad_tolerance(bits)) << r.component << " bits " << bits;
  }
}
