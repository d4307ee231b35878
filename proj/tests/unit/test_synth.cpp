#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "uetrack/synth.hpp"

using namespace uetrack;
using namespace uetrack::synth;

namespace {

TrackerConfig desk_cfg() { return TrackerConfig::student(); }

double mean_channel(const Image& img, int c) {
  double s = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) s += img.at(y, x, c);
  return s / (img.height * img.width);
}

}  // namespace

TEST(Synth, SameSeedIsBitIdentical) {
  for (Modality m : kAllModalities) {
    SynthSequence a = generate(42, m, 6, Difficulty::high);
    SynthSequence b = generate(42, m, 6, Difficulty::high);
    ASSERT_EQ(a.frames.size(), b.frames.size());
    for (std::size_t i = 0; i < a.frames.size(); ++i) {
      EXPECT_EQ(a.frames[i].rgb.data, b.frames[i].rgb.data);
      EXPECT_EQ(a.frames[i].aux.has_value(), b.frames[i].aux.has_value());
      if (a.frames[i].aux) EXPECT_EQ(a.frames[i].aux->data, b.frames[i].aux->data);
      EXPECT_EQ(a.boxes[i].cx, b.boxes[i].cx);
    }
    EXPECT_EQ(a.text, b.text);
  }
  EXPECT_NE(generate(1, Modality::RGB, 2, Difficulty::low).frames[0].rgb.data,
            generate(2, Modality::RGB, 2, Difficulty::low).frames[0].rgb.data);
}

TEST(Synth, AuxPresenceFollowsModality) {
  for (Modality m : kAllModalities) {
    SynthSequence s = generate(3, m, 2, Difficulty::low);
    EXPECT_EQ(s.frames[0].aux.has_value(), has_aux(m)) << modality_name(m);
    if (s.frames[0].aux) {
      const Image& a = *s.frames[0].aux;
      EXPECT_EQ(a.channels, 3);
      for (int y = 0; y < a.height; y += 7)
        for (int x = 0; x < a.width; x += 5) {
          EXPECT_EQ(a.at(y, x, 0), a.at(y, x, 1));
          EXPECT_EQ(a.at(y, x, 0), a.at(y, x, 2));
        }
    }
  }
  SynthSequence lang = generate(3, Modality::Language, 2, Difficulty::low);
  EXPECT_NE(lang.text.find(' '), std::string::npos);
  EXPECT_TRUE(generate(3, Modality::RGB, 2, Difficulty::low).text.empty());
}

TEST(Synth, LengthPrecondition) { EXPECT_THROW(generate(1, Modality::RGB, 1, Difficulty::low), std::invalid_argument); }

TEST(Synth, BoxesInsideFrame) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Scene scene(seed, Modality::RGB, static_cast<Difficulty>(seed % 3));
    for (int t = 0; t < 300; t += 3) {
      BBox b = scene.box(t);
      EXPECT_GE(b.x0(), 0.0);
      EXPECT_GE(b.y0(), 0.0);
      EXPECT_LE(b.x1(), 192.0);
      EXPECT_LE(b.y1(), 192.0);
    }
  }
}

TEST(Synth, HighDifficultyOccludesAtLeastTwentyPercent) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Scene scene(seed, Modality::RGB, Difficulty::high);
    int n = 0;
    for (int t = 0; t < 200; ++t) n += scene.occluded(t);
    EXPECT_GE(n / 200.0, 0.2) << "seed " << seed;
    Scene low(seed, Modality::RGB, Difficulty::low);
    EXPECT_FALSE(low.occluded(5));
  }
}

TEST(Synth, TargetIsHotInThermal) {
  SynthSequence s = generate(9, Modality::Thermal, 2, Difficulty::low);
  const BBox& b = s.boxes[0];
  const Image& a = *s.frames[0].aux;
  const float center = a.at(static_cast<int>(b.cy), static_cast<int>(b.cx), 0);
  EXPECT_GT(center, 0.8f);
  EXPECT_LT(a.at(0, 0, 0), 0.3f);
}

TEST(Synth, StaticSceneEventsAreZero) {
  WorldConfig w;
  w.static_scene = true;
  for (Difficulty d : {Difficulty::low, Difficulty::medium, Difficulty::high}) {
    SynthSequence s = generate(5, Modality::Event, 4, d, w);
    for (const auto& f : s.frames)
      for (float v : f.aux->data) ASSERT_EQ(v, 0.0f);
  }
  SynthSequence moving = generate(5, Modality::Event, 3, Difficulty::low);
  double total = 0;
  for (float v : moving.frames[1].aux->data) total += v;
  EXPECT_GT(total, 0.0);
}

TEST(Crop, SideFormula) {
  Image frame(192, 192, 3);
  Crop c = crop(frame, BBox{96, 96, 32, 32}, 2.0, 64);
  EXPECT_DOUBLE_EQ(c.window.side, 64.0);
  EXPECT_EQ(c.image.height, 64);
  EXPECT_EQ(c.image.width, 64);
  Crop r = crop(frame, BBox{96, 96, 16, 64}, 4.0, 128);
  EXPECT_DOUBLE_EQ(r.window.side, 4.0 * 32.0);
}

TEST(Crop, CenteredBoxStaysCentered) {
  SynthSequence s = generate(4, Modality::RGB, 2, Difficulty::low);
  for (double factor : {2.0, 4.0}) {
    Crop c = crop(s.frames[0].rgb, s.boxes[0], factor, 128);
    EXPECT_NEAR(c.box.cx, 64.0, 1e-9);
    EXPECT_NEAR(c.box.cy, 64.0, 1e-9);
    EXPECT_NEAR(std::sqrt(c.box.w * c.box.h), 128.0 / factor, 1e-9);
  }
}

TEST(Crop, CornerPaddingEqualsChannelMean) {
  SynthSequence s = generate(6, Modality::Depth, 2, Difficulty::medium);
  tokens::CompositeImage comp = tokens::make_composite(s.frames[0].rgb, s.frames[0].aux, Modality::Depth);
  Crop c = crop(comp.pixels, BBox{4, 4, 30, 30}, 4.0, 64);
  for (int ch = 0; ch < 6; ++ch) {
    const float expected = static_cast<float>(mean_channel(comp.pixels, ch));
    EXPECT_EQ(c.image.at(0, 0, ch), expected);
    EXPECT_EQ(c.image.at(5, 3, ch), expected);
    EXPECT_EQ(c.image.at(63, 0, ch), expected);
  }
}

TEST(Crop, DegenerateBoxThrows) {
  Image frame(32, 32, 3);
  EXPECT_THROW(crop(frame, BBox{10, 10, 0, 5}, 2.0, 16), std::invalid_argument);
  EXPECT_THROW(crop(frame, BBox{10, 10, 5, 5}, 1.0, 16), std::invalid_argument);
}

TEST(Crop, RoundTripWithinHalfPixel) {
  Rng rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 200; ++i) {
    BBox target{u(rng) * 192, u(rng) * 192, 8 + u(rng) * 40, 8 + u(rng) * 40};
    BBox center{target.cx + (u(rng) - 0.5) * 20, target.cy + (u(rng) - 0.5) * 20, target.w, target.h};
    CropWindow w;
    w.side = 4 * std::sqrt(center.w * center.h);
    w.x0 = center.cx - w.side / 2;
    w.y0 = center.cy - w.side / 2;
    w.out_res = 128;
    BBox back = w.to_frame(w.to_crop(target));
    EXPECT_LT(std::abs(back.x0() - target.x0()), 0.5);
    EXPECT_LT(std::abs(back.y1() - target.y1()), 0.5);
    EXPECT_LT(std::abs(back.w - target.w), 0.5);
  }
}

TEST(Pair, AugmentOffIsPureCrop) {
  SynthSequence s = generate(8, Modality::Thermal, 5, Difficulty::medium);
  TrackerConfig cfg = desk_cfg();
  Rng rng(1);
  SamplePair p = make_pair(s, 1, 4, cfg, PairOptions{}, rng);
  tokens::CompositeImage x = tokens::make_composite(s.frames[4].rgb, s.frames[4].aux, Modality::Thermal);
  Crop c = crop(x.pixels, s.boxes[4], cfg.crop_factor_search, cfg.search_res);
  EXPECT_EQ(p.search_crop.pixels.data, c.image.data);
  EXPECT_EQ(p.template_crop.pixels.height, cfg.template_res);
  EXPECT_EQ(p.search_crop.pixels.width, cfg.search_res);
  EXPECT_NEAR(p.gt_box_in_search.cx, cfg.search_res / 2.0, 1e-9);
  EXPECT_THROW(make_pair(s, 0, 5, cfg, PairOptions{}, rng), std::out_of_range);
}

TEST(Pair, FlipReflectsBoxAndIsInvolution) {
  SynthSequence s = generate(10, Modality::RGB, 3, Difficulty::low);
  TrackerConfig cfg = desk_cfg();
  PairOptions opt;
  opt.augment = true;
  opt.flip_prob = 1.0;
  opt.brightness_lo = opt.brightness_hi = 1.0;
  opt.center_jitter = 0.5;
  Rng r1(3), r2(3);
  SamplePair flipped = make_pair(s, 0, 2, cfg, opt, r1);
  opt.flip_prob = 0.0;
  SamplePair plain = make_pair(s, 0, 2, cfg, opt, r2);
  EXPECT_NEAR(flipped.gt_box_in_search.cx, cfg.search_res - plain.gt_box_in_search.cx, 1e-9);
  EXPECT_EQ(flipped.gt_box_in_search.w, plain.gt_box_in_search.w);
  tokens::CompositeImage twice = flipped.search_crop;
  flip_horizontal(twice);
  EXPECT_EQ(twice.pixels.data, plain.search_crop.pixels.data);
  BBox back = flipped.gt_box_in_search;
  back.cx = cfg.search_res - back.cx;
  EXPECT_NEAR(iou(back, plain.gt_box_in_search), 1.0, 1e-12);
}

TEST(Pair, BrightnessKeepsBox) {
  SynthSequence s = generate(11, Modality::Event, 3, Difficulty::low);
  TrackerConfig cfg = desk_cfg();
  PairOptions opt;
  opt.augment = true;
  opt.flip_prob = 0.0;
  Rng rng(9);
  SamplePair p = make_pair(s, 0, 1, cfg, opt, rng);
  Rng r0(9);
  SamplePair q = make_pair(s, 0, 1, cfg, PairOptions{}, r0);
  EXPECT_EQ(p.gt_box_in_search.cx, q.gt_box_in_search.cx);
  EXPECT_EQ(p.gt_box_in_search.h, q.gt_box_in_search.h);
  EXPECT_NE(p.search_crop.pixels.data, q.search_crop.pixels.data);
}

TEST(Pair, AugmentationDeterministicUnderSeed) {
  Scene scene(13, Modality::Depth, Difficulty::medium);
  TrackerConfig cfg = desk_cfg();
  PairOptions opt;
  opt.augment = true;
  opt.center_jitter = 1.5;
  opt.scale_jitter = 0.15;
  Rng a(4), b(4);
  SamplePair p = make_pair(scene, 2, 9, cfg, opt, a), q = make_pair(scene, 2, 9, cfg, opt, b);
  EXPECT_EQ(p.search_crop.pixels.data, q.search_crop.pixels.data);
  EXPECT_EQ(p.gt_box_in_search.cx, q.gt_box_in_search.cx);
}

TEST(Synth, ExportWritesFramesAndBoxes) {
  const auto dir = std::filesystem::temp_directory_path() / "uetrack_export_test";
  std::filesystem::remove_all(dir);
  SynthSequence s = generate(2, Modality::Depth, 3, Difficulty::low);
  export_sequence(s, dir.string());
  EXPECT_TRUE(std::filesystem::exists(dir / "frame_0002.ppm"));
  EXPECT_TRUE(std::filesystem::exists(dir / "aux_0000.pgm"));
  std::ifstream in(dir / "boxes.txt");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 3);
  Image back = read_ppm((dir / "frame_0000.ppm").string());
  EXPECT_EQ(back.width, 192);
  std::filesystem::remove_all(dir);
}
