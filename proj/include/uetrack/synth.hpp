#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "uetrack/bbox.hpp"
#include "uetrack/config.hpp"
#include "uetrack/image.hpp"
#include "uetrack/nn.hpp"
#include "uetrack/tokenizer.hpp"

namespace uetrack::synth {

enum class Difficulty { low = 0, medium = 1, high = 2 };
enum class ShapeKind { circle = 0, square, triangle, diamond, cross };

const char* difficulty_name(Difficulty d);
Difficulty parse_difficulty(const std::string& s);

struct WorldConfig {
  int width = 192;
  int height = 192;
  double min_size = 20.0;  // sqrt(w * h) of the target, pixels
  double max_size = 36.0;
  bool static_scene = false;
};

struct Frame {
  Image rgb;
  std::optional<Image> aux;
};

struct SynthSequence {
  std::vector<Frame> frames;
  std::vector<BBox> boxes;
  std::vector<bool> occluded;  // occluder overlaps the target box
  Modality modality = Modality::RGB;
  Difficulty difficulty = Difficulty::low;
  std::string text;
  std::uint64_t seed = 0;
};

/// A procedurally defined scene; any frame can be rendered independently.
class Scene {
 public:
  Scene(std::uint64_t seed, Modality modality, Difficulty difficulty, WorldConfig world = {});

  BBox box(int t) const;
  bool occluded(int t) const;
  Frame render(int t) const;
  const std::string& text() const { return text_; }
  Modality modality() const { return modality_; }

 private:
  struct Object {
    ShapeKind shape;
    float color[3];
    double size, aspect;
    double cx0, cy0, ax, ay, wx, wy, px, py, ws, ps;
    bool striped;
  };
  struct Motion {
    double cx, cy, w, h;
  };

  Motion motion(const Object& o, int t) const;
  Image render_rgb(int t, std::vector<float>* gray) const;
  Image render_aux(int t, const Image& rgb) const;
  void draw(Image& img, const Object& o, int t, const float* override_color, float stripe_gain) const;
  bool occluder_rect(int t, double& x0, double& y0, double& x1, double& y1) const;

  std::uint64_t seed_;
  Modality modality_;
  Difficulty difficulty_;
  WorldConfig world_;
  Image background_;
  std::vector<float> depth_bg_, thermal_bg_;
  Object target_;
  std::vector<Object> distractors_;
  double occ_w_ = 0, occ_h_ = 0, occ_period_ = 1, occ_phase_ = 0, occ_amp_ = 0;
  float occ_color_[3] = {0.5f, 0.5f, 0.5f};
  std::string text_;
};

SynthSequence generate(std::uint64_t seed, Modality modality, int length, Difficulty difficulty, WorldConfig world = {});

/// Maps between frame coordinates and a square crop.
struct CropWindow {
  double x0 = 0, y0 = 0, side = 0;
  int out_res = 0;

  double scale() const { return out_res / side; }
  BBox to_crop(const BBox& b) const;
  BBox to_frame(const BBox& b) const;
};

struct Crop {
  Image image;
  BBox box;  // the input box in crop pixels
  CropWindow window;
};

/// Square crop of side factor * sqrt(w h) centered on (cx, cy) of `center`,
/// bilinear-resized to out_res; outside pixels take the per-channel frame mean.
Crop crop(const Image& frame, const BBox& center, double factor, int out_res);
/// Crop around `center` and express `target` in crop pixels.
Crop crop(const Image& frame, const BBox& center, const BBox& target, double factor, int out_res);

struct SamplePair {
  tokens::CompositeImage template_crop;
  tokens::CompositeImage search_crop;
  BBox gt_box_in_search;
  Modality modality = Modality::RGB;
  std::string text;
};

struct PairOptions {
  bool augment = false;
  double flip_prob = 0.5;
  double brightness_lo = 0.8;
  double brightness_hi = 1.2;
  double center_jitter = 0.0;  // max search-center shift, in units of sqrt(w h)
  double scale_jitter = 0.0;   // stddev of log search-size jitter
};

/// Template from frame t_idx (factor 2), search from frame s_idx (factor 4).
SamplePair make_pair(const SynthSequence& seq, int t_idx, int s_idx, const TrackerConfig& cfg, const PairOptions& opt,
                     Rng& rng);
SamplePair make_pair(const Scene& scene, int t_idx, int s_idx, const TrackerConfig& cfg, const PairOptions& opt, Rng& rng);

void flip_horizontal(tokens::CompositeImage& img);

/// Writes frame_XXXX.ppm (+ aux_XXXX.pgm), boxes.txt ("frame cx cy w h") and meta.txt.
void export_sequence(const SynthSequence& seq, const std::string& dir);

}  // namespace uetrack::synth
