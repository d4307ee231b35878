#include "uetrack/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace uetrack::synth {

namespace {

constexpr int kPaletteSize = 8;
const char* const kColorNames[kPaletteSize] = {"red", "green", "blue", "yellow", "magenta", "cyan", "orange", "white"};
const float kPalette[kPaletteSize][3] = {{0.9f, 0.1f, 0.1f}, {0.1f, 0.8f, 0.2f}, {0.15f, 0.25f, 0.95f},
                                         {0.95f, 0.9f, 0.1f}, {0.9f, 0.15f, 0.85f}, {0.1f, 0.9f, 0.9f},
                                         {1.0f, 0.55f, 0.05f}, {0.97f, 0.97f, 0.97f}};
const char* const kShapeNames[5] = {"circle", "square", "triangle", "diamond", "cross"};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

bool inside(ShapeKind s, double u, double v) {
  switch (s) {
    case ShapeKind::circle: return u * u + v * v <= 1.0;
    case ShapeKind::square: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case ShapeKind::triangle: return v >= -1.0 && v <= 1.0 && std::abs(u) <= (v + 1.0) / 2.0;
    case ShapeKind::diamond: return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeKind::cross: return (std::abs(u) <= 0.35 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.35 && std::abs(u) <= 1.0);
  }
  return false;
}

Image box_blur(const Image& src) {
  Image out(src.height, src.width, src.channels);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        float acc = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= src.height || xx < 0 || xx >= src.width) continue;
            acc += src.at(yy, xx, c);
            ++n;
          }
        out.at(y, x, c) = acc / n;
      }
  return out;
}

Image replicate(const std::vector<float>& plane, int h, int w) {
  Image out(h, w, 3);
  for (std::size_t i = 0; i < plane.size(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = plane[i];
  return out;
}

}  // namespace

const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::low: return "low";
    case Difficulty::medium: return "medium";
    case Difficulty::high: return "high";
  }
  return "?";
}

Difficulty parse_difficulty(const std::string& s) {
  for (Difficulty d : {Difficulty::low, Difficulty::medium, Difficulty::high})
    if (s == difficulty_name(d)) return d;
  throw ConfigError("unknown difficulty: " + s);
}

Scene::Scene(std::uint64_t seed, Modality modality, Difficulty difficulty, WorldConfig world)
    : seed_(seed), modality_(modality), difficulty_(difficulty), world_(world) {
  Rng rng(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(modality)), static_cast<std::uint64_t>(difficulty)));
  const int W = world_.width, H = world_.height;

  // Background: muted two-color gradient, clutter blobs, fixed fine noise.
  background_ = Image(H, W, 3);
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = static_cast<float>(uniform(rng, 0.15, 0.6));
    c1[c] = static_cast<float>(uniform(rng, 0.15, 0.6));
  }
  const double gdir = uniform(rng, 0, 2 * std::numbers::pi);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double s = 0.5 + 0.5 * ((x - W / 2.0) * std::cos(gdir) + (y - H / 2.0) * std::sin(gdir)) / (0.75 * W);
      const float a = static_cast<float>(std::clamp(s, 0.0, 1.0));
      for (int c = 0; c < 3; ++c) background_.at(y, x, c) = c0[c] * (1 - a) + c1[c] * a;
    }
  const int blobs = 10 + 6 * static_cast<int>(difficulty);
  for (int i = 0; i < blobs; ++i) {
    const double bx = uniform(rng, 0, W), by = uniform(rng, 0, H);
    const double r = uniform(rng, 6, 22);
    const bool round = uniform(rng, 0, 1) < 0.5;
    float col[3];
    for (int c = 0; c < 3; ++c) col[c] = static_cast<float>(uniform(rng, 0.1, 0.7));
    for (int y = std::max(0, int(by - r)); y < std::min(H, int(by + r) + 1); ++y)
      for (int x = std::max(0, int(bx - r)); x < std::min(W, int(bx + r) + 1); ++x) {
        const double u = (x + 0.5 - bx) / r, v = (y + 0.5 - by) / r;
        if (round ? u * u + v * v > 1 : std::max(std::abs(u), std::abs(v)) > 1) continue;
        for (int c = 0; c < 3; ++c) background_.at(y, x, c) = 0.4f * background_.at(y, x, c) + 0.6f * col[c];
      }
  }
  std::uniform_real_distribution<float> noise(-0.035f, 0.035f);
  for (auto& v : background_.data) v = std::clamp(v + noise(rng), 0.0f, 1.0f);

  // Per-scene depth and thermal backgrounds.
  const double dcx = uniform(rng, 0.3, 0.7) * W, dcy = uniform(rng, 0.3, 0.7) * H;
  const double maxr = std::hypot(W, H);
  depth_bg_.resize(std::size_t(W) * H);
  thermal_bg_.resize(std::size_t(W) * H);
  const double tfx = uniform(rng, 0.02, 0.06), tfy = uniform(rng, 0.02, 0.06), tph = uniform(rng, 0, 6.3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double d = 0.5 + 0.5 * std::hypot(x + 0.5 - dcx, y + 0.5 - dcy) / maxr;
      depth_bg_[std::size_t(y) * W + x] = static_cast<float>(1.0 - d);
      thermal_bg_[std::size_t(y) * W + x] =
          static_cast<float>(0.12 + 0.08 * std::sin(tfx * x + tph) * std::cos(tfy * y - tph));
    }

  auto make_object = [&](int color_idx) {
    Object o{};
    o.shape = static_cast<ShapeKind>(uniform_int(rng, 0, 4));
    for (int c = 0; c < 3; ++c) o.color[c] = kPalette[color_idx][c];
    o.size = uniform(rng, world_.min_size, world_.max_size);
    o.aspect = uniform(rng, 0.75, 1.33);
    const double w = o.size * std::sqrt(o.aspect) * 1.15, h = o.size / std::sqrt(o.aspect) * 1.15;
    const double still = world_.static_scene ? 0.0 : 1.0;
    o.ax = still * uniform(rng, 8, std::max(9.0, (W - w) / 2 - 4));
    o.ay = still * uniform(rng, 8, std::max(9.0, (H - h) / 2 - 4));
    o.cx0 = uniform(rng, w / 2 + 2 + o.ax, std::max(w / 2 + 2 + o.ax + 1e-6, W - w / 2 - 2 - o.ax));
    o.cy0 = uniform(rng, h / 2 + 2 + o.ay, std::max(h / 2 + 2 + o.ay + 1e-6, H - h / 2 - 2 - o.ay));
    o.wx = uniform(rng, 0.02, 0.07);
    o.wy = uniform(rng, 0.02, 0.07);
    o.px = uniform(rng, 0, 2 * std::numbers::pi);
    o.py = uniform(rng, 0, 2 * std::numbers::pi);
    o.ws = still * uniform(rng, 0.01, 0.04);
    o.ps = uniform(rng, 0, 2 * std::numbers::pi);
    o.striped = uniform(rng, 0, 1) < 0.5;
    return o;
  };
  const int target_color = uniform_int(rng, 0, kPaletteSize - 1);
  target_ = make_object(target_color);
  text_ = std::string(kColorNames[target_color]) + " " + kShapeNames[static_cast<int>(target_.shape)];

  const int n_distract = difficulty == Difficulty::low ? 0 : (difficulty == Difficulty::medium ? 2 : 3);
  for (int i = 0; i < n_distract; ++i) {
    int c = uniform_int(rng, 0, kPaletteSize - 2);
    if (c >= target_color) ++c;
    distractors_.push_back(make_object(c));
  }
  if (difficulty == Difficulty::high) {
    occ_w_ = 0.5 * target_.size;
    occ_h_ = 1.6 * target_.size;
    occ_amp_ = 1.4 * target_.size;
    occ_period_ = uniform(rng, 20, 40);
    occ_phase_ = uniform(rng, 0, 2 * std::numbers::pi);
    const float g = static_cast<float>(uniform(rng, 0.35, 0.6));
    for (float& c : occ_color_) c = g;
  }
}

Scene::Motion Scene::motion(const Object& o, int t) const {
  const double s = 1.0 + 0.15 * std::sin(o.ws * t + o.ps);
  Motion m;
  m.cx = o.cx0 + o.ax * std::sin(o.wx * t + o.px);
  m.cy = o.cy0 + o.ay * std::sin(o.wy * t + o.py);
  m.w = o.size * std::sqrt(o.aspect) * s;
  m.h = o.size / std::sqrt(o.aspect) * s;
  return m;
}

BBox Scene::box(int t) const {
  const Motion m = motion(target_, t);
  return {m.cx, m.cy, m.w, m.h};
}

bool Scene::occluder_rect(int t, double& x0, double& y0, double& x1, double& y1) const {
  if (difficulty_ != Difficulty::high) return false;
  const Motion m = motion(target_, t);
  const double cx = m.cx + occ_amp_ * std::sin(2 * std::numbers::pi * (world_.static_scene ? 0 : t) / occ_period_ + occ_phase_);
  x0 = cx - occ_w_ / 2;
  x1 = cx + occ_w_ / 2;
  y0 = m.cy - occ_h_ / 2;
  y1 = m.cy + occ_h_ / 2;
  return true;
}

bool Scene::occluded(int t) const {
  double x0, y0, x1, y1;
  if (!occluder_rect(t, x0, y0, x1, y1)) return false;
  const BBox b = box(t);
  return std::min(x1, b.x1()) > std::max(x0, b.x0()) && std::min(y1, b.y1()) > std::max(y0, b.y0());
}

void Scene::draw(Image& img, const Object& o, int t, const float* override_color, float stripe_gain) const {
  const Motion m = motion(o, t);
  const int xa = std::max(0, static_cast<int>(std::floor(m.cx - m.w / 2)));
  const int xb = std::min(img.width - 1, static_cast<int>(std::ceil(m.cx + m.w / 2)));
  const int ya = std::max(0, static_cast<int>(std::floor(m.cy - m.h / 2)));
  const int yb = std::min(img.height - 1, static_cast<int>(std::ceil(m.cy + m.h / 2)));
  const float* col = override_color ? override_color : o.color;
  for (int y = ya; y <= yb; ++y)
    for (int x = xa; x <= xb; ++x) {
      const double u = (x + 0.5 - m.cx) / (m.w / 2), v = (y + 0.5 - m.cy) / (m.h / 2);
      if (!inside(o.shape, u, v)) continue;
      float g = 1.0f;
      if (o.striped && static_cast<int>(std::floor((u + v + 4.0) * 2.5)) % 2 == 0) g = stripe_gain;
      for (int c = 0; c < img.channels; ++c) img.at(y, x, c) = col[c] * g;
    }
}

Image Scene::render_rgb(int t, std::vector<float>* gray) const {
  Image img = background_;
  for (const auto& d : distractors_) draw(img, d, t, nullptr, 0.6f);
  draw(img, target_, t, nullptr, 0.6f);
  double x0, y0, x1, y1;
  if (occluder_rect(t, x0, y0, x1, y1)) {
    for (int y = std::max(0, int(std::floor(y0))); y < std::min(img.height, int(std::ceil(y1))); ++y)
      for (int x = std::max(0, int(std::floor(x0))); x < std::min(img.width, int(std::ceil(x1))); ++x) {
        if (x + 0.5 < x0 || x + 0.5 > x1 || y + 0.5 < y0 || y + 0.5 > y1) continue;
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = occ_color_[c];
      }
  }
  if (difficulty_ == Difficulty::high) img = box_blur(img);
  if (gray) {
    gray->resize(std::size_t(img.width) * img.height);
    for (std::size_t i = 0; i < gray->size(); ++i)
      (*gray)[i] = (img.data[i * 3] + img.data[i * 3 + 1] + img.data[i * 3 + 2]) / 3.0f;
  }
  return img;
}

Image Scene::render_aux(int t, const Image& rgb) const {
  const int W = world_.width, H = world_.height;
  auto draw_plane = [&](const std::vector<float>& base, float distract, float target, float occluder) {
    Image plane = replicate(base, H, W);
    const float dv[3] = {distract, distract, distract}, tv[3] = {target, target, target};
    for (const auto& d : distractors_) draw(plane, d, t, dv, 1.0f);
    draw(plane, target_, t, tv, 0.92f);
    double x0, y0, x1, y1;
    if (occluder_rect(t, x0, y0, x1, y1))
      for (int y = std::max(0, int(std::floor(y0))); y < std::min(H, int(std::ceil(y1))); ++y)
        for (int x = std::max(0, int(std::floor(x0))); x < std::min(W, int(std::ceil(x1))); ++x) {
          if (x + 0.5 < x0 || x + 0.5 > x1 || y + 0.5 < y0 || y + 0.5 > y1) continue;
          for (int c = 0; c < 3; ++c) plane.at(y, x, c) = occluder;
        }
    return plane;
  };
  switch (modality_) {
    case Modality::Depth: return draw_plane(depth_bg_, 0.55f, 0.85f, 0.95f);
    case Modality::Thermal: return draw_plane(thermal_bg_, 0.4f, 0.92f, 0.25f);
    case Modality::Event: {
      std::vector<float> prev, cur;
      render_rgb(t - 1, &prev);
      cur.resize(std::size_t(W) * H);
      for (std::size_t i = 0; i < cur.size(); ++i)
        cur[i] = std::abs((rgb.data[i * 3] + rgb.data[i * 3 + 1] + rgb.data[i * 3 + 2]) / 3.0f - prev[i]);
      return replicate(cur, H, W);
    }
    default: return Image();
  }
}

Frame Scene::render(int t) const {
  Frame f;
  f.rgb = render_rgb(t, nullptr);
  if (has_aux(modality_)) f.aux = render_aux(t, f.rgb);
  return f;
}

SynthSequence generate(std::uint64_t seed, Modality modality, int length, Difficulty difficulty, WorldConfig world) {
  if (length < 2) throw std::invalid_argument("generate: length must be >= 2");
  Scene scene(seed, modality, difficulty, world);
  SynthSequence seq;
  seq.modality = modality;
  seq.difficulty = difficulty;
  seq.seed = seed;
  seq.text = modality == Modality::Language ? scene.text() : "";
  for (int t = 0; t < length; ++t) {
    seq.frames.push_back(scene.render(t));
    seq.boxes.push_back(scene.box(t));
    seq.occluded.push_back(scene.occluded(t));
  }
  return seq;
}

BBox CropWindow::to_crop(const BBox& b) const {
  const double s = scale();
  return {(b.cx - x0) * s, (b.cy - y0) * s, b.w * s, b.h * s};
}

BBox CropWindow::to_frame(const BBox& b) const {
  const double s = 1.0 / scale();
  return {b.cx * s + x0, b.cy * s + y0, b.w * s, b.h * s};
}

Crop crop(const Image& frame, const BBox& center, const BBox& target, double factor, int out_res) {
  if (!center.valid()) throw std::invalid_argument("crop: degenerate box (w or h <= 0)");
  if (factor <= 1) throw std::invalid_argument("crop: factor must exceed 1");
  const int C = frame.channels;
  std::vector<double> mean(C, 0.0);
  for (std::size_t i = 0; i < frame.data.size(); i += C)
    for (int c = 0; c < C; ++c) mean[c] += frame.data[i + c];
  for (auto& m : mean) m /= static_cast<double>(std::size_t(frame.width) * frame.height);

  Crop out;
  out.window.side = factor * std::sqrt(center.w * center.h);
  out.window.x0 = center.cx - out.window.side / 2;
  out.window.y0 = center.cy - out.window.side / 2;
  out.window.out_res = out_res;
  out.image = Image(out_res, out_res, C);
  const double step = out.window.side / out_res;
  std::vector<float> meanf(mean.begin(), mean.end());
  const float* src = frame.data.data();
  for (int i = 0; i < out_res; ++i) {
    const double fy = out.window.y0 + (i + 0.5) * step - 0.5;
    const int iy = static_cast<int>(std::floor(fy));
    const float ay = static_cast<float>(fy - iy);
    const bool row0 = iy >= 0 && iy < frame.height, row1 = iy + 1 >= 0 && iy + 1 < frame.height;
    for (int j = 0; j < out_res; ++j) {
      const double fx = out.window.x0 + (j + 0.5) * step - 0.5;
      const int ix = static_cast<int>(std::floor(fx));
      const float ax = static_cast<float>(fx - ix);
      const bool col0 = ix >= 0 && ix < frame.width, col1 = ix + 1 >= 0 && ix + 1 < frame.width;
      float* dst = &out.image.at(i, j, 0);
      const bool in00 = row0 && col0, in01 = row0 && col1, in10 = row1 && col0, in11 = row1 && col1;
      if (!in00 && !in01 && !in10 && !in11) {
        for (int c = 0; c < C; ++c) dst[c] = meanf[c];
        continue;
      }
      const float* p00 = in00 ? src + (std::size_t(iy) * frame.width + ix) * C : meanf.data();
      const float* p01 = in01 ? src + (std::size_t(iy) * frame.width + ix + 1) * C : meanf.data();
      const float* p10 = in10 ? src + (std::size_t(iy + 1) * frame.width + ix) * C : meanf.data();
      const float* p11 = in11 ? src + (std::size_t(iy + 1) * frame.width + ix + 1) * C : meanf.data();
      for (int c = 0; c < C; ++c)
        dst[c] = (1 - ay) * ((1 - ax) * p00[c] + ax * p01[c]) + ay * ((1 - ax) * p10[c] + ax * p11[c]);
    }
  }
  out.box = out.window.to_crop(target);
  return out;
}

Crop crop(const Image& frame, const BBox& center, double factor, int out_res) {
  return crop(frame, center, center, factor, out_res);
}

void flip_horizontal(tokens::CompositeImage& img) {
  Image& p = img.pixels;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width / 2; ++x)
      for (int c = 0; c < p.channels; ++c) std::swap(p.at(y, x, c), p.at(y, p.width - 1 - x, c));
}

namespace {

SamplePair pair_from_frames(const Frame& zf, const BBox& zb, const Frame& xf, const BBox& xb, Modality modality,
                            const std::string& text, const TrackerConfig& cfg, const PairOptions& opt, Rng& rng) {
  const tokens::CompositeImage zc = tokens::make_composite(zf.rgb, zf.aux, modality);
  const tokens::CompositeImage xc = tokens::make_composite(xf.rgb, xf.aux, modality);
  SamplePair p;
  p.modality = modality;
  p.text = text;
  Crop zt = crop(zc.pixels, zb, cfg.crop_factor_template, cfg.template_res);
  BBox center = xb;
  if (opt.augment) {
    const double sz = std::sqrt(xb.w * xb.h);
    const double sj = std::exp(std::normal_distribution<double>(0.0, 1.0)(rng) * opt.scale_jitter);
    center.cx += (uniform(rng, 0, 1) - 0.5) * opt.center_jitter * sz;
    center.cy += (uniform(rng, 0, 1) - 0.5) * opt.center_jitter * sz;
    center.w *= sj;
    center.h *= sj;
  }
  Crop xs = crop(xc.pixels, center, xb, cfg.crop_factor_search, cfg.search_res);
  p.template_crop = {std::move(zt.image), modality};
  p.search_crop = {std::move(xs.image), modality};
  p.gt_box_in_search = xs.box;
  if (opt.augment) {
    if (uniform(rng, 0, 1) < opt.flip_prob) {
      flip_horizontal(p.template_crop);
      flip_horizontal(p.search_crop);
      p.gt_box_in_search.cx = cfg.search_res - p.gt_box_in_search.cx;
    }
    const float b = static_cast<float>(uniform(rng, opt.brightness_lo, opt.brightness_hi));
    const int channels = has_aux(modality) ? 3 : 6;
    for (auto* img : {&p.template_crop.pixels, &p.search_crop.pixels})
      for (std::size_t i = 0; i < img->data.size(); ++i)
        if (static_cast<int>(i % 6) < channels) img->data[i] = std::clamp(img->data[i] * b, 0.0f, 1.0f);
  }
  return p;
}

}  // namespace

SamplePair make_pair(const SynthSequence& seq, int t_idx, int s_idx, const TrackerConfig& cfg, const PairOptions& opt,
                     Rng& rng) {
  const int n = static_cast<int>(seq.frames.size());
  if (t_idx < 0 || t_idx >= n || s_idx < 0 || s_idx >= n)
    throw std::out_of_range("make_pair: frame index out of range for sequence of " + std::to_string(n));
  return pair_from_frames(seq.frames[t_idx], seq.boxes[t_idx], seq.frames[s_idx], seq.boxes[s_idx], seq.modality,
                          seq.text, cfg, opt, rng);
}

SamplePair make_pair(const Scene& scene, int t_idx, int s_idx, const TrackerConfig& cfg, const PairOptions& opt, Rng& rng) {
  if (t_idx < 0 || s_idx < 0) throw std::out_of_range("make_pair: negative frame index");
  const std::string text = scene.modality() == Modality::Language ? scene.text() : "";
  return pair_from_frames(scene.render(t_idx), scene.box(t_idx), scene.render(s_idx), scene.box(s_idx), scene.modality(),
                          text, cfg, opt, rng);
}

void export_sequence(const SynthSequence& seq, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream boxes(dir + "/boxes.txt");
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i;
    write_ppm(dir + "/frame_" + name.str() + ".ppm", seq.frames[i].rgb);
    if (seq.frames[i].aux) write_pgm(dir + "/aux_" + name.str() + ".pgm", *seq.frames[i].aux);
    const BBox& b = seq.boxes[i];
    boxes << i << " " << b.cx << " " << b.cy << " " << b.w << " " << b.h << "\n";
  }
  std::ofstream meta(dir + "/meta.txt");
  meta << "modality " << modality_name(seq.modality) << "\ndifficulty " << difficulty_name(seq.difficulty) << "\nseed "
       << seq.seed << "\ntext " << seq.text << "\n";
}

}  // namespace uetrack::synth
