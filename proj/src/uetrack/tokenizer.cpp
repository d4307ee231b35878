#include "uetrack/tokenizer.hpp"

#include <cmath>
#include <sstream>

namespace uetrack::tokens {

CompositeImage make_composite(const Image& rgb, const std::optional<Image>& aux, Modality modality) {
  if (rgb.channels != 3) throw ShapeError("make_composite: rgb must have 3 channels");
  const Image& second = aux ? *aux : rgb;
  if (second.channels != 3 || second.height != rgb.height || second.width != rgb.width)
    throw ShapeError("make_composite: rgb is " + std::to_string(rgb.height) + "x" + std::to_string(rgb.width) +
                     " but aux is " + std::to_string(second.height) + "x" + std::to_string(second.width));
  CompositeImage out{Image(rgb.height, rgb.width, 6), modality};
  const std::size_t n = std::size_t(rgb.height) * rgb.width;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) {
      out.pixels.data[i * 6 + c] = rgb.data[i * 3 + c];
      out.pixels.data[i * 6 + 3 + c] = second.data[i * 3 + c];
    }
  return out;
}

Tensor batch_images(const std::vector<const CompositeImage*>& images, Dtype dtype) {
  if (images.empty()) throw ShapeError("batch_images: empty batch");
  const int h = images[0]->pixels.height, w = images[0]->pixels.width;
  const std::size_t per = std::size_t(h) * w * 6;
  Buffer buf(dtype, per * images.size());
  dispatch(dtype, [&]<class T>() {
    auto dst = buf.span<T>();
    for (std::size_t b = 0; b < images.size(); ++b) {
      const Image& img = images[b]->pixels;
      if (img.height != h || img.width != w || img.channels != 6) throw ShapeError("batch_images: inconsistent image sizes");
      for (std::size_t i = 0; i < per; ++i) dst[b * per + i] = static_cast<T>(img.data[i]);
    }
  });
  return Tensor::from_buffer({static_cast<std::int64_t>(images.size()), h, w, 6}, std::move(buf));
}

PatchEmbed::PatchEmbed(ParamStore& ps, const std::string& name, int dim, Rng& rng) {
  const int c1 = dim / 4, c2 = dim / 2;
  stem_ = Conv2d(ps, name + ".stem", 6, c1, 4, 4, 0, rng);
  mlp_norm_ = LayerNorm(ps, name + ".mlp_norm", c1);
  mlp1_ = Linear(ps, name + ".mlp1", c1, 2 * c1, rng);
  mlp2_ = Linear(ps, name + ".mlp2", 2 * c1, c1, rng);
  merge1_ = Conv2d(ps, name + ".merge1", c1, c2, 2, 2, 0, rng);
  merge2_ = Conv2d(ps, name + ".merge2", c2, dim, 2, 2, 0, rng);
  out_norm_ = LayerNorm(ps, name + ".out_norm", dim);
}

Tensor PatchEmbed::operator()(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(3) != 6) throw ShapeError("patch_embed: expected [B, H, W, 6], got " + shape_str(images.shape()));
  if (images.dim(1) % 16 != 0 || images.dim(2) % 16 != 0)
    throw ShapeError("patch_embed: " + std::to_string(images.dim(1)) + "x" + std::to_string(images.dim(2)) +
                     " is not divisible by 16");
  Tensor x = stem_(images);
  x = add(x, mlp2_(gelu(mlp1_(mlp_norm_(x)))));
  x = gelu(merge1_(x));
  return out_norm_(merge2_(x));
}

std::vector<double> stub_text_embedding(const std::string& text) {
  std::vector<double> v(kStubDim, 0.0);
  std::istringstream words(text);
  std::string word;
  while (words >> word) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : word) {
      h ^= static_cast<std::uint64_t>(std::tolower(ch));
      h *= 1099511628211ull;
    }
    Rng rng(h);
    std::normal_distribution<double> dist;
    for (auto& x : v) x += dist(rng);
  }
  double norm = 0;
  for (double x : v) norm += x * x;
  if (norm > 0)
    for (auto& x : v) x /= std::sqrt(norm);
  return v;
}

LanguageEmbed::LanguageEmbed(ParamStore& ps, const std::string& name, int dim, Rng& rng) {
  proj_ = Linear(ps, name, kStubDim, dim, rng);
}

Tensor LanguageEmbed::operator()(const std::vector<std::string>& texts, Dtype dtype) const {
  std::vector<double> flat;
  flat.reserve(texts.size() * kStubDim);
  for (const auto& t : texts) {
    auto e = stub_text_embedding(t);
    flat.insert(flat.end(), e.begin(), e.end());
  }
  Tensor stub = Tensor::from_values({static_cast<std::int64_t>(texts.size()), kStubDim}, flat, dtype);
  Tensor y = proj_(stub);
  return reshape(y, {static_cast<std::int64_t>(texts.size()), 1, y.dim(1)});
}

PositionTables make_position_tables(ParamStore& ps, const std::string& name, int template_tokens, int search_tokens,
                                    int dim, Rng& rng) {
  return {ps.normal(name + ".template", {template_tokens, dim}, 0.02, rng),
          ps.normal(name + ".search", {search_tokens, dim}, 0.02, rng),
          ps.normal(name + ".language", {1, dim}, 0.02, rng)};
}

namespace {

Tensor as_sequence(const Tensor& t, const char* what) {
  if (t.rank() == 4) return reshape(t, {t.dim(0), t.dim(1) * t.dim(2), t.dim(3)});
  if (t.rank() != 3) throw ShapeError(std::string("assemble: ") + what + " tokens must be [B, N, D], got " + shape_str(t.shape()));
  return t;
}

Tensor add_positions(const Tensor& x, const Tensor& table, const char* what) {
  if (table.dim(0) != x.dim(1) || table.dim(1) != x.dim(2))
    throw ShapeError(std::string("assemble: ") + what + " tokens " + shape_str(x.shape()) + " do not match table " +
                     shape_str(table.shape()));
  return add(x, expand(table, x.shape()));
}

}  // namespace

TokenSequence assemble(const Tensor& template_tokens, const Tensor& search_tokens, const Tensor& language_token,
                       const PositionTables& pos) {
  Tensor z = as_sequence(template_tokens, "template");
  Tensor x = as_sequence(search_tokens, "search");
  Tensor l = as_sequence(language_token, "language");
  if (z.dim(2) != x.dim(2) || z.dim(2) != l.dim(2))
    throw ShapeError("assemble: token dims differ: " + shape_str(z.shape()) + ", " + shape_str(x.shape()) + ", " +
                     shape_str(l.shape()));
  if (z.dim(0) != x.dim(0) || z.dim(0) != l.dim(0) || l.dim(1) != 1)
    throw ShapeError("assemble: batch or language-token shape mismatch");
  TokenSequence seq;
  seq.tokens = concat({add_positions(z, pos.templ, "template"), add_positions(x, pos.search, "search"),
                       add_positions(l, pos.language, "language")},
                      1);
  seq.len_template = static_cast<int>(z.dim(1));
  seq.len_search = static_cast<int>(x.dim(1));
  seq.len_language = 1;
  return seq;
}

}  // namespace uetrack::tokens
