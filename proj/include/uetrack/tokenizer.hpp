#pragma once

#include <optional>
#include <string>
#include <vector>

#include "uetrack/config.hpp"
#include "uetrack/image.hpp"
#include "uetrack/nn.hpp"

namespace uetrack::tokens {

inline constexpr int kStubDim = 64;

struct CompositeImage {
  Image pixels;  // H x W x 6
  Modality modality = Modality::RGB;
};

/// Channels [rgb | aux], or [rgb | rgb] when aux is absent.
CompositeImage make_composite(const Image& rgb, const std::optional<Image>& aux, Modality modality = Modality::RGB);

/// Stacks composites into an NHWC [B, H, W, 6] tensor.
Tensor batch_images(const std::vector<const CompositeImage*>& images, Dtype dtype = default_dtype());

/// Stride-4 conv, residual 2-layer MLP, then two stride-2 merging convs.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& ps, const std::string& name, int dim, Rng& rng);
  /// [B, H, W, 6] -> [B, H/16, W/16, D]
  Tensor operator()(const Tensor& images) const;

 private:
  Conv2d stem_, merge1_, merge2_;
  LayerNorm mlp_norm_, out_norm_;
  Linear mlp1_, mlp2_;
};

/// Deterministic stand-in for a frozen text encoder: each whitespace token
/// seeds a Gaussian vector; the sum is unit-normalized. "" maps to zeros.
std::vector<double> stub_text_embedding(const std::string& text);

class LanguageEmbed {
 public:
  LanguageEmbed() = default;
  LanguageEmbed(ParamStore& ps, const std::string& name, int dim, Rng& rng);
  /// One token per text: [B, 1, D].
  Tensor operator()(const std::vector<std::string>& texts, Dtype dtype = default_dtype()) const;

 private:
  Linear proj_;
};

struct TokenSequence {
  Tensor tokens;  // [B, L, D]
  int len_template = 0;
  int len_search = 0;
  int len_language = 1;

  int length() const { return len_template + len_search + len_language; }
};

struct PositionTables {
  Tensor templ, search, language;  // [Nz, D], [Nx, D], [1, D]
};

PositionTables make_position_tables(ParamStore& ps, const std::string& name, int template_tokens, int search_tokens,
                                    int dim, Rng& rng);

/// [template | search | language] with per-group positional tables added.
/// Token inputs are [B, N, D] (or [B, h, w, D] grids, flattened row-major).
TokenSequence assemble(const Tensor& template_tokens, const Tensor& search_tokens, const Tensor& language_token,
                       const PositionTables& pos);

}  // namespace uetrack::tokens
