#include "uetrack/config.hpp"

#include <algorithm>

namespace uetrack {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::RGB: return "rgb";
    case Modality::Depth: return "depth";
    case Modality::Thermal: return "thermal";
    case Modality::Event: return "event";
    case Modality::Language: return "language";
  }
  return "?";
}

Modality parse_modality(const std::string& s) {
  for (Modality m : kAllModalities)
    if (s == modality_name(m)) return m;
  throw ConfigError("unknown modality: " + s);
}

bool TrackerConfig::is_moe_layer(int one_based) const {
  return std::find(moe_layers.begin(), moe_layers.end(), one_based) != moe_layers.end();
}

std::string TrackerConfig::descriptor() const {
  std::string s = "[" + std::to_string(layers) + ",[";
  for (std::size_t i = 0; i < moe_layers.size(); ++i) s += (i ? "," : "") + std::to_string(moe_layers[i]);
  return s + "]," + std::to_string(experts) + "]";
}

void TrackerConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  for (int j : moe_layers)
    if (j < 1 || j > layers) throw ConfigError("moe layer " + std::to_string(j) + " outside 1.." + std::to_string(layers));
  if (!moe_layers.empty() && experts < 1) throw ConfigError("moe layers need experts >= 1");
  if (!moe_layers.empty() && expert_tokens() % experts != 0)
    throw ConfigError("L2 = " + std::to_string(expert_tokens()) + " is not divisible by E = " + std::to_string(experts));
  if (dim < 4 || dim % 4 != 0) throw ConfigError("dim must be a positive multiple of 4");
  if (heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
  if (template_res < 16 || template_res % 16 != 0 || search_res < 16 || search_res % 16 != 0)
    throw ConfigError("resolutions must be positive multiples of 16");
  if (crop_factor_template <= 1 || crop_factor_search <= 1) throw ConfigError("crop factors must exceed 1");
  const int l1 = sequence_length();
  if (!moe_layers.empty() && l1 < experts)
    throw ConfigError("sequence length " + std::to_string(l1) + " shorter than expert count");
  if (weights.giou < 0 || weights.l1 < 0 || weights.kd < 0 || weights.feat < 0)
    throw ConfigError("loss weights must be nonnegative");
}

TrackerConfig TrackerConfig::student() { return TrackerConfig{}; }

TrackerConfig TrackerConfig::teacher() {
  TrackerConfig c;
  c.layers = 6;
  c.moe_layers = {6};
  c.experts = 8;
  c.dim = 128;
  c.heads = 4;
  return c;
}

}  // namespace uetrack
