#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace uetrack {

enum class Modality { RGB = 0, Depth = 1, Thermal = 2, Event = 3, Language = 4 };
inline constexpr int kNumModalities = 5;
inline constexpr std::array<Modality, 5> kAllModalities = {Modality::RGB, Modality::Depth, Modality::Thermal,
                                                           Modality::Event, Modality::Language};

const char* modality_name(Modality m);
Modality parse_modality(const std::string& s);
/// RGB and Language carry no auxiliary image.
inline bool has_aux(Modality m) { return m != Modality::RGB && m != Modality::Language; }

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossWeights {
  double giou = 2.0;
  double l1 = 5.0;
  double kd = 5.0;
  double feat = 0.002;
  double kd_temperature = 1.0;
};

/// The [i,[j],k] descriptor plus resolutions and widths.
struct TrackerConfig {
  int layers = 2;
  std::vector<int> moe_layers = {2};
  int experts = 2;
  int dim = 64;
  int heads = 2;
  int mlp_ratio = 4;
  int l2 = 0;  // 0 selects 4 * experts
  bool scale_similarity = false;
  bool parallel_experts = false;
  int template_res = 64;
  int search_res = 128;
  double crop_factor_template = 2.0;
  double crop_factor_search = 4.0;
  bool hanning = true;
  LossWeights weights;

  int expert_tokens() const { return l2 > 0 ? l2 : 4 * experts; }
  int template_grid() const { return template_res / 16; }
  int search_grid() const { return search_res / 16; }
  int sequence_length() const {
    return template_grid() * template_grid() + search_grid() * search_grid() + 1;
  }
  bool is_moe_layer(int one_based) const;
  std::string descriptor() const;
  void validate() const;

  static TrackerConfig student();
  static TrackerConfig teacher();
};

}  // namespace uetrack
