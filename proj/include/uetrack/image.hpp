#pragma once

#include <string>
#include <vector>

namespace uetrack {

/// Interleaved HxWxC float image, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, int c, float fill = 0.0f) : height(h), width(w), channels(c), data(std::size_t(h) * w * c, fill) {}

  bool empty() const { return data.empty(); }
  float& at(int y, int x, int c) { return data[(std::size_t(y) * width + x) * channels + c]; }
  float at(int y, int x, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
};

/// Binary P6 (RGB) and P5 (gray) codecs, 8 bits per sample.
void write_ppm(const std::string& path, const Image& rgb);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, const Image& gray);
/// Loads a P5 map and replicates it to 3 channels.
Image read_pgm_as_rgb(const std::string& path);

}  // namespace uetrack
