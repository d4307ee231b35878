#include "uetrack/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace uetrack {

namespace {

unsigned char to_byte(float v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)); }

void write_pnm(const std::string& path, const Image& img, int channels, const char* magic) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << magic << "\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> bytes(std::size_t(img.width) * img.height * channels);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < channels; ++c)
        bytes[(std::size_t(y) * img.width + x) * channels + c] = to_byte(img.at(y, x, std::min(c, img.channels - 1)));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image read_pnm(const std::string& path, const std::string& magic, int channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::string m;
  in >> m;
  if (m != magic) throw std::runtime_error(path + ": expected " + magic + " header");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string line;
      std::getline(in, line);
      in >> std::ws;
    }
    int v = 0;
    in >> v;
    return v;
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw std::runtime_error(path + ": unsupported image header");
  in.get();
  std::vector<unsigned char> bytes(std::size_t(w) * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!in) throw std::runtime_error(path + ": truncated pixel data");
  Image img(h, w, channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0f;
  return img;
}

}  // namespace

void write_ppm(const std::string& path, const Image& rgb) { write_pnm(path, rgb, 3, "P6"); }
Image read_ppm(const std::string& path) { return read_pnm(path, "P6", 3); }
void write_pgm(const std::string& path, const Image& gray) { write_pnm(path, gray, 1, "P5"); }

Image read_pgm_as_rgb(const std::string& path) {
  Image g = read_pnm(path, "P5", 1);
  Image out(g.height, g.width, 3);
  for (std::size_t i = 0; i < g.data.size(); ++i)
    for (int c = 0; c < 3; ++c) out.data[i * 3 + c] = g.data[i];
  return out;
}

}  // namespace uetrack
