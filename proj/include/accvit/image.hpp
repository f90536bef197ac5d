#pragma once

// Binary PPM (P6, maxval 255) input and the image -> tensor preprocessing:
// nearest-neighbour resize, scale to [0, 1], per-channel standardization.

#include <array>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "accvit/error.hpp"
#include "accvit/tensor.hpp"

namespace accvit {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved
};

inline constexpr std::array<float, 3> kImageMean{0.485f, 0.456f, 0.406f};
inline constexpr std::array<float, 3> kImageStd{0.229f, 0.224f, 0.225f};

inline Image decode_ppm(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kBadImage, m); };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) bad("malformed PPM header");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1u << 24)) bad("PPM dimension too large");
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') bad("not a binary PPM (P6)");
  pos = 2;
  Image img;
  img.width = number();
  img.height = number();
  const std::size_t maxval = number();
  if (img.width == 0 || img.height == 0) bad("PPM has zero size");
  if (maxval != 255) bad("only 8-bit PPM (maxval 255) is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) bad("malformed PPM header");
  ++pos;
  const std::size_t n = img.width * img.height * 3;
  if (bytes.size() - pos < n) {
    bad("truncated PPM: expected " + std::to_string(n) + " pixel bytes, found " +
        std::to_string(bytes.size() - pos));
  }
  img.rgb.assign(bytes.begin() + pos, bytes.begin() + pos + n);
  return img;
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kBadImage, "cannot open image " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_ppm(bytes);
}

inline void write_ppm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot open " + path + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
}

/// [1, 3, size, size] standardized tensor.
inline Tensor<float> image_to_tensor(const Image& img, std::size_t size) {
  std::vector<float> v(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < size; ++y) {
      const std::size_t sy = y * img.height / size;
      for (std::size_t x = 0; x < size; ++x) {
        const std::size_t sx = x * img.width / size;
        const float p = img.rgb[(sy * img.width + sx) * 3 + c] / 255.0f;
        v[(c * size + y) * size + x] = (p - kImageMean[c]) / kImageStd[c];
      }
    }
  return Tensor<float>::from({1, 3, size, size}, std::move(v));
}

}  // namespace accvit
