#include <gtest/gtest.h>

#include <filesystem>

#include "accvit/image.hpp"

using namespace accvit;

namespace {

std::vector<std::uint8_t> ppm(const std::string& header, std::size_t pixels) {
  std::vector<std::uint8_t> b(header.begin(), header.end());
  for (std::size_t i = 0; i < pixels * 3; ++i) b.push_back(static_cast<std::uint8_t>(i % 256));
  return b;
}

ErrorCode decode_error(const std::vector<std::uint8_t>& b) {
  try {
    decode_ppm(b);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "decoded";
  return ErrorCode::kIo;
}

}  // namespace

TEST(Ppm, DecodeWithComment) {
  const auto img = decode_ppm(ppm("P6\n# comment\n3 2\n255\n", 6));
  EXPECT_EQ(img.width, 3u);
  EXPECT_EQ(img.height, 2u);
  ASSERT_EQ(img.rgb.size(), 18u);
  EXPECT_EQ(img.rgb[17], 17);
}

TEST(Ppm, Rejections) {
  EXPECT_EQ(decode_error(ppm("P6\n3 2\n255\n", 5)), ErrorCode::kBadImage);
  EXPECT_EQ(decode_error(ppm("P3\n3 2\n255\n", 6)), ErrorCode::kBadImage);
  EXPECT_EQ(decode_error(ppm("P6\n3 x\n255\n", 6)), ErrorCode::kBadImage);
  EXPECT_EQ(decode_error(ppm("P6\n3 2\n65535\n", 12)), ErrorCode::kBadImage);
  EXPECT_EQ(decode_error(ppm("P6\n0 2\n255\n", 0)), ErrorCode::kBadImage);
  EXPECT_EQ(decode_error({}), ErrorCode::kBadImage);
}

TEST(Ppm, WriteReadRoundTrip) {
  Image img{2, 2, {0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110}};
  const auto path = std::filesystem::temp_directory_path() / "accvit_test.ppm";
  write_ppm(img, path.string());
  const auto back = read_ppm(path.string());
  EXPECT_EQ(back.rgb, img.rgb);
  std::filesystem::remove(path);
}

TEST(Ppm, TensorStandardizationAndResize) {
  Image img{2, 2, {255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255}};
  const auto t = image_to_tensor(img, 4);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 4, 4}));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const std::size_t src = (y / 2) * 2 + x / 2;
        const float p = img.rgb[src * 3 + c] / 255.0f;
        EXPECT_FLOAT_EQ(t.at({0, c, y, x}), (p - kImageMean[c]) / kImageStd[c]);
      }
}
