#include <gtest/gtest.h>

#include <random>

#include "pf3d/image_io.hpp"

using namespace pf3d;

TEST(ImageIo, RoundTripIsExactOnQuantizedValues) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> u(0, 255);
  for (std::size_t c : {1u, 3u}) {
    Tensor t(Shape{c, 5, 7});
    for (double& v : t.data()) v = u(rng) / 255.0;
    const Tensor back = from_image8(decode_png(encode_png(to_image8(t))));
    ASSERT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(back[i], t[i]);
  }
}

TEST(ImageIo, EncodingIsDeterministic) {
  Tensor t(Shape{3, 16, 16});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = (i % 17) / 16.0;
  EXPECT_EQ(encode_png(to_image8(t)), encode_png(to_image8(t)));
}

TEST(ImageIo, QuantizeClampsAndRounds) {
  EXPECT_EQ(quantize(-0.2), 0);
  EXPECT_EQ(quantize(1.7), 255);
  EXPECT_EQ(quantize(0.5), 128);
  EXPECT_THROW(quantize(std::nan("")), NonFiniteError);
}

TEST(ImageIo, RejectsGarbage) {
  EXPECT_THROW(decode_png({1, 2, 3}), std::runtime_error);
  std::vector<std::uint8_t> truncated = encode_png(to_image8(Tensor(Shape{4, 4}, 0.3)));
  truncated.resize(truncated.size() / 2);
  EXPECT_THROW(decode_png(truncated), std::runtime_error);
  EXPECT_THROW(to_image8(Tensor(Shape{2, 4, 4})), ShapeError);
}

TEST(ImageIo, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "pf3d_image_io_test.png";
  Tensor t(Shape{4, 3}, 0.0);
  t[5] = 1.0;
  write_png(path, t);
  const Tensor back = read_png(path);
  EXPECT_EQ(back.shape(), (Shape{1, 4, 3}));
  EXPECT_EQ(back[5], 1.0);
  std::filesystem::remove(path);
}
