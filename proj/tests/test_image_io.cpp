#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"
#include "xnet/errors.hpp"
#include "xnet/image_io.hpp"

using namespace xnet;

TEST(Raster, PpmRoundTrip) {
  auto dir = xt::scratch_dir("ppm");
  auto img = xt::random_tensor(Shape{3, 5, 7}, 1, 0, 1);
  write_raster(dir / "a.ppm", image_to_ppm(img));
  auto back = ppm_to_image(read_raster(dir / "a.ppm"));
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_LE(xt::max_abs_diff(xt::values(back), xt::values(img)), 0.5 / 255 + 1e-6);
  const auto bytes = xt::read_bytes(dir / "a.ppm");
  const std::string header(bytes.begin(), bytes.begin() + 11);
  EXPECT_EQ(header, "P6\n7 5\n255\n");
  EXPECT_EQ(bytes.size(), 11u + 3 * 35);
}

TEST(Raster, DepthIsSixteenBitScaled) {
  auto dir = xt::scratch_dir("pgm16");
  auto depth = Tensor::from_data(Shape{1, 1, 3}, {10.0f, 5.0f, 1.0f});
  auto r = depth_to_pgm(depth, 10.0f);
  EXPECT_EQ(r.maxval, 65535);
  EXPECT_EQ(r.samples, (std::vector<std::uint16_t>{65535, 32768, 6554}));
  write_raster(dir / "d.pgm", r);
  auto bytes = xt::read_bytes(dir / "d.pgm");
  // big-endian 16-bit samples after "P5\n3 1\n65535\n"
  ASSERT_EQ(bytes.size(), 13u + 6);
  EXPECT_EQ(bytes[13], 0xFF);
  EXPECT_EQ(bytes[15], 0x80);
  EXPECT_EQ(bytes[16], 0x00);
  EXPECT_EQ(read_raster(dir / "d.pgm").samples, r.samples);
}

TEST(Raster, LabelsAreEightBit) {
  std::vector<std::int32_t> labels{0, 1, 2, 3, 0, 1};
  auto r = labels_to_pgm(labels, 2, 3);
  EXPECT_EQ(r.maxval, 255);
  EXPECT_EQ(r.channels, 1);
  EXPECT_THROW(labels_to_pgm(labels, 4, 3), ShapeError);
  std::vector<std::int32_t> bad{300};
  EXPECT_THROW(labels_to_pgm(bad, 1, 1), ValidationError);
}

TEST(Raster, Errors) {
  auto dir = xt::scratch_dir("raster_err");
  EXPECT_THROW(read_raster(dir / "missing.pgm"), IoError);
  {
    std::ofstream f(dir / "bad.pgm", std::ios::binary);
    f << "P2\n1 1\n255\n0";
  }
  EXPECT_THROW(read_raster(dir / "bad.pgm"), FormatError);
  {
    std::ofstream f(dir / "short.pgm", std::ios::binary);
    f << "P5\n4 4\n255\n\x01\x02";
  }
  EXPECT_THROW(read_raster(dir / "short.pgm"), FormatError);
  EXPECT_THROW(image_to_ppm(Tensor::zeros(Shape{1, 2, 2})), ShapeError);
}
