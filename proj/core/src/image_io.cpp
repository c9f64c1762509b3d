#include "xnet/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "xnet/errors.hpp"

namespace xnet {

void write_raster(const std::filesystem::path& path, const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw ValidationError("raster must have 1 or 3 channels");
  if (r.maxval != 255 && r.maxval != 65535) throw ValidationError("raster maxval must be 255 or 65535");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << '\n' << r.maxval << '\n';
  std::vector<char> buf;
  buf.reserve(r.samples.size() * (r.maxval > 255 ? 2 : 1));
  for (auto v : r.samples) {
    if (r.maxval > 255) buf.push_back(static_cast<char>(v >> 8));
    buf.push_back(static_cast<char>(v & 0xFF));
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

Raster read_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::string magic;
  Raster r;
  is >> magic >> r.width >> r.height >> r.maxval;
  if (!is || (magic != "P5" && magic != "P6")) throw FormatError("'" + path.string() + "' is not a binary PGM/PPM");
  is.get();  // single whitespace after maxval
  r.channels = magic == "P6" ? 3 : 1;
  const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
  const int bytes = r.maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(count * bytes);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw FormatError("'" + path.string() + "' is truncated");
  r.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    r.samples[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  }
  return r;
}

Raster image_to_ppm(const Tensor& image) {
  const Shape& s = image.shape();
  if (s.rank() != 3 || s[0] != 3) throw ShapeError("image_to_ppm: expected (3,H,W), got " + s.str());
  Raster r;
  r.channels = 3;
  r.height = static_cast<int>(s[1]);
  r.width = static_cast<int>(s[2]);
  const std::int64_t plane = s[1] * s[2];
  r.samples.resize(static_cast<std::size_t>(plane * 3));
  auto d = image.data();
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      const float v = std::clamp(d[c * plane + p], 0.0f, 1.0f);
      r.samples[static_cast<std::size_t>(p * 3 + c)] = static_cast<std::uint16_t>(std::lround(v * 255.0f));
    }
  }
  return r;
}

Tensor ppm_to_image(const Raster& r) {
  if (r.channels != 3) throw ShapeError("ppm_to_image: raster is not RGB");
  const std::int64_t plane = static_cast<std::int64_t>(r.width) * r.height;
  auto t = Tensor::zeros(Shape{3, r.height, r.width});
  auto d = t.data();
  for (std::int64_t p = 0; p < plane; ++p) {
    for (int c = 0; c < 3; ++c) {
      d[c * plane + p] = static_cast<float>(r.samples[static_cast<std::size_t>(p * 3 + c)]) / static_cast<float>(r.maxval);
    }
  }
  return t;
}

Raster depth_to_pgm(const Tensor& depth, float max_depth) {
  const Shape& s = depth.shape();
  if (s.rank() != 3 || s[0] != 1) throw ShapeError("depth_to_pgm: expected (1,H,W), got " + s.str());
  Raster r;
  r.maxval = 65535;
  r.height = static_cast<int>(s[1]);
  r.width = static_cast<int>(s[2]);
  r.samples.reserve(static_cast<std::size_t>(depth.numel()));
  for (float v : depth.data()) {
    const double q = std::clamp(static_cast<double>(v) / max_depth, 0.0, 1.0);
    r.samples.push_back(static_cast<std::uint16_t>(std::lround(q * 65535.0)));
  }
  return r;
}

Raster labels_to_pgm(std::span<const std::int32_t> labels, int height, int width) {
  if (static_cast<std::int64_t>(labels.size()) != static_cast<std::int64_t>(height) * width) {
    throw ShapeError("labels_to_pgm: label count does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  Raster r;
  r.height = height;
  r.width = width;
  r.samples.reserve(labels.size());
  for (auto v : labels) {
    if (v < 0 || v > 255) throw ValidationError("labels_to_pgm: label " + std::to_string(v) + " not in [0,255]");
    r.samples.push_back(static_cast<std::uint16_t>(v));
  }
  return r;
}

}  // namespace xnet
