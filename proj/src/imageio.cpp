#include "adapterlab/imageio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "adapterlab/errors.hpp"

namespace adapterlab {

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

unsigned char to_byte(double v) {
  const double s = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<unsigned char>(s);
}

}  // namespace

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory '" + dir + "': " + ec.message());
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("write_ppm expects [3 x H x W], got " + shape_string(image.shape()));
  }
  const std::size_t h = image.dim(1), w = image.dim(2), hw = h * w;
  auto out = open_out(path);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> buf(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) buf[3 * i + c] = to_byte(image[c * hw + i]);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w == 0 || h == 0) {
    throw DataError("'" + path + "' is not an 8-bit binary PPM");
  }
  in.get();
  const std::size_t hw = h * w;
  std::vector<unsigned char> buf(3 * hw);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("'" + path + "' is truncated");
  std::vector<double> v(3 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    for (std::size_t c = 0; c < 3; ++c) v[c * hw + i] = buf[3 * i + c] / 127.5 - 1.0;
  }
  return Tensor({3, h, w}, std::move(v));
}

MapRange write_pgm(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("write_pgm expects [H x W], got " + shape_string(map.shape()));
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  MapRange range{*lo, *hi};
  const double span = range.max - range.min;
  auto out = open_out(path);
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  std::vector<unsigned char> buf(map.numel());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = span > 0.0 ? static_cast<unsigned char>(std::round(255.0 * (map[i] - range.min) / span))
                        : 0;
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  nlohmann::json side = {{"min", range.min}, {"max", range.max}, {"height", map.dim(0)},
                         {"width", map.dim(1)}};
  open_out(path + ".json") << side.dump(2) << '\n';
  return range;
}

}  // namespace adapterlab
