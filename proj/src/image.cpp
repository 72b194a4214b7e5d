#include "cmret/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "cmret/error.hpp"

namespace cmret {

namespace {

unsigned char to_byte(double v) {
  const double clamped = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

}  // namespace

void write_ppm(const Image& image, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorKind::Io, "cannot write image " + path.string());
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(image.pix.size());
  for (double v : image.pix) bytes.push_back(to_byte(v));
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) fail(ErrorKind::Io, "short write for image " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorKind::Io, "cannot open image " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  f >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w <= 0 || h <= 0) {
    fail(ErrorKind::Data, "unsupported raster header in " + path.string());
  }
  f.get();  // single whitespace after header
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<size_t>(f.gcount()) != bytes.size()) {
    fail(ErrorKind::Io, "truncated image file " + path.string());
  }
  Image img(h, w);
  for (size_t i = 0; i < bytes.size(); ++i) img.pix[i] = bytes[i] / 255.0;
  return img;
}

void fill_rect(Image& image, int y0, int x0, int h, int w, double r, double g, double b) {
  const int y1 = std::min(image.height, y0 + h);
  const int x1 = std::min(image.width, x0 + w);
  for (int y = std::max(0, y0); y < y1; ++y) {
    for (int x = std::max(0, x0); x < x1; ++x) {
      image.at(y, x, 0) = r;
      image.at(y, x, 1) = g;
      image.at(y, x, 2) = b;
    }
  }
}

void outline_patch(Image& image, int grid_y, int grid_x, int patch, double r, double g, double b) {
  const int y0 = grid_y * patch, x0 = grid_x * patch;
  for (int x = x0; x < x0 + patch && x < image.width; ++x) {
    image.at(y0, x, 0) = r; image.at(y0, x, 1) = g; image.at(y0, x, 2) = b;
    const int yb = std::min(image.height - 1, y0 + patch - 1);
    image.at(yb, x, 0) = r; image.at(yb, x, 1) = g; image.at(yb, x, 2) = b;
  }
  for (int y = y0; y < y0 + patch && y < image.height; ++y) {
    image.at(y, x0, 0) = r; image.at(y, x0, 1) = g; image.at(y, x0, 2) = b;
    const int xb = std::min(image.width - 1, x0 + patch - 1);
    image.at(y, xb, 0) = r; image.at(y, xb, 1) = g; image.at(y, xb, 2) = b;
  }
}

}  // namespace cmret
