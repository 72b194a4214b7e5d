#pragma once

#include <filesystem>
#include <vector>

namespace cmret {

// Interleaved RGB raster with values in [0, 1].
struct Image {
  int height{0};
  int width{0};
  std::vector<double> pix;  // height * width * 3

  Image() = default;
  Image(int h, int w) : height(h), width(w), pix(static_cast<size_t>(h) * w * 3, 0.0) {}

  double& at(int y, int x, int c) { return pix[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return pix[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

// Binary PPM (P6), 8-bit per channel.
void write_ppm(const Image& image, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

void fill_rect(Image& image, int y0, int x0, int h, int w, double r, double g, double b);

// Outlines a patch cell with a marker color, used by the overlay exporter.
void outline_patch(Image& image, int grid_y, int grid_x, int patch, double r, double g, double b);

}  // namespace cmret
