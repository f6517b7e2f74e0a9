#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace vertseg {

/// 8-bit raster, row-major, `channels` interleaved (1 = gray, 3 = RGB).
struct Raster {
  int width = 0, height = 0, channels = 1;
  std::vector<uint8_t> pixels;

  Raster() = default;
  Raster(int w, int h, int c, uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<size_t>(w) * h * c, fill) {}
  uint8_t* at(int x, int y) { return pixels.data() + (static_cast<size_t>(y) * width + x) * channels; }
  const uint8_t* at(int x, int y) const { return pixels.data() + (static_cast<size_t>(y) * width + x) * channels; }
  void fill_rect(int x0, int y0, int x1, int y1, const uint8_t* color);
};

void write_png(const Raster& raster, const std::filesystem::path& path);
Raster read_png(const std::filesystem::path& path);

struct BarSeries {
  std::string name;
  std::vector<double> values;  // one per group, in [0, 1]
};

/// Grouped bar chart: one cluster per group, one bar per series, fixed
/// palette, light horizontal grid every 0.1.
Raster render_bar_chart(const std::vector<std::string>& groups, const std::vector<BarSeries>& series);

/// Line chart of several series sharing the x axis and the y range
/// [y_min, y_max] (values outside are clipped).
Raster render_line_chart(const std::vector<std::vector<double>>& series, double y_min, double y_max);

}  // namespace vertseg
