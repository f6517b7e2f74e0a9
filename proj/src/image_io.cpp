#include "vertseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "vertseg/error.hpp"

namespace fs = std::filesystem;

namespace vertseg {

namespace {

constexpr uint8_t kPalette[][3] = {
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}};
constexpr int kPaletteSize = 6;
constexpr uint8_t kGrid[3] = {225, 225, 225};
constexpr uint8_t kAxis[3] = {60, 60, 60};

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

void draw_line(Raster& r, double x0, double y0, double x1, double y1, const uint8_t* color) {
  const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    for (int dy = 0; dy < 2; ++dy) {
      if (x >= 0 && x < r.width && y + dy >= 0 && y + dy < r.height) std::copy(color, color + 3, r.at(x, y + dy));
    }
  }
}

}  // namespace

void Raster::fill_rect(int x0, int y0, int x1, int y1, const uint8_t* color) {
  x0 = std::clamp(x0, 0, width), x1 = std::clamp(x1, 0, width);
  y0 = std::clamp(y0, 0, height), y1 = std::clamp(y1, 0, height);
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) std::copy(color, color + channels, at(x, y));
  }
}

void write_png(const Raster& raster, const fs::path& path) {
  if (raster.channels != 1 && raster.channels != 3) throw Error("write_png supports gray or RGB rasters");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(raster.width), static_cast<png_uint_32>(raster.height), 8,
               raster.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < raster.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(raster.at(0, y)));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Raster read_png(const fs::path& path) {
  std::unique_ptr<FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng initialisation failed");
  }
  Raster r;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("cannot decode PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  r.width = static_cast<int>(png_get_image_width(png, info));
  r.height = static_cast<int>(png_get_image_height(png, info));
  r.channels = png_get_channels(png, info);
  r.pixels.resize(static_cast<size_t>(r.width) * r.height * r.channels);
  for (int y = 0; y < r.height; ++y) png_read_row(png, r.at(0, y), nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

Raster render_bar_chart(const std::vector<std::string>& groups, const std::vector<BarSeries>& series) {
  const int bar_w = 18, gap = 24, margin = 30, plot_h = 300;
  const int n_series = static_cast<int>(series.size());
  const int group_w = std::max(1, n_series) * bar_w + gap;
  const int width = 2 * margin + static_cast<int>(groups.size()) * group_w;
  const int height = plot_h + 2 * margin;
  Raster r(width, height, 3, 255);
  const int base = margin + plot_h;
  for (int g = 0; g <= 10; ++g) {
    const int y = base - g * plot_h / 10;
    r.fill_rect(margin, y, width - margin, y + 1, kGrid);
  }
  for (size_t gi = 0; gi < groups.size(); ++gi) {
    for (int s = 0; s < n_series; ++s) {
      const double v = gi < series[s].values.size() ? std::clamp(series[s].values[gi], 0.0, 1.0) : 0.0;
      const int x0 = margin + gap / 2 + static_cast<int>(gi) * group_w + s * bar_w;
      const int top = base - static_cast<int>(std::lround(v * plot_h));
      r.fill_rect(x0 + 1, top, x0 + bar_w - 1, base, kPalette[s % kPaletteSize]);
    }
  }
  r.fill_rect(margin, base, width - margin, base + 2, kAxis);
  r.fill_rect(margin - 2, margin, margin, base + 2, kAxis);
  return r;
}

Raster render_line_chart(const std::vector<std::vector<double>>& series, double y_min, double y_max) {
  const int margin = 30, plot_w = 480, plot_h = 300;
  Raster r(plot_w + 2 * margin, plot_h + 2 * margin, 3, 255);
  const double span = y_max > y_min ? y_max - y_min : 1.0;
  for (int g = 0; g <= 10; ++g) {
    const int y = margin + plot_h - g * plot_h / 10;
    r.fill_rect(margin, y, margin + plot_w, y + 1, kGrid);
  }
  for (size_t s = 0; s < series.size(); ++s) {
    const auto& v = series[s];
    if (v.empty()) continue;
    auto px = [&](size_t i) {
      return margin + (v.size() == 1 ? 0.0 : static_cast<double>(i) * plot_w / static_cast<double>(v.size() - 1));
    };
    auto py = [&](size_t i) { return margin + plot_h - (std::clamp(v[i], y_min, y_max) - y_min) / span * plot_h; };
    for (size_t i = 1; i < v.size(); ++i) draw_line(r, px(i - 1), py(i - 1), px(i), py(i), kPalette[s % kPaletteSize]);
    if (v.size() == 1) draw_line(r, px(0), py(0), px(0) + 1, py(0), kPalette[s % kPaletteSize]);
  }
  r.fill_rect(margin, margin + plot_h, margin + plot_w, margin + plot_h + 2, kAxis);
  r.fill_rect(margin - 2, margin, margin, margin + plot_h + 2, kAxis);
  return r;
}

}  // namespace vertseg
