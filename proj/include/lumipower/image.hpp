#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace lumipower {

template <class Pixel>
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Pixel> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, Pixel fill = 0) : height(h), width(w), pixels(h * w, fill) {}

  Pixel& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  Pixel at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

using GrayImage16 = GrayImage<std::uint16_t>;
using GrayImage8 = GrayImage<std::uint8_t>;

void write_png(const std::filesystem::path& path, const GrayImage16& image);
void write_png(const std::filesystem::path& path, const GrayImage8& image);

// Grayscale PNG (8 or 16 bit) or binary/ASCII PGM. 8-bit data is returned
// unscaled in the 16-bit container.
GrayImage16 read_image(const std::filesystem::path& path);

}  // namespace lumipower
