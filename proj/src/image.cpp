#include "lumipower/image.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>

#include "lumipower/error.hpp"

namespace lumipower {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp message) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = message;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

template <class Pixel>
void write_png_impl(const std::filesystem::path& path, const GrayImage<Pixel>& image) {
  constexpr int bit_depth = sizeof(Pixel) * 8;
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw DataError("cannot open '" + path.string() + "' for writing");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(image.height);
  std::vector<std::uint8_t> packed(image.pixels.size() * sizeof(Pixel));
  // PNG stores 16-bit samples big-endian.
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    if constexpr (bit_depth == 16) {
      packed[2 * i] = static_cast<std::uint8_t>(image.pixels[i] >> 8);
      packed[2 * i + 1] = static_cast<std::uint8_t>(image.pixels[i] & 0xff);
    } else {
      packed[i] = image.pixels[i];
    }
  }
  for (std::size_t r = 0; r < image.height; ++r) rows[r] = packed.data() + r * image.width * sizeof(Pixel);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("writing '" + path.string() + "': " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), bit_depth,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

GrayImage16 read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open image '" + path.string() + "'");
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  GrayImage16 image;
  std::vector<std::uint8_t> data;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("reading '" + path.string() + "': " + error);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path.string() + "' is not a grayscale PNG");
  }
  if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  image.height = png_get_image_height(png, info);
  image.width = png_get_image_width(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  data.resize(row_bytes * image.height);
  rows.resize(image.height);
  for (std::size_t r = 0; r < image.height; ++r) rows[r] = data.data() + r * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  image.pixels.resize(image.height * image.width);
  const bool wide = depth == 16;
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    image.pixels[i] = wide ? static_cast<std::uint16_t>((data[2 * i] << 8) | data[2 * i + 1]) : data[i];
  }
  return image;
}

GrayImage16 read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image '" + path.string() + "'");
  std::string magic;
  in >> magic;
  if (magic != "P5" && magic != "P2") throw DataError("'" + path.string() + "' is not a PGM file");
  auto next_number = [&]() -> std::size_t {
    std::string token;
    while (in >> token) {
      if (token[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      try {
        return std::stoul(token);
      } catch (const std::exception&) {
        break;
      }
    }
    throw DataError("malformed PGM header in '" + path.string() + "'");
  };
  GrayImage16 image;
  image.width = next_number();
  image.height = next_number();
  const std::size_t maxval = next_number();
  if (maxval == 0 || maxval > 65535) throw DataError("unsupported PGM maxval in '" + path.string() + "'");
  image.pixels.resize(image.width * image.height);
  if (magic == "P2") {
    for (auto& p : image.pixels) p = static_cast<std::uint16_t>(next_number());
  } else {
    in.get();  // single whitespace after maxval
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(image.pixels.size() * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DataError("truncated PGM '" + path.string() + "'");
    for (std::size_t i = 0; i < image.pixels.size(); ++i)
      image.pixels[i] = bytes == 2 ? static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]) : raw[i];
  }
  return image;
}

}  // namespace

void write_png(const std::filesystem::path& path, const GrayImage16& image) { write_png_impl(path, image); }
void write_png(const std::filesystem::path& path, const GrayImage8& image) { write_png_impl(path, image); }

GrayImage16 read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw DataError("cannot open image '" + path.string() + "'");
  char head[2] = {0, 0};
  probe.read(head, 2);
  probe.close();
  if (head[0] == 'P' && (head[1] == '5' || head[1] == '2')) return read_pgm(path);
  return read_png(path);
}

}  // namespace lumipower
