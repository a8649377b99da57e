#include "dtn/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "dtn/errors.hpp"

namespace dtn {

namespace {

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw LoadError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(img.width, img.height, 3);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw LoadError("cannot decode PNG " + path.string() + ": " + msg);
  }
  return out;
}

// Skips whitespace and '#' comments between PPM header tokens.
std::size_t read_ppm_number(std::istream& in, const std::filesystem::path& path) {
  int c;
  while ((c = in.peek()) != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  std::size_t v = 0;
  if (!(in >> v)) throw LoadError("malformed PPM header in " + path.string());
  return v;
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[2];
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw LoadError("not a binary PPM: " + path.string());
  const std::size_t w = read_ppm_number(in, path);
  const std::size_t h = read_ppm_number(in, path);
  const std::size_t maxval = read_ppm_number(in, path);
  if (w == 0 || h == 0 || maxval != 255) {
    throw LoadError("unsupported PPM (need 8-bit, non-empty): " + path.string());
  }
  in.get();  // single whitespace before the raster
  Image out(w, h, 3);
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (!in) throw LoadError("truncated PPM raster in " + path.string());
  return out;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) throw LoadError("missing image file " + path.string());
  unsigned char sig[8] = {};
  probe.read(reinterpret_cast<char*>(sig), 8);
  if (probe.gcount() >= 8 && png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (probe.gcount() >= 2 && sig[0] == 'P' && sig[1] == '6') return read_ppm(path);
  throw LoadError("unrecognized image format (PNG or P6 PPM expected): " + path.string());
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw std::invalid_argument("write_png: RGB images only");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
  }
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw std::invalid_argument("write_ppm: RGB images only");
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw std::runtime_error("cannot write PPM " + path.string());
}

void draw_box(Image& image, const BBox& box, Rgb color) {
  if (image.width == 0 || image.height == 0) return;
  const auto clampi = [](double v, std::size_t hi) {
    return static_cast<std::size_t>(std::clamp(std::floor(v), 0.0, static_cast<double>(hi - 1)));
  };
  const std::size_t x0 = clampi(box.x_min, image.width), x1 = clampi(box.x_max - 1e-9, image.width);
  const std::size_t y0 = clampi(box.y_min, image.height), y1 = clampi(box.y_max - 1e-9, image.height);
  auto put = [&](std::size_t x, std::size_t y) {
    auto* p = image.at(x, y);
    for (std::size_t c = 0; c < std::min<std::size_t>(3, image.channels); ++c) p[c] = color[c];
  };
  for (std::size_t x = x0; x <= x1; ++x) {
    put(x, y0);
    put(x, y1);
  }
  for (std::size_t y = y0; y <= y1; ++y) {
    put(x0, y);
    put(x1, y);
  }
}

}  // namespace dtn
