#include "opama/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

#include "opama/error.hpp"

namespace opama {

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

Tensor read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  const bool color = (img.format & PNG_FORMAT_FLAG_COLOR) != 0;
  img.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int ch = color ? 3 : 1;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Tensor out(Shape{img.height, img.width, ch});
  auto d = out.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] = buf[i] / 255.0;
  return out;
}

void write_png(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes,
               std::int64_t h, std::int64_t w, std::int64_t ch) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(w);
  img.height = static_cast<png_uint_32>(h);
  img.format = ch == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + img.message);
}

Tensor read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw IoError(path.string() + ": not a binary PPM/PGM");
  auto next_int = [&] {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    return v;
  };
  const long w = next_int(), h = next_int(), maxv = next_int();
  if (w <= 0 || h <= 0 || maxv != 255) throw IoError(path.string() + ": unsupported PNM header");
  in.get();
  const int ch = magic == "P6" ? 3 : 1;
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w * h * ch));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw IoError(path.string() + ": truncated pixel data");
  Tensor out(Shape{h, w, ch});
  auto d = out.data();
  for (std::size_t i = 0; i < buf.size(); ++i) d[i] = buf[i] / 255.0;
  return out;
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("no such file: " + path.string());
  const std::string ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm" || ext == ".pgm") return read_pnm(path);
  throw IoError("unsupported image extension: " + path.string());
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
  if (image.rank() != 2 && image.rank() != 3)
    throw DimensionError("write_image: expected [H,W] or [H,W,C], got " + shape_str(image.shape()));
  const auto h = image.dim(0), w = image.dim(1), ch = image.rank() == 2 ? 1 : image.dim(2);
  if (ch != 1 && ch != 3) throw DimensionError("write_image: need 1 or 3 channels");
  std::vector<std::uint8_t> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = to_byte(image[i]);
  const std::string ext = lower_ext(path);
  if (ext == ".png") {
    write_png(path, bytes, h, w, ch);
  } else if (ext == ".ppm" || ext == ".pgm") {
    if ((ext == ".ppm") != (ch == 3)) throw DimensionError("write_image: .ppm needs 3 channels, .pgm 1");
    std::ofstream out(path, std::ios::binary);
    out << (ch == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("cannot write " + path.string());
  } else {
    throw IoError("unsupported image extension: " + path.string());
  }
}

Tensor quantize8(const Tensor& image) {
  Tensor out = image.detach();
  for (auto& v : out.data()) v = to_byte(v) / 255.0;
  return out;
}

}  // namespace opama
