#include "conceptlab/io.hpp"

#include <png.h>

#include <charconv>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

namespace conceptlab::io {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint8_t quantize(double v) {
  v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<uint8_t>(v * 255.0 + 0.5);
}

}  // namespace

void write_png(const std::string& path, const Tensor& image, int image_index) {
  if (image.c != 3) throw std::invalid_argument("write_png: expected 3 channels");
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("write_png: cannot open " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("write_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error on " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, image.w, image.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(image.w) * 3);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        row[static_cast<size_t>(x) * 3 + ch] = quantize(image.at(image_index, ch, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor read_png(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw std::runtime_error("read_png: libpng init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("read_png: libpng error on " + path);
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const int w = png_get_image_width(png, info);
  const int h = png_get_image_height(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY ||
      png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  Tensor out(1, 3, h, w);
  std::vector<uint8_t> row(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        out.at(0, ch, y, x) = row[static_cast<size_t>(x) * 3 + ch] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

Tensor tile_grid(const Tensor& batch, int rows, int cols) {
  Tensor grid(1, batch.c, rows * batch.h, cols * batch.w);
  for (int i = 0; i < rows * cols && i < batch.n; ++i) {
    const int ty = (i / cols) * batch.h, tx = (i % cols) * batch.w;
    for (int c = 0; c < batch.c; ++c)
      for (int y = 0; y < batch.h; ++y)
        for (int x = 0; x < batch.w; ++x)
          grid.at(0, c, ty + y, tx + x) = batch.at(i, c, y, x);
  }
  return grid;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fnv1a_hex(const std::string& bytes) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_checksum(const std::string& path) { return fnv1a_hex(read_text_file(path)); }

struct CsvWriter::Impl {
  std::ofstream f;
};

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : impl_(new Impl) {
  impl_->f.open(path, std::ios::binary);
  if (!impl_->f) throw std::runtime_error("cannot write " + path);
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) impl_->f << ',';
    impl_->f << fields[i];
  }
  impl_->f << '\n';
}

void CsvWriter::close() {
  if (impl_) impl_->f.close();
}

CsvWriter::~CsvWriter() {
  close();
  delete impl_;
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // trim to shortest representation that round-trips
  for (int prec = 1; prec <= 17; ++prec) {
    char probe[32];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    double back = 0.0;
    std::from_chars(probe, probe + std::strlen(probe), back);
    if (back == v) return probe;
  }
  return buf;
}

}  // namespace conceptlab::io
