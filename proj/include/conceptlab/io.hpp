#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "conceptlab/tensor.hpp"

namespace conceptlab::io {

// 8-bit RGB PNG. Values are clamped to [0,1] and quantized with round().
void write_png(const std::string& path, const Tensor& image, int image_index = 0);
Tensor read_png(const std::string& path);  // returns 1 x 3 x H x W in [0,1]

// Tiles a batch into a rows x cols grid (row-major, zero-padded background).
Tensor tile_grid(const Tensor& batch, int rows, int cols);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// FNV-1a 64-bit, hex-encoded; used for config hashes and manifest checksums.
std::string fnv1a_hex(const std::string& bytes);
std::string file_checksum(const std::string& path);

// Minimal CSV writer; fields are written verbatim (callers only emit numbers
// and identifiers).
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  void close();
  ~CsvWriter();

 private:
  struct Impl;
  Impl* impl_;
};

std::string fmt_double(double v);  // shortest round-trip formatting

}  // namespace conceptlab::io
