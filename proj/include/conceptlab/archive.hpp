#pragma once
#include <iosfwd>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

namespace conceptlab::archive {

// Self-describing binary tensor archive: a magic line, a JSON header (format
// version, caller metadata, tensor table), then raw little-endian doubles in
// table order. Round-trips bit for bit.
inline constexpr const char* kMagic = "CLABARC1";

struct TensorRef {
  std::string name;
  const double* data = nullptr;
  size_t size = 0;
};

void save(std::ostream& out, const nlohmann::json& meta, const std::vector<TensorRef>& tensors);
void save_file(const std::string& path, const nlohmann::json& meta,
               const std::vector<TensorRef>& tensors);

struct Loaded {
  nlohmann::json meta;
  std::map<std::string, std::vector<double>> tensors;
};

Loaded load(std::istream& in);
Loaded load_file(const std::string& path);

}  // namespace conceptlab::archive
