#include "conceptlab/archive.hpp"

#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace conceptlab::archive {

using nlohmann::json;

void save(std::ostream& out, const json& meta, const std::vector<TensorRef>& tensors) {
  json header;
  header["format"] = kMagic;
  header["version"] = 1;
  header["meta"] = meta;
  header["tensors"] = json::array();
  for (const auto& t : tensors)
    header["tensors"].push_back({{"name", t.name}, {"size", t.size}});
  const std::string htext = header.dump();
  const uint64_t hlen = htext.size();
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(hlen));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.data),
              static_cast<std::streamsize>(t.size * sizeof(double)));
  if (!out) throw std::runtime_error("archive: write failed");
}

void save_file(const std::string& path, const json& meta,
               const std::vector<TensorRef>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open " + path);
  save(f, meta, tensors);
}

Loaded load(std::istream& in) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("archive: bad magic");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("archive: truncated header");
  const json header = json::parse(htext);
  Loaded result;
  result.meta = header.at("meta");
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const size_t size = entry.at("size").get<size_t>();
    std::vector<double> v(size);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(size * sizeof(double)));
    if (!in) throw std::runtime_error("archive: truncated tensor " + name);
    result.tensors.emplace(name, std::move(v));
  }
  return result;
}

Loaded load_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("archive: cannot open " + path);
  return load(f);
}

}  // namespace conceptlab::archive
