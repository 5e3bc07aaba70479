#pragma once
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace conceptlab::toml {

// Subset of TOML sufficient for experiment configs: top-level and one-level
// [table] sections, key = value with strings, numbers, booleans and flat
// arrays, '#' comments. Parse errors carry the line number.
struct Value {
  std::variant<std::string, double, bool, std::vector<double>, std::vector<std::string>> v;

  bool is_string() const { return std::holds_alternative<std::string>(v); }
  bool is_number() const { return std::holds_alternative<double>(v); }
  bool is_bool() const { return std::holds_alternative<bool>(v); }
  const std::string& as_string() const { return std::get<std::string>(v); }
  double as_number() const { return std::get<double>(v); }
  bool as_bool() const { return std::get<bool>(v); }
  const std::vector<double>& as_numbers() const { return std::get<std::vector<double>>(v); }
  const std::vector<std::string>& as_strings() const {
    return std::get<std::vector<std::string>>(v);
  }
};

class Table {
 public:
  std::map<std::string, std::map<std::string, Value>> sections;  // "" = top level

  bool has(const std::string& section, const std::string& key) const;
  const Value& get(const std::string& section, const std::string& key) const;

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const;
  double get_number(const std::string& section, const std::string& key, double fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;
  std::vector<double> get_numbers(const std::string& section, const std::string& key,
                                  const std::vector<double>& fallback) const;
  std::vector<std::string> get_strings(const std::string& section, const std::string& key,
                                       const std::vector<std::string>& fallback) const;

  void set(const std::string& section, const std::string& key, Value v);
  std::string dump() const;
};

Table parse(const std::string& text);
Table parse_file(const std::string& path);

}  // namespace conceptlab::toml
