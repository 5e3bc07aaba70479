#include "conceptlab/toml.hpp"

#include <cctype>
#include <sstream>
#include <stdexcept>

#include "conceptlab/io.hpp"

namespace conceptlab::toml {

namespace {

[[noreturn]] void fail(int line, const std::string& what) {
  throw std::runtime_error("toml: line " + std::to_string(line) + ": " + what);
}

std::string strip(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// removes a trailing comment that is not inside a string
std::string strip_comment(const std::string& s) {
  bool in_str = false;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') in_str = !in_str;
    if (s[i] == '#' && !in_str) return s.substr(0, i);
  }
  return s;
}

Value parse_scalar(const std::string& tok, int line) {
  if (tok.size() >= 2 && tok.front() == '"' && tok.back() == '"')
    return Value{tok.substr(1, tok.size() - 2)};
  if (tok == "true") return Value{true};
  if (tok == "false") return Value{false};
  try {
    size_t pos = 0;
    const double d = std::stod(tok, &pos);
    if (pos != tok.size()) fail(line, "trailing characters in number '" + tok + "'");
    return Value{d};
  } catch (const std::invalid_argument&) {
    fail(line, "cannot parse value '" + tok + "'");
  }
}

Value parse_value(const std::string& raw, int line) {
  const std::string s = strip(raw);
  if (s.empty()) fail(line, "missing value");
  if (s.front() != '[') return parse_scalar(s, line);
  if (s.back() != ']') fail(line, "unterminated array");
  // split on commas outside strings
  std::vector<std::string> toks;
  std::string cur;
  bool in_str = false;
  for (size_t i = 1; i + 1 < s.size(); ++i) {
    const char c = s[i];
    if (c == '"') in_str = !in_str;
    if (c == ',' && !in_str) {
      toks.push_back(strip(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!strip(cur).empty()) toks.push_back(strip(cur));
  if (toks.empty()) return Value{std::vector<double>{}};
  if (toks[0].front() == '"') {
    std::vector<std::string> out;
    for (const auto& t : toks) {
      Value v = parse_scalar(t, line);
      if (!v.is_string()) fail(line, "mixed array types");
      out.push_back(v.as_string());
    }
    return Value{out};
  }
  std::vector<double> out;
  for (const auto& t : toks) {
    Value v = parse_scalar(t, line);
    if (!v.is_number()) fail(line, "mixed array types");
    out.push_back(v.as_number());
  }
  return Value{out};
}

std::string dump_value(const Value& v) {
  std::ostringstream os;
  if (v.is_string()) {
    os << '"' << v.as_string() << '"';
  } else if (v.is_bool()) {
    os << (v.as_bool() ? "true" : "false");
  } else if (v.is_number()) {
    os << io::fmt_double(v.as_number());
  } else if (std::holds_alternative<std::vector<double>>(v.v)) {
    os << '[';
    const auto& a = v.as_numbers();
    for (size_t i = 0; i < a.size(); ++i) os << (i ? ", " : "") << io::fmt_double(a[i]);
    os << ']';
  } else {
    os << '[';
    const auto& a = v.as_strings();
    for (size_t i = 0; i < a.size(); ++i) os << (i ? ", " : "") << '"' << a[i] << '"';
    os << ']';
  }
  return os.str();
}

}  // namespace

bool Table::has(const std::string& section, const std::string& key) const {
  auto s = sections.find(section);
  return s != sections.end() && s->second.count(key) > 0;
}

const Value& Table::get(const std::string& section, const std::string& key) const {
  auto s = sections.find(section);
  if (s == sections.end() || !s->second.count(key))
    throw std::runtime_error("toml: missing key [" + section + "] " + key);
  return s->second.at(key);
}

std::string Table::get_string(const std::string& section, const std::string& key,
                              const std::string& fallback) const {
  return has(section, key) ? get(section, key).as_string() : fallback;
}

double Table::get_number(const std::string& section, const std::string& key,
                         double fallback) const {
  return has(section, key) ? get(section, key).as_number() : fallback;
}

bool Table::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  return has(section, key) ? get(section, key).as_bool() : fallback;
}

std::vector<double> Table::get_numbers(const std::string& section, const std::string& key,
                                       const std::vector<double>& fallback) const {
  return has(section, key) ? get(section, key).as_numbers() : fallback;
}

std::vector<std::string> Table::get_strings(const std::string& section, const std::string& key,
                                            const std::vector<std::string>& fallback) const {
  return has(section, key) ? get(section, key).as_strings() : fallback;
}

void Table::set(const std::string& section, const std::string& key, Value v) {
  sections[section][key] = std::move(v);
}

std::string Table::dump() const {
  std::ostringstream os;
  auto emit = [&](const std::map<std::string, Value>& kv) {
    for (const auto& [k, v] : kv) os << k << " = " << dump_value(v) << '\n';
  };
  if (sections.count("")) emit(sections.at(""));
  for (const auto& [name, kv] : sections) {
    if (name.empty()) continue;
    os << "\n[" << name << "]\n";
    emit(kv);
  }
  return os.str();
}

Table parse(const std::string& text) {
  Table table;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = strip(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(line_no, "unterminated section header");
      section = strip(line.substr(1, line.size() - 2));
      if (section.empty()) fail(line_no, "empty section name");
      table.sections[section];
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos) fail(line_no, "expected key = value");
    const std::string key = strip(line.substr(0, eq));
    if (key.empty()) fail(line_no, "empty key");
    table.sections[section][key] = parse_value(line.substr(eq + 1), line_no);
  }
  return table;
}

Table parse_file(const std::string& path) { return parse(io::read_text_file(path)); }

}  // namespace conceptlab::toml
