#include "ldnet/config.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ldnet {

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

template <typename Int>
bool parse_int(const std::string& text, Int& out) {
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw std::invalid_argument("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                                  std::string(line) + "'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(line_no) + ": empty key");
    out[std::string(key)] = std::string(trim(line.substr(eq + 1)));
  }
  return out;
}

KeyValues read_key_values_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::string format_double(double value) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), ptr);
}

const std::string* FieldReader::find(std::string_view key) const {
  const auto it = values_.find(key);
  return it == values_.end() ? nullptr : &it->second;
}

void FieldReader::read(std::string_view key, double& out) {
  const auto* v = find(key);
  if (!v) return;
  double parsed = 0.0;
  const char* last = v->data() + v->size();
  auto [ptr, ec] = std::from_chars(v->data(), last, parsed);
  if (ec != std::errc{} || ptr != last) {
    errors_.push_back(std::string(key) + ": expected a number, got '" + *v + "'");
    return;
  }
  out = parsed;
}

void FieldReader::read(std::string_view key, int& out) {
  const auto* v = find(key);
  if (v && !parse_int(*v, out)) errors_.push_back(std::string(key) + ": expected an integer, got '" + *v + "'");
}

void FieldReader::read(std::string_view key, std::size_t& out) {
  const auto* v = find(key);
  if (v && !parse_int(*v, out)) {
    errors_.push_back(std::string(key) + ": expected a non-negative integer, got '" + *v + "'");
  }
}

void FieldReader::read(std::string_view key, bool& out) {
  const auto* v = find(key);
  if (!v) return;
  if (*v == "true" || *v == "1") {
    out = true;
  } else if (*v == "false" || *v == "0") {
    out = false;
  } else {
    errors_.push_back(std::string(key) + ": expected true/false, got '" + *v + "'");
  }
}

void FieldReader::read(std::string_view key, std::string& out) {
  if (const auto* v = find(key)) out = *v;
}

}  // namespace ldnet
