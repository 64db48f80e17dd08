#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace ldnet {

/// Flat key=value text: one pair per line, '#' starts a comment, blank lines
/// ignored, surrounding whitespace trimmed. Duplicate keys: last one wins.
using KeyValues = std::map<std::string, std::string, std::less<>>;

KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values_file(const std::string& path);

/// Shortest round-tripping decimal form.
std::string format_double(double value);

/// Typed field readers. Each appends a message to `errors` instead of
/// throwing so callers can report every problem at once.
class FieldReader {
 public:
  FieldReader(const KeyValues& values, std::vector<std::string>& errors) : values_(values), errors_(errors) {}

  void read(std::string_view key, double& out);
  void read(std::string_view key, int& out);
  void read(std::string_view key, std::size_t& out);
  void read(std::string_view key, bool& out);
  void read(std::string_view key, std::string& out);

 private:
  const std::string* find(std::string_view key) const;

  const KeyValues& values_;
  std::vector<std::string>& errors_;
};

}  // namespace ldnet
