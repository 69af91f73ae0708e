// SPDX-License-Identifier: Apache-2.0
//
// Plain-text key=value configuration. '#' starts a comment; blank lines are
// ignored. Canonical output is key-sorted, one pair per line.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace omni {

using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(const std::string& text, const std::string& source = "<text>");
KeyValues read_key_values(const std::string& path);
std::string format_key_values(const KeyValues& kv);
/// Later maps override earlier ones.
KeyValues merge_key_values(const KeyValues& base, const KeyValues& over);

std::int64_t parse_int(const std::string& key, const std::string& value);
double parse_double(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);
std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& value, char sep = ',');
std::string format_double(double v);
std::string format_int_list(const std::vector<std::int64_t>& v, char sep = ',');

/// Typed, consuming view over a KeyValues map. finish() rejects every key
/// nobody asked for, naming it.
class KeyReader {
 public:
  explicit KeyReader(const KeyValues& kv) : kv_(kv) {}

  std::optional<std::string> take(const std::string& key);
  void read(const std::string& key, std::int64_t& out);
  void read(const std::string& key, double& out);
  void read(const std::string& key, bool& out);
  void read(const std::string& key, std::string& out);
  void read(const std::string& key, std::uint64_t& out);
  void finish() const;

 private:
  const KeyValues& kv_;
  std::set<std::string> used_;
};

}  // namespace omni
