// SPDX-License-Identifier: Apache-2.0

#include "omni_epi/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "omni_epi/tensor.hpp"

namespace omni {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& source) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!kv.emplace(key, trim(line.substr(eq + 1))).second)
      throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return kv;
}

KeyValues read_key_values(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_key_values(ss.str(), path);
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

KeyValues merge_key_values(const KeyValues& base, const KeyValues& over) {
  KeyValues out = base;
  for (const auto& [k, v] : over) out[k] = v;
  return out;
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
  std::int64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [p, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || p != end || value.empty())
    throw ConfigError("key '" + key + "': expected an integer, got '" + value + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(value, &pos);
    if (pos == value.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("key '" + key + "': expected a number, got '" + value + "'");
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on") return true;
  if (value == "false" || value == "0" || value == "off") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + value + "'");
}

std::vector<std::int64_t> parse_int_list(const std::string& key, const std::string& value, char sep) {
  std::vector<std::int64_t> out;
  if (value.empty() || value == "none") return out;
  std::istringstream in(value);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(parse_int(key, trim(item)));
  return out;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

std::string format_int_list(const std::vector<std::int64_t>& v, char sep) {
  if (v.empty()) return "none";
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += std::to_string(v[i]);
  }
  return out;
}

std::optional<std::string> KeyReader::take(const std::string& key) {
  const auto it = kv_.find(key);
  if (it == kv_.end()) return std::nullopt;
  used_.insert(key);
  return it->second;
}

void KeyReader::read(const std::string& key, std::int64_t& out) {
  if (auto v = take(key)) out = parse_int(key, *v);
}

void KeyReader::read(const std::string& key, std::uint64_t& out) {
  if (auto v = take(key)) {
    const auto i = parse_int(key, *v);
    if (i < 0) throw ConfigError("key '" + key + "': must be non-negative");
    out = static_cast<std::uint64_t>(i);
  }
}

void KeyReader::read(const std::string& key, double& out) {
  if (auto v = take(key)) out = parse_double(key, *v);
}

void KeyReader::read(const std::string& key, bool& out) {
  if (auto v = take(key)) out = parse_bool(key, *v);
}

void KeyReader::read(const std::string& key, std::string& out) {
  if (auto v = take(key)) out = *v;
}

void KeyReader::finish() const {
  for (const auto& [k, v] : kv_) {
    if (!used_.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
}

}  // namespace omni
