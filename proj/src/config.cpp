#include "icseg/config.hpp"

#include "icseg/tensor.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace icseg {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  for (char c : k)
    if (!(std::islower(static_cast<unsigned char>(c)) ||
          std::isdigit(static_cast<unsigned char>(c)) || c == '_' || c == '.'))
      return false;
  return true;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_text(const std::string& text) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    check(eq != std::string::npos,
          "config line " + std::to_string(lineno) + " is not `key = value`: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    check(valid_key(key), "config line " + std::to_string(lineno) + ": bad key `" + key + "`");
    check(!cfg.entries_.count(key),
          "config line " + std::to_string(lineno) + ": duplicate key `" + key + "`");
    cfg.entries_[key] = value;
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  check(in.good(), "cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_text(buf.str());
}

bool KeyValueConfig::has(const std::string& key) const { return entries_.count(key) > 0; }

std::string KeyValueConfig::get_string(const std::string& key,
                                       const std::string& fallback) const {
  accessed_.insert(key);
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

int64_t KeyValueConfig::get_int(const std::string& key, int64_t fallback) const {
  accessed_.insert(key);
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  size_t pos = 0;
  int64_t v = 0;
  try {
    v = std::stoll(it->second, &pos);
  } catch (const std::exception&) {
    throw Error("config key `" + key + "`: not an integer: " + it->second);
  }
  check(pos == it->second.size(), "config key `" + key + "`: not an integer: " + it->second);
  return v;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  accessed_.insert(key);
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(it->second, &pos);
  } catch (const std::exception&) {
    throw Error("config key `" + key + "`: not a number: " + it->second);
  }
  check(pos == it->second.size(), "config key `" + key + "`: not a number: " + it->second);
  return v;
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  accessed_.insert(key);
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw Error("config key `" + key + "`: not a boolean: " + it->second);
}

std::vector<int64_t> KeyValueConfig::get_int_list(
    const std::string& key, const std::vector<int64_t>& fallback) const {
  accessed_.insert(key);
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<int64_t> out;
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    check(!item.empty(), "config key `" + key + "`: empty list element");
    try {
      out.push_back(std::stoll(item));
    } catch (const std::exception&) {
      throw Error("config key `" + key + "`: bad list element: " + item);
    }
  }
  check(!out.empty(), "config key `" + key + "`: empty list");
  return out;
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  check(valid_key(key), "bad config key `" + key + "`");
  entries_[key] = value;
}

void KeyValueConfig::set_int(const std::string& key, int64_t value) {
  set(key, std::to_string(value));
}

void KeyValueConfig::set_double(const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  set(key, buf);
}

void KeyValueConfig::set_bool(const std::string& key, bool value) {
  set(key, value ? "true" : "false");
}

void KeyValueConfig::set_int_list(const std::string& key, const std::vector<int64_t>& value) {
  std::string s;
  for (size_t i = 0; i < value.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(value[i]);
  }
  set(key, s);
}

std::string KeyValueConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : entries_) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

void KeyValueConfig::throw_if_unused() const {
  for (const auto& [k, v] : entries_)
    if (!accessed_.count(k)) throw Error("unknown config key `" + k + "`");
}

}  // namespace icseg
