#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace icseg {

// Flat `key = value` text config. `#` starts a comment; keys are
// [a-z0-9_.]+. Reads are tracked so unknown keys can be rejected after a
// consumer has pulled everything it understands.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_text(const std::string& text);
  static KeyValueConfig parse_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key,
                                    const std::vector<int64_t>& fallback) const;

  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, int64_t value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);
  void set_int_list(const std::string& key, const std::vector<int64_t>& value);

  // Sorted `key = value` lines; doubles printed with full precision.
  std::string canonical_text() const;

  // Error out on any key never read through a getter.
  void throw_if_unused() const;

  const std::map<std::string, std::string>& entries() const { return entries_; }

 private:
  std::map<std::string, std::string> entries_;
  mutable std::set<std::string> accessed_;
};

}  // namespace icseg
