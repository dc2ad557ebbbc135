#pragma once

// Flat `key = value` configuration text with `#` comments.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

namespace pformer {

class KvConfig {
 public:
  static KvConfig parse(std::string_view text, const std::string& source = "<config>");
  static KvConfig load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  template <class T>
  void set_number(const std::string& key, T value);

  std::optional<std::string> find(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key) const;

  // Canonical text: one `key = value` per line, keys sorted.
  std::string to_text() const;
  const std::map<std::string, std::string>& values() const { return values_; }
  const std::string& source() const { return source_; }

 private:
  std::map<std::string, std::string> values_;
  std::string source_;
};

// Shortest round-trippable decimal text for a double.
std::string format_double(double v);

template <class T>
void KvConfig::set_number(const std::string& key, T value) {
  if constexpr (std::is_floating_point_v<T>) {
    set(key, format_double(static_cast<double>(value)));
  } else {
    set(key, std::to_string(value));
  }
}

}  // namespace pformer
