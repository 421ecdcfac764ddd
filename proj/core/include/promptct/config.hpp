#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace promptct {

/// Flat key=value configuration. Lines starting with '#' are comments;
/// later assignments override earlier ones.
class Config {
 public:
  Config() = default;

  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long long get_int(const std::string& key, long long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  /// Comma separated integers, e.g. "60,90,120,180".
  std::vector<std::size_t> get_list(const std::string& key, const std::vector<std::size_t>& fallback) const;

  const std::map<std::string, std::string>& values() const noexcept { return values_; }
  /// Keys in sorted order, one "key=value" per line.
  std::string to_string() const;
  void save(const std::filesystem::path& path) const;

  /// Apply every entry of `overrides` on top of this config.
  void merge(const Config& overrides);

 private:
  std::map<std::string, std::string> values_;
};

std::string join_list(const std::vector<std::size_t>& values);

}  // namespace promptct
