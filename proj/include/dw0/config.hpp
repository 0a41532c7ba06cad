#pragma once

// Flat dotted-key configuration: a fixed set of keys with defaults, loaded
// from "key=value" files and overridden from the command line.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dw0 {

class Config {
 public:
  /// Every known key with its default value.
  Config();

  /// Throws UsageError for unknown keys.
  void set(const std::string& key, const std::string& value);
  /// "key=value"; throws UsageError when malformed.
  void apply(const std::string& assignment);
  /// Blank lines and '#' comments are skipped. DataError when unreadable,
  /// UsageError on malformed lines or unknown keys.
  void load_file(const std::filesystem::path& path);

  bool known(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& str(const std::string& key) const;
  int integer(const std::string& key) const;
  std::int64_t int64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  /// Comma-separated list; empty entries dropped.
  std::vector<std::string> list(const std::string& key) const;

  /// All keys, sorted, one "key=value" per line.
  std::string echo() const;
  void write_echo(const std::filesystem::path& path) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace dw0
