#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace adsd {

// Line-oriented "key = value" configuration with dotted section prefixes:
//
//   # comment
//   model.num_classes = 4
//   model.stage_channels = 16,32,64,128,256
//
// Readers mark keys as consumed; require_all_consumed() turns leftover keys
// into errors so typos never pass silently.
class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key);
  std::string get_string(const std::string& key, const std::string& fallback);
  long long get_int(const std::string& key);
  long long get_int(const std::string& key, long long fallback);
  double get_double(const std::string& key);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<long long> get_int_list(const std::string& key);
  std::vector<long long> get_int_list(const std::string& key, const std::vector<long long>& fallback);

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  // Throws ConfigError naming the first key nobody consumed.
  void require_all_consumed() const;

  // Deterministic key-sorted rendering, re-parseable.
  std::string serialize() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  std::string raw(const std::string& key);
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
  std::string origin_ = "<empty>";
};

}  // namespace adsd
