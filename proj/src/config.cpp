#include "adsd/config.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "adsd/errors.hpp"

namespace adsd {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_string(buf.str(), path);
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" +
                        t + "'");
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key))
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::string KeyValueConfig::raw(const std::string& key) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string KeyValueConfig::get_string(const std::string& key) { return raw(key); }

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) {
  if (!has(key)) return fallback;
  return raw(key);
}

long long KeyValueConfig::get_int(const std::string& key) {
  const std::string v = raw(key);
  try {
    std::size_t pos = 0;
    long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "' is not an integer: '" + v + "'");
  }
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) {
  return has(key) ? get_int(key) : fallback;
}

double KeyValueConfig::get_double(const std::string& key) {
  const std::string v = raw(key);
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "' is not a number: '" + v + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) {
  return has(key) ? get_double(key) : fallback;
}

bool KeyValueConfig::get_bool(const std::string& key) {
  const std::string v = raw(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(origin_ + ": key '" + key + "' is not a bool (true/false): '" + v + "'");
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) {
  return has(key) ? get_bool(key) : fallback;
}

std::vector<long long> KeyValueConfig::get_int_list(const std::string& key) {
  const std::string v = raw(key);
  std::vector<long long> out;
  std::istringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    try {
      std::size_t pos = 0;
      out.push_back(std::stoll(t, &pos));
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "' has non-integer element '" + t + "'");
    }
  }
  if (out.empty()) throw ConfigError(origin_ + ": key '" + key + "' is an empty list");
  return out;
}

std::vector<long long> KeyValueConfig::get_int_list(const std::string& key,
                                                    const std::vector<long long>& fallback) {
  return has(key) ? get_int_list(key) : fallback;
}

void KeyValueConfig::require_all_consumed() const {
  for (const auto& [key, value] : values_) {
    if (!consumed_.count(key))
      throw ConfigError(origin_ + ": unknown key '" + key + "'");
  }
}

std::string KeyValueConfig::serialize() const {
  std::ostringstream os;
  for (const auto& [key, value] : values_) os << key << " = " << value << "\n";
  return os.str();
}

}  // namespace adsd
