#pragma once

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dsc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key=value settings, one per line, '#' comments. Deterministic
// serialization (keys sorted) so resolved snapshots diff cleanly.
using KeyValueMap = std::map<std::string, std::string>;

inline KeyValueMap parse_kv_text(const std::string& text) {
  KeyValueMap kv;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    // trim
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    const auto ke = key.find_last_not_of(" \t");
    key = key.substr(0, ke + 1);
    const auto vb = value.find_first_not_of(" \t");
    value = (vb == std::string::npos) ? "" : value.substr(vb);
    if (kv.count(key))
      throw ConfigError("config: duplicate key " + key);
    kv[key] = value;
  }
  return kv;
}

inline KeyValueMap parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_kv_text(buf.str());
}

inline void reject_unknown_keys(const KeyValueMap& kv,
                                const std::set<std::string>& allowed) {
  for (const auto& [k, v] : kv)
    if (!allowed.count(k)) throw ConfigError("config: unknown key " + k);
}

inline std::string serialize_kv(const KeyValueMap& kv) {
  std::ostringstream os;
  for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
  return os.str();
}

inline void write_kv_file(const std::string& path, const KeyValueMap& kv) {
  std::ofstream os(path);
  if (!os) throw ConfigError("config: cannot write " + path);
  os << serialize_kv(kv);
}

}  // namespace dsc
