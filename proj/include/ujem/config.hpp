#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace ujem {

class ConfigError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Flat configuration text: one `dotted.key = value` per line, `#` starts a
// comment, blank lines are ignored. Readers consume keys; finish() rejects
// anything left over, so misspelled keys fail loudly instead of silently
// keeping defaults.
class ConfigMap {
  public:
    ConfigMap() = default;

    static ConfigMap parse_file(const std::string& path);
    static ConfigMap parse_string(const std::string& text);

    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    int get_int(const std::string& key, int fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;
    std::vector<uint64_t> get_u64_list(const std::string& key, std::vector<uint64_t> fallback) const;
    std::vector<double> get_double_list(const std::string& key, std::vector<double> fallback) const;

    // Throws ConfigError naming every key that no reader consumed.
    void finish() const;

  private:
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> consumed_;
};

} // namespace ujem
