#include "ujem/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

namespace ujem {

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b])) != 0) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1])) != 0) --e;
    return s.substr(b, e - b);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) parts.push_back(trim(cur));
    if (!parts.empty() && parts.back().empty()) parts.pop_back();
    return parts;
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k) {
        if (std::isalnum(static_cast<unsigned char>(c)) == 0 && c != '.' && c != '_' && c != '-') {
            return false;
        }
    }
    return true;
}

double parse_double(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    double out = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
    }
    return out;
}

long long parse_ll(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    long long out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
    }
    return out;
}

uint64_t parse_u64(const std::string& key, const std::string& raw) {
    const std::string v = trim(raw);
    uint64_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw ConfigError("config key '" + key + "': not an unsigned integer: '" + v + "'");
    }
    return out;
}

} // namespace

ConfigMap ConfigMap::parse_string(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(body.substr(0, eq));
        if (!valid_key(key)) {
            throw ConfigError("config line " + std::to_string(lineno) + ": bad key '" + key + "'");
        }
        if (cfg.values_.count(key) != 0) {
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        cfg.values_[key] = trim(body.substr(eq + 1));
    }
    return cfg;
}

ConfigMap ConfigMap::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_string(buf.str());
}

bool ConfigMap::has(const std::string& key) const { return values_.count(key) != 0; }

std::string ConfigMap::get_string(const std::string& key, const std::string& fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

double ConfigMap::get_double(const std::string& key, double fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(key, it->second);
}

int ConfigMap::get_int(const std::string& key, int fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    long long v = parse_ll(key, it->second);
    if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("config key '" + key + "': out of int range");
    return static_cast<int>(v);
}

uint64_t ConfigMap::get_u64(const std::string& key, uint64_t fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_u64(key, it->second);
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false/1/0, got '" + v + "'");
}

std::vector<int> ConfigMap::get_int_list(const std::string& key, std::vector<int> fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    for (const auto& part : split_commas(it->second)) {
        long long v = parse_ll(key, part);
        if (v < INT32_MIN || v > INT32_MAX) throw ConfigError("config key '" + key + "': out of int range");
        out.push_back(static_cast<int>(v));
    }
    return out;
}

std::vector<uint64_t> ConfigMap::get_u64_list(const std::string& key,
                                              std::vector<uint64_t> fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<uint64_t> out;
    for (const auto& part : split_commas(it->second)) out.push_back(parse_u64(key, part));
    return out;
}

std::vector<double> ConfigMap::get_double_list(const std::string& key,
                                               std::vector<double> fallback) const {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const auto& part : split_commas(it->second)) out.push_back(parse_double(key, part));
    return out;
}

void ConfigMap::finish() const {
    std::string unknown;
    for (const auto& [key, value] : values_) {
        if (consumed_.count(key) == 0) {
            if (!unknown.empty()) unknown += ", ";
            unknown += key;
        }
    }
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

} // namespace ujem
