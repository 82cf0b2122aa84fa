#include "dadm/kvconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "dadm/errors.hpp"

namespace dadm {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

double to_real(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    double out = 0.0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
        throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
    return out;
}

long to_integer(const std::string& key, const std::string& v) {
    const std::string t = trim(v);
    long out = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), out);
    if (ec != std::errc() || p != t.data() + t.size() || t.empty())
        throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
    return out;
}

std::vector<std::string> split_commas(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        if (!kv.values_.emplace(key, trim(line.substr(eq + 1))).second)
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return kv;
}

KeyValues KeyValues::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

const std::string* KeyValues::find(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return nullptr;
    used_[key] = true;
    return &it->second;
}

std::string KeyValues::str(const std::string& key, const std::string& fallback) const {
    const std::string* v = find(key);
    return v ? *v : fallback;
}

double KeyValues::real(const std::string& key, double fallback) const {
    const std::string* v = find(key);
    return v ? to_real(key, *v) : fallback;
}

long KeyValues::integer(const std::string& key, long fallback) const {
    const std::string* v = find(key);
    return v ? to_integer(key, *v) : fallback;
}

bool KeyValues::boolean(const std::string& key, bool fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
    if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
    throw ConfigError("config: '" + key + "' expects a boolean, got '" + *v + "'");
}

std::vector<double> KeyValues::reals(const std::string& key, const std::vector<double>& fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::vector<double> out;
    for (const auto& item : split_commas(*v)) out.push_back(to_real(key, item));
    return out;
}

std::vector<long> KeyValues::integers(const std::string& key, const std::vector<long>& fallback) const {
    const std::string* v = find(key);
    if (!v) return fallback;
    std::vector<long> out;
    for (const auto& item : split_commas(*v)) out.push_back(to_integer(key, item));
    return out;
}

std::vector<std::string> KeyValues::unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
        if (!used_.count(k)) out.push_back(k);
    return out;
}

void KeyValues::require_all_used() const {
    const auto u = unused();
    if (u.empty()) return;
    std::string msg = "config: unknown key(s):";
    for (const auto& k : u) msg += " " + k;
    throw ConfigError(msg);
}

}  // namespace dadm
