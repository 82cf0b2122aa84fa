#pragma once

#include <map>
#include <string>
#include <vector>

namespace dadm {

/// Flat `key = value` text with `#` comments. Keys are unique; every key must
/// be consumed by the reader, so typos surface as errors.
class KeyValues {
public:
    static KeyValues parse(const std::string& text);
    static KeyValues load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::string str(const std::string& key, const std::string& fallback) const;
    double real(const std::string& key, double fallback) const;
    long integer(const std::string& key, long fallback) const;
    bool boolean(const std::string& key, bool fallback) const;
    std::vector<double> reals(const std::string& key, const std::vector<double>& fallback) const;
    std::vector<long> integers(const std::string& key, const std::vector<long>& fallback) const;

    /// Keys that were present but never read.
    std::vector<std::string> unused() const;
    /// Throws ConfigError listing unused keys.
    void require_all_used() const;
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    const std::string* find(const std::string& key) const;
    std::map<std::string, std::string> values_;
    mutable std::map<std::string, bool> used_;
};

}  // namespace dadm
