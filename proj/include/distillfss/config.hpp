#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace distillfss {

// Flat `key = value` settings. `[section]` headers prefix the keys that
// follow them ("section.key"); `#` starts a comment.
class Config {
public:
    static Config parse(std::string_view text);
    static Config load(const std::filesystem::path& path);

    // Canonical form: sorted keys grouped by section, one per line.
    std::string serialize() const;

    void set(const std::string& key, std::string value);
    bool contains(const std::string& key) const { return values_.count(key) != 0; }
    std::optional<std::string> get(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

    // Values from `other` replace values here.
    void merge(const Config& other);

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

std::string join_ints(const std::vector<int>& values);

}  // namespace distillfss
