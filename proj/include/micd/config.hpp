#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace micd {

// Flat `key = value` text. '#' starts a comment; blank lines are ignored.
class ConfigMap {
public:
    static ConfigMap parse(const std::string& text, const std::string& origin = "<config>");
    static ConfigMap load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    std::optional<std::string> get(const std::string& key) const;
    bool contains(const std::string& key) const { return values_.count(key) != 0; }

    // Applies every entry of `other` on top of this map.
    void merge(const ConfigMap& other);

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    // Sorted by key, one `key = value` per line.
    std::string dump() const;

    friend bool operator==(const ConfigMap&, const ConfigMap&) = default;

private:
    std::map<std::string, std::string> values_;
};

// Typed parsing helpers; throw FormatError naming the key.
double parse_double(const std::string& key, const std::string& value);
long parse_long(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

// Round-trippable text for a double.
std::string format_double(double v);

} // namespace micd
