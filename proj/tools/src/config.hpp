#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

// Experiment configuration: a flat "key = value" text file checked against
// a typed schema. Every key has a default, so an empty file is valid.
namespace vcdm::cli {

enum class ValueType { kInt, kDouble, kBool, kString, kEnum, kIntList, kPath };

struct KeySpec {
    std::string key;
    ValueType type;
    std::string default_value;
    std::vector<std::string> choices;  // kEnum only
    std::string help;
};

// The full schema in file order.
const std::vector<KeySpec>& schema();

class ExperimentConfig {
public:
    ExperimentConfig();

    // Parses "key = value" lines; '#' starts a comment. Throws ConfigError
    // with the line number for unknown keys, duplicates and type errors.
    static ExperimentConfig parse(const std::string& text, const std::string& origin = "<config>");
    static ExperimentConfig load(const std::filesystem::path& path);

    // Sets one key after type checking (ConfigError on failure).
    void set(const std::string& key, const std::string& value);

    long get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    const std::string& get_string(const std::string& key) const;
    std::vector<long> get_int_list(const std::string& key) const;

    // Canonical text: every key in schema order with its normalised value.
    std::string canonical() const;

    // SHA-256 of the canonical text restricted to hashed keys, as 16 hex
    // digits. seed, method, out_dir and sample.count are excluded: they vary
    // per command and are spelled out in file names next to the hash.
    std::string hash() const;
    // Hash over an explicit subset of keys (e.g. the ones a cache depends on).
    std::string hash_of(const std::vector<std::string>& keys, const std::string& salt = "") const;
    // Keys starting with any of the prefixes.
    std::vector<std::string> keys_with_prefix(const std::vector<std::string>& prefixes) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    const KeySpec& spec(const std::string& key) const;
    std::map<std::string, std::string> values_;
};

std::string sha256_hex(const std::string& data);

}  // namespace vcdm::cli
