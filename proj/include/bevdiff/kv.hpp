#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace bevdiff {

/// Bad configuration value or key; maps to the usage exit code in the CLI.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

double parse_double(const std::string& key, const std::string& value);
int parse_int(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

/// Shortest text that parses back to the same double.
std::string format_double(double v);
inline std::string format_bool(bool b) { return b ? "true" : "false"; }

}  // namespace bevdiff
