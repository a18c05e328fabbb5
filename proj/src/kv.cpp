#include "bevdiff/kv.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>

namespace bevdiff {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* expected) {
    throw ConfigError("config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

template <class T>
T parse_integral(const std::string& key, const std::string& value, const char* expected) {
    T out{};
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end || value.empty()) bad(key, value, expected);
    return out;
}

}  // namespace

double parse_double(const std::string& key, const std::string& value) {
    // GCC 11 has floating-point from_chars; strtod would accept leading whitespace.
    double out = 0.0;
    const char* end = value.data() + value.size();
    auto [ptr, ec] = std::from_chars(value.data(), end, out);
    if (ec != std::errc() || ptr != end || value.empty() || !std::isfinite(out)) bad(key, value, "a finite number");
    return out;
}

int parse_int(const std::string& key, const std::string& value) { return parse_integral<int>(key, value, "an integer"); }

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    return parse_integral<std::uint64_t>(key, value, "a non-negative integer");
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    bad(key, value, "a boolean (true/false)");
}

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) return std::to_string(v);
    return std::string(buf, ptr);
}

}  // namespace bevdiff
