#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevdiff {

/// Malformed, truncated or incompatible container file. The message names the field and byte offset.
class ContainerError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType { F32, F64 };

std::string to_string(DType d);
std::size_t dtype_size(DType d);

struct Array {
    std::string name;
    DType dtype = DType::F32;
    std::vector<std::int64_t> dims;  ///< zero extents allowed
    std::vector<double> values;      ///< f32 arrays hold values exactly representable as float

    std::size_t count() const;
};

/// Shared on-disk format of datasets and checkpoints:
///
///   BEVDIFF <version>\n
///   kind <kind>\n
///   meta <key> <value>\n        (any number; keys sorted; values without whitespace)
///   array <name> <f32|f64> <ndims> <d0> ... \n
///   end\n
///   <array payloads, little-endian, in declared order, no padding>
struct Container {
    static constexpr int kVersion = 1;

    std::string kind;
    std::map<std::string, std::string> meta;
    std::vector<Array> arrays;

    const Array& array(const std::string& name) const;
    const std::string& meta_value(const std::string& key) const;

    std::string header() const;
    std::size_t payload_bytes() const;
};

void write_container(const std::string& path, const Container& c);
/// expected_kind empty accepts any kind.
Container read_container(const std::string& path, const std::string& expected_kind = "");

std::string serialize_container(const Container& c);
Container parse_container(const std::string& bytes, const std::string& expected_kind = "");

}  // namespace bevdiff
