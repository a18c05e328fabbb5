#include "bevdiff/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace bevdiff {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

std::string to_string(DType d) { return d == DType::F32 ? "f32" : "f64"; }
std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }

std::size_t Array::count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= static_cast<std::size_t>(d);
    return n;
}

const Array& Container::array(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw ContainerError("container has no array '" + name + "'");
}

const std::string& Container::meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw ContainerError("container header is missing meta field '" + key + "'");
    return it->second;
}

namespace {

void check_token(const std::string& s, const char* what) {
    if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos)
        throw ContainerError(std::string("container ") + what + " '" + s + "' must be a non-empty token without whitespace");
}

}  // namespace

std::string Container::header() const {
    check_token(kind, "kind");
    std::ostringstream h;
    h << "BEVDIFF " << kVersion << "\n";
    h << "kind " << kind << "\n";
    for (const auto& [k, v] : meta) {
        check_token(k, "meta key");
        check_token(v, "meta value");
        h << "meta " << k << " " << v << "\n";
    }
    for (const auto& a : arrays) {
        check_token(a.name, "array name");
        if (a.values.size() != a.count())
            throw ContainerError("array '" + a.name + "' holds " + std::to_string(a.values.size()) +
                                 " values but its dims declare " + std::to_string(a.count()));
        h << "array " << a.name << " " << to_string(a.dtype) << " " << a.dims.size();
        for (auto d : a.dims) h << " " << d;
        h << "\n";
    }
    h << "end\n";
    return h.str();
}

std::size_t Container::payload_bytes() const {
    std::size_t n = 0;
    for (const auto& a : arrays) n += a.count() * dtype_size(a.dtype);
    return n;
}

std::string serialize_container(const Container& c) {
    std::string out = c.header();
    out.reserve(out.size() + c.payload_bytes());
    for (const auto& a : c.arrays) {
        for (double v : a.values) {
            if (a.dtype == DType::F32) {
                const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
                for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
            } else {
                const auto bits = std::bit_cast<std::uint64_t>(v);
                for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
            }
        }
    }
    return out;
}

Container parse_container(const std::string& bytes, const std::string& expected_kind) {
    Container c;
    std::size_t pos = 0;
    int line_no = 0;
    auto next_line = [&](const char* field) {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos)
            throw ContainerError("truncated header: expected " + std::string(field) + " at byte offset " + std::to_string(pos));
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        return line;
    };
    auto fail = [&](const std::string& field, std::size_t offset, const std::string& what) -> ContainerError {
        return ContainerError("bad " + field + " at byte offset " + std::to_string(offset) + ": " + what);
    };

    {
        const std::size_t off = pos;
        std::istringstream magic(next_line("magic"));
        std::string word;
        int version = 0;
        magic >> word;
        if (word != "BEVDIFF") throw fail("magic", off, "expected 'BEVDIFF', found '" + word + "'");
        if (!(magic >> version)) throw fail("version", off, "missing version number");
        if (version != Container::kVersion)
            throw fail("version", off, "file version " + std::to_string(version) + ", reader supports " +
                                           std::to_string(Container::kVersion));
    }
    {
        const std::size_t off = pos;
        std::istringstream kind(next_line("kind"));
        std::string word;
        kind >> word >> c.kind;
        if (word != "kind" || c.kind.empty()) throw fail("kind", off, "expected 'kind <name>'");
        if (!expected_kind.empty() && c.kind != expected_kind)
            throw fail("kind", off, "expected '" + expected_kind + "', found '" + c.kind + "'");
    }
    for (;;) {
        const std::size_t off = pos;
        std::istringstream line(next_line("header entry"));
        std::string word;
        line >> word;
        if (word == "end") break;
        if (word == "meta") {
            std::string k, v;
            if (!(line >> k >> v)) throw fail("meta", off, "expected 'meta <key> <value>'");
            c.meta[k] = v;
        } else if (word == "array") {
            Array a;
            std::string dtype;
            std::size_t nd = 0;
            if (!(line >> a.name >> dtype >> nd)) throw fail("array", off, "expected 'array <name> <dtype> <ndims> ...'");
            if (dtype == "f32") a.dtype = DType::F32;
            else if (dtype == "f64") a.dtype = DType::F64;
            else throw fail("array '" + a.name + "' dtype", off, "unknown dtype '" + dtype + "'");
            if (nd > 8) throw fail("array '" + a.name + "' ndims", off, "too many dims");
            for (std::size_t i = 0; i < nd; ++i) {
                std::int64_t d = -1;
                if (!(line >> d) || d < 0) throw fail("array '" + a.name + "' dims", off, "missing or negative extent");
                a.dims.push_back(d);
            }
            c.arrays.push_back(std::move(a));
        } else {
            throw fail("header entry", off, "unknown entry '" + word + "'");
        }
    }

    for (auto& a : c.arrays) {
        const std::size_t need = a.count() * dtype_size(a.dtype);
        if (bytes.size() - pos < need)
            throw ContainerError("truncated payload: array '" + a.name + "' needs " + std::to_string(need) +
                                 " bytes at byte offset " + std::to_string(pos) + ", file has " +
                                 std::to_string(bytes.size() - pos));
        a.values.resize(a.count());
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            if (a.dtype == DType::F32) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
                a.values[i] = std::bit_cast<float>(bits);
            } else {
                std::uint64_t bits = 0;
                for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
                a.values[i] = std::bit_cast<double>(bits);
            }
        }
        pos += need;
    }
    if (pos != bytes.size())
        throw ContainerError("trailing data: " + std::to_string(bytes.size() - pos) + " unexpected bytes at byte offset " +
                             std::to_string(pos));
    return c;
}

void write_container(const std::string& path, const Container& c) {
    const std::string bytes = serialize_container(c);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing '" + path + "'");
}

Container read_container(const std::string& path, const std::string& expected_kind) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for reading");
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return parse_container(bytes, expected_kind);
    } catch (const ContainerError& e) {
        throw ContainerError(path + ": " + e.what());
    }
}

}  // namespace bevdiff
