#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "wnet/tensor.hpp"

namespace wnet {

// Flat binary tensor container ("WNT1"):
//   magic "WNT1" | u32 dtype (1=f32, 2=f64) | u64 header length | header bytes
//   | u64 entry count | entries
// Each entry: u64 name length | name | u64 rank | u64 extents... | raw values.
// All integers and values little-endian. The header is free-form text (the
// model checkpoint stores a small JSON blob there; bare tensor files leave
// it empty).

namespace detail {

template <typename V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

template <typename T>
constexpr std::uint32_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? 1u : 2u;
}

}  // namespace detail

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

template <typename T>
void save_tensors(const std::string& path, const NamedTensors<T>& tensors,
                  const std::string& header = "") {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
    os.write("WNT1", 4);
    detail::write_pod<std::uint32_t>(os, detail::dtype_code<T>());
    detail::write_pod<std::uint64_t>(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    detail::write_pod<std::uint64_t>(os, tensors.size());
    for (const auto& [name, t] : tensors) {
        detail::write_pod<std::uint64_t>(os, name.size());
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<std::uint64_t>(os, t.rank());
        for (auto e : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * sizeof(T)));
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

template <typename T>
NamedTensors<T> load_tensors(const std::string& path, std::string* header = nullptr) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "WNT1", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const auto dtype = detail::read_pod<std::uint32_t>(is);
    if (dtype != detail::dtype_code<T>())
        throw std::runtime_error("checkpoint: dtype code " + std::to_string(dtype) +
                                 " does not match requested precision in " + path);
    const auto header_len = detail::read_pod<std::uint64_t>(is);
    std::string hdr(header_len, '\0');
    is.read(hdr.data(), static_cast<std::streamsize>(header_len));
    if (header) *header = hdr;
    const auto count = detail::read_pod<std::uint64_t>(is);
    NamedTensors<T> out;
    for (std::uint64_t e = 0; e < count; ++e) {
        const auto name_len = detail::read_pod<std::uint64_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), static_cast<std::streamsize>(name_len));
        const auto rank = detail::read_pod<std::uint64_t>(is);
        Shape shape(rank);
        for (auto& s : shape)
            s = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is));
        std::vector<T> values(static_cast<std::size_t>(numel(shape)));
        is.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(T)));
        if (!is) throw std::runtime_error("checkpoint: truncated entry '" + name + "'");
        out.emplace(std::move(name), Tensor<T>::from(std::move(shape), std::move(values)));
    }
    return out;
}

}  // namespace wnet
