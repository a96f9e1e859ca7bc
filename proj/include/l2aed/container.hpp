#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "l2aed/tensor.hpp"

namespace l2aed {

/// Named-array file used for checkpoints and dataset caches.
///
/// Layout (all integers little-endian, floats IEEE-754 binary64 LE):
///
///     magic      8 bytes  "L2AEDCK1"
///     version    u32      (currently 1)
///     n_meta     u32
///     n_meta x { key: str, value: str }
///     n_arrays   u32
///     n_arrays x { name: str, ndim: u32, dims: u64[ndim], data: f64[prod(dims)] }
///
/// where `str` is a u32 byte length followed by UTF-8 bytes.
struct Container {
    static constexpr std::uint32_t kVersion = 1;

    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> arrays;

    const Tensor& array(const std::string& name) const;
    bool has_array(const std::string& name) const;
    const std::string& get(const std::string& key) const;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace l2aed
