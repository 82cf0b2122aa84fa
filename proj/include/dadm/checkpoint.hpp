#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dadm/tensor.hpp"

namespace dadm {

/// Named tensors plus free-form single-line metadata, in insertion order.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, std::string>> meta;

    void add(std::string name, Tensor value) { tensors.emplace_back(std::move(name), std::move(value)); }
    /// Throws FormatError if `name` is absent.
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    std::string meta_value(const std::string& key, const std::string& fallback = {}) const;
};

/// Text header ("DADM1", version, tensor table, meta lines, "end") followed by
/// little-endian 64-bit payloads in table order.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws FormatError on bad magic or version, malformed table, or a payload
/// that is shorter or longer than the table says.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace dadm
