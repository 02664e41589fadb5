#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "kblam/tensor.hpp"

namespace kblam {

struct NamedTensor {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

/// Container shared by base-model and adapter checkpoints:
/// magic "KBLMCKPT", u32 version, u64 header length, header JSON, u32 tensor count,
/// then per tensor u32 name length, name, u32 rank, u64 extents, little-endian f64 data.
struct Checkpoint {
    std::string header_json;
    std::vector<NamedTensor> tensors;

    const NamedTensor& at(const std::string& name) const;
    /// FNV-1a over header and tensor bytes.
    std::uint64_t content_hash() const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Hash of the raw tensor values only; used to tie derived artifacts to parameters.
std::uint64_t tensors_hash(const std::vector<Tensor>& tensors);

} // namespace kblam
