#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "coattn/nn.hpp"
#include "coattn/tensor.hpp"

namespace coattn {

// Tensor record: magic "CAT1", u8 dtype (0 = f64, 1 = f32), u8 rank,
// u64 extents[rank], then the raw row-major payload, all little-endian.
enum class Dtype : uint8_t { f64 = 0, f32 = 1 };

void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype = Dtype::f64);
Tensor read_tensor(std::istream& is);
// Bytes a record of this shape/dtype occupies on disk.
int64_t tensor_record_bytes(const Shape& shape, Dtype dtype = Dtype::f64);

// Checkpoint file: u64 manifest length, JSON manifest naming each parameter
// with shape + offset (relative to the records section), then concatenated
// CAT1 records. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& config_hash);
// Loads parameter data in place; names and shapes must match exactly.
// Throws ConfigHashMismatch when expected_config_hash differs from the stored one.
void load_checkpoint(const std::string& path, ParamRegistry& params,
                     const std::string& expected_config_hash);
// Reads just the manifest (config hash + parameter names/shapes).
struct CheckpointInfo {
    std::string config_hash;
    std::vector<std::pair<std::string, Shape>> params;
    int64_t total_elements = 0;
};
CheckpointInfo read_checkpoint_info(const std::string& path);

// FNV-1a 64-bit, hex-encoded. Used for config hashes.
std::string fnv1a_hex(const std::string& bytes);

} // namespace coattn
