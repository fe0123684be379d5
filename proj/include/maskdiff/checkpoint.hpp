#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace maskdiff {

// One named float64 array with its shape.
struct NamedArray {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<double> data;
};

// Checkpoint container: a manifest (names, shapes, dtype) followed by raw
// little-endian float64 payloads in manifest order, then a checksum over the
// payload bytes. Round-trips bit-exactly.
struct Checkpoint {
    std::vector<NamedArray> arrays;
    std::map<std::string, std::string> meta;  // small string metadata

    const NamedArray& find(const std::string& name) const;
    bool has(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
// Throws DataError on missing file, malformed manifest, truncation or
// checksum mismatch.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace maskdiff
