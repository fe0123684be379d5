#include "maskdiff/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "maskdiff/errors.hpp"

namespace maskdiff {

namespace {

constexpr char kMagic[8] = {'S', 'C', 'O', 'R', 'E', 'C', 'K', '1'};

uint64_t fnv1a(const uint8_t* bytes, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    for (size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

static_assert(std::endian::native == std::endian::little,
              "payload writer assumes a little-endian host");

}  // namespace

const NamedArray& Checkpoint::find(const std::string& name) const {
    for (const NamedArray& a : arrays)
        if (a.name == name) return a;
    throw DataError("checkpoint: missing array " + name);
}

bool Checkpoint::has(const std::string& name) const {
    for (const NamedArray& a : arrays)
        if (a.name == name) return true;
    return false;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::json manifest;
    manifest["dtype"] = "float64";
    manifest["meta"] = ckpt.meta;
    manifest["arrays"] = nlohmann::json::array();
    size_t payload_elems = 0;
    for (const NamedArray& a : ckpt.arrays) {
        int64_t count = 1;
        for (int64_t s : a.shape) count *= s;
        if (count != static_cast<int64_t>(a.data.size()))
            throw DataError("checkpoint: shape of " + a.name + " disagrees with its data");
        manifest["arrays"].push_back({{"name", a.name}, {"shape", a.shape}});
        payload_elems += a.data.size();
    }

    std::string payload;
    payload.reserve(payload_elems * 8);
    for (const NamedArray& a : ckpt.arrays) {
        const char* raw = reinterpret_cast<const char*>(a.data.data());
        payload.append(raw, a.data.size() * 8);
    }
    const uint64_t checksum =
        fnv1a(reinterpret_cast<const uint8_t*>(payload.data()), payload.size());

    const std::string mtext = manifest.dump();
    std::string blob;
    blob.append(kMagic, 8);
    put_u64(blob, mtext.size());
    blob += mtext;
    blob += payload;
    put_u64(blob, checksum);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot open " + path + " for writing");
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw DataError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open " + path);
    std::vector<uint8_t> blob((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
    if (blob.size() < 24 || std::memcmp(blob.data(), kMagic, 8) != 0)
        throw DataError("checkpoint: " + path + " is not a checkpoint file");

    const uint64_t mlen = get_u64(blob.data() + 8);
    if (16 + mlen + 8 > blob.size()) throw DataError("checkpoint: truncated manifest in " + path);
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(blob.begin() + 16, blob.begin() + 16 + mlen);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint: bad manifest in " + path + ": " + e.what());
    }
    if (manifest.value("dtype", "") != "float64")
        throw DataError("checkpoint: unsupported dtype in " + path);

    Checkpoint ckpt;
    if (manifest.contains("meta"))
        ckpt.meta = manifest["meta"].get<std::map<std::string, std::string>>();

    size_t offset = 16 + mlen;
    const size_t payload_end = blob.size() - 8;
    for (const auto& entry : manifest["arrays"]) {
        NamedArray a;
        a.name = entry.at("name").get<std::string>();
        a.shape = entry.at("shape").get<std::vector<int64_t>>();
        int64_t count = 1;
        for (int64_t s : a.shape) {
            if (s < 0) throw DataError("checkpoint: negative dimension for " + a.name);
            count *= s;
        }
        const size_t bytes = static_cast<size_t>(count) * 8;
        if (offset + bytes > payload_end)
            throw DataError("checkpoint: truncated payload for " + a.name);
        a.data.resize(static_cast<size_t>(count));
        std::memcpy(a.data.data(), blob.data() + offset, bytes);
        offset += bytes;
        ckpt.arrays.push_back(std::move(a));
    }
    if (offset != payload_end) throw DataError("checkpoint: trailing bytes in " + path);

    const uint64_t expect = get_u64(blob.data() + payload_end);
    const uint64_t actual = fnv1a(blob.data() + 16 + mlen, payload_end - 16 - mlen);
    if (expect != actual) throw DataError("checkpoint: checksum mismatch in " + path);
    return ckpt;
}

}  // namespace maskdiff
