#include "coattn/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace coattn {

namespace {

const char kMagic[4] = {'C', 'A', 'T', '1'};

template <typename T>
void write_le(std::ostream& os, T v) {
    // platform is little-endian; raw write keeps files bit-stable
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CorruptFile("truncated tensor record");
    return v;
}

} // namespace

int64_t tensor_record_bytes(const Shape& shape, Dtype dtype) {
    int64_t elem = dtype == Dtype::f64 ? 8 : 4;
    return 4 + 1 + 1 + 8 * static_cast<int64_t>(shape.size()) + elem * shape_numel(shape);
}

void write_tensor(std::ostream& os, const Tensor& t, Dtype dtype) {
    os.write(kMagic, 4);
    write_le<uint8_t>(os, static_cast<uint8_t>(dtype));
    write_le<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (int64_t e : t.shape) write_le<uint64_t>(os, static_cast<uint64_t>(e));
    const double* p = t.ptr();
    int64_t n = t.numel();
    if (dtype == Dtype::f64) {
        os.write(reinterpret_cast<const char*>(p), n * 8);
    } else {
        for (int64_t i = 0; i < n; ++i) write_le<float>(os, static_cast<float>(p[i]));
    }
    if (!os) throw IoError("tensor write failed");
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw CorruptFile("bad tensor magic");
    uint8_t dt = read_le<uint8_t>(is);
    if (dt > 1) throw CorruptFile("unknown dtype tag " + std::to_string(dt));
    uint8_t rank = read_le<uint8_t>(is);
    Shape shape(rank);
    for (uint8_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(read_le<uint64_t>(is));
    int64_t n = shape_numel(shape);
    Tensor t = zeros(shape);
    if (dt == 0) {
        is.read(reinterpret_cast<char*>(t.ptr()), n * 8);
        if (!is) throw CorruptFile("truncated f64 payload");
    } else {
        for (int64_t i = 0; i < n; ++i) (*t.data)[i] = static_cast<double>(read_le<float>(is));
    }
    return t;
}

void save_checkpoint(const std::string& path, const ParamRegistry& params,
                     const std::string& config_hash) {
    nlohmann::json manifest;
    manifest["config_hash"] = config_hash;
    nlohmann::json plist = nlohmann::json::array();
    int64_t offset = 0;
    for (const ParamEntry& e : params.entries()) {
        nlohmann::json p;
        p["name"] = e.name;
        p["shape"] = e.tensor.shape;
        p["offset"] = offset;
        plist.push_back(p);
        offset += tensor_record_bytes(e.tensor.shape);
    }
    manifest["params"] = plist;
    std::string mbytes = manifest.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    uint64_t mlen = mbytes.size();
    os.write(reinterpret_cast<const char*>(&mlen), 8);
    os.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
    for (const ParamEntry& e : params.entries()) write_tensor(os, e.tensor);
    if (!os) throw IoError("checkpoint write failed: " + path);
}

namespace {

nlohmann::json read_manifest(std::istream& is, const std::string& path) {
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 8);
    if (!is) throw CorruptFile("truncated checkpoint header: " + path);
    std::string mbytes(mlen, '\0');
    is.read(mbytes.data(), static_cast<std::streamsize>(mlen));
    if (!is) throw CorruptFile("truncated checkpoint manifest: " + path);
    try {
        return nlohmann::json::parse(mbytes);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile("bad checkpoint manifest: " + std::string(e.what()));
    }
}

} // namespace

void load_checkpoint(const std::string& path, ParamRegistry& params,
                     const std::string& expected_config_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json manifest = read_manifest(is, path);
    std::string stored = manifest.at("config_hash").get<std::string>();
    if (!expected_config_hash.empty() && stored != expected_config_hash)
        throw ConfigHashMismatch("checkpoint built for config " + stored + ", expected " +
                                 expected_config_hash);
    const auto& plist = manifest.at("params");
    auto& entries = params.entries();
    if (plist.size() != entries.size())
        throw CorruptFile("checkpoint has " + std::to_string(plist.size()) + " params, model has " +
                          std::to_string(entries.size()));
    for (size_t i = 0; i < entries.size(); ++i) {
        std::string name = plist[i].at("name").get<std::string>();
        if (name != entries[i].name)
            throw CorruptFile("parameter order mismatch: " + name + " vs " + entries[i].name);
        Tensor t = read_tensor(is);
        if (t.shape != entries[i].tensor.shape)
            throw ShapeMismatch("parameter " + name + " stored as " + shape_str(t.shape) +
                                ", model wants " + shape_str(entries[i].tensor.shape));
        *entries[i].tensor.data = *t.data;
    }
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    nlohmann::json manifest = read_manifest(is, path);
    CheckpointInfo info;
    info.config_hash = manifest.at("config_hash").get<std::string>();
    for (const auto& p : manifest.at("params")) {
        Shape s = p.at("shape").get<Shape>();
        info.params.emplace_back(p.at("name").get<std::string>(), s);
        info.total_elements += shape_numel(s);
    }
    return info;
}

std::string fnv1a_hex(const std::string& bytes) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

} // namespace coattn
