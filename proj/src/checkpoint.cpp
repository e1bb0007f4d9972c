#include "echosynth/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "echosynth/errors.hpp"

namespace echosynth {

namespace {

constexpr char kMagic[4] = {'E', 'S', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError("checkpoint truncated while reading a u32");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint32_t dtype_code(torch::ScalarType st) {
    switch (st) {
        case torch::kFloat32: return 0;
        case torch::kFloat64: return 1;
        case torch::kInt64: return 2;
        case torch::kUInt8: return 3;
        default: throw ParseError("unsupported tensor dtype in checkpoint");
    }
}

torch::ScalarType code_dtype(uint32_t code) {
    switch (code) {
        case 0: return torch::kFloat32;
        case 1: return torch::kFloat64;
        case 2: return torch::kInt64;
        case 3: return torch::kUInt8;
        default: throw ParseError("unknown dtype code in checkpoint");
    }
}

}  // namespace

const torch::Tensor* CheckpointData::find(const std::string& name) const {
    for (const auto& [key, t] : tensors)
        if (key == name) return &t;
    return nullptr;
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingArtifact("cannot open " + path.string() + " for writing");
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    const std::string meta = data.meta.dump();
    put_u32(os, static_cast<uint32_t>(meta.size()));
    os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put_u32(os, static_cast<uint32_t>(data.tensors.size()));
    for (const auto& [name, tensor] : data.tensors) {
        put_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        auto t = tensor.detach().contiguous().cpu();
        put_u32(os, dtype_code(t.scalar_type()));
        put_u32(os, static_cast<uint32_t>(t.dim()));
        for (int64_t d = 0; d < t.dim(); ++d) put_u32(os, static_cast<uint32_t>(t.size(d)));
        os.write(static_cast<const char*>(t.data_ptr()),
                 static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!os) throw MissingArtifact("failed while writing " + path.string());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifact("cannot open checkpoint " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw ParseError(path.string() + " is not a checkpoint container");
    if (get_u32(is) != kVersion) throw ParseError("unsupported checkpoint version");
    CheckpointData data;
    const uint32_t meta_len = get_u32(is);
    std::string meta(meta_len, '\0');
    is.read(meta.data(), meta_len);
    if (!is) throw ParseError("checkpoint truncated in the metadata block");
    try {
        data.meta = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad checkpoint metadata: ") + e.what());
    }
    const uint32_t count = get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const auto st = code_dtype(get_u32(is));
        const uint32_t ndim = get_u32(is);
        std::vector<int64_t> dims;
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            dims.push_back(static_cast<int64_t>(get_u32(is)));
            numel *= dims.back();
        }
        auto t = torch::empty(dims, torch::TensorOptions().dtype(st));
        is.read(static_cast<char*>(t.data_ptr()),
                static_cast<std::streamsize>(numel * t.element_size()));
        if (!is) throw ParseError("checkpoint truncated in tensor " + name);
        data.tensors.emplace_back(std::move(name), std::move(t));
    }
    return data;
}

NamedParams collect_named_params(const std::string& prefix, const torch::nn::Module& m) {
    NamedParams out;
    for (const auto& item : m.named_parameters())
        out.emplace_back(prefix + item.key(), item.value());
    return out;
}

void restore_named_params(const NamedParams& src, const std::string& prefix, torch::nn::Module& m) {
    torch::NoGradGuard guard;
    for (auto& item : m.named_parameters()) {
        const std::string key = prefix + item.key();
        const torch::Tensor* found = nullptr;
        for (const auto& [name, t] : src)
            if (name == key) {
                found = &t;
                break;
            }
        if (!found) throw ParseError("checkpoint is missing parameter " + key);
        if (!found->sizes().equals(item.value().sizes()))
            throw ShapeMismatch("checkpoint shape mismatch for " + key);
        item.value().copy_(found->to(item.value().dtype()));
    }
}

}  // namespace echosynth
