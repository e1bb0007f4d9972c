#include "echosynth/clip_io.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "echosynth/errors.hpp"

namespace echosynth {

namespace {

constexpr char kMagic[4] = {'E', 'C', 'L', 'P'};
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw ParseError("truncated clip container header");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    return path.string() + ".json";
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const torch::Tensor& t) {
    auto x = t.to(torch::kFloat32).contiguous();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingArtifact("cannot open '" + path.string() + "' for writing");
    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);
    write_u32(os, static_cast<uint32_t>(x.dim()));
    for (int64_t i = 0; i < x.dim(); ++i) write_u32(os, static_cast<uint32_t>(x.size(i)));
    os.write(reinterpret_cast<const char*>(x.data_ptr<float>()),
             static_cast<std::streamsize>(x.numel() * sizeof(float)));
    if (!os) throw MissingArtifact("short write to '" + path.string() + "'");
}

torch::Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingArtifact("cannot open '" + path.string() + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw ParseError("'" + path.string() + "' is not a clip container");
    }
    const uint32_t version = read_u32(is);
    if (version != kFormatVersion) {
        throw ParseError("unsupported clip container version " + std::to_string(version));
    }
    const uint32_t ndim = read_u32(is);
    if (ndim == 0 || ndim > 8) throw ParseError("implausible ndim in '" + path.string() + "'");
    std::vector<int64_t> dims(ndim);
    int64_t numel = 1;
    for (auto& d : dims) {
        d = static_cast<int64_t>(read_u32(is));
        numel *= d;
    }
    auto t = torch::empty(dims, torch::kFloat32);
    is.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(numel * sizeof(float)));
    if (!is) throw ParseError("truncated payload in '" + path.string() + "'");
    return t;
}

void write_clip(const std::filesystem::path& path, const EchoClip& clip) {
    validate_clip(clip);
    write_tensor(path, clip.frames);
    nlohmann::json meta = {
        {"schema_version", 1},
        {"case_id", clip.case_id},
        {"view", to_string(clip.view)},
        {"frame_rate", clip.frame_rate},
    };
    std::ofstream os(sidecar_path(path));
    if (!os) throw MissingArtifact("cannot open sidecar for '" + path.string() + "'");
    os << meta.dump(2) << "\n";
}

EchoClip read_clip(const std::filesystem::path& path) {
    EchoClip clip;
    clip.frames = read_tensor(path);
    std::ifstream is(sidecar_path(path));
    if (!is) throw MissingArtifact("missing sidecar '" + sidecar_path(path).string() + "'");
    nlohmann::json meta;
    try {
        is >> meta;
        clip.case_id = meta.at("case_id").get<std::string>();
        clip.view = view_from_string(meta.at("view").get<std::string>());
        clip.frame_rate = meta.at("frame_rate").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad sidecar for '" + path.string() + "': " + e.what());
    }
    validate_clip(clip);
    return clip;
}

}  // namespace echosynth
