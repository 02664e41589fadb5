#include "kblam/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "kblam/error.hpp"
#include "kblam/random.hpp"

namespace kblam {

namespace {

constexpr char kMagic[8] = {'K', 'B', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ParseError("truncated checkpoint " + path.string());
    return v;
}

std::uint64_t hash_bytes(const void* p, std::size_t n, std::uint64_t h) {
    return fnv1a64(std::string_view(static_cast<const char*>(p), n), h);
}

} // namespace

const NamedTensor& Checkpoint::at(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw NotFoundError("checkpoint has no tensor '" + name + "'");
}

std::uint64_t Checkpoint::content_hash() const {
    std::uint64_t h = fnv1a64(header_json);
    for (const auto& t : tensors) {
        h = fnv1a64(t.name, h);
        h = hash_bytes(t.shape.data(), t.shape.size() * sizeof(std::size_t), h);
        h = hash_bytes(t.data.data(), t.data.size() * sizeof(double), h);
    }
    return h;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, ckpt.header_json.size());
    out.write(ckpt.header_json.data(), static_cast<std::streamsize>(ckpt.header_json.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
        out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
        for (std::size_t e : t.shape) put<std::uint64_t>(out, e);
        out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * 8));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw ParseError(path.string() + " is not a checkpoint file");
    if (get<std::uint32_t>(in, path) != kVersion) throw ParseError("unsupported checkpoint version in " + path.string());
    Checkpoint ckpt;
    ckpt.header_json.resize(get<std::uint64_t>(in, path));
    if (!in.read(ckpt.header_json.data(), static_cast<std::streamsize>(ckpt.header_json.size())))
        throw ParseError("truncated checkpoint " + path.string());
    const auto count = get<std::uint32_t>(in, path);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name.resize(get<std::uint32_t>(in, path));
        if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size())))
            throw ParseError("truncated checkpoint " + path.string());
        const auto rank = get<std::uint32_t>(in, path);
        std::size_t n = 1;
        for (std::uint32_t r = 0; r < rank; ++r) {
            t.shape.push_back(get<std::uint64_t>(in, path));
            n *= t.shape.back();
        }
        t.data.resize(n);
        if (!in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(n * 8)))
            throw ParseError("truncated checkpoint " + path.string());
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

std::uint64_t tensors_hash(const std::vector<Tensor>& tensors) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors) h = hash_bytes(t.data().data(), t.numel() * sizeof(double), h);
    return h;
}

} // namespace kblam
