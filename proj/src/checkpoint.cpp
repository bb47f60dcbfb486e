#include "bits/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <memory>

namespace bits {

namespace {

constexpr char kMagic[8] = {'B', 'I', 'T', 'S', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void wraw(std::FILE* f, const void* p, size_t n, const std::string& path) {
    if (std::fwrite(p, 1, n, f) != n) raise(ErrCode::data, "checkpoint write failed: " + path);
}

void rraw(std::FILE* f, void* p, size_t n, const std::string& path) {
    if (std::fread(p, 1, n, f) != n)
        raise(ErrCode::data, "truncated checkpoint: " + path, int(DataErr::truncated));
}

template <class T>
void wpod(std::FILE* f, T v, const std::string& path) {
    wraw(f, &v, sizeof(T), path);
}

template <class T>
T rpod(std::FILE* f, const std::string& path) {
    T v{};
    rraw(f, &v, sizeof(T), path);
    return v;
}

void write_entries(std::FILE* f, const std::vector<std::pair<std::string, Tensor<float>>>& entries,
                   const std::string& path) {
    wpod<uint32_t>(f, uint32_t(entries.size()), path);
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xffff) raise(ErrCode::invalid, "entry name too long: " + name);
        wpod<uint16_t>(f, uint16_t(name.size()), path);
        wraw(f, name.data(), name.size(), path);
        wpod<uint8_t>(f, uint8_t(t.rank()), path);
        for (int i = 0; i < t.rank(); ++i) wpod<uint32_t>(f, uint32_t(t.dim(i)), path);
        wraw(f, t.data(), size_t(t.size()) * sizeof(float), path);
    }
}

std::vector<std::pair<std::string, Tensor<float>>> read_entries(std::FILE* f,
                                                                const std::string& path) {
    const uint32_t count = rpod<uint32_t>(f, path);
    std::vector<std::pair<std::string, Tensor<float>>> out;
    out.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t nlen = rpod<uint16_t>(f, path);
        std::string name(nlen, '\0');
        rraw(f, name.data(), nlen, path);
        const uint8_t rank = rpod<uint8_t>(f, path);
        Shape shape(rank);
        for (uint8_t r = 0; r < rank; ++r) shape[r] = int(rpod<uint32_t>(f, path));
        Tensor<float> t(shape);
        rraw(f, t.data(), size_t(t.size()) * sizeof(float), path);
        out.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace

const Tensor<float>* Checkpoint::find_param(const std::string& name) const {
    for (const auto& [n, t] : params)
        if (n == name) return &t;
    return nullptr;
}

const Tensor<float>* Checkpoint::find_blob(const std::string& name) const {
    for (const auto& [n, t] : blobs)
        if (n == name) return &t;
    return nullptr;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        FilePtr f(std::fopen(tmp.c_str(), "wb"));
        if (!f) raise(ErrCode::data, "cannot open for write: " + tmp);
        wraw(f.get(), kMagic, 8, tmp);
        wpod<uint32_t>(f.get(), kVersion, tmp);
        const std::string json = ckpt.meta.dump();
        wpod<uint32_t>(f.get(), uint32_t(json.size()), tmp);
        wraw(f.get(), json.data(), json.size(), tmp);
        write_entries(f.get(), ckpt.params, tmp);
        write_entries(f.get(), ckpt.blobs, tmp);
        if (std::fflush(f.get()) != 0) raise(ErrCode::data, "flush failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) raise(ErrCode::data, "rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise(ErrCode::data, "cannot open checkpoint: " + path);
    char magic[8];
    rraw(f.get(), magic, 8, path);
    if (std::memcmp(magic, kMagic, 8) != 0)
        raise(ErrCode::data, "magic mismatch (not a BITSCKPT file): " + path,
              int(DataErr::bad_magic));
    const uint32_t version = rpod<uint32_t>(f.get(), path);
    if (version != kVersion)
        raise(ErrCode::data, "unsupported checkpoint version " + std::to_string(version));
    const uint32_t jlen = rpod<uint32_t>(f.get(), path);
    std::string json(jlen, '\0');
    rraw(f.get(), json.data(), jlen, path);
    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(json);
    } catch (const std::exception& e) {
        raise(ErrCode::data, std::string("bad checkpoint meta JSON: ") + e.what());
    }
    ckpt.params = read_entries(f.get(), path);
    ckpt.blobs = read_entries(f.get(), path);
    return ckpt;
}

Tensor<float> rng_state_to_tensor(const Rng::State& s) {
    Tensor<float> t(Shape{8});
    for (int i = 0; i < 4; ++i) {
        uint32_t lo = uint32_t(s[size_t(i)] & 0xffffffffULL);
        uint32_t hi = uint32_t(s[size_t(i)] >> 32);
        std::memcpy(&t[i * 2], &lo, 4);
        std::memcpy(&t[i * 2 + 1], &hi, 4);
    }
    return t;
}

Rng::State rng_state_from_tensor(const Tensor<float>& t) {
    if (t.size() != 8) raise(ErrCode::data, "rng blob must have 8 words");
    Rng::State s;
    for (int i = 0; i < 4; ++i) {
        uint32_t lo, hi;
        std::memcpy(&lo, t.data() + i * 2, 4);
        std::memcpy(&hi, t.data() + i * 2 + 1, 4);
        s[size_t(i)] = (uint64_t(hi) << 32) | lo;
    }
    return s;
}

}  // namespace bits
