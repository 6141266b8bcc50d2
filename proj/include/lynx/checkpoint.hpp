#pragma once

// Single-file named-tensor container:
//   magic "lynx-ckpt", u32 version, length-prefixed config-echo JSON,
//   tensor directory (name, dtype, shape, byte offset), then raw
//   little-endian payloads. Tensor names are hierarchical dotted paths,
//   e.g. "backbone.blocks.2.self_attn.q.weight".

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "lynx/common.hpp"
#include "lynx/nn.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

constexpr char kCkptMagic[] = "lynx-ckpt";
constexpr uint32_t kCkptVersion = 1;
constexpr uint8_t kDtypeF64 = 1;

struct CkptTensor {
    std::string name;
    std::vector<int64_t> dims;
    std::vector<double> data;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }
};

class CheckpointWriter {
public:
    void add(const std::string& name, std::vector<int64_t> dims, std::vector<double> data) {
        CkptTensor t{name, std::move(dims), std::move(data)};
        if (t.count() != int64_t(t.data.size()))
            throw runtime_error("checkpoint: tensor " + name + " dims do not match data size");
        tensors_.push_back(std::move(t));
    }

    void add_registry(const ParamRegistry& reg) {
        for (const auto& [name, t] : reg.items()) add(name, {t.rows(), t.cols()}, t.data());
    }

    void write(const std::string& path, const std::string& config_json) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw runtime_error("checkpoint: cannot open " + path + " for writing");

        auto put_u32 = [&out](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
        auto put_u64 = [&out](uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
        auto put_i64 = [&out](int64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };

        out.write(kCkptMagic, sizeof(kCkptMagic) - 1);
        put_u32(kCkptVersion);
        put_u64(config_json.size());
        out.write(config_json.data(), std::streamsize(config_json.size()));
        put_u64(tensors_.size());
        uint64_t offset = 0;
        for (const auto& t : tensors_) {
            put_u32(uint32_t(t.name.size()));
            out.write(t.name.data(), std::streamsize(t.name.size()));
            out.put(char(kDtypeF64));
            put_u32(uint32_t(t.dims.size()));
            for (int64_t d : t.dims) put_i64(d);
            put_u64(offset);
            offset += uint64_t(t.data.size()) * sizeof(double);
        }
        put_u64(offset);
        for (const auto& t : tensors_)
            out.write(reinterpret_cast<const char*>(t.data.data()),
                      std::streamsize(t.data.size() * sizeof(double)));
        if (!out) throw runtime_error("checkpoint: write failed for " + path);
    }

private:
    std::vector<CkptTensor> tensors_;
};

struct Checkpoint {
    uint32_t version = 0;
    std::string config_json;
    std::vector<CkptTensor> tensors;

    const CkptTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw runtime_error("checkpoint: cannot open " + path);

    auto get_u32 = [&in]() {
        uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_u64 = [&in]() {
        uint64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    auto get_i64 = [&in]() {
        int64_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };

    char magic[sizeof(kCkptMagic) - 1];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw runtime_error("checkpoint: " + path + " is not a lynx-ckpt file");

    Checkpoint ckpt;
    ckpt.version = get_u32();
    if (ckpt.version != kCkptVersion)
        throw runtime_error("checkpoint: unsupported version " + std::to_string(ckpt.version));
    const uint64_t cfg_len = get_u64();
    ckpt.config_json.resize(cfg_len);
    in.read(ckpt.config_json.data(), std::streamsize(cfg_len));

    const uint64_t n_tensors = get_u64();
    struct Entry {
        std::string name;
        std::vector<int64_t> dims;
        uint64_t offset;
    };
    std::vector<Entry> directory;
    for (uint64_t i = 0; i < n_tensors; ++i) {
        Entry e;
        const uint32_t name_len = get_u32();
        e.name.resize(name_len);
        in.read(e.name.data(), std::streamsize(name_len));
        const uint8_t dtype = uint8_t(in.get());
        if (dtype != kDtypeF64)
            throw runtime_error("checkpoint: tensor " + e.name + " has unsupported dtype " +
                                std::to_string(dtype));
        const uint32_t ndim = get_u32();
        for (uint32_t d = 0; d < ndim; ++d) e.dims.push_back(get_i64());
        e.offset = get_u64();
        directory.push_back(std::move(e));
    }
    const uint64_t payload_len = get_u64();
    std::vector<char> payload(payload_len);
    in.read(payload.data(), std::streamsize(payload_len));
    if (!in) throw runtime_error("checkpoint: truncated file " + path);

    for (const auto& e : directory) {
        CkptTensor t;
        t.name = e.name;
        t.dims = e.dims;
        const uint64_t bytes = uint64_t(t.count()) * sizeof(double);
        if (e.offset + bytes > payload_len)
            throw runtime_error("checkpoint: tensor " + e.name + " payload out of range");
        t.data.resize(size_t(t.count()));
        std::memcpy(t.data.data(), payload.data() + e.offset, bytes);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

// Strict by-name restore into live parameters.
inline void load_into_registry(const Checkpoint& ckpt, ParamRegistry& reg) {
    for (auto& [name, tensor] : reg.items_mut()) {
        const CkptTensor* src = ckpt.find(name);
        if (!src) throw runtime_error("checkpoint: missing tensor " + name);
        if (src->dims.size() != 2 || src->dims[0] != tensor.rows() ||
            src->dims[1] != tensor.cols())
            throw runtime_error("checkpoint: tensor " + name + " has shape (" +
                                std::to_string(src->dims.empty() ? 0 : src->dims[0]) + ", " +
                                std::to_string(src->dims.size() < 2 ? 0 : src->dims[1]) +
                                "), model expects (" + std::to_string(tensor.rows()) + ", " +
                                std::to_string(tensor.cols()) + ")");
        tensor.data_mut() = src->data;
    }
}

}  // namespace lynx
