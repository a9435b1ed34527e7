#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   "CLMM"            4 bytes magic
//   version           u32 (currently 1)
//   stage             u32 (1 = pretrain, 2 = finetune)
//   record count      u32
//   records           name_len u32, UTF-8 name, rank u32, dims u32[rank],
//                     values f64[prod(dims)]
//   crc32             u32 over every preceding byte

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include <zlib.h>

#include "clmm/params.hpp"

namespace clmm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t stage = 1;
    NamedParams tensors;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }
    const Tensor& get(const std::string& name) const {
        if (const Tensor* t = find(name)) return *t;
        throw IntegrityError("checkpoint has no tensor '" + name + "'");
    }
    void put(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t.detach()); }
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::vector<unsigned char>& out, double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xFFu));
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    return static_cast<std::uint32_t>(::crc32(crc, data, static_cast<uInt>(n)));
}

class Reader {
public:
    Reader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    double f64() {
        need(8);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return std::bit_cast<double>(bits);
    }
    std::string bytes(std::size_t k) {
        need(k);
        std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
        pos_ += k;
        return s;
    }
    std::size_t remaining() const { return n_ - pos_; }

private:
    void need(std::size_t k) const {
        if (pos_ + k > n_) throw IntegrityError("checkpoint record runs past end of payload");
    }
    const unsigned char* p_;
    std::size_t n_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.stage != 1 && ckpt.stage != 2) throw ContractError("checkpoint stage must be 1 or 2");
    std::set<std::string> names;
    std::vector<unsigned char> out{'C', 'L', 'M', 'M'};
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, ckpt.stage);
    detail::put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        if (!names.insert(name).second) throw ContractError("duplicate checkpoint tensor name '" + name + "'");
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
        for (double v : t.values()) detail::put_f64(out, v);
    }
    detail::put_u32(out, detail::crc32_of(out.data(), out.size()));
    return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), "CLMM", 4) != 0) throw IntegrityError("bad magic, not a CLMM checkpoint");
    if (bytes.size() < 20) throw IntegrityError("CRC mismatch: checkpoint truncated");
    const std::size_t payload = bytes.size() - 4;
    detail::Reader tail(bytes.data() + payload, 4);
    const std::uint32_t stored = tail.u32();
    const std::uint32_t actual = detail::crc32_of(bytes.data(), payload);
    if (stored != actual) throw IntegrityError("CRC mismatch: checkpoint corrupted or truncated");

    detail::Reader r(bytes.data() + 4, payload - 4);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ckpt.stage = r.u32();
    if (ckpt.stage != 1 && ckpt.stage != 2) throw IntegrityError("invalid stage tag " + std::to_string(ckpt.stage));
    const std::uint32_t count = r.u32();
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.u32());
        if (!names.insert(name).second) throw IntegrityError("duplicate tensor name '" + name + "'");
        const std::uint32_t rank = r.u32();
        Shape shape(rank);
        for (auto& d : shape) d = r.u32();
        std::vector<double> values(numel_of(shape));
        for (double& v : values) v = r.f64();
        ckpt.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (r.remaining() != 0) throw IntegrityError("trailing bytes after last checkpoint record");
    return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

// Stores every parameter of `params` under prefix + name.
inline void put_params(Checkpoint& ckpt, const NamedParams& params, const std::string& prefix = "") {
    for (const auto& [name, t] : params) ckpt.put(prefix + name, t);
}

// Copies checkpoint values into existing parameters, requiring exact shapes.
inline void restore_params(const Checkpoint& ckpt, NamedParams& params, const std::string& prefix = "") {
    for (auto& [name, t] : params) {
        const Tensor& src = ckpt.get(prefix + name);
        if (src.shape() != t.shape()) {
            throw IntegrityError("checkpoint tensor '" + prefix + name + "' has shape " + shape_str(src.shape()) +
                                 ", model expects " + shape_str(t.shape()));
        }
        auto dst = t.mutable_values();
        std::copy(src.values().begin(), src.values().end(), dst.begin());
    }
}

} // namespace clmm
