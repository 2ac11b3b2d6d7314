// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "coqmoe/numerics.hpp"

// Container layout:
//
//   COQMOE <manifest-bytes>\n
//   <manifest: indented JSON text>
//   <blob: raw little-endian tensor data>
//
// The manifest carries the format version, a free-form "meta" object, the
// tensor directory (name, dtype, shape, offset, bytes) and an FNV-1a 64-bit
// checksum of the blob.

namespace coqmoe {

using json = nlohmann::ordered_json;

inline constexpr int kArchiveVersion = 1;

/// Malformed, truncated or corrupted file.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class DType { f32, f64, i8, i32, i64 };

inline const char* dtype_name(DType t) {
    switch (t) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::i8: return "i8";
        case DType::i32: return "i32";
        case DType::i64: return "i64";
    }
    return "?";
}

inline DType parse_dtype(const std::string& s) {
    if (s == "f32") return DType::f32;
    if (s == "f64") return DType::f64;
    if (s == "i8") return DType::i8;
    if (s == "i32") return DType::i32;
    if (s == "i64") return DType::i64;
    throw FormatError("unknown dtype '" + s + "'");
}

inline std::size_t dtype_size(DType t) {
    switch (t) {
        case DType::i8: return 1;
        case DType::f32:
        case DType::i32: return 4;
        case DType::f64:
        case DType::i64: return 8;
    }
    return 0;
}

inline std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace detail {
template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <typename U>
U get_le(const char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}
}  // namespace detail

struct TensorInfo {
    DType dtype = DType::f32;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t bytes = 0;

    [[nodiscard]] std::size_t count() const {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        return n;
    }
};

class ArchiveWriter {
public:
    explicit ArchiveWriter(std::string kind) : kind_(std::move(kind)) {}

    json& meta() noexcept { return meta_; }

    /// Real values, stored as f32 or f64. Values outside f32 range are rejected.
    void add_real(const std::string& name, std::vector<std::size_t> shape, std::span<const double> v, DType t) {
        begin(name, t, std::move(shape), v.size());
        for (double x : v) {
            if (t == DType::f32) {
                detail::put_le(blob_, std::bit_cast<std::uint32_t>(static_cast<float>(x)));
            } else if (t == DType::f64) {
                detail::put_le(blob_, std::bit_cast<std::uint64_t>(x));
            } else {
                throw std::invalid_argument("add_real: integer dtype");
            }
        }
    }

    void add_matrix(const std::string& name, const Matrix& m, DType t = DType::f32) {
        add_real(name, {m.rows(), m.cols()}, m.data(), t);
    }

    void add_vector(const std::string& name, std::span<const double> v, DType t = DType::f32) {
        add_real(name, {v.size()}, v, t);
    }

    /// Integers, stored in the narrowest of i8/i32/i64 that holds every value.
    void add_ints(const std::string& name, std::vector<std::size_t> shape, std::span<const std::int64_t> v) {
        DType t = DType::i8;
        for (auto x : v) {
            if (x < INT32_MIN || x > INT32_MAX) {
                t = DType::i64;
                break;
            }
            if (x < INT8_MIN || x > INT8_MAX) t = DType::i32;
        }
        begin(name, t, std::move(shape), v.size());
        for (auto x : v) {
            if (t == DType::i8) blob_.push_back(static_cast<char>(static_cast<std::uint8_t>(static_cast<std::int8_t>(x))));
            else if (t == DType::i32) detail::put_le(blob_, static_cast<std::uint32_t>(static_cast<std::int32_t>(x)));
            else detail::put_le(blob_, static_cast<std::uint64_t>(x));
        }
    }

    void add_int_matrix(const std::string& name, const IntMatrix& m) {
        const std::vector<std::int64_t> v(m.data().begin(), m.data().end());
        add_ints(name, {m.rows(), m.cols()}, v);
    }

    [[nodiscard]] std::string serialize() const {
        json manifest;
        manifest["format"] = "coqmoe-archive";
        manifest["version"] = kArchiveVersion;
        manifest["kind"] = kind_;
        manifest["meta"] = meta_;
        json dir = json::array();
        for (const auto& [name, info] : order_) {
            dir.push_back({{"name", name},
                           {"dtype", dtype_name(info.dtype)},
                           {"shape", info.shape},
                           {"offset", info.offset},
                           {"bytes", info.bytes}});
        }
        manifest["tensors"] = std::move(dir);
        manifest["blob_bytes"] = blob_.size();
        manifest["checksum"] = "fnv1a64:" + hex64(fnv1a64(blob_));
        const std::string text = manifest.dump(2) + "\n";
        return "COQMOE " + std::to_string(text.size()) + "\n" + text + blob_;
    }

    [[nodiscard]] std::string checksum() const { return "fnv1a64:" + hex64(fnv1a64(blob_)); }

    void write(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
        const std::string s = serialize();
        f.write(s.data(), static_cast<std::streamsize>(s.size()));
        if (!f) throw std::runtime_error("write to '" + path + "' failed");
    }

private:
    void begin(const std::string& name, DType t, std::vector<std::size_t> shape, std::size_t count) {
        for (const auto& e : order_)
            if (e.first == name) throw std::invalid_argument("duplicate tensor '" + name + "'");
        TensorInfo info{t, std::move(shape), blob_.size(), count * dtype_size(t)};
        if (info.count() != count) throw std::invalid_argument("tensor '" + name + "': shape/data size mismatch");
        order_.emplace_back(name, std::move(info));
    }

    std::string kind_;
    json meta_ = json::object();
    std::vector<std::pair<std::string, TensorInfo>> order_;
    std::string blob_;
};

class ArchiveReader {
public:
    static ArchiveReader from_bytes(std::string bytes) {
        ArchiveReader r;
        const auto nl = bytes.find('\n');
        if (nl == std::string::npos || bytes.compare(0, 7, "COQMOE ") != 0) throw FormatError("not a coqmoe archive");
        std::size_t mlen = 0;
        try {
            mlen = std::stoull(bytes.substr(7, nl - 7));
        } catch (const std::exception&) {
            throw FormatError("bad manifest length");
        }
        if (nl + 1 + mlen > bytes.size()) throw FormatError("truncated manifest");
        try {
            r.manifest_ = json::parse(bytes.substr(nl + 1, mlen));
        } catch (const json::exception& e) {
            throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
        }
        r.blob_ = bytes.substr(nl + 1 + mlen);
        try {
            if (r.manifest_.at("format") != "coqmoe-archive") throw FormatError("unexpected format tag");
            if (r.manifest_.at("version").get<int>() != kArchiveVersion) throw FormatError("unsupported version");
            if (r.manifest_.at("blob_bytes").get<std::size_t>() != r.blob_.size()) throw FormatError("blob size mismatch");
            const std::string want = r.manifest_.at("checksum").get<std::string>();
            if (want != "fnv1a64:" + hex64(fnv1a64(r.blob_))) throw FormatError("checksum mismatch: file is corrupt");
            std::vector<std::pair<std::size_t, std::size_t>> spans;
            for (const auto& t : r.manifest_.at("tensors")) {
                TensorInfo info{parse_dtype(t.at("dtype").get<std::string>()),
                                t.at("shape").get<std::vector<std::size_t>>(), t.at("offset").get<std::size_t>(),
                                t.at("bytes").get<std::size_t>()};
                if (info.bytes != info.count() * dtype_size(info.dtype) || info.offset + info.bytes > r.blob_.size())
                    throw FormatError("tensor '" + t.at("name").get<std::string>() + "' out of bounds");
                spans.emplace_back(info.offset, info.bytes);
                r.tensors_.emplace(t.at("name").get<std::string>(), std::move(info));
            }
            std::sort(spans.begin(), spans.end());
            for (std::size_t i = 1; i < spans.size(); ++i)
                if (spans[i - 1].first + spans[i - 1].second > spans[i].first) throw FormatError("overlapping tensors");
        } catch (const json::exception& e) {
            throw FormatError(std::string("malformed manifest: ") + e.what());
        }
        return r;
    }

    static ArchiveReader read(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open '" + path + "'");
        std::ostringstream ss;
        ss << f.rdbuf();
        return from_bytes(ss.str());
    }

    [[nodiscard]] std::string kind() const { return manifest_.at("kind").get<std::string>(); }
    [[nodiscard]] std::string checksum() const { return manifest_.at("checksum").get<std::string>(); }
    [[nodiscard]] const json& meta() const { return manifest_.at("meta"); }
    [[nodiscard]] bool has(const std::string& name) const { return tensors_.count(name) != 0; }

    [[nodiscard]] const TensorInfo& info(const std::string& name) const {
        const auto it = tensors_.find(name);
        if (it == tensors_.end()) throw FormatError("missing tensor '" + name + "'");
        return it->second;
    }

    [[nodiscard]] std::vector<double> reals(const std::string& name) const {
        const TensorInfo& t = info(name);
        std::vector<double> out(t.count());
        const char* p = blob_.data() + t.offset;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (t.dtype == DType::f32) out[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
            else if (t.dtype == DType::f64) out[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i));
            else throw FormatError("tensor '" + name + "' is not real-valued");
        }
        return out;
    }

    [[nodiscard]] std::vector<std::int64_t> ints(const std::string& name) const {
        const TensorInfo& t = info(name);
        std::vector<std::int64_t> out(t.count());
        const char* p = blob_.data() + t.offset;
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (t.dtype == DType::i8) out[i] = static_cast<std::int8_t>(p[i]);
            else if (t.dtype == DType::i32) out[i] = static_cast<std::int32_t>(detail::get_le<std::uint32_t>(p + 4 * i));
            else if (t.dtype == DType::i64) out[i] = static_cast<std::int64_t>(detail::get_le<std::uint64_t>(p + 8 * i));
            else throw FormatError("tensor '" + name + "' is not integer-valued");
        }
        return out;
    }

    [[nodiscard]] Matrix matrix(const std::string& name) const {
        const TensorInfo& t = info(name);
        if (t.shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
        return Matrix(t.shape[0], t.shape[1], reals(name));
    }

    [[nodiscard]] Vector vector(const std::string& name) const {
        if (info(name).shape.size() != 1) throw FormatError("tensor '" + name + "' is not 1-D");
        return reals(name);
    }

    [[nodiscard]] IntMatrix int_matrix(const std::string& name) const {
        const TensorInfo& t = info(name);
        if (t.shape.size() != 2) throw FormatError("tensor '" + name + "' is not 2-D");
        const auto v = ints(name);
        std::vector<std::int32_t> d(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            if (v[i] < INT32_MIN || v[i] > INT32_MAX) throw FormatError("tensor '" + name + "' exceeds int32");
            d[i] = static_cast<std::int32_t>(v[i]);
        }
        return IntMatrix(t.shape[0], t.shape[1], std::move(d));
    }

private:
    json manifest_;
    std::string blob_;
    std::map<std::string, TensorInfo> tensors_;
};

}  // namespace coqmoe
