#pragma once

/// \file checkpoint.hpp
/// \brief Versioned binary parameter container plus JSON sidecar.
///
/// Layout (little-endian): "TGPSCKPT", u32 version, u32 tensor count, then per tensor
/// u32 name length, name bytes, u32 rank, i64 dims[rank], f64 data[size].
/// The sidecar `<path>.json` holds {"version", "kind", "config", "rng", "extra"}.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "tgps/errors.hpp"
#include "tgps/image_io.hpp"
#include "tgps/nn.hpp"
#include "tgps/tensor.hpp"

namespace tgps {

using ag::Var;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'T', 'G', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::string kind;  ///< "stage1" or "stage2"
    nlohmann::json config = nlohmann::json::object();
    std::string rng_state;
    nlohmann::json extra = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;
};

namespace detail {

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (b_.size() - pos_ < n) throw FormatError("checkpoint is truncated");
    }
    std::span<const std::uint8_t> b_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    if (!EVP_Digest(data.data(), data.size(), md, &n, EVP_sha256(), nullptr)) throw Error("sha256 failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < n; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

inline std::string serialize_tensors(const std::map<std::string, Tensor>& tensors) {
    std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape) detail::put<std::int64_t>(out, d);
        out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(double));
    }
    return out;
}

inline std::map<std::string, Tensor> deserialize_tensors(std::span<const std::uint8_t> bytes) {
    detail::Reader r(bytes);
    if (r.bytes(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
        throw FormatError("not a checkpoint file (bad magic)");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto v = r.get<std::int64_t>();
            if (v < 0 || v > (1 << 28)) throw FormatError("tensor '" + name + "' has invalid extent");
            shape.push_back(static_cast<int>(v));
        }
        Tensor t(shape);
        const std::string raw = r.bytes(t.size() * sizeof(double));
        std::memcpy(t.data.data(), raw.data(), raw.size());
        out.emplace(name, std::move(t));
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint tensors");
    return out;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) { return p.string() + ".json"; }

inline std::string sidecar_text(const Checkpoint& c) {
    nlohmann::json j{{"version", kCheckpointVersion}, {"kind", c.kind}, {"config", c.config}, {"rng", c.rng_state},
                     {"extra", c.extra}};
    return j.dump(2) + "\n";
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bin = serialize_tensors(c.tensors);
    write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(bin.data()), bin.size()});
    const std::string side = sidecar_text(c);
    write_file_bytes(sidecar_path(path), {reinterpret_cast<const std::uint8_t*>(side.data()), side.size()});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    Checkpoint c;
    c.tensors = deserialize_tensors(read_file_bytes(path));
    const auto side = read_file_bytes(sidecar_path(path));
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(side.begin(), side.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint sidecar is not valid JSON: " + std::string(e.what()));
    }
    if (j.value("version", 0u) != kCheckpointVersion) throw FormatError("unsupported checkpoint sidecar version");
    c.kind = j.at("kind").get<std::string>();
    c.config = j.at("config");
    c.rng_state = j.value("rng", std::string());
    c.extra = j.value("extra", nlohmann::json::object());
    return c;
}

/// Hash of the sidecar bytes; identifies a trained model.
inline std::string model_version(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(sidecar_path(path));
    return sha256_hex({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
}

inline std::map<std::string, Tensor> snapshot(const nn::ParamSet& ps) {
    std::map<std::string, Tensor> out;
    for (const auto& e : ps.entries()) out.emplace(e.name, e.var.value());
    return out;
}

/// Copies stored tensors into matching parameters. Every parameter with `prefix`
/// must be present with the same shape.
inline void restore(nn::ParamSet& ps, const std::map<std::string, Tensor>& tensors, const std::string& prefix = "") {
    for (const auto& e : ps.entries()) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        auto it = tensors.find(e.name);
        if (it == tensors.end()) throw FormatError("checkpoint lacks parameter '" + e.name + "'");
        if (it->second.shape != e.var.shape())
            throw FormatError("parameter '" + e.name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                              shape_str(e.var.shape()));
        Var v = e.var;
        v.mutable_value() = it->second;
    }
}

inline std::string rng_state(const nn::Rng& rng) {
    std::ostringstream s;
    s << rng;
    return s.str();
}

}  // namespace tgps
