#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/errors.hpp"
#include "coldfuse/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace coldfuse {

struct TensorSpec {
    std::string name;
    std::vector<std::size_t> shape;

    std::size_t elements() const {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return n;
    }

    bool operator==(const TensorSpec&) const = default;
};

using Manifest = std::vector<TensorSpec>;

inline std::size_t manifest_elements(const Manifest& m) {
    std::size_t n = 0;
    for (const auto& t : m) n += t.elements();
    return n;
}

// Flat ordered array of model parameters plus the manifest describing how
// the array decomposes into named tensors. Immutable after construction;
// two vectors are fusable iff their manifests are identical.
class ParameterVector {
public:
    ParameterVector() = default;

    ParameterVector(Manifest manifest, std::vector<double> values)
        : manifest_(std::move(manifest)), values_(std::move(values)) {
        if (manifest_elements(manifest_) != values_.size()) {
            throw ShapeError("parameter vector length " +
                             std::to_string(values_.size()) +
                             " does not match manifest element count " +
                             std::to_string(manifest_elements(manifest_)));
        }
        offsets_.reserve(manifest_.size());
        std::size_t off = 0;
        for (const auto& t : manifest_) {
            offsets_.push_back(off);
            off += t.elements();
        }
    }

    const Manifest& manifest() const { return manifest_; }
    const std::vector<double>& values() const { return values_; }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    std::size_t tensor_offset(std::size_t i) const { return offsets_[i]; }

    bool fusable_with(const ParameterVector& other) const {
        return manifest_ == other.manifest_;
    }

    bool operator==(const ParameterVector& other) const {
        if (manifest_ != other.manifest_) return false;
        if (values_.size() != other.values_.size()) return false;
        // bit-level comparison so -0.0 vs 0.0 and NaN payloads are not
        // conflated by operator== on double
        return std::memcmp(values_.data(), other.values_.data(),
                           values_.size() * sizeof(double)) == 0;
    }

    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    Manifest manifest_;
    std::vector<double> values_;
    std::vector<std::size_t> offsets_;
};

// --- binary format ----------------------------------------------------------
// "CFPV" | version 0x01 | u32le manifest JSON length | manifest JSON |
// raw little-endian float64 values in manifest order.
// The manifest JSON is a canonical array of [name, shape] pairs.

namespace detail {

inline void put_u32le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) |
           (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) |
           (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline constexpr char kPvMagic[4] = {'C', 'F', 'P', 'V'};
inline constexpr std::uint8_t kPvVersion = 0x01;

inline std::string manifest_to_json(const Manifest& m) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& t : m) {
        j.push_back(nlohmann::json::array({t.name, t.shape}));
    }
    return j.dump();
}

inline Manifest manifest_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw SerializationError(std::string("bad manifest JSON: ") + e.what());
    }
    if (!j.is_array()) throw SerializationError("manifest JSON is not an array");
    Manifest m;
    for (const auto& entry : j) {
        if (!entry.is_array() || entry.size() != 2 || !entry[0].is_string() ||
            !entry[1].is_array()) {
            throw SerializationError("bad manifest entry");
        }
        TensorSpec t;
        t.name = entry[0].get<std::string>();
        for (const auto& d : entry[1]) {
            if (!d.is_number_unsigned())
                throw SerializationError("bad manifest shape entry");
            t.shape.push_back(d.get<std::size_t>());
        }
        m.push_back(std::move(t));
    }
    return m;
}

// Emitted parameters are guaranteed NaN-free: serialization refuses any
// non-finite value.
inline std::vector<std::uint8_t> serialize(const ParameterVector& pv) {
    if (!pv.all_finite())
        throw SerializationError("refusing to serialize non-finite parameters");
    const std::string mjson = manifest_to_json(pv.manifest());
    std::vector<std::uint8_t> out;
    out.reserve(4 + 1 + 4 + mjson.size() + pv.size() * sizeof(double));
    out.insert(out.end(), kPvMagic, kPvMagic + 4);
    out.push_back(kPvVersion);
    detail::put_u32le(out, static_cast<std::uint32_t>(mjson.size()));
    out.insert(out.end(), mjson.begin(), mjson.end());
    const std::size_t payload_off = out.size();
    out.resize(payload_off + pv.size() * sizeof(double));
    std::memcpy(out.data() + payload_off, pv.values().data(),
                pv.size() * sizeof(double));
    return out;
}

inline ParameterVector deserialize(const std::uint8_t* data, std::size_t len) {
    if (len < 9) throw SerializationError("parameter vector truncated");
    if (std::memcmp(data, kPvMagic, 4) != 0)
        throw SerializationError("bad parameter vector magic");
    if (data[4] != kPvVersion)
        throw SerializationError("unsupported parameter vector version");
    const std::uint32_t mlen = detail::get_u32le(data + 5);
    if (len < 9 + static_cast<std::size_t>(mlen))
        throw SerializationError("parameter vector manifest truncated");
    Manifest m = manifest_from_json(
        std::string(reinterpret_cast<const char*>(data + 9), mlen));
    const std::size_t n = manifest_elements(m);
    const std::size_t vals_off = 9 + mlen;
    if (len != vals_off + n * sizeof(double))
        throw SerializationError("parameter vector value payload has " +
                                 std::to_string(len - vals_off) +
                                 " bytes, expected " +
                                 std::to_string(n * sizeof(double)));
    std::vector<double> values(n);
    std::memcpy(values.data(), data + vals_off, n * sizeof(double));
    ParameterVector pv(std::move(m), std::move(values));
    if (!pv.all_finite())
        throw SerializationError("deserialized parameters contain non-finite values");
    return pv;
}

inline ParameterVector deserialize(const std::vector<std::uint8_t>& bytes) {
    return deserialize(bytes.data(), bytes.size());
}

// Content hash of the serialized form, as a 16-character hex string.
inline std::string pv_hash(const ParameterVector& pv) {
    const auto bytes = serialize(pv);
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline void save_pv(const ParameterVector& pv, const std::string& path) {
    const auto bytes = serialize(pv);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("short write to " + path);
}

inline ParameterVector load_pv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

}  // namespace coldfuse
