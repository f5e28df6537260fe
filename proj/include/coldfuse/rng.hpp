#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace coldfuse {

// FNV-1a over bytes. Used for seed derivation from strings and for content
// hashes (see hash_hex below).
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and any number of
// tags. Deterministic and order-sensitive.
inline std::uint64_t mix_seed(std::uint64_t a) { return splitmix64(a); }

template <class... Rest>
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, Rest... rest) {
    return mix_seed(splitmix64(a) ^ b, rest...);
}

// Stream tags so distinct uses of the same user seed never collide.
namespace salt {
inline constexpr std::uint64_t init = fnv1a64("init");
inline constexpr std::uint64_t train = fnv1a64("train");
inline constexpr std::uint64_t cohort = fnv1a64("cohort");
inline constexpr std::uint64_t fold = fnv1a64("fold");
inline constexpr std::uint64_t family = fnv1a64("family");
inline constexpr std::uint64_t task = fnv1a64("task");
inline constexpr std::uint64_t subsample = fnv1a64("subsample");
inline constexpr std::uint64_t eval = fnv1a64("eval");
inline constexpr std::uint64_t contributor = fnv1a64("contributor");
inline constexpr std::uint64_t shard = fnv1a64("shard");
}  // namespace salt

// Deterministic RNG. The engine is std::mt19937_64, whose output sequence
// is pinned by the standard; the distributions below are hand-rolled so
// streams are reproducible across standard library implementations.
class DetRng {
public:
    explicit DetRng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. Each call consumes two engine draws.
    double normal() {
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Uniform index in [0, n). Modulo bias is below 1e-18 for the n used
    // here (n << 2^32).
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(engine_() % n);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace coldfuse
