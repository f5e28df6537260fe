#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "coldfuse/errors.hpp"
#include "coldfuse/param_vector.hpp"

namespace coldfuse {

namespace detail {

// Total order on finite doubles: numeric order with -0.0 strictly before
// +0.0, so sorting is insensitive to the input permutation even at zeros.
inline bool total_less(double a, double b) {
    if (a < b) return true;
    if (b < a) return false;
    return std::signbit(a) && !std::signbit(b);
}

inline bool same_bits(double a, double b) {
    return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

}  // namespace detail

// Coordinate-wise mean of parameter vectors.
//
// Guarantees, all load-bearing for callers:
//  * order-independent bit-for-bit: addends are put in a total order per
//    coordinate before summation, so any permutation of `inputs` yields
//    identical bytes;
//  * identity: if all inputs agree bitwise at a coordinate the result is that
//    exact value (no rounding through sum/divide);
//  * convexity: each output coordinate is clamped into [min, max] of the
//    addends, so the mean can never escape their range;
//  * finite in, finite out: non-finite contributions are rejected.
inline ParameterVector fuse(const std::vector<ParameterVector>& inputs) {
    if (inputs.empty()) throw FusionError("fuse of zero contributions");
    const Manifest& m = inputs.front().manifest();
    for (const auto& pv : inputs) {
        if (!(pv.manifest() == m))
            throw FusionError("contributions disagree on parameter manifest");
        if (!pv.all_finite())
            throw FusionError("contribution contains a non-finite value");
    }
    const std::size_t n = inputs.size();
    if (n == 1) return inputs.front();

    const std::size_t len = inputs.front().values().size();
    std::vector<double> out(len);
    std::vector<double> col(n);
    const double invn = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t c = 0; c < n; ++c) col[c] = inputs[c].values()[i];
        std::sort(col.begin(), col.end(), detail::total_less);
        if (detail::same_bits(col.front(), col.back())) {
            out[i] = col.front();  // all equal: keep the exact value
            continue;
        }
        double s = 0.0;
        for (double v : col) s += v;
        out[i] = std::clamp(s * invn, col.front(), col.back());
    }
    return ParameterVector(m, std::move(out));
}

}  // namespace coldfuse
