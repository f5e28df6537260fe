#pragma once

// Independent reference implementations used as test oracles. Everything in
// this header is written against the documented formats and formulas only —
// none of it calls into the library's compute paths, so agreement between the
// two is evidence, not tautology.

#include <cmath>
#include <cstdint>
#include <cstddef>
#include <string>
#include <vector>

#include "coldfuse/dataset.hpp"
#include "coldfuse/matrix.hpp"
#include "coldfuse/model.hpp"

namespace ref {

// FNV-1a 64 rewritten from the published constants, structured differently
// from the library's version on purpose.
inline std::uint64_t fnv1a64(const std::string& s) {
    const std::uint64_t prime = 1099511628211ull;        // 2^40 + 2^8 + 0xb3
    std::uint64_t h = 14695981039346656037ull;           // offset basis
    for (std::size_t i = 0; i < s.size(); ++i) {
        h = (h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(s[i]))) * prime;
    }
    return h;
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

// Elementwise mean of equal-length vectors, plain accumulation order.
inline std::vector<double> elementwise_mean(
    const std::vector<std::vector<double>>& inputs) {
    const std::size_t len = inputs.front().size();
    std::vector<double> out(len, 0.0);
    for (const auto& v : inputs)
        for (std::size_t i = 0; i < len; ++i) out[i] += v[i];
    for (std::size_t i = 0; i < len; ++i)
        out[i] /= static_cast<double>(inputs.size());
    return out;
}

// Mean softmax cross-entropy over a batch, computed directly from the flat
// parameter layout: per hidden layer, weights [out x in] row-major then
// biases [out]; the head is weights [k x f] row-major then biases [k].
inline double loss(const coldfuse::ModelArch& arch, const std::vector<double>& body,
                   const std::vector<double>& head, const coldfuse::Matrix& X,
                   const std::vector<std::int32_t>& y) {
    const std::size_t k = arch.head_dim;
    double total = 0.0;
    for (std::size_t i = 0; i < X.rows; ++i) {
        std::vector<double> h(X.row(i), X.row(i) + X.cols);
        std::size_t off = 0;
        std::size_t in = arch.input_dim;
        for (std::size_t out_dim : arch.hidden_dims) {
            std::vector<double> next(out_dim, 0.0);
            for (std::size_t j = 0; j < out_dim; ++j) {
                double z = 0.0;
                for (std::size_t m = 0; m < in; ++m)
                    z += body[off + j * in + m] * h[m];
                z += body[off + out_dim * in + j];
                next[j] = arch.activation == coldfuse::Activation::Tanh
                              ? std::tanh(z)
                              : (z > 0.0 ? z : 0.0);
            }
            off += out_dim * in + out_dim;
            h = std::move(next);
            in = out_dim;
        }
        const std::size_t f = h.size();
        std::vector<double> z(k, 0.0);
        for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t j = 0; j < f; ++j) z[c] += head[c * f + j] * h[j];
            z[c] += head[k * f + c];
        }
        double zmax = z[0];
        for (std::size_t c = 1; c < k; ++c) zmax = std::max(zmax, z[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < k; ++c) denom += std::exp(z[c] - zmax);
        total += -(z[static_cast<std::size_t>(y[i])] - zmax - std::log(denom));
    }
    return total / static_cast<double>(X.rows);
}

// Plain batch-gradient-descent logistic regression; the oracle for "a linear
// model can fit this dataset".
struct LogisticFit {
    std::vector<double> w;
    double b = 0.0;
    double train_accuracy = 0.0;
};

inline LogisticFit logistic_fit(const coldfuse::TaskDataset& d, int epochs,
                                double lr) {
    LogisticFit fit;
    fit.w.assign(d.input_dim, 0.0);
    const auto& idx = d.train_idx;
    for (int e = 0; e < epochs; ++e) {
        std::vector<double> gw(d.input_dim, 0.0);
        double gb = 0.0;
        for (std::size_t i : idx) {
            const double* x = d.features.row(i);
            double z = fit.b;
            for (std::size_t j = 0; j < d.input_dim; ++j) z += fit.w[j] * x[j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - static_cast<double>(d.labels[i]);
            for (std::size_t j = 0; j < d.input_dim; ++j) gw[j] += err * x[j];
            gb += err;
        }
        const double inv = 1.0 / static_cast<double>(idx.size());
        for (std::size_t j = 0; j < d.input_dim; ++j) fit.w[j] -= lr * gw[j] * inv;
        fit.b -= lr * gb * inv;
    }
    std::size_t correct = 0;
    for (std::size_t i : idx) {
        const double* x = d.features.row(i);
        double z = fit.b;
        for (std::size_t j = 0; j < d.input_dim; ++j) z += fit.w[j] * x[j];
        if ((z > 0.0 ? 1 : 0) == d.labels[i]) ++correct;
    }
    fit.train_accuracy =
        static_cast<double>(correct) / static_cast<double>(idx.size());
    return fit;
}

// Two-class linearly separable dataset in the plane with the given margin:
// no example lies within `margin` of the separating line.
inline coldfuse::TaskDataset separable_2d(std::size_t n_train, std::size_t n_dev,
                                          std::size_t n_test, double margin,
                                          std::uint64_t seed) {
    // Local LCG so this generator shares nothing with the library's RNG.
    std::uint64_t state = seed * 6364136223846793005ull + 1442695040888963407ull;
    auto next_unit = [&]() {
        state = state * 6364136223846793005ull + 1442695040888963407ull;
        return static_cast<double>(state >> 11) * 0x1.0p-53;
    };
    const double wx = 0.6, wy = -0.8, b = 0.25;  // unit-normal line
    coldfuse::TaskDataset d;
    d.task_id = "separable2d";
    d.input_dim = 2;
    d.n_classes = 2;
    const std::size_t n = n_train + n_dev + n_test;
    d.features.resize(n, 2);
    d.labels.resize(n);
    std::size_t filled = 0;
    // Force both classes into the train prefix so splits validate.
    while (filled < n) {
        const double x = next_unit() * 8.0 - 4.0;
        const double y = next_unit() * 8.0 - 4.0;
        const double score = wx * x + wy * y + b;
        if (std::abs(score) < margin) continue;
        if (filled == 0 && score <= 0.0) continue;
        if (filled == 1 && score >= 0.0) continue;
        d.features.at(filled, 0) = x;
        d.features.at(filled, 1) = y;
        d.labels[filled] = score > 0.0 ? 1 : 0;
        ++filled;
    }
    for (std::size_t i = 0; i < n_train; ++i) d.train_idx.push_back(i);
    for (std::size_t i = n_train; i < n_train + n_dev; ++i) d.dev_idx.push_back(i);
    for (std::size_t i = n_train + n_dev; i < n; ++i) d.test_idx.push_back(i);
    d.validate();
    return d;
}

}  // namespace ref
