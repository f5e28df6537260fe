#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/errors.hpp"
#include "coldfuse/matrix.hpp"
#include "coldfuse/rng.hpp"

namespace coldfuse {

// Labeled examples for one task with disjoint train/dev/test splits.
struct TaskDataset {
    std::string task_id;
    std::size_t input_dim = 0;
    std::size_t n_classes = 0;
    Matrix features;  // n_examples x input_dim
    std::vector<std::int32_t> labels;
    std::vector<std::size_t> train_idx;
    std::vector<std::size_t> dev_idx;
    std::vector<std::size_t> test_idx;

    std::size_t n_examples() const { return features.rows; }

    void validate() const {
        if (features.cols != input_dim)
            throw ShapeError(task_id + ": feature width mismatch");
        if (labels.size() != features.rows)
            throw ShapeError(task_id + ": label count mismatch");
        if (n_classes < 1) throw DataError(task_id + ": n_classes < 1");
        std::vector<std::uint8_t> seen(n_examples(), 0);
        auto mark = [&](const std::vector<std::size_t>& idx) {
            for (std::size_t i : idx) {
                if (i >= n_examples())
                    throw DataError(task_id + ": split index out of range");
                if (seen[i]) throw DataError(task_id + ": overlapping splits");
                seen[i] = 1;
            }
        };
        mark(train_idx);
        mark(dev_idx);
        mark(test_idx);
        for (std::uint8_t s : seen)
            if (!s) throw DataError(task_id + ": splits do not cover all examples");
        for (std::int32_t y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
                throw DataError(task_id + ": label out of range");
        std::vector<std::uint8_t> in_train(n_classes, 0);
        for (std::size_t i : train_idx) in_train[static_cast<std::size_t>(labels[i])] = 1;
        for (std::size_t c = 0; c < n_classes; ++c)
            if (!in_train[c])
                throw DataError(task_id + ": class " + std::to_string(c) +
                                " missing from train split");
    }
};

// Reduces the train split to n examples; dev/test untouched. draw_index
// selects successive disjoint slices of the same seeded permutation, so
// draws 0,1,2,... never overlap.
inline TaskDataset subsample(const TaskDataset& data, std::size_t n,
                             std::uint64_t seed, std::size_t draw_index = 0) {
    const std::size_t total = data.train_idx.size();
    if (n > total)
        throw SubsampleError(data.task_id + ": subsample of " + std::to_string(n) +
                             " from train split of " + std::to_string(total));
    if (n == total && draw_index == 0) return data;
    if ((draw_index + 1) * n > total)
        throw SubsampleError(data.task_id + ": draw " + std::to_string(draw_index) +
                             " of size " + std::to_string(n) +
                             " exceeds train split of " + std::to_string(total));
    std::vector<std::size_t> perm = data.train_idx;
    DetRng rng(mix_seed(seed, salt::subsample, fnv1a64(data.task_id)));
    rng.shuffle(perm);
    TaskDataset out = data;
    out.train_idx.assign(perm.begin() + static_cast<std::ptrdiff_t>(draw_index * n),
                         perm.begin() + static_cast<std::ptrdiff_t>(draw_index * n + n));
    return out;
}

// --- on-disk format ---------------------------------------------------------
// One directory per task: meta.json (id, dims, splits), features.f64 (raw
// little-endian float64, row-major), labels.i32 (raw little-endian int32).

inline void save_dataset(const TaskDataset& data, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json meta;
    meta["task_id"] = data.task_id;
    meta["input_dim"] = data.input_dim;
    meta["n_classes"] = data.n_classes;
    meta["n_examples"] = data.n_examples();
    meta["splits"] = {{"train", data.train_idx},
                      {"dev", data.dev_idx},
                      {"test", data.test_idx}};
    {
        std::ofstream f(dir + "/meta.json", std::ios::trunc);
        if (!f) throw DataError("cannot write " + dir + "/meta.json");
        f << meta.dump(2) << "\n";
    }
    {
        std::ofstream f(dir + "/features.f64", std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + dir + "/features.f64");
        f.write(reinterpret_cast<const char*>(data.features.data.data()),
                static_cast<std::streamsize>(data.features.data.size() * sizeof(double)));
    }
    {
        std::ofstream f(dir + "/labels.i32", std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + dir + "/labels.i32");
        f.write(reinterpret_cast<const char*>(data.labels.data()),
                static_cast<std::streamsize>(data.labels.size() * sizeof(std::int32_t)));
    }
}

inline TaskDataset load_dataset(const std::string& dir) {
    std::ifstream mf(dir + "/meta.json");
    if (!mf) throw DataError("cannot open " + dir + "/meta.json");
    nlohmann::json meta;
    try {
        mf >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir + "/meta.json: " + e.what());
    }

    TaskDataset data;
    try {
        data.task_id = meta.at("task_id").get<std::string>();
        data.input_dim = meta.at("input_dim").get<std::size_t>();
        data.n_classes = meta.at("n_classes").get<std::size_t>();
        const auto n = meta.at("n_examples").get<std::size_t>();
        data.features.resize(n, data.input_dim);
        data.train_idx = meta.at("splits").at("train").get<std::vector<std::size_t>>();
        data.dev_idx = meta.at("splits").at("dev").get<std::vector<std::size_t>>();
        data.test_idx = meta.at("splits").at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir + "/meta.json: " + e.what());
    }

    {
        std::ifstream f(dir + "/features.f64", std::ios::binary);
        if (!f) throw DataError("cannot open " + dir + "/features.f64");
        f.read(reinterpret_cast<char*>(data.features.data.data()),
               static_cast<std::streamsize>(data.features.data.size() * sizeof(double)));
        if (f.gcount() !=
            static_cast<std::streamsize>(data.features.data.size() * sizeof(double)))
            throw DataError(dir + "/features.f64 truncated");
    }
    {
        data.labels.resize(data.features.rows);
        std::ifstream f(dir + "/labels.i32", std::ios::binary);
        if (!f) throw DataError("cannot open " + dir + "/labels.i32");
        f.read(reinterpret_cast<char*>(data.labels.data()),
               static_cast<std::streamsize>(data.labels.size() * sizeof(std::int32_t)));
        if (f.gcount() !=
            static_cast<std::streamsize>(data.labels.size() * sizeof(std::int32_t)))
            throw DataError(dir + "/labels.i32 truncated");
    }
    data.validate();
    return data;
}

}  // namespace coldfuse
