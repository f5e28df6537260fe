#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "coldfuse/family_store.hpp"
#include "coldfuse/task_gen.hpp"
#include "reference.hpp"

namespace cf = coldfuse;
namespace fs = std::filesystem;

namespace {

cf::TaskFamilySpec small_spec() {
    cf::TaskFamilySpec spec;
    spec.n_tasks = 5;
    spec.input_dim = 16;
    spec.shared_rank = 6;
    spec.examples_per_task = 1200;
    spec.seed = 3;
    return spec;
}

double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace

TEST(FamilySpec, Validation) {
    cf::TaskFamilySpec s;
    EXPECT_NO_THROW(s.validate());
    s.shared_rank = 0;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.shared_rank = s.input_dim + 1;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.min_classes = 1;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.max_classes = 1;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.transfer_strength = 1.5;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.label_noise = 1.0;
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
    s = {};
    s.train_frac = 0.9;
    s.dev_frac = 0.1;  // no test share left
    EXPECT_THROW(s.validate(), cf::InvalidSpecError);
}

TEST(Family, DeterministicGeneration) {
    const auto spec = small_spec();
    const auto a = cf::generate_family(spec);
    const auto b = cf::generate_family(spec);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t t = 0; t < a.size(); ++t) {
        EXPECT_EQ(a[t].task_id, b[t].task_id);
        EXPECT_EQ(a[t].features.data, b[t].features.data);
        EXPECT_EQ(a[t].labels, b[t].labels);
        EXPECT_EQ(a[t].train_idx, b[t].train_idx);
    }
    auto spec2 = spec;
    spec2.seed = 4;
    const auto c = cf::generate_family(spec2);
    EXPECT_NE(a[0].features.data, c[0].features.data);
}

TEST(Family, SplitSizesAndCoverage) {
    const auto spec = small_spec();
    for (const auto& t : cf::generate_family(spec)) {
        const std::size_t n = spec.examples_per_task;
        EXPECT_EQ(t.n_examples(), n);
        EXPECT_EQ(t.train_idx.size(),
                  static_cast<std::size_t>(std::floor(0.70 * n)));
        EXPECT_EQ(t.dev_idx.size(),
                  static_cast<std::size_t>(std::floor(0.15 * n)));
        EXPECT_EQ(t.train_idx.size() + t.dev_idx.size() + t.test_idx.size(), n);
        EXPECT_NO_THROW(t.validate());  // disjointness, coverage, labels
        EXPECT_GE(t.n_classes, spec.min_classes);
        EXPECT_LE(t.n_classes, spec.max_classes);
    }
}

TEST(Family, LabelsMatchReadoutArgmaxAtTheNoiseRate) {
    auto spec = small_spec();
    spec.label_noise = 0.1;
    const cf::TaskFamily fam = cf::plan_family(spec);
    const auto tasks = cf::generate_family(spec);
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const auto& d = tasks[t];
        const auto& recipe = fam.recipes[t];
        ASSERT_EQ(recipe.n_classes, d.n_classes);
        std::size_t matches = 0;
        for (std::size_t i = 0; i < d.n_examples(); ++i) {
            std::size_t best = 0;
            double best_s = dot(recipe.readout.row(0), d.features.row(i), d.input_dim);
            for (std::size_t c = 1; c < d.n_classes; ++c) {
                const double s = dot(recipe.readout.row(c), d.features.row(i),
                                     d.input_dim);
                if (s > best_s) {
                    best_s = s;
                    best = c;
                }
            }
            if (static_cast<std::size_t>(d.labels[i]) == best) ++matches;
        }
        // Noisy labels agree with the argmax rule w.p. (1-noise) + noise/k.
        const double p = cf::bayes_accuracy(spec.label_noise, d.n_classes);
        const double n = static_cast<double>(d.n_examples());
        const double sigma = std::sqrt(p * (1.0 - p) * n);
        EXPECT_NEAR(static_cast<double>(matches), p * n, 4.0 * sigma)
            << d.task_id;
    }
}

TEST(Family, SharedBasisIsOrthonormal) {
    const auto spec = small_spec();
    const cf::TaskFamily fam = cf::plan_family(spec);
    ASSERT_EQ(fam.shared_basis.size(), spec.shared_rank);
    for (std::size_t i = 0; i < fam.shared_basis.size(); ++i) {
        for (std::size_t j = i; j < fam.shared_basis.size(); ++j) {
            const double d = dot(fam.shared_basis[i].data(),
                                 fam.shared_basis[j].data(), spec.input_dim);
            EXPECT_NEAR(d, i == j ? 1.0 : 0.0, 1e-9);
        }
    }
}

TEST(Family, TransferStrengthControlsReadoutGeometry) {
    // ts=1: readout rows lie inside the shared subspace.
    auto spec = small_spec();
    spec.transfer_strength = 1.0;
    const cf::TaskFamily inside = cf::plan_family(spec);
    for (const auto& r : inside.recipes) {
        for (std::size_t c = 0; c < r.n_classes; ++c) {
            std::vector<double> row(r.readout.row(c),
                                    r.readout.row(c) + spec.input_dim);
            double proj_sq = 0.0;
            for (const auto& b : inside.shared_basis) {
                const double p = dot(row.data(), b.data(), spec.input_dim);
                proj_sq += p * p;
            }
            EXPECT_NEAR(proj_sq, 1.0, 1e-9);  // unit row, fully in-span
        }
    }
    // ts=0: readout rows are orthogonal to the shared subspace.
    spec.transfer_strength = 0.0;
    const cf::TaskFamily outside = cf::plan_family(spec);
    for (const auto& r : outside.recipes)
        for (std::size_t c = 0; c < r.n_classes; ++c)
            for (const auto& b : outside.shared_basis)
                EXPECT_NEAR(dot(r.readout.row(c), b.data(), spec.input_dim), 0.0,
                            1e-9);
}

TEST(Family, BayesAccuracyFormula) {
    EXPECT_DOUBLE_EQ(cf::bayes_accuracy(0.0, 3), 1.0);
    EXPECT_DOUBLE_EQ(cf::bayes_accuracy(0.05, 2), 0.95 + 0.05 / 2.0);
    EXPECT_DOUBLE_EQ(cf::bayes_accuracy(0.2, 4), 0.8 + 0.2 / 4.0);
}

TEST(Cohort, PropertiesAndDeterminism) {
    const auto a = cf::sample_cohort(12, 4, 9);
    EXPECT_EQ(a, cf::sample_cohort(12, 4, 9));
    EXPECT_EQ(a.size(), 4u);
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    const std::set<std::size_t> distinct(a.begin(), a.end());
    EXPECT_EQ(distinct.size(), 4u);
    for (std::size_t t : a) EXPECT_LT(t, 12u);
    EXPECT_THROW(cf::sample_cohort(3, 4, 1), cf::CohortError);
    EXPECT_THROW(cf::sample_cohort(3, 0, 1), cf::CohortError);
    // Full cohort = every task.
    const auto full = cf::sample_cohort(5, 5, 2);
    EXPECT_EQ(full, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
}

TEST(Cohort, UniformTaskFrequency) {
    const std::size_t n_tasks = 12, k = 4, trials = 6000;
    std::vector<std::size_t> counts(n_tasks, 0);
    for (std::size_t s = 0; s < trials; ++s)
        for (std::size_t t : cf::sample_cohort(n_tasks, k, s)) counts[t]++;
    const double p = static_cast<double>(k) / n_tasks;
    const double expect = p * trials;
    const double sigma = std::sqrt(trials * p * (1.0 - p));
    for (std::size_t t = 0; t < n_tasks; ++t)
        EXPECT_NEAR(static_cast<double>(counts[t]), expect, 4.0 * sigma) << t;
}

TEST(Folds, PartitionProperties) {
    const auto folds = cf::make_folds(12, 3, 5);
    ASSERT_EQ(folds.size(), 3u);
    std::vector<std::size_t> unseen_count(12, 0);
    for (const auto& f : folds) {
        EXPECT_EQ(f.seen.size() + f.unseen.size(), 12u);
        for (std::size_t t : f.unseen) unseen_count[t]++;
        // seen and unseen are disjoint and sorted
        std::set<std::size_t> su(f.seen.begin(), f.seen.end());
        for (std::size_t t : f.unseen) EXPECT_EQ(su.count(t), 0u);
        EXPECT_TRUE(std::is_sorted(f.seen.begin(), f.seen.end()));
        EXPECT_TRUE(std::is_sorted(f.unseen.begin(), f.unseen.end()));
    }
    for (std::size_t t = 0; t < 12; ++t) EXPECT_EQ(unseen_count[t], 1u) << t;
    EXPECT_THROW(cf::make_folds(12, 1, 5), cf::FoldError);
    EXPECT_THROW(cf::make_folds(3, 4, 5), cf::FoldError);
}

TEST(Subsample, DisjointDrawsAndIdentity) {
    const auto tasks = cf::generate_family(small_spec());
    const auto& d = tasks[0];
    const cf::TaskDataset a = cf::subsample(d, 100, 8, 0);
    const cf::TaskDataset b = cf::subsample(d, 100, 8, 1);
    EXPECT_EQ(a.train_idx.size(), 100u);
    std::set<std::size_t> sa(a.train_idx.begin(), a.train_idx.end());
    for (std::size_t i : b.train_idx) EXPECT_EQ(sa.count(i), 0u);
    // dev/test untouched; both draws come from the original train split
    EXPECT_EQ(a.dev_idx, d.dev_idx);
    EXPECT_EQ(a.test_idx, d.test_idx);
    std::set<std::size_t> orig(d.train_idx.begin(), d.train_idx.end());
    for (std::size_t i : a.train_idx) EXPECT_EQ(orig.count(i), 1u);

    const cf::TaskDataset full = cf::subsample(d, d.train_idx.size(), 8, 0);
    EXPECT_EQ(full.train_idx, d.train_idx);  // identity, not a reshuffle

    EXPECT_THROW(cf::subsample(d, d.train_idx.size() + 1, 8), cf::SubsampleError);
    EXPECT_THROW(cf::subsample(d, 500, 8, 2), cf::SubsampleError);  // 3*500 > 840
    // Same seed, same draw: deterministic.
    EXPECT_EQ(cf::subsample(d, 100, 8, 0).train_idx, a.train_idx);
    EXPECT_NE(cf::subsample(d, 100, 9, 0).train_idx, a.train_idx);
}

TEST(Store, DatasetRoundTripIsExact) {
    const auto tasks = cf::generate_family(small_spec());
    const fs::path dir = fs::temp_directory_path() / "cf_store_task";
    fs::remove_all(dir);
    cf::save_dataset(tasks[0], dir.string());
    const cf::TaskDataset back = cf::load_dataset(dir.string());
    EXPECT_EQ(back.task_id, tasks[0].task_id);
    EXPECT_EQ(back.features.data, tasks[0].features.data);  // bit-exact doubles
    EXPECT_EQ(back.labels, tasks[0].labels);
    EXPECT_EQ(back.train_idx, tasks[0].train_idx);
    EXPECT_EQ(back.dev_idx, tasks[0].dev_idx);
    EXPECT_EQ(back.test_idx, tasks[0].test_idx);
    fs::remove_all(dir);
}

TEST(Store, FamilyRoundTripAndCorruptionDetection) {
    const auto tasks = cf::generate_family(small_spec());
    const fs::path dir = fs::temp_directory_path() / "cf_store_family";
    fs::remove_all(dir);
    cf::save_family(dir, tasks);
    const auto back = cf::load_family(dir);
    ASSERT_EQ(back.size(), tasks.size());
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        EXPECT_EQ(back[t].task_id, tasks[t].task_id);
        EXPECT_EQ(back[t].features.data, tasks[t].features.data);
        EXPECT_EQ(back[t].labels, tasks[t].labels);
    }
    // Flip one byte of one feature file: the load must refuse.
    const fs::path victim = dir / tasks[1].task_id / "features.f64";
    {
        std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        char c;
        f.seekg(100);
        f.get(c);
        f.seekp(100);
        f.put(static_cast<char>(c ^ 0x01));
    }
    EXPECT_THROW(cf::load_family(dir), cf::DataError);
    fs::remove_all(dir);
    // Missing manifest: the message tells the user to generate first.
    try {
        cf::load_family(dir);
        FAIL() << "expected DataError";
    } catch (const cf::DataError& e) {
        EXPECT_NE(std::string(e.what()).find("generate"), std::string::npos);
    }
}

TEST(Store, FamilyHashIsReproducibleFromFileHashes) {
    const auto tasks = cf::generate_family(small_spec());
    const fs::path dir = fs::temp_directory_path() / "cf_store_hash";
    fs::remove_all(dir);
    cf::save_family(dir, tasks);
    std::ifstream mf(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    // Rehash every listed file from disk and recombine.
    std::map<std::string, std::string> files;
    for (const auto& [rel, h] : manifest.at("files").items()) {
        EXPECT_EQ(cf::hash_file(dir / rel), h.get<std::string>()) << rel;
        files[rel] = h.get<std::string>();
    }
    EXPECT_EQ(cf::family_hash_of(files),
              manifest.at("family_hash").get<std::string>());
    fs::remove_all(dir);
}
