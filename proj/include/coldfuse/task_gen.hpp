#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "coldfuse/dataset.hpp"
#include "coldfuse/errors.hpp"
#include "coldfuse/matrix.hpp"
#include "coldfuse/rng.hpp"

namespace coldfuse {

// A family of related classification tasks. Each task's readout directions
// are a mix of a family-wide shared subspace (rank shared_rank) and a
// task-private subspace orthogonal to it; transfer_strength is the shared
// weight in that mix. transfer_strength 1 makes tasks maximally related,
// 0 makes their signal directions mutually orthogonal to the shared part.
struct TaskFamilySpec {
    std::size_t n_tasks = 12;
    std::size_t input_dim = 32;
    std::size_t shared_rank = 8;
    std::size_t min_classes = 2;
    std::size_t max_classes = 4;
    std::size_t examples_per_task = 4000;
    double transfer_strength = 0.7;
    double label_noise = 0.05;
    double train_frac = 0.70;
    double dev_frac = 0.15;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_tasks == 0) throw InvalidSpecError("n_tasks must be positive");
        if (input_dim == 0) throw InvalidSpecError("input_dim must be positive");
        if (shared_rank == 0 || shared_rank > input_dim)
            throw InvalidSpecError("shared_rank must be in [1, input_dim]");
        if (min_classes < 2) throw InvalidSpecError("min_classes must be >= 2");
        if (max_classes < min_classes)
            throw InvalidSpecError("max_classes must be >= min_classes");
        if (examples_per_task < 10)
            throw InvalidSpecError("examples_per_task too small to split");
        if (transfer_strength < 0.0 || transfer_strength > 1.0)
            throw InvalidSpecError("transfer_strength must be in [0, 1]");
        if (label_noise < 0.0 || label_noise >= 1.0)
            throw InvalidSpecError("label_noise must be in [0, 1)");
        if (train_frac <= 0.0 || dev_frac < 0.0 ||
            train_frac + dev_frac >= 1.0)
            throw InvalidSpecError("split fractions must leave a test share");
        // Need room for shared + per-task private directions to coexist.
        if (max_classes > input_dim)
            throw InvalidSpecError("max_classes exceeds input_dim");
    }
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

// v -= sum_b (v.b) b  for orthonormal rows b in `basis`
inline void project_out(std::vector<double>& v,
                        const std::vector<std::vector<double>>& basis) {
    for (const auto& b : basis) {
        const double c = dot(v, b);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
}

// Draws a unit vector, Gram-Schmidt-orthogonalized against `against`.
// Retries on near-zero residuals (degenerate draws).
inline std::vector<double> random_unit_orthogonal(
    DetRng& rng, std::size_t dim, const std::vector<std::vector<double>>& against) {
    for (int attempt = 0; attempt < 64; ++attempt) {
        std::vector<double> v(dim);
        for (double& x : v) x = rng.normal();
        project_out(v, against);
        const double n = norm(v);
        if (n > 1e-8) {
            for (double& x : v) x /= n;
            return v;
        }
    }
    throw DataError("could not draw an orthogonal direction (dim too small?)");
}

}  // namespace detail

// One linear readout row per class: unit mix of a shared-subspace direction
// and a task-private direction.
struct TaskRecipe {
    std::string task_id;
    std::size_t n_classes = 0;
    Matrix readout;  // n_classes x input_dim
};

struct TaskFamily {
    TaskFamilySpec spec;
    std::vector<std::vector<double>> shared_basis;  // shared_rank orthonormal rows
    std::vector<TaskRecipe> recipes;
};

namespace detail {

// Orthonormal shared subspace, identical for every task in the family.
inline std::vector<std::vector<double>> make_shared_basis(const TaskFamilySpec& spec) {
    DetRng rng(mix_seed(spec.seed, salt::family));
    std::vector<std::vector<double>> basis;
    basis.reserve(spec.shared_rank);
    for (std::size_t r = 0; r < spec.shared_rank; ++r)
        basis.push_back(random_unit_orthogonal(rng, spec.input_dim, basis));
    return basis;
}

inline TaskRecipe make_recipe(const TaskFamilySpec& spec,
                              const std::vector<std::vector<double>>& shared,
                              std::size_t t) {
    DetRng rng(mix_seed(spec.seed, salt::task, t));
    TaskRecipe r;
    r.task_id = "task" + std::string(t < 10 ? "0" : "") + std::to_string(t);
    r.n_classes =
        spec.min_classes + rng.index(spec.max_classes - spec.min_classes + 1);
    r.readout.resize(r.n_classes, spec.input_dim);
    const double ts = spec.transfer_strength;
    std::vector<std::vector<double>> private_rows;  // keep class rows distinct
    for (std::size_t c = 0; c < r.n_classes; ++c) {
        // Shared component: random unit vector inside span(shared).
        std::vector<double> s(spec.input_dim, 0.0);
        for (const auto& b : shared) {
            const double w = rng.normal();
            for (std::size_t i = 0; i < spec.input_dim; ++i) s[i] += w * b[i];
        }
        const double sn = norm(s);
        if (sn > 1e-12)
            for (double& x : s) x /= sn;
        // Private component: orthogonal to the shared subspace and to this
        // task's previous private rows.
        auto against = shared;
        for (const auto& p : private_rows) against.push_back(p);
        const auto p = random_unit_orthogonal(rng, spec.input_dim, against);
        private_rows.push_back(p);

        double* row = r.readout.row(c);
        for (std::size_t i = 0; i < spec.input_dim; ++i)
            row[i] = ts * s[i] + (1.0 - ts) * p[i];
        const double rn = norm(std::vector<double>(row, row + spec.input_dim));
        if (rn < 1e-12) throw DataError("degenerate readout row");
        for (std::size_t i = 0; i < spec.input_dim; ++i) row[i] /= rn;
    }
    return r;
}

}  // namespace detail

// The family's latent structure (bases + per-task readouts), independent of
// any sampled examples.
inline TaskFamily plan_family(const TaskFamilySpec& spec) {
    spec.validate();
    TaskFamily fam;
    fam.spec = spec;
    fam.shared_basis = detail::make_shared_basis(spec);
    for (std::size_t t = 0; t < spec.n_tasks; ++t)
        fam.recipes.push_back(detail::make_recipe(spec, fam.shared_basis, t));
    return fam;
}

namespace detail {

// Samples one dataset realization for a recipe. Features are i.i.d. standard
// normal; the clean label is argmax over readout scores; with probability
// label_noise the label is replaced by a uniformly random class.
inline TaskDataset sample_task(const TaskFamilySpec& spec, const TaskRecipe& recipe,
                               std::uint64_t draw_seed) {
    DetRng rng(draw_seed);
    TaskDataset d;
    d.task_id = recipe.task_id;
    d.input_dim = spec.input_dim;
    d.n_classes = recipe.n_classes;
    const std::size_t n = spec.examples_per_task;
    d.features.resize(n, spec.input_dim);
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double* x = d.features.row(i);
        for (std::size_t j = 0; j < spec.input_dim; ++j) x[j] = rng.normal();
        std::size_t best = 0;
        double best_score = dot(std::vector<double>(recipe.readout.row(0),
                                                    recipe.readout.row(0) + spec.input_dim),
                                std::vector<double>(x, x + spec.input_dim));
        for (std::size_t c = 1; c < recipe.n_classes; ++c) {
            double s = 0.0;
            const double* wrow = recipe.readout.row(c);
            for (std::size_t j = 0; j < spec.input_dim; ++j) s += wrow[j] * x[j];
            if (s > best_score) {
                best_score = s;
                best = c;
            }
        }
        std::size_t label = best;
        if (spec.label_noise > 0.0 && rng.uniform() < spec.label_noise)
            label = rng.index(recipe.n_classes);
        d.labels[i] = static_cast<std::int32_t>(label);
    }
    // Contiguous splits over a shuffled order.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const auto n_train = static_cast<std::size_t>(
        std::floor(spec.train_frac * static_cast<double>(n)));
    const auto n_dev = static_cast<std::size_t>(
        std::floor(spec.dev_frac * static_cast<double>(n)));
    d.train_idx.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    d.dev_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                     order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev));
    d.test_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_dev), order.end());
    return d;
}

inline bool train_covers_all_classes(const TaskDataset& d) {
    std::vector<bool> seen(d.n_classes, false);
    for (std::size_t i : d.train_idx) seen[static_cast<std::size_t>(d.labels[i])] = true;
    return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

}  // namespace detail

// Deterministically generates all tasks of a family. If a draw leaves some
// class absent from a task's train split, the draw seed for that task is
// bumped (bounded retries) so downstream training never sees a class-starved
// train split.
inline std::vector<TaskDataset> generate_family(const TaskFamilySpec& spec) {
    const TaskFamily fam = plan_family(spec);
    std::vector<TaskDataset> out;
    out.reserve(spec.n_tasks);
    for (std::size_t t = 0; t < spec.n_tasks; ++t) {
        TaskDataset d;
        bool ok = false;
        for (std::uint64_t retry = 0; retry < 8; ++retry) {
            d = detail::sample_task(spec, fam.recipes[t],
                                    mix_seed(spec.seed, salt::task, t, retry));
            if (detail::train_covers_all_classes(d)) {
                ok = true;
                break;
            }
        }
        if (!ok)
            throw DataError(fam.recipes[t].task_id +
                            ": could not realize all classes in the train split");
        d.validate();
        out.push_back(std::move(d));
    }
    return out;
}

// Chance accuracy for a task after label noising: a noisy label matches the
// deterministic argmax rule with probability (1-noise) + noise/k.
inline double bayes_accuracy(double label_noise, std::size_t n_classes) {
    return (1.0 - label_noise) +
           label_noise / static_cast<double>(n_classes);
}

// --- contributor cohorts and folds ------------------------------------------

// Distinct task indices forming one iteration's cohort, sampled without
// replacement.
inline std::vector<std::size_t> sample_cohort(std::size_t n_tasks,
                                              std::size_t cohort_size,
                                              std::uint64_t seed) {
    if (cohort_size == 0) throw CohortError("cohort_size must be positive");
    if (cohort_size > n_tasks)
        throw CohortError("cohort_size " + std::to_string(cohort_size) +
                          " exceeds task count " + std::to_string(n_tasks));
    std::vector<std::size_t> pool(n_tasks);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    DetRng rng(mix_seed(seed, salt::cohort));
    rng.shuffle(pool);
    pool.resize(cohort_size);
    std::sort(pool.begin(), pool.end());
    return pool;
}

// Cross-validation folds over task indices: every task is held out (unseen)
// in exactly one fold; the rest of the tasks are that fold's seen set.
struct Fold {
    std::vector<std::size_t> seen;
    std::vector<std::size_t> unseen;
};

inline std::vector<Fold> make_folds(std::size_t n_tasks, std::size_t n_folds,
                                    std::uint64_t seed) {
    if (n_folds < 2) throw FoldError("need at least 2 folds");
    if (n_folds > n_tasks)
        throw FoldError("more folds than tasks");
    std::vector<std::size_t> order(n_tasks);
    std::iota(order.begin(), order.end(), std::size_t{0});
    DetRng rng(mix_seed(seed, salt::fold));
    rng.shuffle(order);
    std::vector<Fold> folds(n_folds);
    for (std::size_t i = 0; i < n_tasks; ++i)
        folds[i % n_folds].unseen.push_back(order[i]);
    for (auto& f : folds) {
        std::sort(f.unseen.begin(), f.unseen.end());
        for (std::size_t t = 0; t < n_tasks; ++t)
            if (!std::binary_search(f.unseen.begin(), f.unseen.end(), t))
                f.seen.push_back(t);
    }
    return folds;
}

}  // namespace coldfuse
