#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "coldfuse/dataset.hpp"
#include "coldfuse/errors.hpp"
#include "coldfuse/model.hpp"
#include "coldfuse/param_vector.hpp"
#include "coldfuse/protocol.hpp"

namespace coldfuse {

struct TaskEval {
    std::string task_id;
    double accuracy = 0.0;
};

namespace detail {

// Runs `fn` for every task, collecting failures so one bad task never stops
// its siblings; if anything failed, reports all failures at once.
template <class Fn>
std::vector<TaskEval> eval_each(const std::vector<TaskDataset>& tasks, Fn&& fn) {
    std::vector<TaskEval> out;
    std::string failures;
    for (const auto& t : tasks) {
        try {
            out.push_back(TaskEval{t.task_id, fn(t)});
        } catch (const Error& e) {
            failures += (failures.empty() ? "" : "; ") + t.task_id + ": " + e.what();
        }
    }
    if (!failures.empty()) throw DataError("evaluation failed: " + failures);
    return out;
}

}  // namespace detail

// Base-model quality: finetune the whole model (fresh zero head) on each
// task independently, report test accuracy. `base` is never modified.
inline std::vector<TaskEval> eval_base_model(const ParameterVector& base,
                                             const ModelArch& arch,
                                             const std::vector<TaskDataset>& tasks,
                                             const TrainConfig& cfg) {
    if (base.manifest() != arch.body_manifest())
        throw ShapeError("base manifest does not match the architecture");
    return detail::eval_each(tasks, [&](const TaskDataset& t) {
        const ModelArch a = arch.with_head(t.n_classes);
        const Model start{a, base, zero_head(a)};
        const Model tuned = finetune(start, t, cfg);
        return test_accuracy(arch, tuned.body, tuned.head, t);
    });
}

// Single-model quality: train only a linear head on the frozen base (linear
// probing), report test accuracy. `base` is bit-unchanged.
inline std::vector<TaskEval> eval_frozen(const ParameterVector& base,
                                         const ModelArch& arch,
                                         const std::vector<TaskDataset>& tasks,
                                         const TrainConfig& cfg) {
    if (base.manifest() != arch.body_manifest())
        throw ShapeError("base manifest does not match the architecture");
    return detail::eval_each(tasks, [&](const TaskDataset& t) {
        const ProbeResult probe = linear_probe(base, arch, t, cfg);
        return test_accuracy(arch, base, probe.head, t);
    });
}

// Joint multitask baseline: one shared body, one dedicated head per task,
// batches drawn round-robin across tasks. Each task consumes up to
// cfg.max_examples of its own data, so with a single task this degenerates
// to plain finetuning (bit-equal given the same config). Returns the body.
inline ParameterVector baseline_multitask(const std::vector<TaskDataset>& tasks,
                                          const ModelArch& arch,
                                          const TrainConfig& cfg) {
    if (tasks.empty()) throw DataError("multitask baseline over zero tasks");
    cfg.validate();
    arch.validate();
    for (const auto& t : tasks) {
        if (t.input_dim != arch.input_dim)
            throw ShapeError(t.task_id + ": width does not match arch");
        if (t.train_idx.empty()) throw DataError(t.task_id + ": empty train split");
    }
    // The per-step decay schedule spans every task's steps combined.
    const std::size_t steps_per_task =
        (cfg.max_examples + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.learning_rate -
            cfg.lr_decay * static_cast<double>(steps_per_task * tasks.size()) <
        0.0)
        throw ConfigError("lr_decay drives the learning rate negative over "
                          "the joint training budget");

    std::vector<double> body = init_body(arch, cfg.seed).values();
    const std::size_t n = tasks.size();
    std::vector<std::vector<double>> heads(n);
    std::vector<Backprop> bps;
    std::vector<detail::BatchStream> streams;
    std::vector<detail::EarlyStopper> stoppers;
    std::vector<std::size_t> seen(n, 0);
    std::vector<bool> done(n, false);
    bps.reserve(n);
    streams.reserve(n);
    stoppers.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
        const ModelArch a = arch.with_head(tasks[t].n_classes);
        heads[t].assign(a.head_size(), 0.0);
        bps.emplace_back(a);
        // Stream slot t: slot 0 matches the stream plain finetuning uses.
        streams.emplace_back(tasks[t].train_idx, cfg.batch_size,
                             detail::train_stream_seed(cfg, t));
        stoppers.emplace_back(cfg, !tasks[t].dev_idx.empty());
        if (stoppers[t].enabled())
            stoppers[t].prime(bps[t].accuracy(body.data(), heads[t].data(),
                                              tasks[t], tasks[t].dev_idx));
        done[t] = cfg.max_examples == 0;
    }

    Matrix X;
    std::vector<std::int32_t> y;
    std::vector<double> gbody, ghead;
    std::size_t step = 0;
    while (std::any_of(done.begin(), done.end(), [](bool d) { return !d; })) {
        for (std::size_t t = 0; t < n; ++t) {
            if (done[t]) continue;
            const auto batch = streams[t].next(cfg.max_examples - seen[t]);
            detail::gather_batch(tasks[t], batch, X, y);
            const double lr = std::max(
                0.0, cfg.learning_rate - cfg.lr_decay * static_cast<double>(step));
            bps[t].batch_gradient(body.data(), heads[t].data(), X, y.data(),
                                  gbody, ghead);
            detail::sgd_step(body, gbody, lr);
            detail::sgd_step(heads[t], ghead, lr);
            seen[t] += batch.size();
            ++step;
            if (seen[t] >= cfg.max_examples) {
                done[t] = true;
            } else if (stoppers[t].due(seen[t])) {
                const double acc = bps[t].accuracy(body.data(), heads[t].data(),
                                                   tasks[t], tasks[t].dev_idx);
                if (stoppers[t].check(seen[t], acc)) done[t] = true;
            }
        }
    }
    return ParameterVector(arch.body_manifest(), std::move(body));
}

// Single-round fusion baseline: finetune every task from the base once and
// fuse the bodies uniformly. Definitionally one protocol iteration with the
// full task list as cohort, and implemented as exactly that.
inline ParameterVector baseline_fuse_once(const std::vector<TaskDataset>& tasks,
                                          const ModelArch& arch,
                                          const ParameterVector& base,
                                          const TrainConfig& cfg) {
    if (tasks.empty()) throw DataError("fuse-once baseline over zero tasks");
    CohortPlan cohort;
    for (const auto& t : tasks)
        cohort.push_back(ContributorJob{t.task_id, t.task_id, cfg});
    RepositoryState st = make_repository(base);
    const RepositoryState next =
        run_iteration(st, arch, cohort, make_registry(tasks));
    return next.base;
}

}  // namespace coldfuse
