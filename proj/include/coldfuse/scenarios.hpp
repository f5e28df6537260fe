#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coldfuse/errors.hpp"
#include "coldfuse/eval.hpp"
#include "coldfuse/experiment_config.hpp"
#include "coldfuse/protocol.hpp"
#include "coldfuse/report.hpp"
#include "coldfuse/rng.hpp"
#include "coldfuse/task_gen.hpp"

namespace coldfuse {

// Scenario composition rules, shared by the in-process and hub-backed paths:
//  * every quantity derives from the experiment seed through named mixes, so
//    a scenario is a pure function of (config, tasks, seed);
//  * contributor TrainConfigs are fully built here and passed through the
//    protocol unchanged;
//  * the `arm` column tags sub-conditions, `fold` the cross-validation fold.

namespace detail {

inline TrainConfig eval_cfg_at(const ExperimentConfig& cfg, std::uint64_t run_seed,
                               std::size_t iteration) {
    return cfg.eval_train.with_seed(mix_seed(run_seed, salt::eval, iteration, 0));
}

inline TrainConfig probe_cfg_at(const ExperimentConfig& cfg, std::uint64_t run_seed,
                                std::size_t iteration) {
    return cfg.probe_train.with_seed(mix_seed(run_seed, salt::eval, iteration, 1));
}

inline void emit(std::vector<EvalRow>& rows, const ExperimentConfig& cfg,
                 std::uint64_t seed, std::size_t iteration,
                 const std::string& regime, const std::vector<TaskEval>& evals,
                 const std::string& arm, int fold) {
    for (const auto& e : evals)
        rows.push_back(EvalRow{cfg.scenario.name, seed, iteration, e.task_id,
                               regime, e.accuracy, arm, fold});
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

inline std::vector<TaskDataset> tasks_at(const std::vector<TaskDataset>& tasks,
                                         const std::vector<std::size_t>& idx) {
    std::vector<TaskDataset> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(tasks[i]);
    return out;
}

}  // namespace detail

// A fully planned protocol run: the initial base plus one cohort plan per
// iteration. The hub-backed path executes the same plan over the network.
struct MainPlan {
    ParameterVector init;
    std::vector<CohortPlan> schedule;
};

// Iteration i's cohort is drawn from `pool` (global task indices) with seed
// mix(run_seed, i); contributor c on task t trains with seed
// mix(run_seed, contributor-salt, i, t).
inline MainPlan plan_main(const ExperimentConfig& cfg,
                          const std::vector<TaskDataset>& tasks,
                          std::uint64_t run_seed,
                          const std::vector<std::size_t>& pool, std::size_t k,
                          std::size_t iterations, const TrainConfig& contributor) {
    if (k == 0 || k > pool.size())
        throw ConfigError("cohort size " + std::to_string(k) +
                          " does not fit the task pool of " +
                          std::to_string(pool.size()));
    MainPlan p{init_body(cfg.base_arch(), run_seed), {}};
    for (std::size_t i = 1; i <= iterations; ++i) {
        const auto picks = sample_cohort(pool.size(), k, mix_seed(run_seed, i));
        CohortPlan plan;
        for (std::size_t pi : picks) {
            const std::size_t t = pool[pi];
            plan.push_back(ContributorJob{
                tasks[t].task_id, tasks[t].task_id,
                contributor.with_seed(
                    mix_seed(run_seed, salt::contributor, i, t))});
        }
        p.schedule.push_back(std::move(plan));
    }
    return p;
}

// Executes a plan in process and returns the fused bases θ_1..θ_N.
inline std::vector<ParameterVector> protocol_bases(
    const ExperimentConfig& cfg, const std::vector<TaskDataset>& tasks,
    const MainPlan& plan) {
    const auto snapshots =
        run_protocol(make_repository(plan.init), cfg.base_arch(), plan.schedule,
                     plan.schedule.size(), make_registry(tasks));
    std::vector<ParameterVector> bases;
    for (std::size_t i = 1; i < snapshots.size(); ++i)
        bases.push_back(snapshots[i].base);
    return bases;
}

// Baseline rows (iteration 0) plus cold/frozen rows for every fused base.
// `pool_tasks` is what the protocol trained on (and what the fuse-once and
// multitask baselines train on); `eval_tasks` is what gets measured.
inline void main_rows(std::vector<EvalRow>& rows, const ExperimentConfig& cfg,
                      const std::vector<TaskDataset>& pool_tasks,
                      const std::vector<TaskDataset>& eval_tasks,
                      std::uint64_t seed, std::uint64_t run_seed,
                      const ParameterVector& init,
                      const std::vector<ParameterVector>& bases,
                      const std::string& arm, int fold,
                      const TrainConfig& contributor, bool full_baselines) {
    const ModelArch arch = cfg.base_arch();
    detail::emit(rows, cfg, seed, 0, "baseline_pretrained",
                 eval_base_model(init, arch, eval_tasks,
                                 detail::eval_cfg_at(cfg, run_seed, 0)),
                 arm, fold);
    detail::emit(rows, cfg, seed, 0, "baseline_pretrained_frozen",
                 eval_frozen(init, arch, eval_tasks,
                             detail::probe_cfg_at(cfg, run_seed, 0)),
                 arm, fold);
    if (full_baselines) {
        const ParameterVector once = baseline_fuse_once(
            pool_tasks, arch, init,
            contributor.with_seed(mix_seed(run_seed, salt::contributor, 0)));
        detail::emit(rows, cfg, seed, 0, "baseline_fuse_once",
                     eval_base_model(once, arch, eval_tasks,
                                     detail::eval_cfg_at(cfg, run_seed, 0)),
                     arm, fold);
        detail::emit(rows, cfg, seed, 0, "baseline_fuse_once_frozen",
                     eval_frozen(once, arch, eval_tasks,
                                 detail::probe_cfg_at(cfg, run_seed, 0)),
                     arm, fold);
        // Multitask initializes its own body from cfg.seed, which equals
        // run_seed here, so it starts from the same pretrained weights.
        const ParameterVector joint =
            baseline_multitask(pool_tasks, arch, contributor.with_seed(run_seed));
        detail::emit(rows, cfg, seed, 0, "baseline_multitask",
                     eval_base_model(joint, arch, eval_tasks,
                                     detail::eval_cfg_at(cfg, run_seed, 0)),
                     arm, fold);
        detail::emit(rows, cfg, seed, 0, "baseline_multitask_frozen",
                     eval_frozen(joint, arch, eval_tasks,
                                 detail::probe_cfg_at(cfg, run_seed, 0)),
                     arm, fold);
    }
    for (std::size_t i = 0; i < bases.size(); ++i) {
        detail::emit(rows, cfg, seed, i + 1, "cold",
                     eval_base_model(bases[i], arch, eval_tasks,
                                     detail::eval_cfg_at(cfg, run_seed, i + 1)),
                     arm, fold);
        detail::emit(rows, cfg, seed, i + 1, "frozen",
                     eval_frozen(bases[i], arch, eval_tasks,
                                 detail::probe_cfg_at(cfg, run_seed, i + 1)),
                     arm, fold);
    }
}

namespace detail {

// --- main-family scenarios ---

inline void scenario_main(std::vector<EvalRow>& rows, const ExperimentConfig& cfg,
                          const std::vector<TaskDataset>& tasks) {
    for (const std::uint64_t s : cfg.scenario.seeds) {
        const MainPlan plan =
            plan_main(cfg, tasks, s, all_indices(tasks.size()),
                      cfg.scenario.cohort_size, cfg.scenario.iterations, cfg.train);
        const auto bases = protocol_bases(cfg, tasks, plan);
        main_rows(rows, cfg, tasks, tasks, s, s, plan.init, bases, "", -1,
                  cfg.train, /*full_baselines=*/true);
    }
}

inline void scenario_cohort_sweep(std::vector<EvalRow>& rows,
                                  const ExperimentConfig& cfg,
                                  const std::vector<TaskDataset>& tasks) {
    for (const std::uint64_t s : cfg.scenario.seeds) {
        // Shared baselines once per seed; cohort-size arms add cold/frozen.
        const MainPlan base_plan =
            plan_main(cfg, tasks, s, all_indices(tasks.size()),
                      cfg.scenario.cohort_size, 0, cfg.train);
        main_rows(rows, cfg, tasks, tasks, s, s, base_plan.init, {}, "", -1,
                  cfg.train, /*full_baselines=*/true);
        for (const std::size_t k : cfg.scenario.cohort_sizes) {
            const MainPlan plan =
                plan_main(cfg, tasks, mix_seed(s, salt::cohort, k),
                          all_indices(tasks.size()), k, cfg.scenario.iterations,
                          cfg.train);
            const auto bases = protocol_bases(cfg, tasks, plan);
            main_rows(rows, cfg, tasks, tasks, s, mix_seed(s, salt::cohort, k),
                      plan.init, bases, "k=" + std::to_string(k), -1, cfg.train,
                      /*full_baselines=*/false);
        }
    }
}

inline void scenario_dataset_count(std::vector<EvalRow>& rows,
                                   const ExperimentConfig& cfg,
                                   const std::vector<TaskDataset>& tasks) {
    for (const std::uint64_t s : cfg.scenario.seeds) {
        for (const std::size_t p : cfg.scenario.dataset_pools) {
            if (p == 0 || p > tasks.size())
                throw ConfigError("dataset pool " + std::to_string(p) +
                                  " does not fit the family");
            std::vector<std::size_t> pool;  // nested prefix pools
            for (std::size_t i = 0; i < p; ++i) pool.push_back(i);
            const std::size_t k = std::min(cfg.scenario.cohort_size, p);
            const std::uint64_t r = mix_seed(s, salt::task, p);
            const MainPlan plan = plan_main(cfg, tasks, r, pool, k,
                                            cfg.scenario.iterations, cfg.train);
            const auto bases = protocol_bases(cfg, tasks, plan);
            main_rows(rows, cfg, tasks_at(tasks, pool), tasks, s, r, plan.init,
                      bases, "pool=" + std::to_string(p), -1, cfg.train,
                      /*full_baselines=*/true);
        }
    }
}

inline void scenario_fixed_examples(std::vector<EvalRow>& rows,
                                    const ExperimentConfig& cfg,
                                    const std::vector<TaskDataset>& tasks) {
    for (const std::uint64_t s : cfg.scenario.seeds) {
        for (const std::size_t cap : cfg.scenario.finetune_caps) {
            if (cap == 0) throw ConfigError("finetune cap must be positive");
            const TrainConfig capped = cfg.train.with_budget(cap);
            const std::uint64_t r = mix_seed(s, salt::train, cap);
            const MainPlan plan =
                plan_main(cfg, tasks, r, all_indices(tasks.size()),
                          cfg.scenario.cohort_size, cfg.scenario.iterations,
                          capped);
            const auto bases = protocol_bases(cfg, tasks, plan);
            main_rows(rows, cfg, tasks, tasks, s, r, plan.init, bases,
                      "cap=" + std::to_string(cap), -1, capped,
                      /*full_baselines=*/false);
        }
    }
}

// --- fold scenarios ---

inline void scenario_seen_unseen(std::vector<EvalRow>& rows,
                                 const ExperimentConfig& cfg,
                                 const std::vector<TaskDataset>& tasks,
                                 bool few_shot) {
    const auto folds =
        make_folds(tasks.size(), cfg.scenario.folds, cfg.family.seed);
    for (const std::uint64_t s : cfg.scenario.seeds) {
        for (std::size_t f = 0; f < folds.size(); ++f) {
            const std::uint64_t r = mix_seed(s, salt::fold, f);
            if (cfg.scenario.cohort_size > folds[f].seen.size())
                throw ConfigError("cohort size exceeds the seen pool of fold " +
                                  std::to_string(f));
            const MainPlan plan =
                plan_main(cfg, tasks, r, folds[f].seen, cfg.scenario.cohort_size,
                          cfg.scenario.iterations, cfg.train);
            const auto bases = protocol_bases(cfg, tasks, plan);
            const auto seen_tasks = tasks_at(tasks, folds[f].seen);
            const auto unseen_tasks = tasks_at(tasks, folds[f].unseen);
            const int fi = static_cast<int>(f);
            if (!few_shot) {
                main_rows(rows, cfg, seen_tasks, seen_tasks, s, r, plan.init,
                          bases, "seen", fi, cfg.train, false);
                main_rows(rows, cfg, seen_tasks, unseen_tasks, s, r, plan.init,
                          bases, "unseen", fi, cfg.train, false);
            } else {
                // Unseen tasks with the training split cut to n examples;
                // with n = full train size this is exactly the unseen arm of
                // seen_unseen (identity subsample, same eval seeds).
                std::vector<TaskDataset> few;
                for (const auto& t : unseen_tasks) {
                    const std::size_t n =
                        std::min(cfg.scenario.few_shot_n, t.train_idx.size());
                    few.push_back(subsample(t, n, r, 0));
                }
                main_rows(rows, cfg, seen_tasks, few, s, r, plan.init, bases,
                          "unseen", fi, cfg.train, false);
            }
        }
    }
}

// --- sharded (single-task, federated-style) scenarios ---

inline TaskDataset make_shard(const TaskDataset& task, std::size_t n,
                              std::uint64_t perm_seed, std::size_t draw,
                              const std::string& suffix) {
    TaskDataset shard = subsample(task, n, perm_seed, draw);
    shard.task_id += suffix;
    return shard;
}

// Fresh disjoint shards every iteration: contributor c of iteration i trains
// on slice c of a permutation renewed each iteration.
inline void scenario_federated_flow(std::vector<EvalRow>& rows,
                                    const ExperimentConfig& cfg,
                                    const std::vector<TaskDataset>& tasks) {
    const TaskDataset& task = tasks[cfg.scenario.task_index];
    const std::size_t m = cfg.scenario.federated_contributors;
    const std::size_t n = cfg.scenario.federated_per_contributor;
    if (m == 0) throw ConfigError("federated_contributors must be positive");
    if (m * n > task.train_idx.size())
        throw ConfigError("federated shards exceed the task's train split");
    const ModelArch arch = cfg.base_arch();
    const TrainConfig fed =
        cfg.train.with_budget(cfg.scenario.federated_epochs * n);
    const std::vector<TaskDataset> eval_tasks = {task};

    for (const std::uint64_t s : cfg.scenario.seeds) {
        const ParameterVector init = init_body(arch, s);
        detail::emit(rows, cfg, s, 0, "baseline_pretrained_frozen",
                     eval_frozen(init, arch, eval_tasks, probe_cfg_at(cfg, s, 0)),
                     "", -1);
        RepositoryState st = make_repository(init);
        for (std::size_t i = 1; i <= cfg.scenario.iterations; ++i) {
            const std::uint64_t perm = mix_seed(s, salt::shard, i);
            DatasetRegistry reg;
            CohortPlan plan;
            for (std::size_t c = 0; c < m; ++c) {
                TaskDataset shard =
                    make_shard(task, n, perm, c, "#c" + std::to_string(c));
                const std::string sid = shard.task_id;  // survives the move below
                plan.push_back(ContributorJob{
                    "c" + std::to_string(c), sid,
                    fed.with_seed(mix_seed(s, salt::contributor, i, c))});
                reg.emplace(sid,
                            std::make_shared<const TaskDataset>(std::move(shard)));
            }
            st = run_iteration(st, arch, plan, reg);
            detail::emit(rows, cfg, s, i, "frozen",
                         eval_frozen(st.base, arch, eval_tasks,
                                     probe_cfg_at(cfg, s, i)),
                         "", -1);
        }
    }
}

// Fixed disjoint shards held constant across iterations; optionally a
// centralized baseline trained on the union of the shards.
inline void sharded_arm_rows(std::vector<EvalRow>& rows,
                             const ExperimentConfig& cfg, const TaskDataset& task,
                             std::uint64_t s, std::uint64_t arm_index,
                             std::size_t m, std::size_t shard_n,
                             const std::string& arm, bool centralized) {
    if (m == 0) throw ConfigError("contributor count must be positive");
    if (m * shard_n > task.train_idx.size())
        throw ConfigError("shards (" + std::to_string(m) + " x " +
                          std::to_string(shard_n) +
                          ") exceed the task's train split");
    const ModelArch arch = cfg.base_arch();
    const TrainConfig fed =
        cfg.train.with_budget(cfg.scenario.federated_epochs * shard_n);
    const std::vector<TaskDataset> eval_tasks = {task};
    const std::uint64_t r = mix_seed(s, salt::shard, arm_index);

    const ParameterVector init = init_body(arch, s);
    detail::emit(rows, cfg, s, 0, "baseline_pretrained_frozen",
                 eval_frozen(init, arch, eval_tasks, probe_cfg_at(cfg, s, 0)),
                 arm, -1);

    DatasetRegistry reg;
    std::vector<std::string> shard_ids;
    for (std::size_t c = 0; c < m; ++c) {
        TaskDataset shard = make_shard(task, shard_n, r, c, "#c" + std::to_string(c));
        shard_ids.push_back(shard.task_id);
        reg.emplace(shard_ids.back(),
                    std::make_shared<const TaskDataset>(std::move(shard)));
    }
    std::vector<CohortPlan> schedule;
    for (std::size_t i = 1; i <= cfg.scenario.iterations; ++i) {
        CohortPlan plan;
        for (std::size_t c = 0; c < m; ++c)
            plan.push_back(ContributorJob{
                "c" + std::to_string(c), shard_ids[c],
                fed.with_seed(mix_seed(r, salt::contributor, i, c))});
        schedule.push_back(std::move(plan));
    }
    const auto snapshots =
        run_protocol(make_repository(init), arch, schedule, schedule.size(), reg);
    for (std::size_t i = 1; i < snapshots.size(); ++i)
        detail::emit(rows, cfg, s, i, "frozen",
                     eval_frozen(snapshots[i].base, arch, eval_tasks,
                                 probe_cfg_at(cfg, s, i)),
                     arm, -1);

    if (centralized) {
        // The union of the m shards is the first m*shard_n entries of the
        // same permutation, i.e. the draw-0 subsample of that size.
        TaskDataset pooled = make_shard(task, m * shard_n, r, 0, "#pool");
        const ModelArch a = arch.with_head(pooled.n_classes);
        const Model start{a, init, zero_head(a)};
        const Model central = finetune(
            start, pooled,
            cfg.train.with_seed(mix_seed(r, salt::contributor, 0)));
        detail::emit(rows, cfg, s, 0, "baseline_centralized_frozen",
                     eval_frozen(central.body, arch, eval_tasks,
                                 probe_cfg_at(cfg, s, 0)),
                     arm, -1);
    }
}

inline void scenario_size_sweep(std::vector<EvalRow>& rows,
                                const ExperimentConfig& cfg,
                                const std::vector<TaskDataset>& tasks) {
    const TaskDataset& task = tasks[cfg.scenario.task_index];
    for (const std::uint64_t s : cfg.scenario.seeds)
        for (std::size_t i = 0; i < cfg.scenario.sweep_sizes.size(); ++i) {
            const std::size_t sz = cfg.scenario.sweep_sizes[i];
            sharded_arm_rows(rows, cfg, task, s, i, cfg.scenario.sweep_contributors,
                             sz, "size=" + std::to_string(sz),
                             /*centralized=*/true);
        }
}

inline void scenario_contributor_sweep(std::vector<EvalRow>& rows,
                                       const ExperimentConfig& cfg,
                                       const std::vector<TaskDataset>& tasks) {
    const TaskDataset& task = tasks[cfg.scenario.task_index];
    for (const std::uint64_t s : cfg.scenario.seeds)
        for (std::size_t i = 0; i < cfg.scenario.contributor_counts.size(); ++i) {
            const std::size_t m = cfg.scenario.contributor_counts[i];
            sharded_arm_rows(rows, cfg, task, s, i, m,
                             cfg.scenario.per_contributor_examples,
                             "m=" + std::to_string(m), /*centralized=*/true);
        }
}

inline void scenario_fixed_total(std::vector<EvalRow>& rows,
                                 const ExperimentConfig& cfg,
                                 const std::vector<TaskDataset>& tasks) {
    const TaskDataset& task = tasks[cfg.scenario.task_index];
    const std::size_t total = cfg.scenario.fixed_total_examples;
    for (const std::uint64_t s : cfg.scenario.seeds)
        for (std::size_t i = 0; i < cfg.scenario.fixed_total_counts.size(); ++i) {
            const std::size_t m = cfg.scenario.fixed_total_counts[i];
            if (m == 0 || total % m != 0)
                throw ConfigError("fixed_total_examples must divide evenly "
                                  "among " + std::to_string(m) + " contributors");
            sharded_arm_rows(rows, cfg, task, s, i, m, total / m,
                             "m=" + std::to_string(m), /*centralized=*/false);
        }
}

}  // namespace detail

// Runs the configured scenario over the task family and returns the full
// row set (unsorted; writers sort canonically).
inline std::vector<EvalRow> run_scenario(const ExperimentConfig& cfg,
                                         const std::vector<TaskDataset>& tasks) {
    if (tasks.size() != cfg.family.n_tasks)
        throw DataError("task list does not match the configured family size");
    std::vector<EvalRow> rows;
    const std::string& name = cfg.scenario.name;
    if (name == "main")
        detail::scenario_main(rows, cfg, tasks);
    else if (name == "seen_unseen")
        detail::scenario_seen_unseen(rows, cfg, tasks, /*few_shot=*/false);
    else if (name == "few_shot")
        detail::scenario_seen_unseen(rows, cfg, tasks, /*few_shot=*/true);
    else if (name == "cohort_sweep")
        detail::scenario_cohort_sweep(rows, cfg, tasks);
    else if (name == "federated_flow")
        detail::scenario_federated_flow(rows, cfg, tasks);
    else if (name == "size_sweep")
        detail::scenario_size_sweep(rows, cfg, tasks);
    else if (name == "contributor_sweep")
        detail::scenario_contributor_sweep(rows, cfg, tasks);
    else if (name == "fixed_total")
        detail::scenario_fixed_total(rows, cfg, tasks);
    else if (name == "dataset_count")
        detail::scenario_dataset_count(rows, cfg, tasks);
    else if (name == "fixed_examples")
        detail::scenario_fixed_examples(rows, cfg, tasks);
    else
        throw ConfigError("unknown scenario '" + name + "'");
    return rows;
}

}  // namespace coldfuse
