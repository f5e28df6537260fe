#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/dataset.hpp"
#include "coldfuse/errors.hpp"
#include "coldfuse/fusion.hpp"
#include "coldfuse/model.hpp"
#include "coldfuse/param_vector.hpp"
#include "coldfuse/rng.hpp"

namespace coldfuse {

// One contributor's returned weights for one iteration.
struct Contribution {
    std::string contributor_id;
    std::size_t iteration = 0;
    std::string task_id;
    ParameterVector body;
    std::size_t train_examples_seen = 0;
    std::int64_t wall_time_ms = 0;
};

// Contribution validation knobs. max_norm_diff bounds the largest
// coordinate-wise |contribution - base| a submission may carry; infinite
// disables the filter. Only uniform fusion weights are implemented; the
// policy hook exists so alternatives can slot in without touching the state
// machine.
struct FusionPolicy {
    double max_norm_diff = std::numeric_limits<double>::infinity();
};

struct HistoryRecord {
    std::size_t iteration = 0;
    std::vector<std::string> cohort;               // contributor ids, sorted
    std::vector<std::string> contribution_hashes;  // aligned with cohort
    std::string fused_hash;
    std::string chain;  // running hash over all records up to this one
};

// Central repository: the current base body, the iteration counter, the
// in-flight submission ledger, and the append-only fusion history.
struct RepositoryState {
    ParameterVector base;
    std::size_t iteration = 0;
    std::vector<std::string> expected_cohort;  // empty = no iteration open
    std::vector<Contribution> received;
    std::vector<HistoryRecord> history;
    FusionPolicy policy;
};

inline RepositoryState make_repository(ParameterVector base,
                                       FusionPolicy policy = {}) {
    RepositoryState st;
    st.base = std::move(base);
    st.policy = policy;
    return st;
}

namespace detail {

inline nlohmann::json history_record_core(const HistoryRecord& r) {
    return nlohmann::json{{"iteration", r.iteration},
                          {"cohort", r.cohort},
                          {"contribution_hashes", r.contribution_hashes},
                          {"fused_hash", r.fused_hash}};
}

inline std::string chain_hash(const std::string& prev, const HistoryRecord& r) {
    const std::string body = prev + history_record_core(r).dump();
    return hash_hex(fnv1a64(body));
}

inline const std::string& chain_seed() {
    static const std::string zero(16, '0');
    return zero;
}

}  // namespace detail

// --- submission lifecycle -----------------------------------------------

// Opens iteration `state.iteration` for the given contributors. Ids must be
// distinct; one dataset per contributor id per iteration.
inline void begin_iteration(RepositoryState& state,
                            std::vector<std::string> cohort_ids) {
    if (!state.expected_cohort.empty() || !state.received.empty())
        throw ProtocolError("iteration already open");
    if (cohort_ids.empty()) throw CohortError("empty cohort");
    std::sort(cohort_ids.begin(), cohort_ids.end());
    if (std::adjacent_find(cohort_ids.begin(), cohort_ids.end()) !=
        cohort_ids.end())
        throw CohortError("duplicate contributor id in cohort");
    state.expected_cohort = std::move(cohort_ids);
}

// Validates and records one contribution. Returns true if recorded, false if
// this exact contribution (same contributor, same bytes) was already in the
// ledger — the idempotent-resubmission case. Any other conflict throws.
inline bool submit(RepositoryState& state, Contribution c) {
    if (c.iteration != state.iteration)
        throw StaleError("submission for iteration " +
                         std::to_string(c.iteration) + ", repository is at " +
                         std::to_string(state.iteration));
    if (state.expected_cohort.empty())
        throw ProtocolError("no iteration open for submissions");
    if (!std::binary_search(state.expected_cohort.begin(),
                            state.expected_cohort.end(), c.contributor_id))
        throw CohortError("contributor '" + c.contributor_id +
                          "' is not in this iteration's cohort");
    if (!c.body.fusable_with(state.base))
        throw ShapeError("contribution manifest does not match the base");
    if (!c.body.all_finite())
        throw ProtocolError("contribution contains non-finite values");
    if (std::isfinite(state.policy.max_norm_diff)) {
        double maxdiff = 0.0;
        const auto& a = c.body.values();
        const auto& b = state.base.values();
        for (std::size_t i = 0; i < a.size(); ++i)
            maxdiff = std::max(maxdiff, std::abs(a[i] - b[i]));
        if (maxdiff > state.policy.max_norm_diff)
            throw ProtocolError("contribution rejected by max-norm filter: "
                                "diff " + std::to_string(maxdiff));
    }
    for (const auto& prev : state.received) {
        if (prev.contributor_id != c.contributor_id) continue;
        if (prev.body == c.body) return false;  // identical resubmission
        throw DuplicateError("contributor '" + c.contributor_id +
                             "' already submitted different weights");
    }
    state.received.push_back(std::move(c));
    return true;
}

inline bool ready_to_fuse(const RepositoryState& state) {
    return !state.expected_cohort.empty() &&
           state.received.size() == state.expected_cohort.size();
}

// Drops the open iteration without touching base/iteration/history. Used on
// deadline expiry: no partial-cohort fusion, ever.
inline void abort_iteration(RepositoryState& state) {
    state.expected_cohort.clear();
    state.received.clear();
}

// Fuses the full cohort's bodies into the new base, advances the iteration
// counter, and appends the history record.
inline void fuse_and_advance(RepositoryState& state) {
    if (!ready_to_fuse(state))
        throw ProtocolError("fusion requires the complete cohort");
    // Deterministic ledger order regardless of arrival order.
    std::sort(state.received.begin(), state.received.end(),
              [](const Contribution& a, const Contribution& b) {
                  return a.contributor_id < b.contributor_id;
              });
    std::vector<ParameterVector> bodies;
    bodies.reserve(state.received.size());
    for (const auto& c : state.received) bodies.push_back(c.body);
    ParameterVector fused = fuse(bodies);

    HistoryRecord rec;
    rec.iteration = state.iteration;
    for (const auto& c : state.received) {
        rec.cohort.push_back(c.contributor_id);
        rec.contribution_hashes.push_back(pv_hash(c.body));
    }
    rec.fused_hash = pv_hash(fused);
    const std::string& prev =
        state.history.empty() ? detail::chain_seed() : state.history.back().chain;
    rec.chain = detail::chain_hash(prev, rec);

    state.base = std::move(fused);
    state.iteration += 1;
    state.history.push_back(std::move(rec));
    state.expected_cohort.clear();
    state.received.clear();
}

// Recomputes the hash chain and checks the final record's fused hash against
// the given base. True iff the history is internally consistent and actually
// leads to `final_base`.
inline bool verify_history(const std::vector<HistoryRecord>& history,
                           const ParameterVector& final_base) {
    std::string prev = detail::chain_seed();
    for (std::size_t i = 0; i < history.size(); ++i) {
        const auto& r = history[i];
        if (r.iteration != i) return false;
        if (r.cohort.size() != r.contribution_hashes.size()) return false;
        if (detail::chain_hash(prev, r) != r.chain) return false;
        prev = r.chain;
    }
    if (history.empty()) return true;
    return history.back().fused_hash == pv_hash(final_base);
}

// One JSON object per line: {iteration, cohort, contribution hashes, fused
// hash, chain}. Append-only.
inline std::string history_to_jsonl(const std::vector<HistoryRecord>& history) {
    std::string out;
    for (const auto& r : history) {
        nlohmann::json j = detail::history_record_core(r);
        j["chain"] = r.chain;
        out += j.dump();
        out += '\n';
    }
    return out;
}

// --- in-process iteration driver ------------------------------------------

// Cohort plan entry: which contributor trains on which dataset, with which
// training configuration. The TrainConfig is used exactly as given — any
// per-iteration seed variation is the scheduler's job, which is what makes a
// cohort of one bit-equal to a standalone finetune.
struct ContributorJob {
    std::string contributor_id;
    std::string task_id;
    TrainConfig cfg;
};

using CohortPlan = std::vector<ContributorJob>;
using DatasetRegistry = std::map<std::string, std::shared_ptr<const TaskDataset>>;

inline DatasetRegistry make_registry(const std::vector<TaskDataset>& tasks) {
    DatasetRegistry reg;
    for (const auto& t : tasks)
        reg.emplace(t.task_id, std::make_shared<const TaskDataset>(t));
    return reg;
}

inline const TaskDataset& registry_get(const DatasetRegistry& reg,
                                       const std::string& task_id) {
    auto it = reg.find(task_id);
    if (it == reg.end())
        throw DataError("unknown task '" + task_id + "' in dataset registry");
    return *it->second;
}

// Runs one full iteration: every contributor finetunes the current base with
// a fresh zero-initialized head for its task, the bodies are fused, and the
// fused body becomes the new base. Returns the advanced state; on any
// failure the input state is simply not replaced (value semantics), so a
// failed iteration changes nothing.
inline RepositoryState run_iteration(const RepositoryState& state,
                                     const ModelArch& arch,
                                     const CohortPlan& cohort,
                                     const DatasetRegistry& datasets) {
    if (cohort.empty()) throw CohortError("empty cohort");
    if (state.base.manifest() != arch.body_manifest())
        throw ShapeError("repository base does not match the architecture");

    RepositoryState next = state;
    std::vector<std::string> ids;
    for (const auto& job : cohort) ids.push_back(job.contributor_id);
    begin_iteration(next, ids);

    for (const auto& job : cohort) {
        const TaskDataset& data = registry_get(datasets, job.task_id);
        const Model start{arch.with_head(data.n_classes), state.base,
                          zero_head(arch.with_head(data.n_classes))};
        const auto t0 = std::chrono::steady_clock::now();
        FinetuneResult ft = finetune_stats(start, data, job.cfg);
        const auto t1 = std::chrono::steady_clock::now();
        Contribution c;
        c.contributor_id = job.contributor_id;
        c.iteration = state.iteration;
        c.task_id = job.task_id;
        c.body = std::move(ft.model.body);
        c.train_examples_seen = ft.examples_seen;
        c.wall_time_ms =
            std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
        submit(next, std::move(c));
    }
    fuse_and_advance(next);
    return next;
}

// Runs n_iterations off the schedule, returning one snapshot per state: the
// initial state first, then one per completed iteration (n_iterations+1
// total). Snapshot j is reachable only from snapshot j-1 by construction.
inline std::vector<RepositoryState> run_protocol(
    const RepositoryState& initial, const ModelArch& arch,
    const std::vector<CohortPlan>& schedule, std::size_t n_iterations,
    const DatasetRegistry& datasets) {
    if (schedule.size() < n_iterations)
        throw ConfigError("schedule covers " + std::to_string(schedule.size()) +
                          " iterations, " + std::to_string(n_iterations) +
                          " requested");
    std::vector<RepositoryState> snapshots;
    snapshots.push_back(initial);
    for (std::size_t i = 0; i < n_iterations; ++i) {
        // Attach the iteration index but keep the error class (and thus the
        // CLI exit code) of the underlying failure.
        const std::string at = "iteration " + std::to_string(i) + ": ";
        try {
            snapshots.push_back(
                run_iteration(snapshots.back(), arch, schedule[i], datasets));
        } catch (const ConfigError& e) {
            throw ConfigError(at + e.what());
        } catch (const TransportError& e) {
            throw TransportError(at + e.what());
        } catch (const DataError& e) {
            throw DataError(at + e.what());
        }
    }
    return snapshots;
}

}  // namespace coldfuse
