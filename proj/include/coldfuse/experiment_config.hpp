#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/errors.hpp"
#include "coldfuse/model.hpp"
#include "coldfuse/task_gen.hpp"

namespace coldfuse {

// Scenario knobs. Every field has a committed desk-scale default; configs
// override only what they need.
struct ScenarioParams {
    std::string name = "main";
    std::size_t cohort_size = 4;
    std::size_t iterations = 15;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    // seen_unseen / few_shot
    std::size_t folds = 3;
    std::size_t few_shot_n = 100;
    // federated-style scenarios (single task split into shards)
    std::size_t task_index = 0;
    std::size_t federated_contributors = 5;
    std::size_t federated_per_contributor = 500;
    // Per-iteration training budget of a shard contributor, in passes over its
    // shard; cost scales with shard size the way a finetune procedure does.
    std::size_t federated_epochs = 4;
    // size_sweep
    std::vector<std::size_t> sweep_sizes = {70, 140, 210, 280};
    std::size_t sweep_contributors = 10;
    // contributor_sweep
    std::vector<std::size_t> contributor_counts = {2, 5, 10, 20};
    std::size_t per_contributor_examples = 140;
    // fixed_total
    std::size_t fixed_total_examples = 2800;
    std::vector<std::size_t> fixed_total_counts = {2, 4};
    // dataset_count
    std::vector<std::size_t> dataset_pools = {4, 8, 12};
    // fixed_examples
    std::vector<std::size_t> finetune_caps = {2500, 10000};
    // cohort_sweep
    std::vector<std::size_t> cohort_sizes = {2, 4, 8};
};

inline const std::vector<std::string>& scenario_names() {
    static const std::vector<std::string> names = {
        "main",           "seen_unseen",       "few_shot",
        "cohort_sweep",   "federated_flow",    "size_sweep",
        "contributor_sweep", "fixed_total",    "dataset_count",
        "fixed_examples"};
    return names;
}

struct ExperimentConfig {
    TaskFamilySpec family;
    std::vector<std::size_t> hidden_dims = {16};
    Activation activation = Activation::Tanh;
    TrainConfig train;        // contributor finetuning
    TrainConfig eval_train;   // evaluation finetuning (fresh head, full model)
    TrainConfig probe_train;  // linear-probe head training
    ScenarioParams scenario;
    std::string data_dir = "data";
    std::string output_dir = "out";

    ExperimentConfig() {
        eval_train.max_examples = 8000;
        eval_train.early_stop_delta = 0.002;
        eval_train.early_stop_window = 750;
        probe_train.max_examples = 4000;
    }

    // Body architecture; head_dim is chosen per task downstream.
    ModelArch base_arch() const {
        return ModelArch{family.input_dim, hidden_dims, activation, 2};
    }

    void validate() const {
        family.validate();
        base_arch().validate();
        train.validate();
        eval_train.validate();
        probe_train.validate();
        if (scenario.seeds.empty()) throw ConfigError("scenario.seeds is empty");
        std::set<std::uint64_t> distinct(scenario.seeds.begin(),
                                         scenario.seeds.end());
        if (distinct.size() != scenario.seeds.size())
            throw ConfigError("scenario.seeds must be distinct");
        if (std::find(scenario_names().begin(), scenario_names().end(),
                      scenario.name) == scenario_names().end())
            throw ConfigError("unknown scenario '" + scenario.name + "'");
        if (scenario.cohort_size == 0)
            throw ConfigError("scenario.cohort_size must be positive");
        if (scenario.cohort_size > family.n_tasks)
            throw ConfigError("scenario.cohort_size exceeds the task count");
        if (scenario.task_index >= family.n_tasks)
            throw ConfigError("scenario.task_index out of range");
    }
};

namespace detail {

// Strict-object reader: every key must be consumed by a typed getter, and
// leftovers are reported with their JSON path.
class StrictObject {
public:
    StrictObject(const nlohmann::json& j, std::string path)
        : j_(j), path_(std::move(path)) {
        if (!j_.is_object())
            throw ConfigError(path_ + ": expected a JSON object");
    }

    bool has(const std::string& key) {
        return j_.contains(key);
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_ + "." + key + ": wrong type");
        }
    }

    // Nested object; marks the key consumed and returns it (or null).
    const nlohmann::json* child(const std::string& key) {
        seen_.insert(key);
        if (!j_.contains(key)) return nullptr;
        return &j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (seen_.find(it.key()) == seen_.end())
                throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void parse_family(const nlohmann::json& j, TaskFamilySpec& f) {
    StrictObject o(j, "family");
    o.get("n_tasks", f.n_tasks);
    o.get("input_dim", f.input_dim);
    o.get("shared_rank", f.shared_rank);
    o.get("min_classes", f.min_classes);
    o.get("max_classes", f.max_classes);
    o.get("examples_per_task", f.examples_per_task);
    o.get("transfer_strength", f.transfer_strength);
    o.get("label_noise", f.label_noise);
    o.get("train_frac", f.train_frac);
    o.get("dev_frac", f.dev_frac);
    o.get("seed", f.seed);
    o.finish();
}

inline void parse_train(const nlohmann::json& j, const std::string& path,
                        TrainConfig& t) {
    StrictObject o(j, path);
    o.get("learning_rate", t.learning_rate);
    o.get("lr_decay", t.lr_decay);
    o.get("batch_size", t.batch_size);
    o.get("max_examples", t.max_examples);
    o.get("early_stop_delta", t.early_stop_delta);
    o.get("early_stop_window", t.early_stop_window);
    o.finish();
}

inline void parse_scenario(const nlohmann::json& j, ScenarioParams& s) {
    StrictObject o(j, "scenario");
    o.get("name", s.name);
    o.get("cohort_size", s.cohort_size);
    o.get("iterations", s.iterations);
    o.get("seeds", s.seeds);
    o.get("folds", s.folds);
    o.get("few_shot_n", s.few_shot_n);
    o.get("task_index", s.task_index);
    o.get("federated_contributors", s.federated_contributors);
    o.get("federated_per_contributor", s.federated_per_contributor);
    o.get("federated_epochs", s.federated_epochs);
    o.get("sweep_sizes", s.sweep_sizes);
    o.get("sweep_contributors", s.sweep_contributors);
    o.get("contributor_counts", s.contributor_counts);
    o.get("per_contributor_examples", s.per_contributor_examples);
    o.get("fixed_total_examples", s.fixed_total_examples);
    o.get("fixed_total_counts", s.fixed_total_counts);
    o.get("dataset_pools", s.dataset_pools);
    o.get("finetune_caps", s.finetune_caps);
    o.get("cohort_sizes", s.cohort_sizes);
    o.finish();
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    ExperimentConfig cfg;
    detail::StrictObject o(j, "$");
    if (const auto* fam = o.child("family")) detail::parse_family(*fam, cfg.family);
    {
        // arch: hidden dims + activation
        if (const auto* arch = o.child("arch")) {
            detail::StrictObject a(*arch, "arch");
            a.get("hidden_dims", cfg.hidden_dims);
            std::string act = activation_name(cfg.activation);
            a.get("activation", act);
            cfg.activation = activation_from_name(act);
            a.finish();
        }
    }
    if (const auto* train = o.child("train"))
        detail::parse_train(*train, "train", cfg.train);
    // eval/probe start from the contributor config and override on top,
    // so "same procedure, different budget" is the default. Evaluation
    // finetunes stop early on dev plateaus so a 100-example task is not
    // driven through dozens of overfitting epochs.
    cfg.eval_train = cfg.train;
    cfg.eval_train.max_examples = 8000;
    cfg.eval_train.early_stop_delta = 0.002;
    cfg.eval_train.early_stop_window = 750;
    cfg.probe_train = cfg.train;
    cfg.probe_train.max_examples = 4000;
    if (const auto* ev = o.child("eval"))
        detail::parse_train(*ev, "eval", cfg.eval_train);
    if (const auto* pr = o.child("probe"))
        detail::parse_train(*pr, "probe", cfg.probe_train);
    if (const auto* sc = o.child("scenario"))
        detail::parse_scenario(*sc, cfg.scenario);
    o.get("data_dir", cfg.data_dir);
    o.get("output_dir", cfg.output_dir);
    o.finish();
    cfg.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return parse_experiment_config(j);
}

}  // namespace coldfuse
