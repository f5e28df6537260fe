// coldfuse: generate synthetic task families, run collaborative-fusion
// experiments (in process or against a hub), serve a hub, contribute to one,
// and summarize result CSVs.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 data error,
// 4 transport error.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "coldfuse/experiment_config.hpp"
#include "coldfuse/family_store.hpp"
#include "coldfuse/hub.hpp"
#include "coldfuse/scenarios.hpp"

namespace cf = coldfuse;
namespace fs = std::filesystem;

namespace {

volatile std::sig_atomic_t g_stop = 0;

void handle_stop(int) { g_stop = 1; }

struct Opts {
    std::string config;
    std::string data;       // overrides config data_dir
    std::string out;        // overrides config output_dir
    std::string scenario;   // overrides config scenario name
    std::vector<std::uint64_t> seeds;  // overrides config seed list
    std::int64_t seed_offset = 0;
    std::string hub;        // host:port, or "env" for COLDFUSE_HUB_ADDR
    std::string dir;        // report input directory
    std::string task;       // contribute: task id
    std::string contributor;
    std::uint64_t seed = 1;
    std::size_t rounds = 1;
    std::string bind = "127.0.0.1";
    std::uint16_t port = 0;
    std::size_t cohort = 0;  // 0 = take from config scenario
    std::int64_t deadline_ms = 60000;
    std::size_t iterations = 0;  // hub-serve: stop once reached (0 = run on)
};

cf::ExperimentConfig load_config(const Opts& o) {
    cf::ExperimentConfig cfg = cf::load_experiment_config(o.config);
    if (!o.scenario.empty()) cfg.scenario.name = o.scenario;
    if (!o.seeds.empty()) cfg.scenario.seeds = o.seeds;
    if (o.seed_offset != 0)
        for (auto& s : cfg.scenario.seeds)
            s += static_cast<std::uint64_t>(o.seed_offset);
    if (!o.data.empty()) cfg.data_dir = o.data;
    if (!o.out.empty()) cfg.output_dir = o.out;
    cfg.validate();
    return cfg;
}

// "env" (or an empty string when env fallback is allowed) reads
// COLDFUSE_HUB_ADDR.
cf::HubAddress resolve_hub(const std::string& given, bool allow_env_fallback) {
    std::string s = given;
    if (s == "env" || (s.empty() && allow_env_fallback)) {
        const char* env = std::getenv("COLDFUSE_HUB_ADDR");
        if (env == nullptr || *env == '\0')
            throw cf::ConfigError(
                "no hub address: pass --hub host:port or set COLDFUSE_HUB_ADDR");
        s = env;
    }
    return cf::parse_hub_address(s);
}

int cmd_generate(const Opts& o) {
    const cf::ExperimentConfig cfg = load_config(o);
    const auto tasks = cf::generate_family(cfg.family);
    cf::save_family(cfg.data_dir, tasks);
    std::ifstream mf(fs::path(cfg.data_dir) / "manifest.json");
    const auto manifest = nlohmann::json::parse(mf);
    for (const auto& t : tasks)
        std::printf("%s: %zu classes, %zu train / %zu dev / %zu test\n",
                    t.task_id.c_str(), t.n_classes, t.train_idx.size(),
                    t.dev_idx.size(), t.test_idx.size());
    std::printf("wrote %zu tasks to %s (family hash %s)\n", tasks.size(),
                cfg.data_dir.c_str(),
                manifest.at("family_hash").get<std::string>().c_str());
    return 0;
}

// Executes one planned protocol run over the network: every contributor in an
// iteration runs in its own thread against the hub, and the fused bases the
// hub hands back feed the same evaluation path as a local run, so the output
// CSV is byte-identical to running without --hub.
std::vector<cf::ParameterVector> hub_protocol_bases(
    const cf::HubAddress& addr, const cf::ExperimentConfig& cfg,
    const std::vector<cf::TaskDataset>& tasks, const cf::MainPlan& plan) {
    const cf::ModelArch arch = cfg.base_arch();
    const auto registry = cf::make_registry(tasks);

    const cf::FetchedBase initial = cf::hub_fetch_base(addr, "");  // observer
    if (initial.iteration != 0)
        throw cf::DataError("hub is already at iteration " +
                            std::to_string(initial.iteration) +
                            "; start a fresh hub for this run");
    if (!(initial.base == plan.init))
        throw cf::DataError(
            "hub base does not match the configured initialization; serve the "
            "hub with the same config and seed");

    std::vector<cf::ParameterVector> bases;
    for (std::size_t i = 0; i < plan.schedule.size(); ++i) {
        const cf::CohortPlan& cohort = plan.schedule[i];
        std::vector<cf::ParameterVector> fused(cohort.size());
        std::vector<std::exception_ptr> errors(cohort.size());
        std::vector<std::thread> threads;
        for (std::size_t c = 0; c < cohort.size(); ++c) {
            threads.emplace_back([&, c] {
                try {
                    const cf::ContributorJob& job = cohort[c];
                    fused[c] = cf::contribute(addr, job.contributor_id, arch,
                                              cf::registry_get(registry, job.task_id),
                                              job.cfg);
                } catch (...) {
                    errors[c] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) t.join();
        for (const auto& e : errors)
            if (e) std::rethrow_exception(e);
        for (std::size_t c = 1; c < fused.size(); ++c)
            if (!(fused[c] == fused[0]))
                throw cf::DataError("contributors disagree on the fused base at "
                                    "iteration " +
                                    std::to_string(i + 1));
        std::printf("iteration %zu/%zu fused (%zu contributors)\n", i + 1,
                    plan.schedule.size(), cohort.size());
        std::fflush(stdout);
        bases.push_back(std::move(fused[0]));
    }
    return bases;
}

int cmd_run(const Opts& o) {
    const cf::ExperimentConfig cfg = load_config(o);
    const auto tasks = cf::load_family(cfg.data_dir);
    std::vector<cf::EvalRow> rows;
    if (o.hub.empty()) {
        rows = cf::run_scenario(cfg, tasks);
    } else {
        if (cfg.scenario.name != "main")
            throw cf::ConfigError("--hub supports only the main scenario");
        if (cfg.scenario.seeds.size() != 1)
            throw cf::ConfigError(
                "--hub needs exactly one seed (narrow with --seeds)");
        if (tasks.size() != cfg.family.n_tasks)
            throw cf::DataError("task list does not match the configured family size");
        const cf::HubAddress addr = resolve_hub(o.hub, false);
        const std::uint64_t s = cfg.scenario.seeds[0];
        std::vector<std::size_t> pool(tasks.size());
        for (std::size_t t = 0; t < pool.size(); ++t) pool[t] = t;
        const cf::MainPlan plan =
            cf::plan_main(cfg, tasks, s, pool, cfg.scenario.cohort_size,
                          cfg.scenario.iterations, cfg.train);
        const auto bases = hub_protocol_bases(addr, cfg, tasks, plan);
        cf::main_rows(rows, cfg, tasks, tasks, s, s, plan.init, bases, "", -1,
                      cfg.train, /*full_baselines=*/true);
    }
    cf::write_report(cfg.output_dir, cfg.scenario.name, rows);
    std::printf("%s: %zu rows -> %s/%s.csv, %s/%s.json\n",
                cfg.scenario.name.c_str(), rows.size(), cfg.output_dir.c_str(),
                cfg.scenario.name.c_str(), cfg.output_dir.c_str(),
                cfg.scenario.name.c_str());
    return 0;
}

int cmd_report(const Opts& o) {
    std::vector<fs::path> files;
    if (!fs::is_directory(o.dir))
        throw cf::DataError("not a directory: " + o.dir);
    for (const auto& entry : fs::directory_iterator(o.dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv" &&
            entry.path().filename() != "summary.csv")
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw cf::DataError("no result CSVs in " + o.dir);

    std::string summary = "scenario,regime,arm,fold,iteration,seeds,mean,std\n";
    for (const auto& file : files) {
        const auto rows = cf::read_report_csv(file);
        const std::string scenario =
            rows.empty() ? file.stem().string() : rows[0].scenario;
        std::printf("== %s (%zu rows)\n", scenario.c_str(), rows.size());
        for (const auto& g : cf::aggregate(rows)) {
            std::string label = g.regime;
            if (!g.arm.empty()) label += " [" + g.arm + "]";
            if (g.fold >= 0) label += " fold=" + std::to_string(g.fold);
            std::printf("  %-44s iter %3zu  mean %.4f  std %.4f  (%zu seeds)\n",
                        label.c_str(), g.iteration, g.mean, g.stddev,
                        g.seeds.size());
            summary += scenario + ',' + g.regime + ',' + g.arm + ',';
            if (g.fold >= 0) summary += std::to_string(g.fold);
            summary += ',' + std::to_string(g.iteration) + ',' +
                       std::to_string(g.seeds.size()) + ',' +
                       cf::detail::fmt_double(g.mean) + ',' +
                       cf::detail::fmt_double(g.stddev) + '\n';
        }
    }
    const fs::path out = fs::path(o.dir) / "summary.csv";
    cf::atomic_write(out, summary);
    std::printf("wrote %s\n", out.string().c_str());
    return 0;
}

int cmd_hub_serve(const Opts& o) {
    const cf::ExperimentConfig cfg = load_config(o);
    cf::HubConfig hub;
    hub.bind_address = o.bind;
    hub.port = o.port;
    hub.cohort_size = o.cohort > 0 ? o.cohort : cfg.scenario.cohort_size;
    hub.deadline_ms = o.deadline_ms;
    cf::HubServer server(
        cf::make_repository(cf::init_body(cfg.base_arch(), o.seed)), hub);
    const std::uint16_t port = server.start();
    std::printf("listening on %s:%u\n", o.bind.c_str(), port);
    std::fflush(stdout);
    std::signal(SIGINT, handle_stop);
    std::signal(SIGTERM, handle_stop);
    std::size_t reached = 0;
    while (g_stop == 0) {
        reached = server.snapshot().iteration;
        if (o.iterations > 0 && reached >= o.iterations) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    server.stop();
    std::printf("hub stopped at iteration %zu\n", reached);
    return 0;
}

int cmd_contribute(const Opts& o) {
    const cf::ExperimentConfig cfg = load_config(o);
    const cf::HubAddress addr = resolve_hub(o.hub, true);
    const auto tasks = cf::load_family(cfg.data_dir);
    const auto it = std::find_if(
        tasks.begin(), tasks.end(),
        [&](const cf::TaskDataset& t) { return t.task_id == o.task; });
    if (it == tasks.end())
        throw cf::DataError("task '" + o.task + "' not found in " + cfg.data_dir);
    const std::string id = o.contributor.empty() ? o.task : o.contributor;
    for (std::size_t r = 0; r < o.rounds; ++r) {
        const cf::TrainConfig train =
            cfg.train.with_seed(cf::mix_seed(o.seed, cf::salt::contributor, r));
        const cf::ParameterVector base =
            cf::contribute(addr, id, cfg.base_arch(), *it, train);
        std::printf("round %zu: fused base %s\n", r,
                    cf::pv_hash(base).c_str());
        std::fflush(stdout);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "collaborative multitask fusion: synthetic task families, iterative "
        "finetune-and-average experiments, and a TCP hub"};
    app.require_subcommand(1);
    Opts o;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "experiment config JSON")
            ->required();
    };

    CLI::App* generate =
        app.add_subcommand("generate", "sample the task family to disk");
    add_config(generate);
    generate->add_option("--data", o.data, "output dataset directory");

    CLI::App* run = app.add_subcommand(
        "run", "run the configured scenario and write result CSV/JSON");
    add_config(run);
    run->add_option("--data", o.data, "dataset directory");
    run->add_option("--out", o.out, "output directory");
    run->add_option("--scenario", o.scenario, "scenario name override");
    run->add_option("--seeds", o.seeds, "seed list override")->delimiter(',');
    run->add_option("--seed-offset", o.seed_offset,
                    "added to every configured seed");
    run->add_option("--hub", o.hub,
                    "run contributors against this hub (host:port, or 'env' "
                    "for COLDFUSE_HUB_ADDR); main scenario, one seed");

    CLI::App* report = app.add_subcommand(
        "report", "summarize result CSVs and write summary.csv");
    report->add_option("--dir", o.dir, "directory of result CSVs")->required();

    CLI::App* serve = app.add_subcommand("hub-serve", "serve a fusion hub");
    add_config(serve);
    serve->add_option("--seed", o.seed, "base-model initialization seed");
    serve->add_option("--bind", o.bind, "bind address (default 127.0.0.1)");
    serve->add_option("--port", o.port, "TCP port (0 = ephemeral)");
    serve->add_option("--cohort-size", o.cohort,
                      "contributors per iteration (default: config)");
    serve->add_option("--deadline-ms", o.deadline_ms,
                      "abort an iteration whose cohort stalls this long");
    serve->add_option("--iterations", o.iterations,
                      "exit once this iteration is reached (0 = serve forever)");

    CLI::App* contribute = app.add_subcommand(
        "contribute", "fetch, finetune on one task, submit, await fusion");
    add_config(contribute);
    contribute->add_option("--data", o.data, "dataset directory");
    contribute
        ->add_option("--hub", o.hub,
                     "hub address (default: COLDFUSE_HUB_ADDR)");
    contribute->add_option("--task", o.task, "task id to train on")->required();
    contribute->add_option("--contributor", o.contributor,
                           "contributor id (default: task id)");
    contribute->add_option("--rounds", o.rounds, "successive iterations to join");
    contribute->add_option("--seed", o.seed, "training seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(generate)) return cmd_generate(o);
        if (app.got_subcommand(run)) return cmd_run(o);
        if (app.got_subcommand(report)) return cmd_report(o);
        if (app.got_subcommand(serve)) return cmd_hub_serve(o);
        if (app.got_subcommand(contribute)) return cmd_contribute(o);
        return 2;
    } catch (const cf::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const cf::TransportError& e) {
        std::cerr << "transport error: " << e.what() << "\n";
        return 4;
    } catch (const cf::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const cf::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}
