// End-to-end tests of the command-line binary: every test runs the real
// executable (path injected as COLDFUSE_BIN) in a scratch directory.

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "coldfuse/report.hpp"

namespace cf = coldfuse;
namespace fs = std::filesystem;

namespace {

fs::path g_scratch;
std::string g_config;  // config with absolute data/out paths

int run_cli(const std::string& args) {
    const std::string cmd =
        std::string(COLDFUSE_BIN) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    if (rc == -1 || !WIFEXITED(rc)) return -1;
    return WEXITSTATUS(rc);
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    EXPECT_TRUE(in) << p;
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

// Starts `hub-serve` via popen, parses the announced port, and returns the
// stream (caller pcloses it after the hub exits on its own).
FILE* start_hub(const std::string& extra, std::uint16_t& port) {
    const std::string cmd = "timeout 120 " + std::string(COLDFUSE_BIN) +
                            " hub-serve --config " + g_config + " " + extra +
                            " 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    EXPECT_NE(pipe, nullptr);
    char line[256];
    port = 0;
    if (pipe && std::fgets(line, sizeof line, pipe)) {
        unsigned p = 0;
        if (std::sscanf(line, "listening on 127.0.0.1:%u", &p) == 1)
            port = static_cast<std::uint16_t>(p);
    }
    return pipe;
}

int finish_hub(FILE* pipe) {
    char line[256];
    while (std::fgets(line, sizeof line, pipe) != nullptr) {
    }  // drain until the hub exits
    const int rc = pclose(pipe);
    if (rc == -1 || !WIFEXITED(rc)) return -1;
    return WEXITSTATUS(rc);
}

class CliTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        std::string tmpl = (fs::temp_directory_path() / "cfcli-XXXXXX").string();
        ASSERT_NE(mkdtemp(tmpl.data()), nullptr);
        g_scratch = fs::path(tmpl);
        g_config = (g_scratch / "config.json").string();
        std::ofstream cfg(g_config);
        cfg << R"({
  "family": {"n_tasks": 3, "input_dim": 8, "shared_rank": 4,
             "examples_per_task": 400, "seed": 9},
  "arch": {"hidden_dims": [8]},
  "train": {"max_examples": 600},
  "eval": {"max_examples": 600, "early_stop_window": 0},
  "probe": {"max_examples": 400, "early_stop_window": 0},
  "scenario": {"name": "main", "cohort_size": 2, "iterations": 2, "seeds": [1]},
  "data_dir": ")" << (g_scratch / "data").string()
            << R"(",
  "output_dir": ")" << (g_scratch / "out").string() << R"("
})";
        cfg.close();
        ASSERT_EQ(run_cli("generate --config " + g_config), 0);
    }

    static void TearDownTestSuite() {
        std::error_code ec;
        fs::remove_all(g_scratch, ec);
    }
};

}  // namespace

TEST_F(CliTest, GenerateIsByteReproducible) {
    const fs::path again = g_scratch / "data2";
    ASSERT_EQ(run_cli("generate --config " + g_config + " --data " +
                      again.string()),
              0);
    for (const char* rel :
         {"manifest.json", "task00/features.f64", "task00/labels.i32",
          "task01/meta.json", "task02/features.f64"})
        EXPECT_EQ(read_file(g_scratch / "data" / rel), read_file(again / rel))
            << rel;
}

TEST_F(CliTest, RunWritesDeterministicReports) {
    ASSERT_EQ(run_cli("run --config " + g_config), 0);
    const std::string first = read_file(g_scratch / "out" / "main.csv");
    EXPECT_EQ(first.compare(0, std::string(cf::kCsvHeader).size(),
                            cf::kCsvHeader),
              0);
    const std::string json_first = read_file(g_scratch / "out" / "main.json");
    ASSERT_EQ(run_cli("run --config " + g_config), 0);
    EXPECT_EQ(read_file(g_scratch / "out" / "main.csv"), first);
    EXPECT_EQ(read_file(g_scratch / "out" / "main.json"), json_first);
    // Rows parse back and carry the expected shape.
    const auto rows = cf::read_report_csv(g_scratch / "out" / "main.csv");
    ASSERT_FALSE(rows.empty());
    for (const auto& r : rows) {
        EXPECT_EQ(r.scenario, "main");
        EXPECT_EQ(r.seed, 1u);
        EXPECT_GE(r.accuracy, 0.0);
        EXPECT_LE(r.accuracy, 1.0);
    }
}

TEST_F(CliTest, ReportMatchesInProcessAggregation) {
    ASSERT_TRUE(fs::exists(g_scratch / "out" / "main.csv"));  // from run test
    ASSERT_EQ(run_cli("report --dir " + (g_scratch / "out").string()), 0);
    const std::string summary = read_file(g_scratch / "out" / "summary.csv");

    // Rebuild the expected summary from the library's own aggregation.
    const auto rows = cf::read_report_csv(g_scratch / "out" / "main.csv");
    std::string expected = "scenario,regime,arm,fold,iteration,seeds,mean,std\n";
    for (const auto& g : cf::aggregate(rows)) {
        expected += "main," + g.regime + ',' + g.arm + ',';
        if (g.fold >= 0) expected += std::to_string(g.fold);
        expected += ',' + std::to_string(g.iteration) + ',' +
                    std::to_string(g.seeds.size()) + ',' +
                    cf::detail::fmt_double(g.mean) + ',' +
                    cf::detail::fmt_double(g.stddev) + '\n';
    }
    EXPECT_EQ(summary, expected);
}

TEST_F(CliTest, UsageAndConfigErrorsExitTwo) {
    EXPECT_EQ(run_cli("frobnicate"), 2);            // unknown subcommand
    EXPECT_EQ(run_cli(""), 2);                       // missing subcommand
    EXPECT_EQ(run_cli("run"), 2);                    // --config is required
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli("run --help"), 0);
    EXPECT_EQ(run_cli("run --config " + (g_scratch / "absent.json").string()), 2);
    EXPECT_EQ(run_cli("run --config " + g_config + " --scenario warp"), 2);
    EXPECT_EQ(run_cli("run --config " + g_config + " --seeds 1,1"), 2);
    // --hub is main-scenario, single-seed only.
    EXPECT_EQ(run_cli("run --config " + g_config +
                      " --hub 127.0.0.1:1 --seeds 1,2"),
              2);
    EXPECT_EQ(run_cli("run --config " + g_config +
                      " --hub 127.0.0.1:1 --scenario federated_flow"),
              2);
    {
        std::ofstream bad(g_scratch / "bad.json");
        bad << "{not json";
    }
    EXPECT_EQ(run_cli("generate --config " + (g_scratch / "bad.json").string()),
              2);
    // contribute with neither --hub nor COLDFUSE_HUB_ADDR set.
    unsetenv("COLDFUSE_HUB_ADDR");
    EXPECT_EQ(run_cli("contribute --config " + g_config + " --task task00"), 2);
}

TEST_F(CliTest, DataErrorsExitThree) {
    const fs::path empty = g_scratch / "empty";
    fs::create_directories(empty);
    EXPECT_EQ(run_cli("run --config " + g_config + " --data " + empty.string()),
              3);  // no dataset manifest
    EXPECT_EQ(run_cli("report --dir " + (g_scratch / "nodir").string()), 3);
    EXPECT_EQ(run_cli("report --dir " + empty.string()), 3);  // no CSVs
    EXPECT_EQ(run_cli("contribute --config " + g_config +
                      " --hub 127.0.0.1:1 --task task99"),
              3);  // unknown task id (checked before connecting)
}

TEST_F(CliTest, UnreachableHubExitsFour) {
    EXPECT_EQ(run_cli("run --config " + g_config + " --hub 127.0.0.1:1"), 4);
}

TEST_F(CliTest, NetworkedRunReproducesTheLocalReport) {
    ASSERT_TRUE(fs::exists(g_scratch / "out" / "main.csv"));  // local reference
    std::uint16_t port = 0;
    FILE* hub = start_hub("--seed 1 --iterations 2", port);
    ASSERT_NE(hub, nullptr);
    ASSERT_GT(port, 0) << "hub did not announce a port";

    const fs::path outhub = g_scratch / "outhub";
    EXPECT_EQ(run_cli("run --config " + g_config + " --hub 127.0.0.1:" +
                      std::to_string(port) + " --out " + outhub.string()),
              0);
    EXPECT_EQ(finish_hub(hub), 0);  // reached --iterations and stopped
    EXPECT_EQ(read_file(outhub / "main.csv"),
              read_file(g_scratch / "out" / "main.csv"));
}

TEST_F(CliTest, ContributeUsesTheEnvironmentHubAddress) {
    std::uint16_t port = 0;
    FILE* hub = start_hub("--seed 3 --cohort-size 1 --iterations 1", port);
    ASSERT_NE(hub, nullptr);
    ASSERT_GT(port, 0);

    setenv("COLDFUSE_HUB_ADDR", ("127.0.0.1:" + std::to_string(port)).c_str(), 1);
    EXPECT_EQ(run_cli("contribute --config " + g_config + " --task task01"), 0);
    unsetenv("COLDFUSE_HUB_ADDR");
    EXPECT_EQ(finish_hub(hub), 0);
}
