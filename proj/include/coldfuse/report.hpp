#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/errors.hpp"

namespace coldfuse {

// One measured accuracy. `arm` distinguishes sub-conditions inside a
// scenario (seen/unseen, size=..., m=..., pool=..., k=..., cap=...); `fold`
// is the cross-validation fold index, -1 when folds do not apply.
struct EvalRow {
    std::string scenario;
    std::uint64_t seed = 0;
    std::size_t iteration = 0;
    std::string task_id;
    std::string regime;  // cold | frozen | baseline_*
    double accuracy = 0.0;
    std::string arm;
    int fold = -1;
};

inline const char* kCsvHeader = "scenario,seed,iteration,task_id,regime,accuracy,arm,fold";

namespace detail {

// Shortest decimal that round-trips a double exactly.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void require_csv_safe(const std::string& s, const char* what) {
    if (s.find(',') != std::string::npos || s.find('\n') != std::string::npos)
        throw DataError(std::string(what) + " contains a CSV delimiter: " + s);
}

inline auto row_key(const EvalRow& r) {
    return std::tie(r.scenario, r.seed, r.arm, r.fold, r.iteration, r.regime,
                    r.task_id);
}

}  // namespace detail

// Canonical row order, so report bytes never depend on production order.
inline void sort_rows(std::vector<EvalRow>& rows) {
    std::sort(rows.begin(), rows.end(), [](const EvalRow& a, const EvalRow& b) {
        return detail::row_key(a) < detail::row_key(b);
    });
}

// Write-temp-then-rename: an interrupted run never leaves a partial file
// that parses.
inline void atomic_write(const std::filesystem::path& path,
                         const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open " + tmp.string() + " for writing");
        out.write(content.data(),
                  static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string rows_to_csv(std::vector<EvalRow> rows) {
    sort_rows(rows);
    std::string out = kCsvHeader;
    out += '\n';
    for (const auto& r : rows) {
        detail::require_csv_safe(r.scenario, "scenario");
        detail::require_csv_safe(r.task_id, "task_id");
        detail::require_csv_safe(r.regime, "regime");
        detail::require_csv_safe(r.arm, "arm");
        out += r.scenario;
        out += ',';
        out += std::to_string(r.seed);
        out += ',';
        out += std::to_string(r.iteration);
        out += ',';
        out += r.task_id;
        out += ',';
        out += r.regime;
        out += ',';
        out += detail::fmt_double(r.accuracy);
        out += ',';
        out += r.arm;
        out += ',';
        if (r.fold >= 0) out += std::to_string(r.fold);
        out += '\n';
    }
    return out;
}

inline std::vector<EvalRow> rows_from_csv(const std::string& text) {
    std::vector<EvalRow> rows;
    std::size_t pos = 0;
    bool header = true;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        if (header) {
            if (line != kCsvHeader)
                throw DataError("unexpected CSV header: " + line);
            header = false;
            continue;
        }
        std::vector<std::string> f;
        std::size_t p = 0;
        while (true) {
            const std::size_t c = line.find(',', p);
            if (c == std::string::npos) {
                f.push_back(line.substr(p));
                break;
            }
            f.push_back(line.substr(p, c - p));
            p = c + 1;
        }
        if (f.size() != 8) throw DataError("malformed CSV row: " + line);
        EvalRow r;
        r.scenario = f[0];
        r.seed = std::stoull(f[1]);
        r.iteration = std::stoull(f[2]);
        r.task_id = f[3];
        r.regime = f[4];
        r.accuracy = std::stod(f[5]);
        r.arm = f[6];
        r.fold = f[7].empty() ? -1 : std::stoi(f[7]);
        rows.push_back(std::move(r));
    }
    if (header) throw DataError("empty CSV report");
    return rows;
}

// --- aggregation -------------------------------------------------------

// One plotted point: a (regime, arm, fold, iteration) cell, first averaged
// over tasks within each seed, then summarized across seeds.
struct SummaryGroup {
    std::string regime;
    std::string arm;
    int fold = -1;
    std::size_t iteration = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<double> per_seed;  // task-mean accuracy, aligned with seeds
    double mean = 0.0;
    double stddev = 0.0;  // sample std (n-1); 0 for a single seed
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline std::vector<SummaryGroup> aggregate(const std::vector<EvalRow>& rows) {
    // (regime, arm, fold, iteration, seed) -> accuracies over tasks
    using CellKey = std::tuple<std::string, std::string, int, std::size_t,
                               std::uint64_t>;
    std::map<CellKey, std::vector<double>> cells;
    for (const auto& r : rows)
        cells[CellKey{r.regime, r.arm, r.fold, r.iteration, r.seed}].push_back(
            r.accuracy);

    std::vector<SummaryGroup> groups;
    for (const auto& [key, accs] : cells) {
        const auto& [regime, arm, fold, iteration, seed] = key;
        if (groups.empty() || groups.back().regime != regime ||
            groups.back().arm != arm || groups.back().fold != fold ||
            groups.back().iteration != iteration) {
            SummaryGroup g;
            g.regime = regime;
            g.arm = arm;
            g.fold = fold;
            g.iteration = iteration;
            groups.push_back(std::move(g));
        }
        groups.back().seeds.push_back(seed);
        groups.back().per_seed.push_back(mean_of(accs));
    }
    for (auto& g : groups) {
        g.mean = mean_of(g.per_seed);
        g.stddev = sample_std(g.per_seed);
    }
    return groups;
}

inline nlohmann::json summary_to_json(const std::string& scenario,
                                      const std::vector<EvalRow>& rows) {
    nlohmann::json j;
    j["scenario"] = scenario;
    j["groups"] = nlohmann::json::array();
    for (const auto& g : aggregate(rows)) {
        j["groups"].push_back({{"regime", g.regime},
                               {"arm", g.arm},
                               {"fold", g.fold},
                               {"iteration", g.iteration},
                               {"seeds", g.seeds},
                               {"per_seed", g.per_seed},
                               {"mean", g.mean},
                               {"std", g.stddev}});
    }
    return j;
}

// Writes <dir>/<scenario>.csv and <dir>/<scenario>.json atomically.
inline void write_report(const std::filesystem::path& dir,
                         const std::string& scenario,
                         const std::vector<EvalRow>& rows) {
    std::filesystem::create_directories(dir);
    atomic_write(dir / (scenario + ".csv"), rows_to_csv(rows));
    atomic_write(dir / (scenario + ".json"),
                 summary_to_json(scenario, rows).dump(2) + "\n");
}

inline std::vector<EvalRow> read_report_csv(const std::filesystem::path& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot read report " + file.string());
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return rows_from_csv(text);
}

}  // namespace coldfuse
