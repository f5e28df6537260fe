#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "coldfuse/dataset.hpp"
#include "coldfuse/errors.hpp"
#include "coldfuse/report.hpp"
#include "coldfuse/rng.hpp"

namespace coldfuse {

// On-disk family layout:
//   <dir>/<task_id>/{meta.json, features.f64, labels.i32}
//   <dir>/manifest.json   {tasks, files: {relpath: fnv64 hex}, family_hash}
// family_hash is the fnv64 of "relpath:hash\n" lines in sorted order, so an
// external rehash of the directory contents can reproduce it.

inline std::string hash_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline std::string family_hash_of(const std::map<std::string, std::string>& files) {
    std::string lines;
    for (const auto& [rel, h] : files) lines += rel + ":" + h + "\n";
    return hash_hex(fnv1a64(lines.data(), lines.size()));
}

inline void save_family(const std::filesystem::path& dir,
                        const std::vector<TaskDataset>& tasks) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::map<std::string, std::string> files;  // sorted by relpath
    std::vector<std::string> ids;
    for (const auto& t : tasks) {
        ids.push_back(t.task_id);
        save_dataset(t, (dir / t.task_id).string());
        for (const char* name : {"meta.json", "features.f64", "labels.i32"}) {
            const std::string rel = t.task_id + "/" + name;
            files[rel] = hash_file(dir / rel);
        }
    }
    nlohmann::json manifest;
    manifest["tasks"] = ids;
    manifest["files"] = files;
    manifest["family_hash"] = family_hash_of(files);
    atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

// Loads every task listed in the manifest, verifying file hashes first so a
// corrupted or half-written directory fails loudly.
inline std::vector<TaskDataset> load_family(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf)
        throw DataError("no dataset manifest at " + (dir / "manifest.json").string() +
                        " (run generate first)");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(mf);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt manifest: " + std::string(e.what()));
    }
    std::map<std::string, std::string> files;
    std::vector<std::string> ids;
    try {
        files = manifest.at("files").get<std::map<std::string, std::string>>();
        ids = manifest.at("tasks").get<std::vector<std::string>>();
        if (manifest.at("family_hash").get<std::string>() != family_hash_of(files))
            throw DataError("manifest family_hash does not match its file list");
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt manifest: " + std::string(e.what()));
    }
    for (const auto& [rel, expected] : files) {
        const std::string actual = hash_file(dir / rel);
        if (actual != expected)
            throw DataError(rel + ": content hash " + actual +
                            " does not match manifest " + expected);
    }
    std::vector<TaskDataset> tasks;
    for (const auto& id : ids)
        tasks.push_back(load_dataset((dir / id).string()));
    return tasks;
}

}  // namespace coldfuse
