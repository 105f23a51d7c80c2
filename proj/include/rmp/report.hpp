#pragma once

#include "rmp/lab.hpp"
#include "rmp/walk.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace rmp {

inline constexpr const char* kVersion = "0.1.0";

// Stable shortest-round-trip formatting shared by every emitted file; the
// reproducibility contract is byte-identical output for identical inputs.
std::string format_double(double v);

void write_text_file(const std::string& path, const std::string& content);
std::string read_file_bytes(const std::string& path);
std::string file_hash_hex(const std::string& path);

// Raw walk samples as CSV: one row per trajectory.
void write_samples_csv(const std::string& path,
                       const std::vector<WalkSample>& samples);

struct RunManifest {
    std::string config_hash;
    std::string code_version = kVersion;
    std::uint64_t seed = 0;
    int threads = 0;
    double wall_seconds = 0.0;
    nlohmann::json effective_config;
    std::vector<std::pair<std::string, std::string>> artifacts;  // path, hash

    void add_artifact(const std::string& path);
    nlohmann::json to_json() const;
    void save(const std::string& path) const;
};

}  // namespace rmp
