#include "rmp/report.hpp"

#include "rmp/hash.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace rmp {

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << content;
}

std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string file_hash_hex(const std::string& path) {
    return to_hex(fnv1a64(read_file_bytes(path)));
}

void ExpansionReport::write_csv(const std::string& path) const {
    std::ostringstream out;
    out << "# schema_version=1 tag=" << tag << "\n";
    for (std::size_t c = 0; c < columns.size(); ++c)
        out << columns[c] << (c + 1 < columns.size() ? "," : "\n");
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c)
            out << format_double(row[c]) << (c + 1 < row.size() ? "," : "\n");
    }
    write_text_file(path, out.str());
}

nlohmann::json ExpansionReport::summary() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["tag"] = tag;
    j["pass"] = pass;
    j["rows"] = rows.size();
    j["meta"] = meta;
    return j;
}

void write_samples_csv(const std::string& path,
                       const std::vector<WalkSample>& samples) {
    std::ostringstream out;
    out << "# schema_version=1 tag=walk-samples\n";
    out << "seed,sigma_n,coeff_log_n,log_delta_n,weight\n";
    for (const auto& s : samples) {
        out << s.trajectory_seed << ',' << format_double(s.sigma_n) << ','
            << format_double(s.coeff_log_n) << ',' << format_double(s.log_delta_n)
            << ',' << format_double(s.importance_log_weight) << "\n";
    }
    write_text_file(path, out.str());
}

void RunManifest::add_artifact(const std::string& path) {
    artifacts.emplace_back(path, file_hash_hex(path));
}

nlohmann::json RunManifest::to_json() const {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["config_hash"] = config_hash;
    j["code_version"] = code_version;
    j["seed"] = seed;
    j["threads"] = threads;
    j["wall_seconds"] = wall_seconds;
    j["effective_config"] = effective_config;
    nlohmann::json arts = nlohmann::json::array();
    for (const auto& [path, hash] : artifacts)
        arts.push_back({{"path", path}, {"hash", hash}});
    j["artifacts"] = arts;
    return j;
}

void RunManifest::save(const std::string& path) const {
    write_text_file(path, to_json().dump(2) + "\n");
}

}  // namespace rmp
