#pragma once

// Result-record persistence: one JSON object per line, append-only. Whole
// lines are written atomically enough for concurrent trial appends within a
// process; readers tolerate trailing blank lines.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xtab/metrics.hpp"

namespace xtab {

inline nlohmann::json record_to_json(const MetricRecord& r) {
    return nlohmann::json{{"schema_version", r.schema_version},
                          {"task", r.task},
                          {"trial", r.trial},
                          {"model", r.model},
                          {"regime", r.regime},
                          {"init", r.init},
                          {"metric", r.metric},
                          {"value", r.value},
                          {"seconds", r.seconds},
                          {"config_hash", r.config_hash}};
}

inline MetricRecord record_from_json(const nlohmann::json& j) {
    MetricRecord r;
    r.schema_version = j.at("schema_version").get<int>();
    if (r.schema_version != 1)
        throw LoadError("results file: unsupported record schema_version " + std::to_string(r.schema_version));
    r.task = j.at("task").get<std::string>();
    r.trial = j.at("trial").get<int>();
    r.model = j.at("model").get<std::string>();
    r.regime = j.at("regime").get<std::string>();
    r.init = j.at("init").get<std::string>();
    r.metric = j.at("metric").get<std::string>();
    r.value = j.at("value").get<double>();
    r.seconds = j.at("seconds").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    return r;
}

inline void append_record(const std::string& path, const MetricRecord& r) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw LoadError("results file: cannot open " + path + " for append");
    out << record_to_json(r).dump() << "\n";
}

inline std::vector<MetricRecord> read_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("results file: cannot open " + path);
    std::vector<MetricRecord> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("results file: bad record at line " + std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(record_from_json(j));
    }
    if (out.empty()) throw LoadError("results file: no records in " + path);
    return out;
}

}  // namespace xtab
