#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "maskdiff/synth.hpp"

namespace maskdiff {

// Line-delimited dataset files. The first line is {"_header": {...}} with
// the resolved config echo and format version; every later line is one
// record object with exactly the keys
//   {id, tokens, identity, emotion, text, duration}.
// Grids and samples share the format; sample files use -1 for condition
// slots that were left null.
constexpr int kRecordFormatVersion = 1;

nlohmann::json record_to_json(const DatasetRecord& rec);
DatasetRecord record_from_json(const nlohmann::json& j);

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records,
                   const nlohmann::json& header_extra);

struct DatasetFile {
    nlohmann::json header;
    std::vector<DatasetRecord> records;
};

DatasetFile read_dataset(const std::string& path);

nlohmann::json synth_config_to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

}  // namespace maskdiff
