#include "maskdiff/records.hpp"

#include <fstream>

#include "maskdiff/errors.hpp"

namespace maskdiff {

using nlohmann::json;

json record_to_json(const DatasetRecord& rec) {
    json rows = json::array();
    for (int l = 0; l < rec.tokens.levels; ++l) {
        json row = json::array();
        for (int p = 0; p < rec.tokens.length; ++p) row.push_back(rec.tokens.at(l, p));
        rows.push_back(std::move(row));
    }
    return json{{"id", rec.id},       {"tokens", std::move(rows)}, {"identity", rec.identity},
                {"emotion", rec.emotion}, {"text", rec.text},      {"duration", rec.duration}};
}

DatasetRecord record_from_json(const json& j) {
    for (const char* key : {"id", "tokens", "identity", "emotion", "text", "duration"})
        if (!j.contains(key)) throw DataError(std::string("record missing key: ") + key);
    DatasetRecord rec;
    rec.id = j.at("id").get<int64_t>();
    const json& rows = j.at("tokens");
    if (!rows.is_array() || rows.empty() || !rows[0].is_array())
        throw DataError("record tokens must be a non-empty array of rows");
    rec.tokens = TokenGrid(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (int l = 0; l < rec.tokens.levels; ++l) {
        if (static_cast<int>(rows[l].size()) != rec.tokens.length)
            throw DataError("record tokens rows have unequal lengths");
        for (int p = 0; p < rec.tokens.length; ++p)
            rec.tokens.at(l, p) = rows[l][p].get<int32_t>();
    }
    rec.identity = j.at("identity").get<int>();
    rec.emotion = j.at("emotion").get<int>();
    rec.text = j.at("text").get<std::vector<int32_t>>();
    rec.duration = j.at("duration").get<double>();
    return rec;
}

void write_dataset(const std::string& path, const std::vector<DatasetRecord>& records,
                   const json& header_extra) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    json header = header_extra.is_object() ? header_extra : json::object();
    header["format_version"] = kRecordFormatVersion;
    out << json{{"_header", std::move(header)}}.dump() << '\n';
    for (const auto& rec : records) out << record_to_json(rec).dump() << '\n';
    if (!out) throw DataError("write failed: " + path);
}

DatasetFile read_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path);
    DatasetFile file;
    std::string line;
    bool first = true;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (first && j.contains("_header")) {
            file.header = j.at("_header");
            first = false;
            continue;
        }
        first = false;
        file.records.push_back(record_from_json(j));
    }
    return file;
}

json synth_config_to_json(const SynthConfig& cfg) {
    return json{{"n_real", cfg.n_real},
                {"levels", cfg.levels},
                {"length", cfg.length},
                {"n_identities", cfg.n_identities},
                {"n_emotions", cfg.n_emotions},
                {"n_text_symbols", cfg.n_text_symbols},
                {"stay", cfg.stay},
                {"emotion_logit_shift", cfg.emotion_logit_shift},
                {"identity_concentration", cfg.identity_concentration},
                {"embed_dim", cfg.embed_dim},
                {"face_noise", cfg.face_noise},
                {"seed", cfg.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
    SynthConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "n_real") cfg.n_real = value.get<int>();
        else if (key == "levels") cfg.levels = value.get<int>();
        else if (key == "length") cfg.length = value.get<int>();
        else if (key == "n_identities") cfg.n_identities = value.get<int>();
        else if (key == "n_emotions") cfg.n_emotions = value.get<int>();
        else if (key == "n_text_symbols") cfg.n_text_symbols = value.get<int>();
        else if (key == "stay") cfg.stay = value.get<std::vector<double>>();
        else if (key == "emotion_logit_shift") cfg.emotion_logit_shift = value.get<double>();
        else if (key == "identity_concentration") cfg.identity_concentration = value.get<double>();
        else if (key == "embed_dim") cfg.embed_dim = value.get<int>();
        else if (key == "face_noise") cfg.face_noise = value.get<double>();
        else if (key == "seed") cfg.seed = value.get<uint64_t>();
        else throw ConfigError("unknown synth config key: " + key);
    }
    cfg.validate();
    return cfg;
}

}  // namespace maskdiff
