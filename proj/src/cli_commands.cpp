#include "maskdiff/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "maskdiff/errors.hpp"
#include "maskdiff/oracle.hpp"
#include "maskdiff/records.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/score_net.hpp"
#include "maskdiff/synth.hpp"
#include "maskdiff/trainer.hpp"
#include "maskdiff/version.hpp"

namespace maskdiff {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

struct ModelArch {
    int n_blocks = 2;
    int hidden = 64;
    int n_heads = 4;
    uint64_t init_seed = 1;
};

struct SampleParams {
    int n = 16;
    int steps = 96;
    double w0 = 1.9, w1 = 1.0, w2 = 1.0, w3 = 1.6;
    int length = 0;  // 0: the model's native grid length
    bool predict_length = false;
    uint64_t seed = 0;
};

struct GenParams {
    int n = 1000;
};

struct GridParams {
    double w0_min = 1.0, w0_max = 2.0;
    int w0_count = 3;
    double w1_min = 1.0, w1_max = 1.4;
    int w1_count = 3;
    double w2 = 1.0, w3 = 1.6;
    int n = 64;  // samples per grid cell
    int steps = 96;
    uint64_t seed = 0;
};

struct RunConfig {
    SynthConfig synth;
    ModelArch model;
    TrainConfig train;
    SampleParams sample;
    GenParams gen;
    GridParams grid;
};

json model_arch_to_json(const ModelArch& m) {
    return json{{"n_blocks", m.n_blocks},
                {"hidden", m.hidden},
                {"n_heads", m.n_heads},
                {"init_seed", m.init_seed}};
}

void model_arch_apply_json(ModelArch& m, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "n_blocks") m.n_blocks = value.get<int>();
        else if (key == "hidden") m.hidden = value.get<int>();
        else if (key == "n_heads") m.n_heads = value.get<int>();
        else if (key == "init_seed") m.init_seed = value.get<uint64_t>();
        else throw ConfigError("config: unknown model key '" + key + "'");
    }
}

json train_config_to_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"batch_size", c.batch_size},
                {"iterations", c.iterations},
                {"epoch_iters", c.epoch_iters},
                {"p_all_null", c.p_all_null},
                {"p_each_null", c.p_each_null},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"adam_eps", c.adam_eps},
                {"weight_decay", c.weight_decay},
                {"epochs_per_level", c.epochs_per_level},
                {"curriculum", c.curriculum},
                {"val_fraction", c.val_fraction},
                {"val_batches", c.val_batches},
                {"t_floor", c.t_floor},
                {"seed", c.seed}};
}

void train_config_apply_json(TrainConfig& c, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "lr") c.lr = value.get<double>();
        else if (key == "batch_size") c.batch_size = value.get<int>();
        else if (key == "iterations") c.iterations = value.get<long>();
        else if (key == "epoch_iters") c.epoch_iters = value.get<int>();
        else if (key == "p_all_null") c.p_all_null = value.get<double>();
        else if (key == "p_each_null") c.p_each_null = value.get<double>();
        else if (key == "beta1") c.beta1 = value.get<double>();
        else if (key == "beta2") c.beta2 = value.get<double>();
        else if (key == "adam_eps") c.adam_eps = value.get<double>();
        else if (key == "weight_decay") c.weight_decay = value.get<double>();
        else if (key == "epochs_per_level") c.epochs_per_level = value.get<int>();
        else if (key == "curriculum") c.curriculum = value.get<bool>();
        else if (key == "val_fraction") c.val_fraction = value.get<double>();
        else if (key == "val_batches") c.val_batches = value.get<int>();
        else if (key == "t_floor") c.t_floor = value.get<double>();
        else if (key == "seed") c.seed = value.get<uint64_t>();
        else throw ConfigError("config: unknown train key '" + key + "'");
    }
}

json sample_params_to_json(const SampleParams& p) {
    return json{{"n", p.n},           {"steps", p.steps},
                {"w0", p.w0},         {"w1", p.w1},
                {"w2", p.w2},         {"w3", p.w3},
                {"length", p.length}, {"predict_length", p.predict_length},
                {"seed", p.seed}};
}

void sample_params_apply_json(SampleParams& p, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "n") p.n = value.get<int>();
        else if (key == "steps") p.steps = value.get<int>();
        else if (key == "w0") p.w0 = value.get<double>();
        else if (key == "w1") p.w1 = value.get<double>();
        else if (key == "w2") p.w2 = value.get<double>();
        else if (key == "w3") p.w3 = value.get<double>();
        else if (key == "length") p.length = value.get<int>();
        else if (key == "predict_length") p.predict_length = value.get<bool>();
        else if (key == "seed") p.seed = value.get<uint64_t>();
        else throw ConfigError("config: unknown sample key '" + key + "'");
    }
}

json grid_params_to_json(const GridParams& g) {
    return json{{"w0_min", g.w0_min}, {"w0_max", g.w0_max}, {"w0_count", g.w0_count},
                {"w1_min", g.w1_min}, {"w1_max", g.w1_max}, {"w1_count", g.w1_count},
                {"w2", g.w2},         {"w3", g.w3},         {"n", g.n},
                {"steps", g.steps},   {"seed", g.seed}};
}

void grid_params_apply_json(GridParams& g, const json& j) {
    for (const auto& [key, value] : j.items()) {
        if (key == "w0_min") g.w0_min = value.get<double>();
        else if (key == "w0_max") g.w0_max = value.get<double>();
        else if (key == "w0_count") g.w0_count = value.get<int>();
        else if (key == "w1_min") g.w1_min = value.get<double>();
        else if (key == "w1_max") g.w1_max = value.get<double>();
        else if (key == "w1_count") g.w1_count = value.get<int>();
        else if (key == "w2") g.w2 = value.get<double>();
        else if (key == "w3") g.w3 = value.get<double>();
        else if (key == "n") g.n = value.get<int>();
        else if (key == "steps") g.steps = value.get<int>();
        else if (key == "seed") g.seed = value.get<uint64_t>();
        else throw ConfigError("config: unknown grid key '" + key + "'");
    }
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

RunConfig load_run_config(const std::string& path) {
    RunConfig cfg;
    if (path.empty()) return cfg;
    const json j = read_json_file(path);
    if (!j.is_object()) throw ConfigError(path + ": config root must be an object");
    for (const auto& [section, body] : j.items()) {
        if (section == "synth") cfg.synth = synth_config_from_json(body);
        else if (section == "model") model_arch_apply_json(cfg.model, body);
        else if (section == "train") train_config_apply_json(cfg.train, body);
        else if (section == "sample") sample_params_apply_json(cfg.sample, body);
        else if (section == "gen") {
            for (const auto& [key, value] : body.items()) {
                if (key == "n") cfg.gen.n = value.get<int>();
                else throw ConfigError("config: unknown gen key '" + key + "'");
            }
        } else if (section == "grid") grid_params_apply_json(cfg.grid, body);
        else throw ConfigError("config: unknown section '" + section + "'");
    }
    return cfg;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw DataError("write failed: " + path);
}

// ------------------------------------------------------------- model I/O

MMDiTConfig derive_model_config(const SynthConfig& synth, const ModelArch& arch) {
    MMDiTConfig mcfg;
    mcfg.n_blocks = arch.n_blocks;
    mcfg.hidden = arch.hidden;
    mcfg.n_heads = arch.n_heads;
    mcfg.max_levels = synth.levels;
    mcfg.n_real = synth.n_real;
    mcfg.id_dim = synth.embed_dim;
    mcfg.n_emotions = synth.n_emotions;
    mcfg.n_text_symbols = synth.n_text_symbols;
    return mcfg;
}

const std::string& require_meta(const Checkpoint& ckpt, const std::string& key) {
    auto it = ckpt.meta.find(key);
    if (it == ckpt.meta.end())
        throw DataError("checkpoint missing meta key '" + key +
                        "'; expected a published model file");
    return it->second;
}

struct PublishedModel {
    MMDiTConfig mcfg;
    std::unique_ptr<MMDiT> model;
    SynthConfig synth;
    DurationModel duration;
};

PublishedModel load_published_model(const std::string& path) {
    const Checkpoint ckpt = load_checkpoint(path);
    PublishedModel pm;
    pm.synth = synth_config_from_json(json::parse(require_meta(ckpt, "synth.config")));
    pm.mcfg.n_blocks = std::stoi(require_meta(ckpt, "model.n_blocks"));
    pm.mcfg.hidden = std::stoi(require_meta(ckpt, "model.hidden"));
    pm.mcfg.n_heads = std::stoi(require_meta(ckpt, "model.n_heads"));
    pm.mcfg.max_levels = std::stoi(require_meta(ckpt, "model.max_levels"));
    pm.mcfg.n_real = std::stoi(require_meta(ckpt, "model.n_real"));
    pm.mcfg.id_dim = std::stoi(require_meta(ckpt, "model.id_dim"));
    pm.mcfg.n_emotions = std::stoi(require_meta(ckpt, "model.n_emotions"));
    pm.mcfg.n_text_symbols = std::stoi(require_meta(ckpt, "model.n_text_symbols"));
    pm.model = std::make_unique<MMDiT>(pm.mcfg, 0);
    load_model_params(*pm.model, ckpt);

    pm.duration = DurationModel(pm.mcfg.n_text_symbols);
    std::stringstream ss(require_meta(ckpt, "duration.theta"));
    for (double& th : pm.duration.theta) {
        char sep = 0;
        if (!(ss >> th)) throw DataError("checkpoint duration.theta is malformed");
        ss >> sep;
    }
    return pm;
}

// --------------------------------------------------------------- helpers

std::vector<int32_t> parse_text_csv(const std::string& text) {
    std::vector<int32_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            const int v = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--text expects comma-separated symbol ids, got '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("--text expects at least one symbol id");
    return out;
}

// Piecewise-constant alignment of a symbol sequence onto `length` slots,
// each symbol covering a span proportional to its modeled duration.
std::vector<int32_t> expand_text(const std::vector<int32_t>& symbols, const DurationModel& dm,
                                 int length) {
    std::vector<double> cum(symbols.size());
    double total = 0.0;
    for (size_t i = 0; i < symbols.size(); ++i) {
        total += dm.duration(symbols[i]);
        cum[i] = total;
    }
    std::vector<int32_t> out(static_cast<size_t>(length));
    size_t k = 0;
    for (int j = 0; j < length; ++j) {
        const double u = (j + 0.5) / length * total;
        while (k + 1 < symbols.size() && cum[k] <= u) ++k;
        out[j] = symbols[k];
    }
    return out;
}

// Expected total variation of an N-sample histogram against its own law;
// the binomial half-normal approximation per support atom.
double tv_noise_floor(const ToyDistribution& p0, int n_samples) {
    double acc = 0.0;
    for (double p : p0.probs)
        acc += 0.5 * std::sqrt(2.0 * p * (1.0 - p) / (3.141592653589793 * n_samples));
    return acc;
}

constexpr uint64_t kCellSeedStride = 0x9E3779B97F4A7C15ULL;

// ------------------------------------------------------------------ eval

struct EvalRow {
    std::optional<int> identity;
    std::optional<int> emotion;
    std::optional<std::vector<int32_t>> text;
    int n = 0;
    double tv = 0.0;
    std::optional<double> identity_accuracy;
    std::optional<double> emotion_accuracy;
    std::optional<double> text_accuracy;
};

struct EvalSummary {
    int n_samples = 0;
    double mean_tv = 0.0;
    std::optional<double> identity_accuracy;
    std::optional<double> emotion_accuracy;
    std::optional<double> text_accuracy;
    std::vector<EvalRow> rows;
};

// Classifier bundle reused across groups; built once per synth config.
struct EvalContext {
    SynthConfig cfg;
    ToyTables tables;
    MlClassifier id_clf;
    MlClassifier emo_clf;
    MlClassifier text_clf;

    explicit EvalContext(const SynthConfig& c)
        : cfg(c),
          tables(enumerate_toy_distribution(c)),
          id_clf(tables.identity),
          emo_clf(tables.emotion),
          text_clf(tables.text) {}
};

EvalSummary evaluate_samples(const std::vector<DatasetRecord>& records, const EvalContext& ctx) {
    if (records.empty()) throw DataError("eval: no samples");
    const SynthConfig& cfg = ctx.cfg;

    // Group by the conditioning triple; absent slots are marked with -1 /
    // empty text in the record format.
    std::map<std::tuple<int, int, int64_t>, std::vector<size_t>> groups;
    for (size_t i = 0; i < records.size(); ++i) {
        const DatasetRecord& r = records[i];
        if (r.tokens.levels != cfg.levels || r.tokens.length != cfg.length)
            throw DataError("eval: sample grid shape does not match the configured task");
        r.tokens.check_ids(Vocab(cfg.n_real));
        int64_t tc = -1;
        if (!r.text.empty()) {
            if (static_cast<int>(r.text.size()) != cfg.length)
                throw DataError("eval: sample text length does not match the grid");
            tc = static_cast<int64_t>(encode_text(r.text, cfg.n_text_symbols));
        }
        groups[{r.identity, r.emotion, tc}].push_back(i);
    }

    EvalSummary sum;
    sum.n_samples = static_cast<int>(records.size());
    double id_n = 0, id_ok = 0, emo_n = 0, emo_ok = 0, text_n = 0, text_ok = 0;
    for (const auto& [key, idx] : groups) {
        const auto& [id, emo, tc] = key;
        EvalRow row;
        row.n = static_cast<int>(idx.size());
        if (id >= 0) row.identity = id;
        if (emo >= 0) row.emotion = emo;
        if (tc >= 0) row.text = records[idx.front()].text;

        std::vector<TokenGrid> grids;
        grids.reserve(idx.size());
        for (size_t i : idx) grids.push_back(records[i].tokens);

        const ToyDistribution ref = conditional_toy_distribution(
            cfg, row.identity, row.emotion,
            tc >= 0 ? std::optional<uint64_t>(static_cast<uint64_t>(tc)) : std::nullopt);
        row.tv = tv_distance(grids, ref);

        if (row.identity) {
            int ok = 0;
            for (const TokenGrid& g : grids) ok += ctx.id_clf.classify(g) == *row.identity;
            row.identity_accuracy = static_cast<double>(ok) / row.n;
            id_n += row.n;
            id_ok += ok;
        }
        if (row.emotion) {
            int ok = 0;
            for (const TokenGrid& g : grids) ok += ctx.emo_clf.classify(g) == *row.emotion;
            row.emotion_accuracy = static_cast<double>(ok) / row.n;
            emo_n += row.n;
            emo_ok += ok;
        }
        if (row.text) {
            int ok = 0;
            for (const TokenGrid& g : grids) ok += ctx.text_clf.classify(g) == tc;
            row.text_accuracy = static_cast<double>(ok) / row.n;
            text_n += row.n;
            text_ok += ok;
        }
        sum.mean_tv += row.tv * row.n;
        sum.rows.push_back(std::move(row));
    }
    sum.mean_tv /= sum.n_samples;
    if (id_n > 0) sum.identity_accuracy = id_ok / id_n;
    if (emo_n > 0) sum.emotion_accuracy = emo_ok / emo_n;
    if (text_n > 0) sum.text_accuracy = text_ok / text_n;
    return sum;
}

json eval_row_to_json(const EvalRow& r) {
    json j{{"n", r.n}, {"tv", r.tv}};
    j["identity"] = r.identity ? json(*r.identity) : json();
    j["emotion"] = r.emotion ? json(*r.emotion) : json();
    j["text"] = r.text ? json(*r.text) : json();
    j["identity_accuracy"] = r.identity_accuracy ? json(*r.identity_accuracy) : json();
    j["emotion_accuracy"] = r.emotion_accuracy ? json(*r.emotion_accuracy) : json();
    j["text_accuracy"] = r.text_accuracy ? json(*r.text_accuracy) : json();
    return j;
}

json eval_summary_to_json(const EvalSummary& s) {
    json rows = json::array();
    for (const EvalRow& r : s.rows) rows.push_back(eval_row_to_json(r));
    json j{{"n_samples", s.n_samples}, {"mean_tv", s.mean_tv}, {"rows", std::move(rows)}};
    j["identity_accuracy"] = s.identity_accuracy ? json(*s.identity_accuracy) : json();
    j["emotion_accuracy"] = s.emotion_accuracy ? json(*s.emotion_accuracy) : json();
    j["text_accuracy"] = s.text_accuracy ? json(*s.text_accuracy) : json();
    return j;
}

// -------------------------------------------------------------- sampling

struct SampleSpec {
    std::optional<int> identity;
    std::optional<int> emotion;
    std::optional<std::vector<int32_t>> text;  // already one symbol per slot
    int length = 0;
    int n = 0;
    GuidanceWeights w;
    int steps = 96;
    uint64_t seed = 0;
};

std::vector<DatasetRecord> run_sampling(const PublishedModel& pm, const SampleSpec& spec) {
    const MMDiT& model = *pm.model;
    ConditionSet cond;
    if (spec.identity) {
        const auto anchors = identity_anchors(pm.synth);
        cond.identity = anchors[static_cast<size_t>(*spec.identity)];
    }
    if (spec.emotion) cond.emotion = *spec.emotion;
    if (spec.text) cond.text = *spec.text;

    SamplerConfig scfg;
    scfg.n_steps = spec.steps;
    scfg.seed = spec.seed;
    const ScoreSource source = [&model](const TokenGrid& grid, double t, const ConditionSet& c) {
        return model.eval(grid, t, c);
    };
    const std::vector<TokenGrid> grids =
        sample_many(source, cond, spec.length, pm.mcfg.max_levels, spec.w, scfg,
                    Vocab(pm.mcfg.n_real), model.schedule(), spec.n);

    std::vector<DatasetRecord> records;
    records.reserve(grids.size());
    for (size_t i = 0; i < grids.size(); ++i) {
        DatasetRecord rec;
        rec.id = static_cast<int64_t>(i);
        rec.tokens = grids[i];
        rec.identity = spec.identity ? *spec.identity : -1;
        rec.emotion = spec.emotion ? *spec.emotion : -1;
        if (spec.text) rec.text = *spec.text;
        rec.duration = spec.length;
        records.push_back(std::move(rec));
    }
    return records;
}

// ------------------------------------------------------------- commands

struct CommonFlags {
    std::string config_path;
};

int cmd_gen_data(const CommonFlags& common, const std::string& out_path, std::optional<int> n,
                 std::optional<uint64_t> seed) {
    RunConfig rc = load_run_config(common.config_path);
    if (n) rc.gen.n = *n;
    if (seed) rc.synth.seed = *seed;
    if (rc.gen.n < 1) throw ConfigError("gen-data: n must be >= 1");

    const auto records = gen_dataset(rc.synth, rc.gen.n);
    json header{{"command", "gen-data"},
                {"code_version", kCodeVersion},
                {"config", json{{"synth", synth_config_to_json(rc.synth)},
                                {"gen", json{{"n", rc.gen.n}}}}}};
    write_dataset(out_path, records, header);
    std::printf("wrote %d records to %s\n", rc.gen.n, out_path.c_str());
    return 0;
}

int cmd_train(const CommonFlags& common, const std::string& data_path, const std::string& out_dir,
              const json& flag_overrides) {
    RunConfig rc = load_run_config(common.config_path);
    train_config_apply_json(rc.train, flag_overrides.value("train", json::object()));
    model_arch_apply_json(rc.model, flag_overrides.value("model", json::object()));

    const DatasetFile data = read_dataset(data_path);
    if (data.records.empty()) throw DataError("train: dataset is empty: " + data_path);
    if (!data.header.contains("config") || !data.header["config"].contains("synth"))
        throw DataError("train: dataset header lacks the generating config: " + data_path);
    const SynthConfig synth = synth_config_from_json(data.header["config"]["synth"]);
    rc.synth = synth;

    fs::create_directories(out_dir);
    const json resolved{{"command", "train"},
                        {"code_version", kCodeVersion},
                        {"data", data_path},
                        {"config", json{{"synth", synth_config_to_json(synth)},
                                        {"model", model_arch_to_json(rc.model)},
                                        {"train", train_config_to_json(rc.train)}}}};
    write_json_file((fs::path(out_dir) / "run_config.json").string(), resolved);

    MMDiT model(derive_model_config(synth, rc.model), rc.model.init_seed);
    const auto anchors = identity_anchors(synth);
    const TrainResult result = train(model, data.records, anchors, rc.train, out_dir);

    for (const EpochMetrics& m : result.metrics) {
        std::printf("epoch %d level %d train_dse %.6f grad_norm %.4f", m.epoch, m.level,
                    m.train_dse, m.grad_norm);
        std::printf(" val");
        for (double v : m.val_dse_per_level) std::printf(" %.6f", v);
        std::printf(" (%.1fs)\n", m.wallclock_s);
    }

    // Level transitions over the whole run history, resumed runs included.
    {
        std::ifstream in(fs::path(out_dir) / "metrics.jsonl");
        std::string line;
        int prev_level = 0;
        while (std::getline(in, line)) {
            const json j = json::parse(line);
            const int level = j.at("level").get<int>();
            const int epoch = j.at("epoch").get<int>();
            if (prev_level > 0 && level > prev_level)
                std::printf("curriculum level %d -> %d at epoch %d\n", prev_level, level, epoch);
            prev_level = level;
        }
    }

    // Published model file: weights plus everything sampling needs.
    DurationModel dur(synth.n_text_symbols);
    {
        std::vector<std::pair<std::vector<int32_t>, double>> pairs;
        pairs.reserve(data.records.size());
        for (const auto& r : data.records) pairs.emplace_back(r.text, r.duration);
        fit_duration_model(dur, pairs, 2000, 0.05, rc.train.seed);
    }
    Checkpoint pub = model_checkpoint(model);
    pub.meta["synth.config"] = synth_config_to_json(synth).dump();
    {
        std::string theta;
        for (size_t i = 0; i < dur.theta.size(); ++i)
            theta += (i ? "," : "") + std::to_string(dur.theta[i]);
        pub.meta["duration.theta"] = theta;
    }
    pub.meta["cli.config"] = resolved.dump();
    pub.meta["cli.code_version"] = kCodeVersion;
    const std::string model_path = (fs::path(out_dir) / "model_final.bin").string();
    save_checkpoint(pub, model_path);
    std::printf("trained through epoch %d; model at %s\n", result.next_epoch - 1,
                model_path.c_str());
    return 0;
}

int cmd_sample(const CommonFlags& common, const std::string& ckpt_path,
               const std::string& out_path, const json& flag_overrides,
               std::optional<int> identity, std::optional<int> emotion,
               std::optional<std::string> text_csv, bool unconditional) {
    RunConfig rc = load_run_config(common.config_path);
    sample_params_apply_json(rc.sample, flag_overrides.value("sample", json::object()));
    const SampleParams& sp = rc.sample;
    if (sp.n < 1) throw ConfigError("sample: n must be >= 1");
    if (sp.length < 0 || (flag_overrides.contains("sample") &&
                          flag_overrides["sample"].contains("length") && sp.length == 0))
        throw ConfigError("sample: --length must be >= 1");
    if (unconditional && (identity || emotion || text_csv))
        throw ConfigError("sample: --unconditional excludes --identity/--emotion/--text");

    const PublishedModel pm = load_published_model(ckpt_path);
    if (identity && (*identity < 0 || *identity >= pm.synth.n_identities))
        throw ConfigError("sample: unknown identity id " + std::to_string(*identity) +
                          " (model has " + std::to_string(pm.synth.n_identities) + ")");
    if (emotion && (*emotion < 0 || *emotion >= pm.synth.n_emotions))
        throw ConfigError("sample: unknown emotion id " + std::to_string(*emotion) + " (model has " +
                          std::to_string(pm.synth.n_emotions) + ")");

    std::optional<std::vector<int32_t>> symbols;
    if (text_csv) {
        symbols = parse_text_csv(*text_csv);
        for (int32_t s : *symbols)
            if (s < 0 || s >= pm.synth.n_text_symbols)
                throw ConfigError("sample: unknown text symbol " + std::to_string(s) +
                                  " (model has " + std::to_string(pm.synth.n_text_symbols) + ")");
    }
    if (sp.predict_length && !symbols)
        throw ConfigError("sample: --predict-length requires --text");

    SampleSpec spec;
    spec.identity = identity;
    spec.emotion = emotion;
    spec.n = sp.n;
    spec.steps = sp.steps;
    spec.seed = sp.seed;
    spec.w = GuidanceWeights{sp.w0, sp.w1, sp.w2, sp.w3};
    spec.length = sp.length > 0 ? sp.length : pm.synth.length;
    if (sp.predict_length) spec.length = predict_length(*symbols, pm.duration);
    if (symbols) spec.text = expand_text(*symbols, pm.duration, spec.length);

    const auto records = run_sampling(pm, spec);
    SampleParams resolved = sp;
    resolved.length = spec.length;
    json header{{"command", "sample"},
                {"code_version", kCodeVersion},
                {"checkpoint", ckpt_path},
                {"config", json{{"synth", synth_config_to_json(pm.synth)},
                                {"sample", sample_params_to_json(resolved)}}}};
    header["conditions"] = json{{"identity", identity ? json(*identity) : json()},
                                {"emotion", emotion ? json(*emotion) : json()},
                                {"text", spec.text ? json(*spec.text) : json()}};
    write_dataset(out_path, records, header);
    std::printf("wrote %d samples to %s (steps %d, w %.3g/%.3g/%.3g/%.3g)\n", spec.n, out_path.c_str(),
                spec.steps, spec.w.w0, spec.w.w1, spec.w.w2, spec.w.w3);
    return 0;
}

int cmd_eval(const CommonFlags& common, const std::string& samples_path,
             const std::string& out_path) {
    const DatasetFile file = read_dataset(samples_path);
    if (file.records.empty()) throw DataError("eval: no samples in " + samples_path);

    SynthConfig synth;
    if (!common.config_path.empty()) {
        synth = load_run_config(common.config_path).synth;
    } else if (file.header.contains("config") && file.header["config"].contains("synth")) {
        synth = synth_config_from_json(file.header["config"]["synth"]);
    } else {
        throw ConfigError("eval: no synth config; pass --config or use a file with an embedded one");
    }

    const EvalContext ctx(synth);
    const EvalSummary sum = evaluate_samples(file.records, ctx);
    json report{{"command", "eval"},
                {"code_version", kCodeVersion},
                {"samples", samples_path},
                {"config", json{{"synth", synth_config_to_json(synth)}}}};
    report.update(eval_summary_to_json(sum));
    std::printf("%s\n", report.dump(2).c_str());
    if (!out_path.empty()) write_json_file(out_path, report);
    return 0;
}

std::vector<double> linspace(double lo, double hi, int count, const char* axis) {
    if (count < 1 || lo > hi)
        throw ConfigError(std::string("grid-search: empty ") + axis + " range");
    std::vector<double> out;
    if (count == 1) return {lo};
    for (int i = 0; i < count; ++i) out.push_back(lo + (hi - lo) * i / (count - 1));
    return out;
}

// Min-max normalization onto [0,1]; flat metrics score a neutral 0.5.
double normalized(double v, double lo, double hi, bool higher_better) {
    if (hi - lo < 1e-300) return 0.5;
    const double z = (v - lo) / (hi - lo);
    return higher_better ? z : 1.0 - z;
}

int cmd_grid_search(const CommonFlags& common, const std::string& ckpt_path,
                    const json& flag_overrides, const std::string& out_path,
                    const std::string& samples_out) {
    RunConfig rc = load_run_config(common.config_path);
    grid_params_apply_json(rc.grid, flag_overrides.value("grid", json::object()));
    const GridParams& gp = rc.grid;
    if (gp.n < 1) throw ConfigError("grid-search: n must be >= 1");

    const std::vector<double> w0s = linspace(gp.w0_min, gp.w0_max, gp.w0_count, "w0");
    const std::vector<double> w1s = linspace(gp.w1_min, gp.w1_max, gp.w1_count, "w1");

    const PublishedModel pm = load_published_model(ckpt_path);
    const EvalContext ctx(pm.synth);
    const int combos = pm.synth.n_identities * pm.synth.n_emotions;
    if (!samples_out.empty()) fs::create_directories(samples_out);

    struct Cell {
        double w0, w1, tv, id_acc, emo_acc;
        double score = 0.0;
    };
    std::vector<Cell> cells;
    for (size_t i = 0; i < w0s.size(); ++i) {
        for (size_t j = 0; j < w1s.size(); ++j) {
            const size_t cell_index = i * w1s.size() + j;
            std::vector<DatasetRecord> records;
            for (int combo = 0; combo < combos; ++combo) {
                const int id = combo / pm.synth.n_emotions;
                const int emo = combo % pm.synth.n_emotions;
                SampleSpec spec;
                spec.identity = id;
                spec.emotion = emo;
                spec.length = pm.synth.length;
                spec.n = gp.n / combos + (combo < gp.n % combos ? 1 : 0);
                if (spec.n == 0) continue;
                spec.steps = gp.steps;
                spec.w = GuidanceWeights{w0s[i], w1s[j], gp.w2, gp.w3};
                spec.seed = gp.seed + kCellSeedStride * (cell_index * combos + combo + 1);
                auto part = run_sampling(pm, spec);
                for (auto& r : part) {
                    r.id = static_cast<int64_t>(records.size());
                    records.push_back(std::move(r));
                }
            }
            const EvalSummary sum = evaluate_samples(records, ctx);
            Cell c;
            c.w0 = w0s[i];
            c.w1 = w1s[j];
            c.tv = sum.mean_tv;
            c.id_acc = sum.identity_accuracy.value_or(0.0);
            c.emo_acc = sum.emotion_accuracy.value_or(0.0);
            cells.push_back(c);
            if (!samples_out.empty()) {
                json header{{"command", "grid-search"},
                            {"code_version", kCodeVersion},
                            {"config", json{{"synth", synth_config_to_json(pm.synth)},
                                            {"sample", json{{"n", gp.n},
                                                            {"steps", gp.steps},
                                                            {"w0", w0s[i]},
                                                            {"w1", w1s[j]},
                                                            {"w2", gp.w2},
                                                            {"w3", gp.w3},
                                                            {"seed", gp.seed}}}}}};
                write_dataset((fs::path(samples_out) /
                               ("cell_" + std::to_string(i) + "_" + std::to_string(j) + ".jsonl"))
                                  .string(),
                              records, header);
            }
        }
    }

    double tv_lo = cells[0].tv, tv_hi = cells[0].tv;
    double id_lo = cells[0].id_acc, id_hi = cells[0].id_acc;
    double emo_lo = cells[0].emo_acc, emo_hi = cells[0].emo_acc;
    for (const Cell& c : cells) {
        tv_lo = std::min(tv_lo, c.tv);
        tv_hi = std::max(tv_hi, c.tv);
        id_lo = std::min(id_lo, c.id_acc);
        id_hi = std::max(id_hi, c.id_acc);
        emo_lo = std::min(emo_lo, c.emo_acc);
        emo_hi = std::max(emo_hi, c.emo_acc);
    }
    for (Cell& c : cells)
        c.score = (normalized(c.tv, tv_lo, tv_hi, false) + normalized(c.id_acc, id_lo, id_hi, true) +
                   normalized(c.emo_acc, emo_lo, emo_hi, true)) /
                  3.0;

    // Nondecreasing trend of the mean score along the w0 axis.
    bool trend = true;
    double prev = -1.0;
    for (size_t i = 0; i < w0s.size(); ++i) {
        double mean = 0.0;
        for (size_t j = 0; j < w1s.size(); ++j) mean += cells[i * w1s.size() + j].score;
        mean /= w1s.size();
        if (i > 0 && mean < prev - 1e-9) trend = false;
        prev = mean;
    }

    json rows = json::array();
    std::printf("%8s %8s %8s %8s %10s %10s %10s %8s\n", "w0", "w1", "w2", "w3", "tv", "id_acc",
                "emo_acc", "score");
    for (const Cell& c : cells) {
        rows.push_back(json{{"w0", c.w0},
                            {"w1", c.w1},
                            {"w2", gp.w2},
                            {"w3", gp.w3},
                            {"tv", c.tv},
                            {"identity_accuracy", c.id_acc},
                            {"emotion_accuracy", c.emo_acc},
                            {"score", c.score}});
        std::printf("%8.3f %8.3f %8.3f %8.3f %10.4f %10.4f %10.4f %8.4f\n", c.w0, c.w1, gp.w2,
                    gp.w3, c.tv, c.id_acc, c.emo_acc, c.score);
    }
    std::printf("w0 trend nondecreasing: %s\n", trend ? "true" : "false");

    json report{{"command", "grid-search"},
                {"code_version", kCodeVersion},
                {"checkpoint", ckpt_path},
                {"config", json{{"synth", synth_config_to_json(pm.synth)},
                                {"grid", grid_params_to_json(gp)}}},
                {"rows", std::move(rows)},
                {"w0_trend_nondecreasing", trend}};
    if (!out_path.empty()) write_json_file(out_path, report);
    return 0;
}

int cmd_oracle_check(const CommonFlags& common, bool corrupt_scores, int tv_samples, int tv_steps,
                     uint64_t seed) {
    SynthConfig synth;
    if (!common.config_path.empty()) {
        synth = load_run_config(common.config_path).synth;
    } else {
        // default instance small enough for a tight sampling check
        synth.n_real = 2;
        synth.levels = 2;
        synth.length = 3;
    }
    const NoiseSchedule sched;
    const ToyDistribution p0 = conditional_toy_distribution(synth, {}, {}, {});
    const Vocab vocab(synth.n_real);

    const CachedExactScore exact(p0, sched);
    auto source = [&](const TokenGrid& xt, double t) -> ScoreField {
        ScoreField f = exact(xt, t, ConditionSet{});
        if (corrupt_scores && xt.at(0, 0) == vocab.mask_id()) f.at(0, 0, 0) *= 1.7;
        return f;
    };

    int failures = 0;
    auto verdict = [&](const char* name, bool ok, const std::string& detail) {
        std::printf("%s %s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
        if (!ok) ++failures;
    };
    char buf[160];

    {
        double worst = 0.0;
        for (double t : {0.25, 0.5, 0.75}) {
            const MarginalTable table = build_marginal_table(p0, sched, t);
            double s = 0.0;
            for (double v : table.marg) s += v;
            worst = std::max(worst, std::abs(s - 1.0));
        }
        std::snprintf(buf, sizeof(buf), "max|sum-1|=%.2e bound=1e-9", worst);
        verdict("marginal-normalization", worst <= 1e-9, buf);
    }
    {
        Rng rng(seed);
        const double t = 0.5;
        long masked = 0, total = 0;
        for (int i = 0; i < 2000; ++i) {
            const TokenGrid& x0 = p0.support[static_cast<size_t>(rng.categorical(p0.probs))];
            const TokenGrid xt = forward_sample(x0, sched, t, vocab, rng);
            for (int32_t c : xt.cells) masked += c == vocab.mask_id();
            total += static_cast<long>(xt.cells.size());
        }
        const double frac = static_cast<double>(masked) / total;
        const double want = (1.0 - sched.eps) * t;
        std::snprintf(buf, sizeof(buf), "fraction=%.4f expected=%.4f tol=0.02", frac, want);
        verdict("mask-fraction-linearity", std::abs(frac - want) <= 0.02, buf);
    }
    {
        const double g = dse_stationarity_max_grad(p0, sched, {0.2, 0.5, 0.8}, source);
        std::snprintf(buf, sizeof(buf), "max|grad|=%.2e bound=1e-8", g);
        verdict("score-stationarity", g <= 1e-8, buf);
    }
    {
        const ProbeReport probe = dse_optimality_probe(p0, sched, 30, 0.02, seed, source);
        std::snprintf(buf, sizeof(buf), "violations=%d/%d min_gap=%.2e", probe.violations,
                      probe.trials, probe.min_gap);
        verdict("perturbation-optimality", probe.violations == 0, buf);
    }
    {
        SamplerConfig scfg;
        scfg.n_steps = tv_steps;
        scfg.seed = seed;
        const ScoreSource src = [&](const TokenGrid& g, double t, const ConditionSet&) {
            return source(g, t);
        };
        const auto grids = sample_many(src, ConditionSet{}, p0.length, p0.levels,
                                       GuidanceWeights{}, scfg, vocab, sched, tv_samples);
        const double tv = tv_distance(grids, p0);
        const double bound = 0.02 + 3.0 * tv_noise_floor(p0, tv_samples);
        std::snprintf(buf, sizeof(buf), "tv=%.4f bound=%.4f n=%d steps=%d", tv, bound, tv_samples,
                      tv_steps);
        verdict("reverse-sampling-tv", tv <= bound, buf);
    }

    std::printf("%d of 5 checks failed\n", failures);
    return failures == 0 ? 0 : 1;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"absorbing-state discrete diffusion over multi-level token grids"};
    app.set_version_flag("--version", kCodeVersion);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.require_subcommand(1);
    int rc = 0;
    CommonFlags common;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
    std::string gen_out;
    std::optional<int> gen_n;
    std::optional<uint64_t> gen_seed;
    gen->add_option("--config", common.config_path, "JSON config file");
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--n", gen_n, "record count");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->callback([&] { rc = cmd_gen_data(common, gen_out, gen_n, gen_seed); });

    // train
    auto* tr = app.add_subcommand("train", "train the score network on a dataset");
    std::string tr_data, tr_out;
    std::optional<double> tr_lr;
    std::optional<int> tr_batch, tr_epoch_iters, tr_epochs_per_level, tr_val_batches;
    std::optional<long> tr_iters;
    std::optional<uint64_t> tr_seed, tr_init_seed;
    std::optional<int> tr_blocks, tr_hidden, tr_heads;
    bool tr_no_curriculum = false;
    tr->add_option("--config", common.config_path, "JSON config file");
    tr->add_option("--data", tr_data, "dataset path")->required();
    tr->add_option("--out-dir", tr_out, "checkpoint and metrics directory")->required();
    tr->add_option("--lr", tr_lr, "learning rate");
    tr->add_option("--batch-size", tr_batch, "records per step");
    tr->add_option("--iterations", tr_iters, "total optimizer steps");
    tr->add_option("--epoch-iters", tr_epoch_iters, "steps per epoch");
    tr->add_option("--epochs-per-level", tr_epochs_per_level, "curriculum period");
    tr->add_option("--val-batches", tr_val_batches, "validation batches per level");
    tr->add_flag("--no-curriculum", tr_no_curriculum, "train all levels from epoch 0");
    tr->add_option("--seed", tr_seed, "training stream seed");
    tr->add_option("--init-seed", tr_init_seed, "weight init seed");
    tr->add_option("--blocks", tr_blocks, "transformer blocks");
    tr->add_option("--hidden", tr_hidden, "hidden width");
    tr->add_option("--heads", tr_heads, "attention heads");
    tr->callback([&] {
        json ov{{"train", json::object()}, {"model", json::object()}};
        if (tr_lr) ov["train"]["lr"] = *tr_lr;
        if (tr_batch) ov["train"]["batch_size"] = *tr_batch;
        if (tr_iters) ov["train"]["iterations"] = *tr_iters;
        if (tr_epoch_iters) ov["train"]["epoch_iters"] = *tr_epoch_iters;
        if (tr_epochs_per_level) ov["train"]["epochs_per_level"] = *tr_epochs_per_level;
        if (tr_val_batches) ov["train"]["val_batches"] = *tr_val_batches;
        if (tr_no_curriculum) ov["train"]["curriculum"] = false;
        if (tr_seed) ov["train"]["seed"] = *tr_seed;
        if (tr_init_seed) ov["model"]["init_seed"] = *tr_init_seed;
        if (tr_blocks) ov["model"]["n_blocks"] = *tr_blocks;
        if (tr_hidden) ov["model"]["hidden"] = *tr_hidden;
        if (tr_heads) ov["model"]["n_heads"] = *tr_heads;
        rc = cmd_train(common, tr_data, tr_out, ov);
    });

    // sample
    auto* sm = app.add_subcommand("sample", "draw grids from a trained model");
    std::string sm_ckpt, sm_out;
    std::optional<int> sm_n, sm_steps, sm_length, sm_identity, sm_emotion;
    std::optional<double> sm_w0, sm_w1, sm_w2, sm_w3;
    std::optional<uint64_t> sm_seed;
    std::optional<std::string> sm_text;
    bool sm_predict_length = false, sm_unconditional = false;
    sm->add_option("--config", common.config_path, "JSON config file");
    sm->add_option("--checkpoint", sm_ckpt, "published model file")->required();
    sm->add_option("--out", sm_out, "output samples path")->required();
    sm->add_option("--n", sm_n, "sample count");
    sm->add_option("--steps", sm_steps, "reverse steps");
    sm->add_option("--w0", sm_w0, "joint guidance scale");
    sm->add_option("--w1", sm_w1, "identity guidance scale");
    sm->add_option("--w2", sm_w2, "emotion guidance scale");
    sm->add_option("--w3", sm_w3, "text guidance scale");
    auto* len_opt = sm->add_option("--length", sm_length, "grid length");
    sm->add_flag("--predict-length", sm_predict_length, "derive length from --text durations")
        ->excludes(len_opt);
    sm->add_option("--seed", sm_seed, "sampling seed");
    sm->add_option("--identity", sm_identity, "identity condition id");
    sm->add_option("--emotion", sm_emotion, "emotion condition id");
    sm->add_option("--text", sm_text, "comma-separated text symbol ids");
    sm->add_flag("--unconditional", sm_unconditional, "sample without any condition");
    sm->callback([&] {
        json ov{{"sample", json::object()}};
        if (sm_n) ov["sample"]["n"] = *sm_n;
        if (sm_steps) ov["sample"]["steps"] = *sm_steps;
        if (sm_w0) ov["sample"]["w0"] = *sm_w0;
        if (sm_w1) ov["sample"]["w1"] = *sm_w1;
        if (sm_w2) ov["sample"]["w2"] = *sm_w2;
        if (sm_w3) ov["sample"]["w3"] = *sm_w3;
        if (sm_length) ov["sample"]["length"] = *sm_length;
        if (sm_predict_length) ov["sample"]["predict_length"] = true;
        if (sm_seed) ov["sample"]["seed"] = *sm_seed;
        rc = cmd_sample(common, sm_ckpt, sm_out, ov, sm_identity, sm_emotion, sm_text,
                        sm_unconditional);
    });

    // eval
    auto* ev = app.add_subcommand("eval", "score a samples file against the exact law");
    std::string ev_samples, ev_out;
    ev->add_option("--config", common.config_path, "JSON config file");
    ev->add_option("--samples", ev_samples, "samples path")->required();
    ev->add_option("--out", ev_out, "write the JSON report here too");
    ev->callback([&] { rc = cmd_eval(common, ev_samples, ev_out); });

    // grid-search
    auto* gs = app.add_subcommand("grid-search", "guidance-scale sweep with normalized scores");
    std::string gs_ckpt, gs_out, gs_samples_out;
    std::optional<double> gs_w0_min, gs_w0_max, gs_w1_min, gs_w1_max, gs_w2, gs_w3;
    std::optional<int> gs_w0_count, gs_w1_count, gs_n, gs_steps;
    std::optional<uint64_t> gs_seed;
    gs->add_option("--config", common.config_path, "JSON config file");
    gs->add_option("--checkpoint", gs_ckpt, "published model file")->required();
    gs->add_option("--out", gs_out, "write the JSON table here");
    gs->add_option("--samples-out", gs_samples_out, "dump per-cell sample files into this dir");
    gs->add_option("--w0-min", gs_w0_min, "w0 range start");
    gs->add_option("--w0-max", gs_w0_max, "w0 range end");
    gs->add_option("--w0-count", gs_w0_count, "w0 grid points");
    gs->add_option("--w1-min", gs_w1_min, "w1 range start");
    gs->add_option("--w1-max", gs_w1_max, "w1 range end");
    gs->add_option("--w1-count", gs_w1_count, "w1 grid points");
    gs->add_option("--w2", gs_w2, "fixed emotion scale");
    gs->add_option("--w3", gs_w3, "fixed text scale");
    gs->add_option("--n", gs_n, "samples per cell");
    gs->add_option("--steps", gs_steps, "reverse steps");
    gs->add_option("--seed", gs_seed, "sweep seed");
    gs->callback([&] {
        json ov{{"grid", json::object()}};
        if (gs_w0_min) ov["grid"]["w0_min"] = *gs_w0_min;
        if (gs_w0_max) ov["grid"]["w0_max"] = *gs_w0_max;
        if (gs_w0_count) ov["grid"]["w0_count"] = *gs_w0_count;
        if (gs_w1_min) ov["grid"]["w1_min"] = *gs_w1_min;
        if (gs_w1_max) ov["grid"]["w1_max"] = *gs_w1_max;
        if (gs_w1_count) ov["grid"]["w1_count"] = *gs_w1_count;
        if (gs_w2) ov["grid"]["w2"] = *gs_w2;
        if (gs_w3) ov["grid"]["w3"] = *gs_w3;
        if (gs_n) ov["grid"]["n"] = *gs_n;
        if (gs_steps) ov["grid"]["steps"] = *gs_steps;
        if (gs_seed) ov["grid"]["seed"] = *gs_seed;
        rc = cmd_grid_search(common, gs_ckpt, ov, gs_out, gs_samples_out);
    });

    // oracle-check
    auto* oc = app.add_subcommand("oracle-check", "verify the exact-score invariant suite");
    bool oc_corrupt = false;
    int oc_tv_samples = 4000, oc_tv_steps = 64;
    uint64_t oc_seed = 0;
    oc->add_option("--config", common.config_path, "JSON config file");
    oc->add_flag("--corrupt-scores", oc_corrupt, "negative control: corrupt one score entry");
    oc->add_option("--tv-samples", oc_tv_samples, "chains for the sampling check");
    oc->add_option("--tv-steps", oc_tv_steps, "reverse steps for the sampling check");
    oc->add_option("--seed", oc_seed, "check seed");
    oc->callback([&] { rc = cmd_oracle_check(common, oc_corrupt, oc_tv_samples, oc_tv_steps, oc_seed); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::domain_error& e) {
        std::fprintf(stderr, "invalid argument: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    }
    return rc;
}

}  // namespace maskdiff
