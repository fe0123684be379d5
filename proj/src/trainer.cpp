#include "maskdiff/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "maskdiff/adamw.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/errors.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr uint64_t kTrainStreamBase = uint64_t{0xE} << 40;
constexpr uint64_t kValStreamBase = uint64_t{0xF} << 40;

ConditionSet record_condition(const DatasetRecord& rec,
                              const std::vector<std::vector<double>>& id_embeddings) {
    ConditionSet cond;
    cond.identity = id_embeddings[rec.identity];
    cond.emotion = rec.emotion;
    cond.text = rec.text;
    return cond;
}

double grad_l2(const MMDiT& model) {
    double acc = 0.0;
    for (const auto& [name, mat] : model.parameters())
        for (double g : mat.grad()) acc += g * g;
    return std::sqrt(acc);
}

// Single-level slices so per-level validation losses are comparable across
// runs with different curricula.
TokenGrid level_slice(const TokenGrid& g, int level) {
    TokenGrid out(1, g.length);
    for (int p = 0; p < g.length; ++p) out.at(0, p) = g.at(level, p);
    return out;
}

ScoreField level_slice(const ScoreField& f, int level) {
    ScoreField out(1, f.length, f.n_real);
    for (int p = 0; p < f.length; ++p)
        for (int y = 0; y < f.n_real; ++y) out.at(0, p, y) = f.at(level, p, y);
    return out;
}

std::string ckpt_path(const std::string& out_dir, int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%05d.bin", epoch);
    return (fs::path(out_dir) / buf).string();
}

int find_latest_epoch(const std::string& out_dir) {
    int latest = -1;
    if (!fs::exists(out_dir)) return latest;
    for (const auto& entry : fs::directory_iterator(out_dir)) {
        const std::string name = entry.path().filename().string();
        int epoch = -1;
        if (std::sscanf(name.c_str(), "ckpt_%d.bin", &epoch) == 1) latest = std::max(latest, epoch);
    }
    return latest;
}

}  // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("TrainConfig: lr must be positive");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (iterations < 1) throw ConfigError("TrainConfig: iterations must be >= 1");
    if (epoch_iters < 1) throw ConfigError("TrainConfig: epoch_iters must be >= 1");
    if (!(p_all_null >= 0.0 && p_all_null <= 1.0) || !(p_each_null >= 0.0 && p_each_null <= 1.0))
        throw ConfigError("TrainConfig: dropout probabilities must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("TrainConfig: moment coefficients must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("TrainConfig: adam_eps must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (epochs_per_level < 1) throw ConfigError("TrainConfig: epochs_per_level must be >= 1");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw ConfigError("TrainConfig: val_fraction must lie in [0, 1)");
    if (val_batches < 1) throw ConfigError("TrainConfig: val_batches must be >= 1");
    if (!(t_floor > 0.0 && t_floor < 1.0)) throw ConfigError("TrainConfig: t_floor must lie in (0, 1)");
}

int TrainConfig::total_epochs() const {
    return static_cast<int>((iterations + epoch_iters - 1) / epoch_iters);
}

Checkpoint model_checkpoint(const MMDiT& model) {
    Checkpoint ckpt;
    for (const auto& [name, mat] : model.parameters()) {
        NamedArray arr;
        arr.name = name;
        arr.shape = {mat.rows(), mat.cols()};
        arr.data = mat.data();
        ckpt.arrays.push_back(std::move(arr));
    }
    const MMDiTConfig& c = model.config();
    ckpt.meta["model.n_blocks"] = std::to_string(c.n_blocks);
    ckpt.meta["model.hidden"] = std::to_string(c.hidden);
    ckpt.meta["model.n_heads"] = std::to_string(c.n_heads);
    ckpt.meta["model.max_levels"] = std::to_string(c.max_levels);
    ckpt.meta["model.n_real"] = std::to_string(c.n_real);
    ckpt.meta["model.id_dim"] = std::to_string(c.id_dim);
    ckpt.meta["model.n_emotions"] = std::to_string(c.n_emotions);
    ckpt.meta["model.n_text_symbols"] = std::to_string(c.n_text_symbols);
    return ckpt;
}

void load_model_params(MMDiT& model, const Checkpoint& ckpt) {
    for (auto& [name, mat] : model.parameters()) {
        const NamedArray& arr = ckpt.find(name);
        if (arr.data.size() != mat.data().size())
            throw DataError("checkpoint array size mismatch for " + name);
        mat.data() = arr.data;
    }
    model.check_finite();
}

namespace {

void save_train_checkpoint(const MMDiT& model, const AdamW& opt, const TrainConfig& cfg,
                           int epoch, const std::string& path) {
    Checkpoint ckpt = model_checkpoint(model);
    for (const auto& [name, mw] : opt.m) {
        NamedArray arr;
        arr.name = "opt.m." + name;
        arr.shape = {static_cast<int64_t>(mw.size())};
        arr.data = mw;
        ckpt.arrays.push_back(std::move(arr));
    }
    for (const auto& [name, vw] : opt.v) {
        NamedArray arr;
        arr.name = "opt.v." + name;
        arr.shape = {static_cast<int64_t>(vw.size())};
        arr.data = vw;
        ckpt.arrays.push_back(std::move(arr));
    }
    ckpt.meta["train.epoch"] = std::to_string(epoch);
    ckpt.meta["train.opt_step"] = std::to_string(opt.step_count);
    ckpt.meta["train.seed"] = std::to_string(cfg.seed);
    save_checkpoint(ckpt, path);
}

void load_train_checkpoint(MMDiT& model, AdamW& opt, const std::string& path, int* epoch) {
    const Checkpoint ckpt = load_checkpoint(path);
    load_model_params(model, ckpt);
    opt.m.clear();
    opt.v.clear();
    for (const auto& arr : ckpt.arrays) {
        if (arr.name.rfind("opt.m.", 0) == 0) opt.m[arr.name.substr(6)] = arr.data;
        if (arr.name.rfind("opt.v.", 0) == 0) opt.v[arr.name.substr(6)] = arr.data;
    }
    const auto meta = [&](const char* key) {
        const auto it = ckpt.meta.find(key);
        if (it == ckpt.meta.end())
            throw DataError(std::string("checkpoint is not a training checkpoint: missing ") + key);
        return it->second;
    };
    opt.step_count = std::stol(meta("train.opt_step"));
    *epoch = std::stoi(meta("train.epoch"));
}

// Wallclock stays out of the file: the log must be a pure function of
// (config, seed, data) at the byte level.
json metrics_json(const EpochMetrics& m) {
    return json{{"epoch", m.epoch},           {"level", m.level},
                {"train_dse", m.train_dse},   {"val_dse_per_level", m.val_dse_per_level},
                {"grad_norm", m.grad_norm}};
}

}  // namespace

TrainResult train(MMDiT& model, const std::vector<DatasetRecord>& dataset,
                  const std::vector<std::vector<double>>& id_embeddings, const TrainConfig& cfg,
                  const std::string& out_dir, const TrainObserver& observer) {
    cfg.validate();
    model.check_finite();
    if (dataset.empty()) throw DataError("train: dataset must be nonempty");
    const MMDiTConfig& mc = model.config();
    const Vocab vocab(mc.n_real);
    const NoiseSchedule& sched = model.schedule();
    for (const auto& rec : dataset) {
        if (rec.tokens.levels > mc.max_levels)
            throw DataError("train: record has more levels than the model");
        if (rec.tokens.levels != dataset.front().tokens.levels ||
            rec.tokens.length != dataset.front().tokens.length)
            throw DataError("train: records disagree on grid shape");
        if (rec.identity < 0 || rec.identity >= static_cast<int>(id_embeddings.size()))
            throw DataError("train: record identity has no embedding");
        rec.tokens.check_ids(vocab);
        if (rec.tokens.contains_mask(vocab)) throw DataError("train: record contains mask tokens");
    }
    for (const auto& emb : id_embeddings)
        if (static_cast<int>(emb.size()) != mc.id_dim)
            throw DataError("train: identity embedding width != model id_dim");

    const int levels = dataset.front().tokens.levels;
    const int total_epochs = cfg.total_epochs();

    // Deterministic tail split; with a single record it doubles as val.
    size_t n_val = static_cast<size_t>(std::llround(cfg.val_fraction * dataset.size()));
    n_val = std::min(n_val, dataset.size() - 1);
    const size_t n_train = dataset.size() - n_val;
    const auto val_record = [&](size_t i) -> const DatasetRecord& {
        return n_val == 0 ? dataset[i % dataset.size()] : dataset[n_train + (i % n_val)];
    };

    fs::create_directories(out_dir);
    AdamW opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.adam_eps;
    opt.weight_decay = cfg.weight_decay;

    int start_epoch = 0;
    const int latest = find_latest_epoch(out_dir);
    if (latest >= 0) {
        int done = 0;
        load_train_checkpoint(model, opt, ckpt_path(out_dir, latest), &done);
        start_epoch = done + 1;
    }

    std::ofstream metrics_out((fs::path(out_dir) / "metrics.jsonl").string(), std::ios::app);
    if (!metrics_out) throw DataError("train: cannot open metrics log in " + out_dir);

    TrainResult result;
    result.next_epoch = start_epoch;
    if (latest >= 0) result.checkpoint_path = ckpt_path(out_dir, latest);

    for (int epoch = start_epoch; epoch < total_epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const int level =
            cfg.curriculum ? std::min(levels, curriculum_level(epoch, levels, cfg.epochs_per_level))
                           : levels;
        Rng rng = Rng(cfg.seed).substream(kTrainStreamBase + static_cast<uint64_t>(epoch));

        const long first_iter = static_cast<long>(epoch) * cfg.epoch_iters;
        const long iters = std::min<long>(cfg.epoch_iters, cfg.iterations - first_iter);
        double loss_sum = 0.0, gnorm_sum = 0.0;
        for (long it = 0; it < iters; ++it) {
            model.zero_grad();
            double batch_loss = 0.0;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const DatasetRecord& rec =
                    dataset[static_cast<size_t>(rng.uniform_int(static_cast<int>(n_train)))];
                const TokenGrid x0 = rec.tokens.truncated(level);
                const double t = std::max(cfg.t_floor, rng.uniform_pos());
                const TokenGrid xt = forward_sample(x0, sched, t, vocab, rng);
                ConditionSet cond = record_condition(rec, id_embeddings);
                cond = condition_dropout(cond, rng, cfg.p_all_null, cfg.p_each_null);

                ForwardTrace trace = model.forward(xt, t, cond);
                DseResult dse = dse_loss(trace.scores, x0, xt, t, level, sched, vocab);
                ScoreField upstream = dse.grad;
                for (double& g : upstream.values) g /= cfg.batch_size;
                backward(model, trace, upstream);
                batch_loss += dse.value / cfg.batch_size;
            }
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss at iteration " +
                                   std::to_string(first_iter + it));
            loss_sum += batch_loss;
            gnorm_sum += grad_l2(model);
            opt.step(model.parameters());
            if (observer) observer(first_iter + it, batch_loss);
        }
        model.check_finite();

        // Per-level validation: level k is scored on grids truncated to
        // levels <= k, loss restricted to level k cells. The stream depends
        // only on (seed, epoch), so curriculum and no-curriculum runs see
        // identical validation draws.
        EpochMetrics em;
        em.epoch = epoch;
        em.level = level;
        em.train_dse = loss_sum / iters;
        em.grad_norm = gnorm_sum / iters;
        Rng vrng = Rng(cfg.seed).substream(kValStreamBase + static_cast<uint64_t>(epoch));
        for (int vl = 1; vl <= levels; ++vl) {
            double acc = 0.0;
            long cnt = 0;
            for (int vb = 0; vb < cfg.val_batches; ++vb) {
                for (int b = 0; b < cfg.batch_size; ++b) {
                    const DatasetRecord& rec = val_record(
                        static_cast<size_t>(vrng.uniform_int(static_cast<int>(
                            n_val == 0 ? dataset.size() : n_val))));
                    const TokenGrid x0 = rec.tokens.truncated(vl);
                    const double t = std::max(cfg.t_floor, vrng.uniform_pos());
                    const TokenGrid xt = forward_sample(x0, sched, t, vocab, vrng);
                    const ConditionSet cond = record_condition(rec, id_embeddings);
                    const ScoreField scores = model.eval(xt, t, cond);
                    const DseResult dse =
                        dse_loss(level_slice(scores, vl - 1), level_slice(x0, vl - 1),
                                 level_slice(xt, vl - 1), t, 1, sched, vocab);
                    acc += dse.value;
                    ++cnt;
                }
            }
            em.val_dse_per_level.push_back(acc / cnt);
        }
        em.wallclock_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();

        const std::string path = ckpt_path(out_dir, epoch);
        save_train_checkpoint(model, opt, cfg, epoch, path);
        metrics_out << metrics_json(em).dump() << '\n';
        metrics_out.flush();
        result.metrics.push_back(std::move(em));
        result.checkpoint_path = path;
        result.next_epoch = epoch + 1;
    }
    return result;
}

void AlignConfig::validate() const {
    if (steps < 0) throw ConfigError("AlignConfig: steps must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("AlignConfig: lr must be positive");
    if (hidden < 1) throw ConfigError("AlignConfig: hidden must be >= 1");
}

namespace {

Mat encoder_forward(const IdentityEncoder& enc, const Mat& x) {
    return add(x, add_rowvec(matmul(silu(add_rowvec(matmul(x, enc.w1), enc.b1)), enc.w2), enc.b2));
}

}  // namespace

std::vector<double> IdentityEncoder::encode(const std::vector<double>& x) const {
    if (static_cast<int>(x.size()) != dim)
        throw std::domain_error("IdentityEncoder: input width mismatch");
    Mat row(1, dim);
    row.data() = x;
    return encoder_forward(*this, row).data();
}

IdentityEncoder fit_identity_encoder(const std::vector<EmbeddingPair>& pairs,
                                     const AlignConfig& cfg) {
    cfg.validate();
    if (pairs.empty()) throw std::domain_error("fit_identity_encoder: no pairs");
    const int dim = static_cast<int>(pairs[0].face_view.size());
    for (const auto& p : pairs)
        if (p.face_view.size() != pairs[0].face_view.size() ||
            p.speech_view.size() != p.face_view.size())
            throw std::domain_error("fit_identity_encoder: pair dimensions differ");

    IdentityEncoder enc;
    enc.dim = dim;
    enc.hidden = cfg.hidden;
    enc.w1 = Mat(dim, cfg.hidden);
    enc.b1 = Mat(1, cfg.hidden);
    enc.w2 = Mat(cfg.hidden, dim);  // zero: the encoder starts as identity
    enc.b2 = Mat(1, dim);
    Rng rng(cfg.seed);
    const double w1_scale = 1.0 / std::sqrt(static_cast<double>(dim));
    for (auto& x : enc.w1.data()) x = w1_scale * rng.normal();

    const int n = static_cast<int>(pairs.size());
    Mat x(n, dim);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < dim; ++d) x.at(i, d) = pairs[i].face_view[d];

    std::vector<std::pair<std::string, Mat>> params = {
        {"w1", enc.w1}, {"b1", enc.b1}, {"w2", enc.w2}, {"b2", enc.b2}};
    AdamW opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;

    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& [name, mat] : params) mat.zero_grad();
        Mat out = encoder_forward(enc, x);
        std::vector<double> a(dim);
        for (int i = 0; i < n; ++i) {
            for (int d = 0; d < dim; ++d) a[d] = out.at(i, d);
            const AlignResult r = align_loss(a, pairs[i].speech_view);
            for (int d = 0; d < dim; ++d) out.grad()[static_cast<size_t>(i) * dim + d] =
                r.grad_a[d] / n;
        }
        backward({out});
        opt.step(params);
    }
    return enc;
}

AlignReport align_report(const IdentityEncoder& enc, const std::vector<EmbeddingPair>& pairs) {
    if (pairs.empty()) throw std::domain_error("align_report: no pairs");
    AlignReport rep;
    for (const auto& p : pairs) {
        const std::vector<double> out = enc.encode(p.face_view);
        rep.mean_loss += align_loss(out, p.speech_view).value;
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t d = 0; d < out.size(); ++d) {
            dot += out[d] * p.speech_view[d];
            na += out[d] * out[d];
            nb += p.speech_view[d] * p.speech_view[d];
        }
        rep.mean_cosine += dot / std::sqrt(na * nb);
    }
    rep.mean_loss /= pairs.size();
    rep.mean_cosine /= pairs.size();
    return rep;
}

}  // namespace maskdiff
