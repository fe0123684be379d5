#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "maskdiff/errors.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/trainer.hpp"

using namespace maskdiff;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

SynthConfig small_synth() {
    SynthConfig cfg;
    cfg.n_real = 3;
    cfg.levels = 2;
    cfg.length = 3;
    cfg.embed_dim = 4;
    cfg.seed = 7;
    return cfg;
}

MMDiTConfig small_model(const SynthConfig& scfg) {
    MMDiTConfig mcfg;
    mcfg.n_blocks = 1;
    mcfg.hidden = 16;
    mcfg.n_heads = 2;
    mcfg.max_levels = scfg.levels;
    mcfg.n_real = scfg.n_real;
    mcfg.id_dim = scfg.embed_dim;
    mcfg.n_emotions = scfg.n_emotions;
    mcfg.n_text_symbols = scfg.n_text_symbols;
    return mcfg;
}

TrainConfig small_train(uint64_t seed) {
    TrainConfig cfg;
    cfg.lr = 3e-3;
    cfg.batch_size = 8;
    cfg.epoch_iters = 50;
    cfg.iterations = 100;
    cfg.seed = seed;
    return cfg;
}

// Everything except wallclock, which legitimately differs between runs.
bool metrics_equal(const EpochMetrics& a, const EpochMetrics& b) {
    return a.epoch == b.epoch && a.level == b.level && a.train_dse == b.train_dse &&
           a.grad_norm == b.grad_norm && a.val_dse_per_level == b.val_dse_per_level;
}

}  // namespace

TEST_CASE("train config validation") {
    TrainConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    auto bad = [](auto mut) {
        TrainConfig c;
        mut(c);
        CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    bad([](TrainConfig& c) { c.lr = 0.0; });
    bad([](TrainConfig& c) { c.batch_size = 0; });
    bad([](TrainConfig& c) { c.epoch_iters = 0; });
    bad([](TrainConfig& c) { c.iterations = 0; });
    bad([](TrainConfig& c) { c.val_fraction = 1.0; });
    bad([](TrainConfig& c) { c.val_fraction = -0.1; });
    bad([](TrainConfig& c) { c.epochs_per_level = 0; });
    bad([](TrainConfig& c) { c.t_floor = 0.0; });
    bad([](TrainConfig& c) { c.t_floor = 1.5; });
    bad([](TrainConfig& c) { c.val_batches = 0; });
    bad([](TrainConfig& c) { c.beta1 = 1.0; });
    bad([](TrainConfig& c) { c.weight_decay = -1.0; });
}

TEST_CASE("training smoke run emits checkpoints and metrics") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 64);
    auto anchors = identity_anchors(scfg);
    MMDiT model(small_model(scfg), 11);
    TmpDir dir("mdtest_train_smoke");

    auto res = train(model, records, anchors, small_train(5), dir.str());
    REQUIRE(res.metrics.size() == 2);
    CHECK(res.next_epoch == 2);
    CHECK(res.checkpoint_path == (dir.path / "ckpt_00001.bin").string());
    for (int e = 0; e < 2; ++e) {
        const auto& m = res.metrics[e];
        CHECK(m.epoch == e);
        CHECK(m.level == 1);  // epochs_per_level = 3, both epochs below first bump
        CHECK(std::isfinite(m.train_dse));
        CHECK(m.train_dse > 0.0);
        CHECK(std::isfinite(m.grad_norm));
        CHECK(m.grad_norm > 0.0);
        CHECK(m.wallclock_s >= 0.0);
        REQUIRE(m.val_dse_per_level.size() == 2);
        for (double v : m.val_dse_per_level) CHECK(std::isfinite(v));
        CHECK(fs::exists(dir.path / ("ckpt_0000" + std::to_string(e) + ".bin")));
    }

    // one JSON line per epoch with the exact key set
    std::ifstream in(dir.path / "metrics.jsonl");
    std::string line;
    int n_lines = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        REQUIRE(j.is_object());
        CHECK(j.size() == 5);  // wallclock stays out so reruns match byte for byte
        CHECK(j.contains("epoch"));
        CHECK(j.contains("level"));
        CHECK(j.contains("train_dse"));
        CHECK(j.contains("val_dse_per_level"));
        CHECK(j.contains("grad_norm"));
        CHECK(j["epoch"].get<int>() == n_lines);
        ++n_lines;
    }
    CHECK(n_lines == 2);
}

TEST_CASE("training loss decreases on a single memorizable record") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 1);
    auto anchors = identity_anchors(scfg);
    MMDiT model(small_model(scfg), 11);
    const auto& sched = model.schedule();
    Vocab vocab{scfg.n_real};

    TokenGrid x0 = records[0].tokens.truncated(1);
    Rng prng(123);
    TokenGrid xt = forward_sample(x0, sched, 0.6, vocab, prng);
    ConditionSet cond;
    cond.identity = anchors[records[0].identity];
    cond.emotion = records[0].emotion;
    cond.text = records[0].text;

    std::vector<double> probe;
    auto observe = [&](long, double) {
        auto sf = model.eval(xt, 0.6, cond);
        probe.push_back(dse_loss(sf, x0, xt, 0.6, 1, sched, vocab).value);
    };

    TrainConfig tcfg;
    tcfg.lr = 3e-3;
    tcfg.batch_size = 4;
    tcfg.epoch_iters = 120;
    tcfg.iterations = 120;
    tcfg.seed = 9;
    TmpDir dir("mdtest_train_probe");
    train(model, records, anchors, tcfg, dir.str(), observe);

    REQUIRE(probe.size() == 120);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) {
        head += probe[i] / 10.0;
        tail += probe[110 + i] / 10.0;
    }
    CHECK(tail < 0.5 * head);
    CHECK(probe.back() < probe.front());
}

TEST_CASE("training is deterministic for a fixed seed") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 48);
    auto anchors = identity_anchors(scfg);

    auto run = [&](const std::string& tag) {
        MMDiT model(small_model(scfg), 11);
        TmpDir dir("mdtest_train_det_" + tag);
        return train(model, records, anchors, small_train(5), dir.str()).metrics;
    };
    auto a = run("a");
    auto b = run("b");
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(metrics_equal(a[i], b[i]));

    MMDiT other(small_model(scfg), 11);
    TmpDir dir("mdtest_train_det_c");
    auto c = train(other, records, anchors, small_train(6), dir.str()).metrics;
    CHECK_FALSE(metrics_equal(a[0], c[0]));
}

TEST_CASE("resume from checkpoint matches the uninterrupted run") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 48);
    auto anchors = identity_anchors(scfg);

    TrainConfig full = small_train(5);
    full.epoch_iters = 40;
    full.iterations = 120;  // epochs 0..2

    MMDiT ma(small_model(scfg), 11);
    TmpDir da("mdtest_resume_full");
    auto whole = train(ma, records, anchors, full, da.str()).metrics;
    REQUIRE(whole.size() == 3);

    // same schedule, killed after epoch 0, then resumed in the same directory
    MMDiT mb(small_model(scfg), 11);
    TmpDir db("mdtest_resume_split");
    TrainConfig first = full;
    first.iterations = 40;
    auto part1 = train(mb, records, anchors, first, db.str());
    REQUIRE(part1.metrics.size() == 1);
    CHECK(part1.next_epoch == 1);

    MMDiT mc(small_model(scfg), 11);  // fresh weights, must be overwritten by the checkpoint
    auto part2 = train(mc, records, anchors, full, db.str());
    REQUIRE(part2.metrics.size() == 2);
    CHECK(part2.metrics[0].epoch == 1);
    CHECK(part2.next_epoch == 3);

    CHECK(metrics_equal(whole[0], part1.metrics[0]));
    CHECK(metrics_equal(whole[1], part2.metrics[0]));
    CHECK(metrics_equal(whole[2], part2.metrics[1]));

    // the split directory's metrics file accumulated all three epochs in order
    std::ifstream in(db.path / "metrics.jsonl");
    std::string line;
    std::vector<int> epochs;
    while (std::getline(in, line)) epochs.push_back(nlohmann::json::parse(line)["epoch"].get<int>());
    CHECK(epochs == std::vector<int>{0, 1, 2});

    // a run whose checkpoints already cover every epoch is a no-op
    auto again = train(mc, records, anchors, full, db.str());
    CHECK(again.metrics.empty());
    CHECK(again.next_epoch == 3);
}

TEST_CASE("curriculum level advances in the metrics") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 48);
    auto anchors = identity_anchors(scfg);
    MMDiT model(small_model(scfg), 11);

    TrainConfig cfg = small_train(5);
    cfg.epochs_per_level = 1;
    cfg.epoch_iters = 20;
    cfg.iterations = 60;
    TmpDir dir("mdtest_train_levels");
    auto res = train(model, records, anchors, cfg, dir.str());
    REQUIRE(res.metrics.size() == 3);
    CHECK(res.metrics[0].level == 1);
    CHECK(res.metrics[1].level == 2);
    CHECK(res.metrics[2].level == 2);  // capped at the model's level count

    // without the curriculum every epoch trains the full stack
    MMDiT flat(small_model(scfg), 11);
    cfg.curriculum = false;
    TmpDir dir2("mdtest_train_flat");
    auto fres = train(flat, records, anchors, cfg, dir2.str());
    for (const auto& m : fres.metrics) CHECK(m.level == 2);
}

TEST_CASE("curriculum lowers early level-1 validation loss") {
    SynthConfig scfg;  // library defaults
    scfg.seed = 7;
    auto records = gen_dataset(scfg, 256);
    auto anchors = identity_anchors(scfg);

    MMDiTConfig mcfg;
    mcfg.n_blocks = 1;
    mcfg.hidden = 24;
    mcfg.n_heads = 2;
    mcfg.max_levels = scfg.levels;
    mcfg.n_real = scfg.n_real;
    mcfg.id_dim = scfg.embed_dim;
    mcfg.n_emotions = scfg.n_emotions;
    mcfg.n_text_symbols = scfg.n_text_symbols;

    int wins = 0;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        TrainConfig tcfg;
        tcfg.lr = 3e-3;
        tcfg.batch_size = 16;
        tcfg.epoch_iters = 300;
        tcfg.iterations = 900;  // epochs 0..2, all before the first level bump
        tcfg.val_batches = 8;
        tcfg.seed = seed;

        MMDiT with(mcfg, seed + 1);
        tcfg.curriculum = true;
        TmpDir dw("mdtest_curr_on");
        auto rw = train(with, records, anchors, tcfg, dw.str());

        MMDiT without(mcfg, seed + 1);
        tcfg.curriculum = false;
        TmpDir dn("mdtest_curr_off");
        auto rn = train(without, records, anchors, tcfg, dn.str());

        if (rw.metrics[2].val_dse_per_level[0] <= rn.metrics[2].val_dse_per_level[0]) ++wins;
    }
    CHECK(wins >= 2);
}

TEST_CASE("divergence aborts with the last good checkpoint intact") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 48);
    auto anchors = identity_anchors(scfg);
    MMDiT model(small_model(scfg), 11);
    TmpDir dir("mdtest_train_diverge");

    TrainConfig sane = small_train(5);
    sane.epoch_iters = 30;
    sane.iterations = 30;
    auto ok = train(model, records, anchors, sane, dir.str());
    REQUIRE(ok.metrics.size() == 1);

    TrainConfig wild = sane;
    wild.iterations = 60;
    wild.lr = 1e8;
    CHECK_THROWS_AS(train(model, records, anchors, wild, dir.str()), NumericError);

    // epoch-0 checkpoint survives the abort and still resumes a sane run
    CHECK(fs::exists(dir.path / "ckpt_00000.bin"));
    MMDiT fresh(small_model(scfg), 11);
    TrainConfig recover = sane;
    recover.iterations = 60;
    auto res = train(fresh, records, anchors, recover, dir.str());
    REQUIRE(res.metrics.size() == 1);
    CHECK(res.metrics[0].epoch == 1);
}

TEST_CASE("corrupted or foreign checkpoints are rejected on resume") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 48);
    auto anchors = identity_anchors(scfg);
    TrainConfig cfg = small_train(5);
    cfg.epoch_iters = 20;
    cfg.iterations = 40;

    SUBCASE("truncated file") {
        MMDiT model(small_model(scfg), 11);
        TmpDir dir("mdtest_ckpt_trunc");
        TrainConfig one = cfg;
        one.iterations = 20;
        train(model, records, anchors, one, dir.str());
        auto path = dir.path / "ckpt_00000.bin";
        auto size = fs::file_size(path);
        fs::resize_file(path, size / 2);
        MMDiT other(small_model(scfg), 11);
        CHECK_THROWS_AS(train(other, records, anchors, cfg, dir.str()), DataError);
    }

    SUBCASE("model-only checkpoint missing optimizer state") {
        MMDiT model(small_model(scfg), 11);
        TmpDir dir("mdtest_ckpt_foreign");
        save_checkpoint(model_checkpoint(model), (dir.path / "ckpt_00000.bin").string());
        CHECK_THROWS_WITH_AS(train(model, records, anchors, cfg, dir.str()),
                             doctest::Contains("training checkpoint"), DataError);
    }
}

TEST_CASE("training input validation") {
    auto scfg = small_synth();
    auto records = gen_dataset(scfg, 8);
    auto anchors = identity_anchors(scfg);
    MMDiT model(small_model(scfg), 11);
    TrainConfig cfg = small_train(5);
    TmpDir dir("mdtest_train_inputs");

    CHECK_THROWS_AS(train(model, {}, anchors, cfg, dir.str()), DataError);

    // identity index with no matching embedding row
    auto few = std::vector<std::vector<double>>{anchors[0]};
    CHECK_THROWS_AS(train(model, records, few, cfg, dir.str()), DataError);

    // embedding width must match the conditioning stem
    auto wide = anchors;
    for (auto& row : wide) row.push_back(0.0);
    CHECK_THROWS_AS(train(model, records, wide, cfg, dir.str()), DataError);

    // masked tokens cannot appear in clean training data
    auto masked = records;
    masked[0].tokens.at(0, 0) = Vocab{scfg.n_real}.mask_id();
    CHECK_THROWS_AS(train(model, masked, anchors, cfg, dir.str()), DataError);

    // grids deeper than the model supports
    auto deep = records;
    for (auto& r : deep) r.tokens = TokenGrid(3, scfg.length);
    CHECK_THROWS_AS(train(model, deep, anchors, cfg, dir.str()), DataError);

    // mixed grid shapes within one dataset
    auto mixed = records;
    mixed[1].tokens = TokenGrid(2, scfg.length + 1);
    CHECK_THROWS_AS(train(model, mixed, anchors, cfg, dir.str()), DataError);
}

TEST_CASE("identity encoder is the identity map at initialization") {
    SynthConfig cfg;
    cfg.n_identities = 4;
    cfg.embed_dim = 16;
    cfg.face_noise = 0.0;
    cfg.seed = 21;
    auto pairs = gen_embedding_pairs(cfg, 50);

    AlignConfig acfg;
    acfg.steps = 0;
    acfg.seed = 3;
    auto enc = fit_identity_encoder(pairs, acfg);
    for (const auto& p : pairs) {
        auto y = enc.encode(p.face_view);
        REQUIRE(y.size() == p.face_view.size());
        for (size_t i = 0; i < y.size(); ++i) CHECK(y[i] == p.face_view[i]);
    }

    // coincident views score exactly zero loss without any training
    std::vector<EmbeddingPair> same;
    for (int i = 0; i < 10; ++i) same.push_back({pairs[i].speech_view, pairs[i].speech_view});
    auto rep = align_report(enc, same);
    CHECK(rep.mean_loss == 0.0);
    CHECK(rep.mean_cosine == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("identity encoder aligns noiseless views") {
    SynthConfig cfg;
    cfg.n_identities = 4;
    cfg.embed_dim = 16;
    cfg.face_noise = 0.0;
    cfg.seed = 21;
    auto pairs = gen_embedding_pairs(cfg, 200);

    AlignConfig acfg;
    acfg.steps = 500;
    acfg.seed = 3;
    auto enc = fit_identity_encoder(pairs, acfg);
    auto rep = align_report(enc, pairs);
    CHECK(rep.mean_cosine >= 0.99);

    auto before = align_report(fit_identity_encoder(pairs, AlignConfig{.steps = 0, .seed = 3}), pairs);
    CHECK(rep.mean_loss < before.mean_loss);
}

TEST_CASE("identity encoder input validation") {
    CHECK_THROWS_AS(fit_identity_encoder({}, AlignConfig{}), std::domain_error);

    std::vector<EmbeddingPair> bad{{{1.0, 0.0}, {1.0, 0.0, 0.0}}};
    CHECK_THROWS_AS(fit_identity_encoder(bad, AlignConfig{}), std::domain_error);

    AlignConfig zero_lr;
    zero_lr.lr = 0.0;
    std::vector<EmbeddingPair> one{{{1.0, 0.0}, {0.0, 1.0}}};
    CHECK_THROWS_AS(fit_identity_encoder(one, zero_lr), ConfigError);

    IdentityEncoder enc = fit_identity_encoder(one, AlignConfig{.steps = 0});
    CHECK_THROWS_AS(enc.encode({1.0, 0.0, 0.0}), std::domain_error);
}
