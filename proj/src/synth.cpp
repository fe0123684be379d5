#include "maskdiff/synth.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "maskdiff/errors.hpp"

namespace maskdiff {

namespace {

// Substream key ranges; records and pairs must never collide.
constexpr uint64_t kRecordBase = uint64_t{1} << 32;
constexpr uint64_t kPairBase = uint64_t{2} << 32;
constexpr uint64_t kAnchorKey = 0x414e4348;   // anchors
constexpr uint64_t kDistortKey = 0x44495354;  // distortion matrix

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Change-draw at level 0: resample from the identity distribution with the
// current symbol excluded, so the realized stay probability is exact.
std::vector<double> change_dist(const std::vector<double>& base, int prev) {
    std::vector<double> w = base;
    w[prev] = 0.0;
    return w;
}

}  // namespace

void SynthConfig::validate() const {
    if (n_real < 2) throw ConfigError("SynthConfig: n_real must be >= 2");
    if (levels < 1 || length < 1) throw ConfigError("SynthConfig: grid shape must be positive");
    if (n_identities < 1 || n_emotions < 1 || n_text_symbols < 1)
        throw ConfigError("SynthConfig: condition cardinalities must be >= 1");
    if (static_cast<int>(stay.size()) < levels)
        throw ConfigError("SynthConfig: need a stay probability per level");
    for (int l = 0; l < levels; ++l) {
        if (!(stay[l] > 0.0 && stay[l] < 1.0))
            throw ConfigError("SynthConfig: stay probabilities must lie in (0, 1)");
        if (l > 0 && !(stay[l] < stay[l - 1]))
            throw ConfigError("SynthConfig: stay probabilities must strictly decrease by level");
    }
    if (!(emotion_logit_shift >= 0.0) || !std::isfinite(emotion_logit_shift))
        throw ConfigError("SynthConfig: emotion_logit_shift must be finite and >= 0");
    if (!(identity_concentration > 0.0 && identity_concentration < 1.0))
        throw ConfigError("SynthConfig: identity_concentration must lie in (0, 1)");
    if (embed_dim < 2) throw ConfigError("SynthConfig: embed_dim must be >= 2");
    if (!(face_noise >= 0.0)) throw ConfigError("SynthConfig: face_noise must be >= 0");
}

double SynthConfig::stay_prob(int level, int emotion) const {
    if (level < 0 || level >= levels) throw ConfigError("SynthConfig: level out of range");
    if (emotion < 0 || emotion >= n_emotions) throw ConfigError("SynthConfig: emotion out of range");
    const double spread =
        n_emotions > 1 ? 2.0 * emotion / (n_emotions - 1.0) - 1.0 : 0.0;
    return sigmoid(logit(stay[level]) + emotion_logit_shift * spread);
}

std::vector<double> SynthConfig::base_dist(int identity) const {
    if (identity < 0 || identity >= n_identities)
        throw ConfigError("SynthConfig: identity out of range");
    const int pref = identity % n_real;
    std::vector<double> q(n_real, (1.0 - identity_concentration) / (n_real - 1));
    q[pref] = identity_concentration;
    return q;
}

int SynthConfig::emission(int below, int text_symbol) const {
    return (below + text_symbol) % n_real;
}

std::vector<DatasetRecord> gen_dataset(const SynthConfig& cfg, int n_records) {
    cfg.validate();
    if (n_records < 0) throw ConfigError("gen_dataset: n_records must be >= 0");
    const Rng master(cfg.seed);
    std::vector<DatasetRecord> out;
    out.reserve(n_records);
    for (int i = 0; i < n_records; ++i) {
        Rng rng = master.substream(kRecordBase + static_cast<uint64_t>(i));
        DatasetRecord rec;
        rec.id = i;
        rec.identity = rng.uniform_int(cfg.n_identities);
        rec.emotion = rng.uniform_int(cfg.n_emotions);
        rec.text.resize(cfg.length);
        for (auto& s : rec.text) s = static_cast<int32_t>(rng.uniform_int(cfg.n_text_symbols));

        rec.tokens = TokenGrid(cfg.levels, cfg.length);
        const std::vector<double> base = cfg.base_dist(rec.identity);
        for (int l = 0; l < cfg.levels; ++l) {
            const double stay = cfg.stay_prob(l, rec.emotion);
            for (int p = 0; p < cfg.length; ++p) {
                int32_t& cell = rec.tokens.at(l, p);
                if (p > 0 && rng.bernoulli(stay)) {
                    cell = rec.tokens.at(l, p - 1);
                } else if (l == 0) {
                    cell = p == 0 ? rng.categorical(base)
                                  : rng.categorical(change_dist(base, rec.tokens.at(0, p - 1)));
                } else {
                    cell = cfg.emission(rec.tokens.at(l - 1, p), rec.text[p]);
                }
            }
        }
        rec.duration = static_cast<double>(cfg.length);
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<std::vector<double>> identity_anchors(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng = Rng(cfg.seed).substream(kAnchorKey);
    std::vector<std::vector<double>> anchors;
    for (int k = 0; k < cfg.n_identities; ++k) {
        for (int attempt = 0;; ++attempt) {
            if (attempt >= 512)
                throw ConfigError("identity_anchors: cannot separate anchors at this dimension");
            std::vector<double> v(cfg.embed_dim);
            double norm2 = 0.0;
            for (auto& x : v) {
                x = rng.normal();
                norm2 += x * x;
            }
            const double inv = 1.0 / std::sqrt(norm2);
            for (auto& x : v) x *= inv;
            bool ok = true;
            for (const auto& a : anchors) {
                double dot = 0.0;
                for (int j = 0; j < cfg.embed_dim; ++j) dot += v[j] * a[j];
                if (dot > 0.5) ok = false;
            }
            if (ok) {
                anchors.push_back(std::move(v));
                break;
            }
        }
    }
    return anchors;
}

std::vector<EmbeddingPair> gen_embedding_pairs(const SynthConfig& cfg, int n_pairs) {
    cfg.validate();
    if (n_pairs < 0) throw ConfigError("gen_embedding_pairs: n_pairs must be >= 0");
    const auto anchors = identity_anchors(cfg);
    const Rng master(cfg.seed);

    // Fixed distortion, kept near the identity map so it stays invertible.
    Rng drng = master.substream(kDistortKey);
    const int d = cfg.embed_dim;
    std::vector<double> distort(static_cast<size_t>(d) * d, 0.0);
    const double scale = 0.8 / std::sqrt(static_cast<double>(d));
    for (int r = 0; r < d; ++r)
        for (int c = 0; c < d; ++c) distort[r * d + c] = (r == c ? 0.5 : 0.0) + scale * drng.normal();

    std::vector<EmbeddingPair> out;
    out.reserve(n_pairs);
    for (int i = 0; i < n_pairs; ++i) {
        Rng rng = master.substream(kPairBase + static_cast<uint64_t>(i));
        const int id = rng.uniform_int(cfg.n_identities);
        EmbeddingPair pair;
        pair.speech_view = anchors[id];
        pair.face_view.assign(d, 0.0);
        for (int r = 0; r < d; ++r) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) acc += distort[r * d + c] * pair.speech_view[c];
            pair.face_view[r] = acc;
        }
        for (int r = 0; r < d; ++r) pair.face_view[r] += cfg.face_noise * rng.normal();
        out.push_back(std::move(pair));
    }
    return out;
}

uint64_t encode_text(const std::vector<int32_t>& text, int n_text_symbols) {
    uint64_t code = 0;
    for (size_t p = text.size(); p-- > 0;) {
        if (text[p] < 0 || text[p] >= n_text_symbols)
            throw ConfigError("encode_text: symbol out of range");
        code = code * n_text_symbols + static_cast<uint64_t>(text[p]);
    }
    return code;
}

std::vector<int32_t> decode_text(uint64_t code, int n_text_symbols, int length) {
    std::vector<int32_t> text(length);
    for (int p = 0; p < length; ++p) {
        text[p] = static_cast<int32_t>(code % n_text_symbols);
        code /= n_text_symbols;
    }
    if (code != 0) throw ConfigError("decode_text: code out of range");
    return text;
}

namespace {

// P(grid | identity, emotion, text) under the generator, position by
// position; exact because every draw is a per-position categorical.
double grid_prob(const SynthConfig& cfg, const TokenGrid& g, int emotion,
                 const std::vector<int32_t>& text, const std::vector<double>& base) {
    double p = 1.0;
    for (int l = 0; l < cfg.levels && p > 0.0; ++l) {
        const double stay = cfg.stay_prob(l, emotion);
        for (int pos = 0; pos < cfg.length; ++pos) {
            const int cur = g.at(l, pos);
            double factor;
            if (pos == 0) {
                factor = l == 0 ? base[cur]
                                : (cur == cfg.emission(g.at(l - 1, 0), text[0]) ? 1.0 : 0.0);
            } else {
                const int prev = g.at(l, pos - 1);
                if (l == 0) {
                    factor = (cur == prev ? stay : 0.0) +
                             (cur == prev ? 0.0 : (1.0 - stay) * base[cur] / (1.0 - base[prev]));
                } else {
                    const int emit = cfg.emission(g.at(l - 1, pos), text[pos]);
                    factor = (cur == prev ? stay : 0.0) + (cur == emit ? 1.0 - stay : 0.0);
                }
            }
            p *= factor;
            if (p == 0.0) return 0.0;
        }
    }
    return p;
}

ToyDistribution from_map(const SynthConfig& cfg, const std::map<uint64_t, double>& acc,
                         double norm) {
    ToyDistribution d;
    d.vocab = Vocab(cfg.n_real);
    d.levels = cfg.levels;
    d.length = cfg.length;
    for (const auto& [code, p] : acc) {
        if (p <= 0.0) continue;
        d.support.push_back(decode_grid(code, d.vocab, cfg.levels, cfg.length));
        d.probs.push_back(p / norm);
    }
    // Absorb accumulated rounding into the largest entry.
    double sum = 0.0;
    for (double p : d.probs) sum += p;
    size_t top = 0;
    for (size_t i = 1; i < d.probs.size(); ++i)
        if (d.probs[i] > d.probs[top]) top = i;
    if (!d.probs.empty()) d.probs[top] += 1.0 - sum;
    d.validate();
    return d;
}

}  // namespace

ToyTables enumerate_toy_distribution(const SynthConfig& cfg) {
    cfg.validate();
    const int cells = cfg.levels * cfg.length;
    const Vocab vocab(cfg.n_real);
    double states = 1.0;
    for (int c = 0; c < cells; ++c) states *= vocab.n_states();
    if (states > kEnumerationCap)
        throw CapacityError("enumerate_toy_distribution: state space exceeds enumeration cap");

    uint64_t n_texts = 1;
    for (int p = 0; p < cfg.length; ++p) n_texts *= cfg.n_text_symbols;

    std::map<uint64_t, double> overall;
    std::vector<std::map<uint64_t, double>> by_id(cfg.n_identities), by_emo(cfg.n_emotions),
        by_text(n_texts);

    TokenGrid g(cfg.levels, cfg.length, 0);
    for (int id = 0; id < cfg.n_identities; ++id) {
        const std::vector<double> base = cfg.base_dist(id);
        for (int emo = 0; emo < cfg.n_emotions; ++emo) {
            for (uint64_t tc = 0; tc < n_texts; ++tc) {
                const std::vector<int32_t> text = decode_text(tc, cfg.n_text_symbols, cfg.length);
                std::fill(g.cells.begin(), g.cells.end(), 0);
                while (true) {
                    const double p = grid_prob(cfg, g, emo, text, base);
                    if (p > 0.0) {
                        const uint64_t code = encode_grid(g, vocab);
                        overall[code] += p;
                        by_id[id][code] += p;
                        by_emo[emo][code] += p;
                        by_text[tc][code] += p;
                    }
                    // Odometer over real tokens only.
                    int c = 0;
                    for (; c < cells; ++c) {
                        if (++g.cells[c] < cfg.n_real) break;
                        g.cells[c] = 0;
                    }
                    if (c == cells) break;
                }
            }
        }
    }

    const double n_conditions =
        static_cast<double>(cfg.n_identities) * cfg.n_emotions * static_cast<double>(n_texts);
    ToyTables tables;
    tables.overall = from_map(cfg, overall, n_conditions);
    tables.identity.weights.assign(cfg.n_identities, 1.0 / cfg.n_identities);
    for (int id = 0; id < cfg.n_identities; ++id)
        tables.identity.components.push_back(
            from_map(cfg, by_id[id], n_conditions / cfg.n_identities));
    tables.emotion.weights.assign(cfg.n_emotions, 1.0 / cfg.n_emotions);
    for (int emo = 0; emo < cfg.n_emotions; ++emo)
        tables.emotion.components.push_back(
            from_map(cfg, by_emo[emo], n_conditions / cfg.n_emotions));
    tables.text.weights.assign(n_texts, 1.0 / static_cast<double>(n_texts));
    for (uint64_t tc = 0; tc < n_texts; ++tc)
        tables.text.components.push_back(
            from_map(cfg, by_text[tc], n_conditions / static_cast<double>(n_texts)));
    tables.identity.validate();
    tables.emotion.validate();
    tables.text.validate();
    return tables;
}

ToyDistribution conditional_toy_distribution(const SynthConfig& cfg, std::optional<int> identity,
                                             std::optional<int> emotion,
                                             std::optional<uint64_t> text_code) {
    cfg.validate();
    const int cells = cfg.levels * cfg.length;
    const Vocab vocab(cfg.n_real);
    double states = 1.0;
    for (int c = 0; c < cells; ++c) states *= vocab.n_states();
    if (states > kEnumerationCap)
        throw CapacityError("conditional_toy_distribution: state space exceeds enumeration cap");

    uint64_t n_texts = 1;
    for (int p = 0; p < cfg.length; ++p) n_texts *= cfg.n_text_symbols;
    if (identity && (*identity < 0 || *identity >= cfg.n_identities))
        throw ConfigError("conditional_toy_distribution: unknown identity id " +
                          std::to_string(*identity));
    if (emotion && (*emotion < 0 || *emotion >= cfg.n_emotions))
        throw ConfigError("conditional_toy_distribution: unknown emotion id " +
                          std::to_string(*emotion));
    if (text_code && *text_code >= n_texts)
        throw ConfigError("conditional_toy_distribution: unknown text code " +
                          std::to_string(*text_code));

    const int id_lo = identity ? *identity : 0;
    const int id_hi = identity ? *identity + 1 : cfg.n_identities;
    const int emo_lo = emotion ? *emotion : 0;
    const int emo_hi = emotion ? *emotion + 1 : cfg.n_emotions;
    const uint64_t tc_lo = text_code ? *text_code : 0;
    const uint64_t tc_hi = text_code ? *text_code + 1 : n_texts;

    std::map<uint64_t, double> acc;
    TokenGrid g(cfg.levels, cfg.length, 0);
    double combos = 0.0;
    for (int id = id_lo; id < id_hi; ++id) {
        const std::vector<double> base = cfg.base_dist(id);
        for (int emo = emo_lo; emo < emo_hi; ++emo) {
            for (uint64_t tc = tc_lo; tc < tc_hi; ++tc) {
                const std::vector<int32_t> text = decode_text(tc, cfg.n_text_symbols, cfg.length);
                combos += 1.0;
                std::fill(g.cells.begin(), g.cells.end(), 0);
                while (true) {
                    const double p = grid_prob(cfg, g, emo, text, base);
                    if (p > 0.0) acc[encode_grid(g, vocab)] += p;
                    int c = 0;
                    for (; c < cells; ++c) {
                        if (++g.cells[c] < cfg.n_real) break;
                        g.cells[c] = 0;
                    }
                    if (c == cells) break;
                }
            }
        }
    }
    return from_map(cfg, acc, combos);
}

int classify_ml(const ConditionFamily& family, const TokenGrid& x) {
    int best = -1;
    double best_p = 0.0;
    for (size_t k = 0; k < family.components.size(); ++k) {
        const double p = family.components[k].p0(x);
        if (p > best_p) {
            best_p = p;
            best = static_cast<int>(k);
        }
    }
    return best;
}

namespace {

size_t pack_real(const TokenGrid& g, int n_real) {
    size_t code = 0;
    for (size_t c = g.cells.size(); c-- > 0;) {
        if (g.cells[c] < 0 || g.cells[c] >= n_real)
            throw std::domain_error("MlClassifier: grid must be mask-free");
        code = code * n_real + static_cast<size_t>(g.cells[c]);
    }
    return code;
}

}  // namespace

MlClassifier::MlClassifier(const ConditionFamily& family) {
    family.validate();
    n_real_ = family.components[0].vocab.n_real;
    levels_ = family.components[0].levels;
    length_ = family.components[0].length;
    const int cells = levels_ * length_;
    double states = 1.0;
    for (int c = 0; c < cells; ++c) states *= n_real_;
    if (states > kEnumerationCap)
        throw CapacityError("MlClassifier: state space exceeds enumeration cap");
    tables_.assign(family.components.size(), std::vector<double>(static_cast<size_t>(states), 0.0));
    for (size_t k = 0; k < family.components.size(); ++k)
        for (size_t i = 0; i < family.components[k].support.size(); ++i)
            tables_[k][pack_real(family.components[k].support[i], n_real_)] =
                family.components[k].probs[i];
}

int MlClassifier::classify(const TokenGrid& x) const {
    if (x.levels != levels_ || x.length != length_)
        throw std::domain_error("MlClassifier: grid shape mismatch");
    const size_t code = pack_real(x, n_real_);
    int best = -1;
    double best_p = 0.0;
    for (size_t k = 0; k < tables_.size(); ++k) {
        if (tables_[k][code] > best_p) {
            best_p = tables_[k][code];
            best = static_cast<int>(k);
        }
    }
    return best;
}

}  // namespace maskdiff
