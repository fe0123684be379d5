#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "maskdiff/oracle.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/token_grid.hpp"

namespace maskdiff {

// Generator for hierarchical token data. Level 0 is the slowest-varying
// stream: piecewise-constant runs whose symbol distribution depends on the
// identity and whose persistence depends on the emotion. Every level above
// re-encodes the level below through a position-aligned text symbol, with
// strictly shorter runs.
struct SynthConfig {
    int n_real = 4;
    int levels = 2;
    int length = 4;  // token positions per level
    int n_identities = 2;
    int n_emotions = 2;
    int n_text_symbols = 2;
    // Base per-level stay probability; must be strictly decreasing over the
    // levels in use so lower levels vary slower.
    std::vector<double> stay = {0.8, 0.35, 0.18, 0.08};
    // Emotion shifts every level's stay probability in logit space, so the
    // cross-level ordering survives for every emotion value.
    double emotion_logit_shift = 1.8;
    double identity_concentration = 0.9;  // mass on the identity's preferred symbol
    int embed_dim = 32;
    double face_noise = 0.05;
    uint64_t seed = 0;

    void validate() const;
    double stay_prob(int level, int emotion) const;
    // Symbol distribution the identity draws from at level 0.
    std::vector<double> base_dist(int identity) const;
    // Token emitted at a change position of level >= 1.
    int emission(int below, int text_symbol) const;
};

struct DatasetRecord {
    int64_t id = 0;
    TokenGrid tokens;  // mask free
    int identity = 0;
    int emotion = 0;
    std::vector<int32_t> text;  // one symbol per position
    double duration = 0.0;      // total length in token slots
};

// (face measurement, speech reference) embedding pair for alignment
// training; equal dimensions.
struct EmbeddingPair {
    std::vector<double> face_view;
    std::vector<double> speech_view;
};

// Record i is a pure function of (cfg, cfg.seed, i).
std::vector<DatasetRecord> gen_dataset(const SynthConfig& cfg, int n_records);

// Unit-norm per-identity reference embeddings with pairwise cosine <= 0.5.
std::vector<std::vector<double>> identity_anchors(const SynthConfig& cfg);

// face = distortion * anchor + noise; speech = anchor of a random identity.
std::vector<EmbeddingPair> gen_embedding_pairs(const SynthConfig& cfg, int n_pairs);

// Exact law of gen_dataset, overall and conditioned on each value of each
// condition slot. Text components are indexed by the packed symbol sequence
// (position 0 least significant).
struct ToyTables {
    ToyDistribution overall;
    ConditionFamily identity;
    ConditionFamily emotion;
    ConditionFamily text;
};

ToyTables enumerate_toy_distribution(const SynthConfig& cfg);

// Exact law of gen_dataset restricted to the given condition values; absent
// slots are averaged out uniformly. With all slots given this is the full
// joint conditional, which ToyTables does not carry.
ToyDistribution conditional_toy_distribution(const SynthConfig& cfg, std::optional<int> identity,
                                             std::optional<int> emotion,
                                             std::optional<uint64_t> text_code);

uint64_t encode_text(const std::vector<int32_t>& text, int n_text_symbols);
std::vector<int32_t> decode_text(uint64_t code, int n_text_symbols, int length);

// Likelihood classifier over family components: argmax_k P(x | k), or -1
// when x is off support for every component.
int classify_ml(const ConditionFamily& family, const TokenGrid& x);

// Same decision rule with dense per-component tables over mask-free grids;
// build once, then classify in O(components) per query.
class MlClassifier {
  public:
    explicit MlClassifier(const ConditionFamily& family);
    int classify(const TokenGrid& x) const;

  private:
    int n_real_ = 0;
    int levels_ = 0;
    int length_ = 0;
    std::vector<std::vector<double>> tables_;  // [component][packed real grid]
};

}  // namespace maskdiff
