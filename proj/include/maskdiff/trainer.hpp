#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/score_net.hpp"
#include "maskdiff/synth.hpp"

namespace maskdiff {

struct TrainConfig {
    double lr = 1e-4;
    int batch_size = 32;
    long iterations = 20000;  // reference scale 300k
    int epoch_iters = 500;
    double p_all_null = 0.1;
    double p_each_null = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    int epochs_per_level = 3;
    bool curriculum = true;  // off: every level trains from epoch 0
    double val_fraction = 0.2;
    int val_batches = 2;     // validation batches per level prefix
    double t_floor = 1e-3;   // corruption time floor; sigma(t) diverges at 0
    uint64_t seed = 0;

    void validate() const;
    int total_epochs() const;
};

struct EpochMetrics {
    int epoch = 0;
    int level = 0;          // highest level trained this epoch
    double train_dse = 0.0; // mean batch loss over the epoch
    std::vector<double> val_dse_per_level;
    double grad_norm = 0.0; // mean over the epoch's steps
    double wallclock_s = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> metrics;  // epochs run by this call
    int next_epoch = 0;
    std::string checkpoint_path;        // latest written
};

using TrainObserver = std::function<void(long iteration, double batch_loss)>;

// Mini-batch DSE training with per-epoch derived random streams, so a run
// resumed from the epoch-k checkpoint continues bit-exactly. Metrics append
// to <out_dir>/metrics.jsonl, checkpoints go to <out_dir>/ckpt_<epoch>.bin.
// id_embeddings[i] conditions records with identity i; width must equal the
// model's id_dim. Non-finite loss or gradients abort with NumericError,
// leaving the last good checkpoint in place.
TrainResult train(MMDiT& model, const std::vector<DatasetRecord>& dataset,
                  const std::vector<std::vector<double>>& id_embeddings, const TrainConfig& cfg,
                  const std::string& out_dir, const TrainObserver& observer = {});

// Checkpoint payload helpers shared by the trainer and the CLI.
Checkpoint model_checkpoint(const MMDiT& model);
void load_model_params(MMDiT& model, const Checkpoint& ckpt);

// Residual two-layer map; the identity function at initialization.
struct IdentityEncoder {
    int dim = 0;
    int hidden = 0;
    Mat w1, b1, w2, b2;

    std::vector<double> encode(const std::vector<double>& x) const;
};

struct AlignConfig {
    int steps = 500;
    double lr = 1e-2;
    int hidden = 32;
    double beta1 = 0.9;
    double beta2 = 0.999;
    uint64_t seed = 0;

    void validate() const;
};

// Fits face_view -> speech_view by minimizing the mean alignment loss over
// all pairs with full-batch adaptive-moment steps.
IdentityEncoder fit_identity_encoder(const std::vector<EmbeddingPair>& pairs,
                                     const AlignConfig& cfg);

// Mean alignment loss and mean cosine of encoder outputs against targets.
struct AlignReport {
    double mean_loss = 0.0;
    double mean_cosine = 0.0;
};
AlignReport align_report(const IdentityEncoder& enc, const std::vector<EmbeddingPair>& pairs);

}  // namespace maskdiff
