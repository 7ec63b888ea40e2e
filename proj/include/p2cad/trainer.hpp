#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "p2cad/cad_lang.hpp"
#include "p2cad/geometry.hpp"
#include "p2cad/network.hpp"
#include "p2cad/tensor.hpp"

namespace p2cad {

// ------------------------------------------------------------------ losses

struct LossReport {
    Tensor total;      // graph-connected scalar, loss_cmd + beta * loss_param
    double loss_cmd = 0.0;
    double loss_param = 0.0;
    double loss = 0.0;
};

// summed cross-entropy over all positions (commands) and all position/slot
// pairs (parameters, unused-class targets included)
LossReport compute_loss(Graph& g, const Prediction& pred, const TokenMatrix& target, double beta);
LossReport compute_loss_targets(Graph& g, const Prediction& pred,
                                const std::vector<int>& cmd_targets,
                                const std::vector<int>& param_targets, double beta);

// ----------------------------------------------------------------- metrics

double acc_cmd(const TokenMatrix& pred, const TokenMatrix& gt);

struct ParamAccuracy {
    double acc = 1.0; // vacuously 1 when nothing was evaluated
    long evaluated = 0;
};

// evaluated over positions with the correct command and ground-truth-used
// slots only; |pred_class - gt_class| < eta, strict
ParamAccuracy acc_param(const TokenMatrix& pred, const TokenMatrix& gt, int eta);

struct MetricsReport {
    double acc_cmd = 0.0;
    double acc_param = 0.0;
    double cd_median = 0.0; // over valid reconstructions only
    double cd_mean = 0.0;
    double invalid_ratio = 0.0;
    long total = 0;
    long valid = 0;
    long param_slots_evaluated = 0;

    std::string to_json() const;
};

// published full-corpus results, kept for context; desk-scale runs are not
// expected to land anywhere near these
struct ReferenceMetrics {
    double acc_cmd, acc_param, cd_median, invalid_ratio;
};
ReferenceMetrics full_scale_reference();

// ----------------------------------------------------------------- dataset

struct DatasetSpec {
    long count = 0;
    std::uint64_t seed = 0;
    int n_points = 512;
    int min_groups = 1, max_groups = 2;
    int min_loops = 1, max_loops = 2;
    int min_curves = 3, max_curves = 6;

    void validate() const; // throws BadSpec
};

struct DatasetSample {
    TokenMatrix tokens;
    PointCloud cloud; // normalized, coordinates rounded to f32
};

struct Dataset {
    DatasetSpec spec;
    std::vector<DatasetSample> samples;
};

// deterministic; rejection-resamples until every sample executes and
// samples cleanly, so generator output is 100% valid
Dataset generate_dataset(const DatasetSpec& spec);

std::uint64_t sample_cloud_seed(std::uint64_t dataset_seed, long index);

// directory layout: manifest.json + tokens.p2cd + clouds.p2pc
void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

// -------------------------------------------------------------- evaluation

// Reconstructions are re-sampled with each sample's own cloud seed and the
// dataset's point count, so a token-exact reconstruction reproduces the
// ground-truth cloud and scores CD = 0. Invalid models are counted but
// excluded from CD aggregation.
MetricsReport evaluate_predictions(const std::vector<TokenMatrix>& preds, const Dataset& ds, int eta);
MetricsReport evaluate(const NetworkParams& params, const Dataset& ds, int eta);

// ---------------------------------------------------------------- training

struct TrainOptions {
    int epochs = 1;
    double lr = 1e-4;
    int batch = 32;
    double beta = 2.0;
    std::uint64_t seed = 0;
    int ckpt_every = 0;       // epochs; 0 = final checkpoint only
    std::string out_dir;      // empty = keep everything in memory
};

struct LossRow {
    long step;
    double loss, loss_cmd, loss_param;
};

struct TrainResult {
    std::vector<LossRow> curve;
};

// Seeded shuffling, per-batch mean loss, Adam steps. A non-finite loss
// aborts with "Diverged" after restoring the last end-of-epoch parameters
// (and writing them out when out_dir is set).
TrainResult train(NetworkParams& params, const Dataset& ds, const TrainOptions& opt);

void write_loss_csv(const std::string& path, const std::vector<LossRow>& curve);

// ---------------------------------------------------------- gradient check

struct GradCheckEntry {
    std::string tensor;
    double max_rel_err = 0.0;
    int probes = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;
    bool pass = false;
};

// central finite differences (h = 1e-3) against reverse-mode gradients on
// the full forward+loss path; probes the largest-gradient entries of every
// parameter tensor
GradCheckReport gradient_check(const NetworkConfig& cfg, std::uint64_t seed,
                               double h = 1e-3, double tol = 1e-4);

} // namespace p2cad
