#pragma once

#include <cstdint>
#include <vector>

#include "npssl/model.hpp"

namespace npssl {

double error_rate(const std::vector<Prediction>& preds, const std::vector<int>& labels);

struct CalibrationBin {
    std::size_t count = 0;
    double mean_value = 0.0;  // average normalized uncertainty, or confidence
    double outcome = 0.0;     // error rate (UCE) or accuracy (ECE) within the bin
};

struct CalibrationReport {
    std::vector<CalibrationBin> bins;
    double uce = 0.0;
    double ece = 0.0;
    std::size_t n_bins = 0;
};

// Equal-width bins over entropy normalized by ln C; uce is the count-weighted
// mean |bin error - bin uncertainty|.
CalibrationReport expected_uce(const std::vector<Prediction>& preds, const std::vector<int>& labels,
                               std::size_t n_bins = 15);

// Confidence analogue: bins over max-probability vs accuracy.
CalibrationReport expected_ece(const std::vector<Prediction>& preds, const std::vector<int>& labels,
                               std::size_t n_bins = 15);

struct ClasswiseRow {
    int label = 0;
    std::size_t count = 0;
    double mean_uncertainty = 0.0;
    double accuracy = 0.0;
};

// grouped by true label; one row per class present in `labels`
std::vector<ClasswiseRow> classwise_uncertainty(const std::vector<Prediction>& preds,
                                                const std::vector<int>& labels);

// Plain backbone + linear classifier with inverted dropout in front of the
// classifier; uncertainty needs T full stochastic forward passes.
struct McDropoutBaseline {
    ModelShape shape;
    Mlp2 backbone_mlp;
    Tensor conv1, conv2, conv3;
    Tensor classifier;  // [F x C]
    double dropout_p = 0.3;
};

McDropoutBaseline init_baseline(const ModelShape& shape, std::uint64_t seed, double dropout_p = 0.3);

std::vector<Prediction> mc_dropout_baseline_predict(const McDropoutBaseline& model,
                                                    const Tensor& batch, std::size_t T,
                                                    std::uint64_t seed);

struct TimingTable {
    std::vector<std::size_t> t_values;
    // seconds[repeat][t_index]
    std::vector<std::vector<double>> np_seconds;
    std::vector<std::vector<double>> baseline_seconds;

    double np_mean(std::size_t t_index) const;
    double baseline_mean(std::size_t t_index) const;
};

// Wall-clock uncertainty-estimation cost per T: the NP head runs the backbone
// once per batch and only the decoder/classifier T times; the baseline runs
// the full network T times.
TimingTable timing_benchmark(const NpParams& params, const ModelShape& shape,
                             const MemoryBank& latent_bank, const MemoryBank& det_bank,
                             const McDropoutBaseline& baseline, const std::vector<std::size_t>& ts,
                             const Tensor& batch, std::size_t repeats, std::uint64_t seed);

}  // namespace npssl
