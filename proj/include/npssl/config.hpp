#pragma once

#include <cstdint>
#include <string>

#include "npssl/dataset.hpp"
#include "npssl/divergence.hpp"

namespace npssl {

enum class BackboneKind { Mlp, Conv };

struct ModelConfig {
    BackboneKind backbone = BackboneKind::Mlp;
    std::size_t feature_dim = 64;     // F: backbone output width
    std::size_t backbone_hidden = 64; // hidden width of the vector backbone MLP
    std::size_t hidden_dim = 64;      // M: width of every MLP in the head
    std::size_t latent_dim = 32;      // L: latent variable width

    bool operator==(const ModelConfig&) const = default;
};

struct TrainConfig {
    std::size_t B = 64;          // labeled batch size (capped at the labeled pool)
    std::size_t ratio_mu = 7;    // unlabeled batch = ratio_mu * B
    double tau_c = 0.95;         // confidence threshold
    double tau_u = 0.4;          // uncertainty threshold, nats
    double lambda_u = 1.0;
    double beta = 0.01;
    std::size_t T = 10;          // latent samples per pass
    std::size_t Q = 2560;        // memory bank capacity
    double ema_momentum = 0.999;
    double lr0 = 0.03;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t total_steps = 20000;
    DivergenceForm divergence = DivergenceForm::Js;
    std::uint64_t seed = 1;

    bool operator==(const TrainConfig&) const = default;
};

struct DatasetConfig {
    std::string dataset = "two-moons";  // two-moons | blobs | csv | idx
    std::size_t dataset_n = 1500;
    double dataset_noise = 0.1;
    std::size_t dataset_classes = 2;    // blobs only
    std::string dataset_path;           // csv
    std::string idx_images;
    std::string idx_labels;
    std::string unlabeled_list;
    std::size_t labels_per_class = 3;
    double test_fraction = 1.0 / 3.0;

    bool operator==(const DatasetConfig&) const = default;
};

struct RunConfig {
    TrainConfig train;
    ModelConfig model;
    DatasetConfig data;
    std::size_t eval_interval = 1000;

    bool operator==(const RunConfig&) const = default;
};

// Flat key=value text. Serialization uses a fixed key order and exact (%.17g)
// numeric formatting so parse(serialize(c)) == c.
std::string serialize_config(const RunConfig& cfg);
RunConfig parse_config(const std::string& text);
RunConfig load_config_file(const std::string& path);

// Assigns one key (used by the sweep grid); throws on unknown key/bad value.
void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value);

Dataset build_dataset(const RunConfig& cfg);

}  // namespace npssl
