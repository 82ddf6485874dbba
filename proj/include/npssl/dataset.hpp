#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "npssl/tensor.hpp"

namespace npssl {

constexpr int kUnlabeled = -1;  // CSV label sentinel

enum class DataKind { Vector, Image };
enum class Split : std::uint8_t { Labeled, Unlabeled, Test };

// Samples are stored feature-normalized: standardized per feature for vector
// data, pixels scaled to [0,1] for images. True labels are retained even for
// samples tagged Unlabeled; the trainer only reads them through the Labeled
// and Test splits.
struct Dataset {
    DataKind kind = DataKind::Vector;
    std::size_t feature_dim = 0;             // vector width, or H*W for images
    std::size_t image_h = 0, image_w = 0;
    std::size_t classes = 0;
    double pixel_mean = 0.0;                 // for image augmentation fill
    std::vector<std::vector<double>> samples;
    std::vector<int> labels;                 // kUnlabeled where unknown
    std::vector<Split> split;                // same length as samples

    std::size_t size() const { return samples.size(); }
    std::vector<std::size_t> indices_of(Split s) const;

    // rows gathered into a batch tensor: [n x F] vectors or {n,1,H,W} images
    Tensor gather(const std::vector<std::size_t>& idx) const;
};

Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed);
Dataset make_blobs(std::size_t n, std::size_t classes, std::uint64_t seed);

// CSV with a header row; the `label` column holds class ids with -1 marking
// unlabeled rows; every other column is a numeric feature.
Dataset load_csv(const std::string& path);

// IDX image/label file pair (magic 0x00000803 / 0x00000801). Samples listed
// in `unlabeled_list_path` (one index per line, optional) lose their labels.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& unlabeled_list_path = "");

// Tags test_fraction of the data as Test, then exactly labels_per_class
// samples per class as Labeled; the rest of the train pool becomes Unlabeled.
void split_ssl(Dataset& ds, std::size_t labels_per_class, double test_fraction, std::uint64_t seed);

}  // namespace npssl
