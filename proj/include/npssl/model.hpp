#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "npssl/config.hpp"
#include "npssl/divergence.hpp"
#include "npssl/tensor.hpp"

namespace npssl {

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [1 x out]
};

// Two linear layers with a relu between them; hidden width is always M.
struct Mlp2 {
    Linear l1, l2;
};

// Every parameter tensor of the model. All MLPs are two layers with
// hidden_dim units; the classifier is a bare weight matrix (no bias).
struct NpParams {
    Mlp2 backbone_mlp;              // vector backbone: input -> F -> F
    Tensor conv1, conv2, conv3;     // image backbone kernels; conv3 emits F channels
    Mlp2 latent_encoder;            // (F+C) -> M -> M
    Mlp2 det_encoder;               // (F+C) -> M -> M
    Mlp2 mean_head;                 // M -> M -> L
    Mlp2 var_head;                  // M -> M -> L
    Mlp2 decoder;                   // (F+L+M) -> M -> M
    Tensor classifier;              // [M x C]
};

struct ModelShape {
    ModelConfig cfg;
    std::size_t input_dim = 2;  // vector width (mlp backbone)
    std::size_t image_h = 0, image_w = 0;
    std::size_t classes = 2;
};

ModelShape shape_for(const ModelConfig& cfg, const Dataset& ds);

NpParams init_params(const ModelShape& shape, std::uint64_t seed);

// Visits every live tensor in a fixed order (conv tensors only for the conv
// backbone, the backbone MLP only for the vector backbone).
template <class P, class F>
void for_each_param(P& params, BackboneKind kind, F f) {
    if (kind == BackboneKind::Mlp) {
        f("backbone.l1.w", params.backbone_mlp.l1.w);
        f("backbone.l1.b", params.backbone_mlp.l1.b);
        f("backbone.l2.w", params.backbone_mlp.l2.w);
        f("backbone.l2.b", params.backbone_mlp.l2.b);
    } else {
        f("backbone.conv1", params.conv1);
        f("backbone.conv2", params.conv2);
        f("backbone.conv3", params.conv3);
    }
    f("latent_encoder.l1.w", params.latent_encoder.l1.w);
    f("latent_encoder.l1.b", params.latent_encoder.l1.b);
    f("latent_encoder.l2.w", params.latent_encoder.l2.w);
    f("latent_encoder.l2.b", params.latent_encoder.l2.b);
    f("det_encoder.l1.w", params.det_encoder.l1.w);
    f("det_encoder.l1.b", params.det_encoder.l1.b);
    f("det_encoder.l2.w", params.det_encoder.l2.w);
    f("det_encoder.l2.b", params.det_encoder.l2.b);
    f("mean_head.l1.w", params.mean_head.l1.w);
    f("mean_head.l1.b", params.mean_head.l1.b);
    f("mean_head.l2.w", params.mean_head.l2.w);
    f("mean_head.l2.b", params.mean_head.l2.b);
    f("var_head.l1.w", params.var_head.l1.w);
    f("var_head.l1.b", params.var_head.l1.b);
    f("var_head.l2.w", params.var_head.l2.w);
    f("var_head.l2.b", params.var_head.l2.b);
    f("decoder.l1.w", params.decoder.l1.w);
    f("decoder.l1.b", params.decoder.l1.b);
    f("decoder.l2.w", params.decoder.l2.w);
    f("decoder.l2.b", params.decoder.l2.b);
    f("classifier", params.classifier);
}

// Bounded FIFO buffer of representation rows with a mean summary.
class MemoryBank {
public:
    MemoryBank() = default;
    MemoryBank(std::size_t capacity, std::size_t width);

    void push(const std::vector<double>& row);
    void push_rows(const Tensor& rows);

    // canonical elementwise mean of the current contents
    std::vector<double> summary() const;

    std::size_t size() const { return buffer_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::size_t width() const { return width_; }
    std::uint64_t inserted() const { return inserted_; }
    const std::deque<std::vector<double>>& contents() const { return buffer_; }

    // checkpoint restore
    void restore(std::deque<std::vector<double>> buffer, std::uint64_t inserted);

private:
    std::size_t capacity_ = 0;
    std::size_t width_ = 0;
    std::deque<std::vector<double>> buffer_;
    std::uint64_t inserted_ = 0;
};

struct Prediction {
    std::vector<double> probs;
    double uncertainty = 0.0;                   // entropy of probs, nats
    std::vector<std::vector<double>> members;   // optional per-sample T member predictions
};

double entropy_nats(const std::vector<double>& probs);

// ---- value-level (inference) forward paths ----

// raw sample batch -> [n x F] feature rows; deterministic given params
Tensor backbone_forward(const NpParams& params, const ModelShape& shape, const Tensor& batch);

// one-hot (or probability) label rows for class ids
Tensor one_hot_rows(const std::vector<int>& labels, std::size_t classes);

// per-point representations: encoder(concat(feature, label)); order-preserving
Tensor encode_points(const Mlp2& encoder, const Tensor& features, const Tensor& label_rows);

// order-invariant mean of representations; rejects empty input
std::vector<double> aggregate(const Tensor& representations);
std::vector<double> aggregate(const std::vector<std::vector<double>>& representations);

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows);

// heads + variance squash var = floor + (1-floor)*logistic(raw)
DiagonalGaussian latent_distribution(const NpParams& params, const std::vector<double>& rep);

// z_t = mean + sqrt(var) * eta_t with seeded standard-normal eta; [T x L]
Tensor sample_latent(const DiagonalGaussian& dist, std::size_t T, std::uint64_t seed);

// each row of each member: softmax(classifier^T g(concat(feature, z_t, det)))
std::vector<Tensor> decode_classify(const NpParams& params, const Tensor& features,
                                    const Tensor& latents, const std::vector<double>& det_rep);

std::vector<Prediction> average_members(const std::vector<Tensor>& members, bool keep_members);

// Inference mode: both order-invariant representations come from the banks.
std::vector<Prediction> predict_inference(const NpParams& params, const ModelShape& shape,
                                          const MemoryBank& latent_bank, const MemoryBank& det_bank,
                                          const Tensor& features, std::size_t T, std::uint64_t seed,
                                          bool keep_members = false);
// empty feature list yields an empty output
std::vector<Prediction> predict_inference(const NpParams& params, const ModelShape& shape,
                                          const MemoryBank& latent_bank, const MemoryBank& det_bank,
                                          const std::vector<std::vector<double>>& features,
                                          std::size_t T, std::uint64_t seed,
                                          bool keep_members = false);

// Training-context mode: representations come from an explicit labeled set.
std::vector<Prediction> predict_with_context(const NpParams& params, const ModelShape& shape,
                                             const Tensor& context_features,
                                             const std::vector<int>& context_labels,
                                             const Tensor& features, std::size_t T,
                                             std::uint64_t seed, bool keep_members = false);

// ---- graph-building (training) forward paths ----

struct BoundLinear {
    NodeId w = kNoNode, b = kNoNode;
};
struct BoundMlp {
    BoundLinear l1, l2;
};
struct BoundParams {
    BoundMlp backbone_mlp;
    NodeId conv1 = kNoNode, conv2 = kNoNode, conv3 = kNoNode;
    BoundMlp latent_encoder, det_encoder, mean_head, var_head, decoder;
    NodeId classifier = kNoNode;
    std::vector<NodeId> all;  // visitor order, matches for_each_param
};

BoundParams bind_params(Graph& g, const NpParams& params, BackboneKind kind);

// Arranges already-created leaf ids (in for_each_param order) into the bound
// structure; bind_params is leaf creation plus this.
BoundParams map_params(const std::vector<NodeId>& ids, BackboneKind kind);

NodeId mlp2_graph(Graph& g, const BoundMlp& m, NodeId x);
NodeId backbone_graph(Graph& g, const BoundParams& bp, const ModelShape& shape, NodeId batch);
DistNodes latent_distribution_graph(Graph& g, const BoundParams& bp, NodeId rep_row);

}  // namespace npssl
