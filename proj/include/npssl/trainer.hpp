#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "npssl/config.hpp"
#include "npssl/dataset.hpp"
#include "npssl/divergence.hpp"
#include "npssl/model.hpp"

namespace npssl {

struct LossBreakdown {
    double l_cls = 0.0;
    double l_u_cls = 0.0;
    double div_term = 0.0;
    double total = 0.0;
};

struct PseudoLabelSet {
    std::vector<std::size_t> indices;  // positions in the unlabeled batch
    std::vector<int> labels;
    std::size_t count() const { return indices.size(); }
};

struct StepMetrics {
    std::size_t selected = 0;        // B_c
    std::size_t unlabeled_batch = 0;
    double lr = 0.0;
    double u_context_avg = 0.0;
    double u_target_avg = 0.0;
    double alpha_u = 0.5;
    std::size_t graph_nodes = 0;
    std::size_t loss_leaf_ancestors = 0;  // leaves reachable from the loss
    std::size_t param_leaves = 0;
};

struct TrainerState {
    ModelShape shape;
    NpParams params;
    NpParams ema;
    NpParams velocity;  // SGD momentum buffers
    MemoryBank latent_bank, det_bank;
    std::uint64_t step = 0;
};

struct EvalPoint {
    std::uint64_t step = 0;
    double lr = 0.0;
    double l_cls = 0.0, l_u_cls = 0.0, div_term = 0.0, total = 0.0;
    double accuracy = 0.0;
    double uce = 0.0;
    double mean_uncertainty = 0.0;
    double pseudo_label_rate = 0.0;
};

struct TrainResult {
    TrainerState state;
    std::vector<EvalPoint> log;
};

// ---- augmentation ----
// Vectors: weak adds Gaussian noise (sigma 0.05); strong adds noise (sigma
// 0.2) then zeroes features with probability 0.2 (features are standardized,
// so zero is the dataset mean). Images: weak is pad-4 random crop plus
// horizontal flip (p=0.5); strong stacks two extra ops drawn from
// {contrast, brightness, rotation<=30deg, cutout}, cutout filling with the
// dataset mean pixel.
std::vector<double> augment_weak(const Dataset& ds, const std::vector<double>& sample,
                                 std::uint64_t seed);
std::vector<double> augment_strong(const Dataset& ds, const std::vector<double>& sample,
                                   std::uint64_t seed);
std::vector<double> flip_horizontal(const std::vector<double>& image, std::size_t h, std::size_t w);

// ---- pseudo-labels ----
std::vector<Prediction> generate_pseudo_labels(const TrainerState& state, const Dataset& ds,
                                               const std::vector<std::size_t>& unlabeled_idx,
                                               const RunConfig& cfg);
PseudoLabelSet select_pseudo_labels(const std::vector<Prediction>& preds, double tau_c, double tau_u);

// ---- losses ----
// Logit blocks hold the T per-sample passes stacked pass-major: row t*n + i
// is pass t of sample i. unlabeled_logits is kNoNode when B_c = 0.
struct LossNodes {
    NodeId l_cls = kNoNode;
    NodeId l_u_cls = kNoNode;   // kNoNode when B_c = 0
    NodeId div_term = kNoNode;
    NodeId total = kNoNode;
};
LossNodes compute_losses(Graph& g, NodeId labeled_logits, const std::vector<int>& labels,
                         NodeId unlabeled_logits, const std::vector<int>& pseudo_labels,
                         std::size_t T, const DistNodes& q_context, const DistNodes& q_target,
                         double alpha_u, const TrainConfig& cfg);
LossBreakdown loss_values(const Graph& g, const LossNodes& nodes);

// Frozen inputs for one step's loss graph: augmented views, (pseudo-)labels,
// and the reparameterization noise rows. Every unlabeled sample in the batch
// is a target point carrying its pseudo-label; the gated subset additionally
// contributes strong views to the unlabeled cross-entropy.
struct StepLossInputs {
    Tensor weak_labeled;
    std::vector<int> labels;
    Tensor weak_unlabeled;           // ignored when unlabeled_pseudo is empty
    std::vector<int> unlabeled_pseudo;
    Tensor strong_selected;          // ignored when pseudo_labels is empty
    std::vector<int> pseudo_labels;  // gated subset only
    std::vector<Tensor> etas;        // T rows of [1 x L]
    double fixed_alpha_u = -1.0;     // < 0: derive alpha_u from the decoded entropies
};

struct StepLossGraph {
    LossNodes loss;
    DistNodes q_context, q_target;
    NodeId target_reps = kNoNode;
    NodeId det_reps = kNoNode;
    NodeId logits_labeled = kNoNode;    // [T*B x C], pass-major
    NodeId logits_unlabeled = kNoNode;  // [T*B_c x C] or kNoNode
    double u_context_avg = 0.0, u_target_avg = 0.0, alpha_u = 0.5;
};

// Builds the full training loss on the graph: encode both paths, form
// q_context/q_target, T-sample reparameterized decode, losses. Shared by the
// trainer and the end-to-end gradient checks.
StepLossGraph build_step_loss(Graph& g, const BoundParams& bp, const ModelShape& shape,
                              const StepLossInputs& in, const TrainConfig& cfg);

// ---- optimizer pieces ----
void sgd_step(NpParams& params, NpParams& velocity, BackboneKind kind,
              const std::unordered_map<NodeId, Tensor>& grads, const std::vector<NodeId>& param_ids,
              double lr, double momentum, double weight_decay);
void ema_update(NpParams& ema, const NpParams& params, BackboneKind kind, double m);
double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0);

// ---- loop ----
TrainerState init_state(const RunConfig& cfg, const Dataset& ds);

std::pair<LossBreakdown, StepMetrics> train_step(TrainerState& state, const Dataset& ds,
                                                 const std::vector<std::size_t>& labeled_idx,
                                                 const std::vector<std::size_t>& unlabeled_idx,
                                                 const RunConfig& cfg);

// Evaluation (EMA parameters, inference mode) over the test split.
EvalPoint evaluate(const TrainerState& state, const Dataset& ds, const RunConfig& cfg,
                   const LossBreakdown& last_loss, double lr, double pseudo_label_rate);

using EvalCallback = std::function<void(const EvalPoint&)>;

// pause_at_step (0 = run to total_steps) stops the loop early without
// touching the schedule, for checkpoint-and-resume workflows.
TrainResult train(const RunConfig& cfg, const Dataset& ds,
                  std::optional<TrainerState> resume_from = std::nullopt,
                  const EvalCallback& on_eval = {}, std::uint64_t pause_at_step = 0);

}  // namespace npssl
