#include "npssl/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "npssl/metrics.hpp"
#include "npssl/rng.hpp"

namespace npssl {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

// seed stream tags
constexpr std::uint64_t kTagBatch = 0x62617463u;
constexpr std::uint64_t kTagWeak = 0x7765616bu;
constexpr std::uint64_t kTagStrong = 0x7374726fu;
constexpr std::uint64_t kTagPseudo = 0x70736575u;
constexpr std::uint64_t kTagLatent = 0x6c617465u;
constexpr std::uint64_t kTagEval = 0x6576616cu;
constexpr std::uint64_t kTagBank = 0x62616e6bu;

std::vector<double> rotate_image(const std::vector<double>& img, std::size_t h, std::size_t w,
                                 double degrees, double fill) {
    const double rad = degrees * kPi / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    std::vector<double> out(img.size(), fill);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            // nearest-neighbour pull from the source image
            const double dy = static_cast<double>(i) - cy;
            const double dx = static_cast<double>(j) - cx;
            const auto si = static_cast<std::ptrdiff_t>(std::lround(c * dy + s * dx + cy));
            const auto sj = static_cast<std::ptrdiff_t>(std::lround(-s * dy + c * dx + cx));
            if (si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(h) &&
                sj < static_cast<std::ptrdiff_t>(w))
                out[i * w + j] = img[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)];
        }
    return out;
}

std::vector<double> crop_and_flip(const std::vector<double>& img, std::size_t h, std::size_t w,
                                  Rng& rng) {
    constexpr std::size_t pad = 4;
    const std::size_t oy = rng.uniform_index(2 * pad + 1);
    const std::size_t ox = rng.uniform_index(2 * pad + 1);
    const bool flip = rng.uniform_index(2) == 1;
    std::vector<double> out(img.size(), 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
            const std::ptrdiff_t si = static_cast<std::ptrdiff_t>(i + oy) - static_cast<std::ptrdiff_t>(pad);
            const std::ptrdiff_t sj = static_cast<std::ptrdiff_t>(j + ox) - static_cast<std::ptrdiff_t>(pad);
            double v = 0.0;
            if (si >= 0 && sj >= 0 && si < static_cast<std::ptrdiff_t>(h) &&
                sj < static_cast<std::ptrdiff_t>(w))
                v = img[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)];
            out[i * w + (flip ? w - 1 - j : j)] = v;
        }
    return out;
}

}  // namespace

std::vector<double> flip_horizontal(const std::vector<double>& image, std::size_t h, std::size_t w) {
    std::vector<double> out(image.size());
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) out[i * w + j] = image[i * w + (w - 1 - j)];
    return out;
}

std::vector<double> augment_weak(const Dataset& ds, const std::vector<double>& sample,
                                 std::uint64_t seed) {
    Rng rng(seed);
    if (ds.kind == DataKind::Vector) {
        std::vector<double> out = sample;
        for (auto& v : out) v += 0.05 * rng.normal();
        return out;
    }
    return crop_and_flip(sample, ds.image_h, ds.image_w, rng);
}

std::vector<double> augment_strong(const Dataset& ds, const std::vector<double>& sample,
                                   std::uint64_t seed) {
    Rng rng(seed);
    if (ds.kind == DataKind::Vector) {
        std::vector<double> out = sample;
        for (auto& v : out) v += 0.2 * rng.normal();
        for (auto& v : out)
            if (rng.uniform() <= 0.2) v = 0.0;  // standardized features: 0 is the dataset mean
        return out;
    }
    const std::size_t h = ds.image_h, w = ds.image_w;
    std::vector<double> out = crop_and_flip(sample, h, w, rng);
    for (int op = 0; op < 2; ++op) {
        switch (rng.uniform_index(4)) {
            case 0: {  // contrast
                const double c = rng.uniform(0.5, 1.5);
                double mean = 0.0;
                for (double v : out) mean += v;
                mean /= static_cast<double>(out.size());
                for (auto& v : out) v = std::clamp(mean + c * (v - mean), 0.0, 1.0);
                break;
            }
            case 1: {  // brightness
                const double b = rng.uniform(-0.25, 0.25);
                for (auto& v : out) v = std::clamp(v + b, 0.0, 1.0);
                break;
            }
            case 2: {  // rotation up to 30 degrees
                const double deg = rng.uniform(-30.0, 30.0);
                out = rotate_image(out, h, w, deg, ds.pixel_mean);
                break;
            }
            case 3: {  // cutout filled with the dataset mean
                const std::size_t size = 4 + rng.uniform_index(8);
                const std::size_t ci = rng.uniform_index(h);
                const std::size_t cj = rng.uniform_index(w);
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        if (i + size / 2 >= ci && i <= ci + size / 2 && j + size / 2 >= cj &&
                            j <= cj + size / 2)
                            out[i * w + j] = ds.pixel_mean;
                break;
            }
        }
    }
    return out;
}

namespace {

Tensor augment_batch(const Dataset& ds, const std::vector<std::size_t>& idx, bool strong,
                     std::uint64_t seed, std::uint64_t step) {
    std::vector<std::vector<double>> rows;
    rows.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        // keyed on batch position as well, so a sample drawn twice into one
        // batch still gets independent views
        const std::uint64_t s =
            derive_seed(seed, strong ? kTagStrong : kTagWeak, step, (idx[i] << 20) ^ i);
        rows.push_back(strong ? augment_strong(ds, ds.samples[idx[i]], s)
                              : augment_weak(ds, ds.samples[idx[i]], s));
    }
    if (ds.kind == DataKind::Image) {
        Tensor out({std::max<std::size_t>(rows.size(), 1), 1, ds.image_h, ds.image_w});
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(rows[i].begin(), rows[i].end(), out.data().begin() + i * ds.feature_dim);
        return out;
    }
    Tensor out({std::max<std::size_t>(rows.size(), 1), ds.feature_dim});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), out.data().begin() + i * ds.feature_dim);
    return out;
}

}  // namespace

std::vector<Prediction> generate_pseudo_labels(const TrainerState& state, const Dataset& ds,
                                               const std::vector<std::size_t>& unlabeled_idx,
                                               const RunConfig& cfg) {
    if (unlabeled_idx.empty()) return {};
    const Tensor weak = augment_batch(ds, unlabeled_idx, false, cfg.train.seed, state.step);
    const Tensor feats = backbone_forward(state.params, state.shape, weak);
    return predict_inference(state.params, state.shape, state.latent_bank, state.det_bank, feats,
                             cfg.train.T, derive_seed(cfg.train.seed, kTagPseudo, state.step));
}

PseudoLabelSet select_pseudo_labels(const std::vector<Prediction>& preds, double tau_c,
                                    double tau_u) {
    PseudoLabelSet out;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i].probs;
        std::size_t best = 0;
        for (std::size_t j = 1; j < p.size(); ++j)
            if (p[j] > p[best]) best = j;  // ties keep the lowest class index
        if (p[best] >= tau_c && preds[i].uncertainty <= tau_u) {
            out.indices.push_back(i);
            out.labels.push_back(static_cast<int>(best));
        }
    }
    return out;
}

namespace {

// labels repeated pass-major to pair with stacked [T*n x C] logits
std::vector<int> tile_labels(const std::vector<int>& labels, std::size_t T) {
    std::vector<int> out;
    out.reserve(labels.size() * T);
    for (std::size_t t = 0; t < T; ++t) out.insert(out.end(), labels.begin(), labels.end());
    return out;
}

}  // namespace

LossNodes compute_losses(Graph& g, NodeId labeled_logits, const std::vector<int>& labels,
                         NodeId unlabeled_logits, const std::vector<int>& pseudo_labels,
                         std::size_t T, const DistNodes& q_context, const DistNodes& q_target,
                         double alpha_u, const TrainConfig& cfg) {
    if (labels.empty()) throw std::invalid_argument("compute_losses: no labeled samples");
    const std::size_t B = labels.size();
    const std::size_t classes = g.value(labeled_logits).cols();
    if (g.value(labeled_logits).rows() != B * T)
        throw std::invalid_argument("compute_losses: labeled logits not [T*B x C]");

    LossNodes out;
    const NodeId y = g.leaf(one_hot_rows(tile_labels(labels, T), classes));
    out.l_cls = g.scale(g.sum_all(g.mul(y, g.log_softmax_rows(labeled_logits))),
                        -1.0 / static_cast<double>(B * T));

    const std::size_t bc = pseudo_labels.size();
    if (bc > 0) {
        if (unlabeled_logits == kNoNode || g.value(unlabeled_logits).rows() != bc * T)
            throw std::invalid_argument("compute_losses: unlabeled logits not [T*B_c x C]");
        const NodeId yu = g.leaf(one_hot_rows(tile_labels(pseudo_labels, T), classes));
        out.l_u_cls = g.scale(g.sum_all(g.mul(yu, g.log_softmax_rows(unlabeled_logits))),
                              -1.0 / static_cast<double>(bc * T));
    }

    out.div_term = divergence_loss(g, q_context, q_target, alpha_u, cfg.divergence);

    NodeId total = out.l_cls;
    if (bc > 0) total = g.add(total, g.scale(out.l_u_cls, cfg.lambda_u));
    total = g.add(total, g.scale(out.div_term, cfg.beta));
    out.total = total;
    return out;
}

LossBreakdown loss_values(const Graph& g, const LossNodes& nodes) {
    LossBreakdown out;
    out.l_cls = g.value(nodes.l_cls)[0];
    out.l_u_cls = nodes.l_u_cls == kNoNode ? 0.0 : g.value(nodes.l_u_cls)[0];
    out.div_term = g.value(nodes.div_term)[0];
    out.total = g.value(nodes.total)[0];
    return out;
}

void sgd_step(NpParams& params, NpParams& velocity, BackboneKind kind,
              const std::unordered_map<NodeId, Tensor>& grads, const std::vector<NodeId>& param_ids,
              double lr, double momentum, double weight_decay) {
    std::size_t slot = 0;
    std::vector<Tensor*> vel;
    for_each_param(velocity, kind, [&](const char*, Tensor& t) { vel.push_back(&t); });
    for_each_param(params, kind, [&](const char* name, Tensor& t) {
        const Tensor& g = grads.at(param_ids[slot]);
        Tensor& v = *vel[slot];
        if (!g.same_shape(t))
            throw std::invalid_argument(std::string("sgd_step: gradient shape mismatch for ") + name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            t[i] -= lr * v[i] + lr * weight_decay * t[i];  // decoupled L2
        }
        ++slot;
    });
}

void ema_update(NpParams& ema, const NpParams& params, BackboneKind kind, double m) {
    std::vector<const Tensor*> live;
    for_each_param(const_cast<NpParams&>(params), kind,
                   [&](const char*, Tensor& t) { live.push_back(&t); });
    std::size_t slot = 0;
    for_each_param(ema, kind, [&](const char*, Tensor& t) {
        const Tensor& src = *live[slot++];
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = m * t[i] + (1.0 - m) * src[i];
    });
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr0) {
    if (total_steps == 0) return lr0;
    const double k = static_cast<double>(std::min(step, total_steps));
    return lr0 * std::cos(7.0 * kPi * k / (16.0 * static_cast<double>(total_steps)));
}

TrainerState init_state(const RunConfig& cfg, const Dataset& ds) {
    TrainerState st;
    st.shape = shape_for(cfg.model, ds);
    st.params = init_params(st.shape, cfg.train.seed);
    st.ema = st.params;
    st.velocity = st.params;
    for_each_param(st.velocity, cfg.model.backbone, [](const char*, Tensor& t) {
        std::fill(t.data().begin(), t.data().end(), 0.0);
    });
    const std::size_t M = cfg.model.hidden_dim;
    st.latent_bank = MemoryBank(cfg.train.Q, M);
    st.det_bank = MemoryBank(cfg.train.Q, M);
    Rng rng(derive_seed(cfg.train.seed, kTagBank));
    std::vector<double> seed_row(M);
    for (auto& v : seed_row) v = rng.normal();
    st.latent_bank.push(seed_row);
    for (auto& v : seed_row) v = rng.normal();
    st.det_bank.push(seed_row);
    return st;
}

StepLossGraph build_step_loss(Graph& g, const BoundParams& bp, const ModelShape& shape,
                              const StepLossInputs& in, const TrainConfig& cfg) {
    const std::size_t B = in.labels.size();
    if (B == 0) throw std::invalid_argument("build_step_loss: empty labeled batch");
    const std::size_t bc = in.pseudo_labels.size();
    const std::size_t classes = shape.classes;
    StepLossGraph out;

    // context = duplicated labeled batch; targets = labeled + all unlabeled
    // (weak views, paired with their pseudo-labels)
    const NodeId feat_l = backbone_graph(g, bp, shape, g.leaf(in.weak_labeled));
    NodeId feat_u = kNoNode;
    if (bc > 0) feat_u = backbone_graph(g, bp, shape, g.leaf(in.strong_selected));

    const NodeId y_onehot = g.leaf(one_hot_rows(in.labels, classes));
    NodeId target_feats = feat_l;
    NodeId target_labels = y_onehot;
    if (!in.unlabeled_pseudo.empty()) {
        const NodeId feat_uw = backbone_graph(g, bp, shape, g.leaf(in.weak_unlabeled));
        const NodeId yu_all = g.leaf(one_hot_rows(in.unlabeled_pseudo, classes));
        target_feats = g.concat_rows({feat_l, feat_uw});
        target_labels = g.concat_rows({y_onehot, yu_all});
    }

    auto encode = [&g](const BoundMlp& enc, NodeId feats, NodeId lbls) {
        return mlp2_graph(g, enc, g.concat_cols({feats, lbls}));
    };
    out.target_reps = encode(bp.latent_encoder, target_feats, target_labels);
    const NodeId context_reps = encode(bp.latent_encoder, feat_l, y_onehot);
    out.det_reps = encode(bp.det_encoder, feat_l, y_onehot);

    out.q_target = latent_distribution_graph(g, bp, g.mean_rows(out.target_reps));
    out.q_context = latent_distribution_graph(g, bp, g.mean_rows(context_reps));
    const NodeId det_row = g.mean_rows(out.det_reps);

    // Reparameterized T-sample decode on weak labeled + strong selected views.
    // All T passes stack into one decoder call per batch, pass-major.
    if (in.etas.size() != cfg.T)
        throw std::invalid_argument("build_step_loss: need one eta row per latent sample");
    const NodeId sd = g.sqrt(out.q_target.var);
    std::vector<NodeId> z_rows;
    z_rows.reserve(cfg.T);
    for (std::size_t t = 0; t < cfg.T; ++t)
        z_rows.push_back(g.add(out.q_target.mean, g.mul(sd, g.leaf(in.etas[t]))));
    auto decode_stacked = [&](NodeId feats, std::size_t rows) {
        std::vector<NodeId> z_blocks, feat_blocks;
        for (std::size_t t = 0; t < cfg.T; ++t) {
            z_blocks.push_back(g.repeat_rows(z_rows[t], rows));
            feat_blocks.push_back(feats);
        }
        const NodeId z_stack = cfg.T == 1 ? z_blocks[0] : g.concat_rows(z_blocks);
        const NodeId feat_stack = cfg.T == 1 ? feats : g.concat_rows(feat_blocks);
        const NodeId det_stack = g.repeat_rows(det_row, rows * cfg.T);
        const NodeId h = g.concat_cols({feat_stack, z_stack, det_stack});
        return g.matmul(mlp2_graph(g, bp.decoder, h), bp.classifier);
    };
    out.logits_labeled = decode_stacked(feat_l, B);
    if (feat_u != kNoNode) out.logits_unlabeled = decode_stacked(feat_u, bc);

    // alpha_u from the average prediction entropies (plain values, no grad)
    {
        std::vector<double> probs(classes);
        auto mean_entropy = [&](NodeId logits, std::size_t rows) {
            const Tensor sm = ops::softmax_rows(g.value(logits));
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                std::fill(probs.begin(), probs.end(), 0.0);
                for (std::size_t t = 0; t < cfg.T; ++t)
                    for (std::size_t c = 0; c < classes; ++c) probs[c] += sm.at(t * rows + r, c);
                for (auto& p : probs) p /= static_cast<double>(cfg.T);
                acc += entropy_nats(probs);
            }
            return acc;
        };
        const double ctx_sum = mean_entropy(out.logits_labeled, B);
        out.u_context_avg = ctx_sum / static_cast<double>(B);
        double tgt_sum = ctx_sum;
        if (out.logits_unlabeled != kNoNode) tgt_sum += mean_entropy(out.logits_unlabeled, bc);
        out.u_target_avg = tgt_sum / static_cast<double>(B + bc);
        out.alpha_u = in.fixed_alpha_u >= 0.0
                          ? in.fixed_alpha_u
                          : alpha_from_uncertainty(out.u_context_avg, out.u_target_avg);
    }

    out.loss = compute_losses(g, out.logits_labeled, in.labels, out.logits_unlabeled,
                              in.pseudo_labels, cfg.T, out.q_context, out.q_target, out.alpha_u, cfg);
    return out;
}

std::pair<LossBreakdown, StepMetrics> train_step(TrainerState& state, const Dataset& ds,
                                                 const std::vector<std::size_t>& labeled_idx,
                                                 const std::vector<std::size_t>& unlabeled_idx,
                                                 const RunConfig& cfg) {
    const TrainConfig& tc = cfg.train;
    const std::size_t B = labeled_idx.size();
    if (B == 0) throw std::invalid_argument("train_step: empty labeled batch");
    if (unlabeled_idx.size() > tc.ratio_mu * tc.B)
        throw std::invalid_argument("train_step: unlabeled batch exceeds ratio_mu * B");
    StepMetrics metrics;
    metrics.unlabeled_batch = unlabeled_idx.size();
    metrics.lr = cosine_lr(state.step, tc.total_steps, tc.lr0);

    // (1) inference-mode pass over the weak unlabeled views; constants only
    const auto pseudo_preds = generate_pseudo_labels(state, ds, unlabeled_idx, cfg);
    // (2) confidence + uncertainty gate
    const PseudoLabelSet chosen = select_pseudo_labels(pseudo_preds, tc.tau_c, tc.tau_u);
    metrics.selected = chosen.count();

    std::vector<std::size_t> selected_idx;
    selected_idx.reserve(chosen.count());
    for (std::size_t pos : chosen.indices) selected_idx.push_back(unlabeled_idx[pos]);

    StepLossInputs inputs;
    inputs.labels.reserve(B);
    for (std::size_t i : labeled_idx) inputs.labels.push_back(ds.labels[i]);
    inputs.weak_labeled = augment_batch(ds, labeled_idx, false, tc.seed, state.step);
    if (!unlabeled_idx.empty()) {
        // the same weak views the pseudo-label pass saw (seeds are per-sample)
        inputs.weak_unlabeled = augment_batch(ds, unlabeled_idx, false, tc.seed, state.step);
        inputs.unlabeled_pseudo.reserve(pseudo_preds.size());
        for (const auto& pred : pseudo_preds) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < pred.probs.size(); ++c)
                if (pred.probs[c] > pred.probs[best]) best = c;
            inputs.unlabeled_pseudo.push_back(static_cast<int>(best));
        }
    }
    inputs.pseudo_labels = chosen.labels;
    if (!selected_idx.empty())
        inputs.strong_selected = augment_batch(ds, selected_idx, true, tc.seed, state.step);
    Rng eta_rng(derive_seed(tc.seed, kTagLatent, state.step));
    for (std::size_t t = 0; t < tc.T; ++t) {
        Tensor eta({1, cfg.model.latent_dim});
        for (auto& v : eta.data()) v = eta_rng.normal();
        inputs.etas.push_back(std::move(eta));
    }

    Graph g;
    const BoundParams bp = bind_params(g, state.params, cfg.model.backbone);
    metrics.param_leaves = bp.all.size();

    const StepLossGraph built = build_step_loss(g, bp, state.shape, inputs, tc);
    metrics.u_context_avg = built.u_context_avg;
    metrics.u_target_avg = built.u_target_avg;
    metrics.alpha_u = built.alpha_u;

    state.latent_bank.push_rows(g.value(built.target_reps));
    state.det_bank.push_rows(g.value(built.det_reps));

    const LossBreakdown breakdown = loss_values(g, built.loss);
    if (!std::isfinite(breakdown.total))
        throw std::runtime_error("train_step: non-finite loss at step " + std::to_string(state.step));

    metrics.graph_nodes = g.size();
    metrics.loss_leaf_ancestors = g.ancestor_leaves(built.loss.total).size();

    const auto grads = g.backward(built.loss.total);
    sgd_step(state.params, state.velocity, cfg.model.backbone, grads, bp.all, metrics.lr,
             tc.momentum, tc.weight_decay);
    ema_update(state.ema, state.params, cfg.model.backbone, tc.ema_momentum);
    ++state.step;
    return {breakdown, metrics};
}

EvalPoint evaluate(const TrainerState& state, const Dataset& ds, const RunConfig& cfg,
                   const LossBreakdown& last_loss, double lr, double pseudo_label_rate) {
    EvalPoint pt;
    pt.step = state.step;
    pt.lr = lr;
    pt.l_cls = last_loss.l_cls;
    pt.l_u_cls = last_loss.l_u_cls;
    pt.div_term = last_loss.div_term;
    pt.total = last_loss.total;
    pt.pseudo_label_rate = pseudo_label_rate;

    const auto test_idx = ds.indices_of(Split::Test);
    if (test_idx.empty()) return pt;
    const Tensor inputs = ds.gather(test_idx);
    const Tensor feats = backbone_forward(state.ema, state.shape, inputs);
    const auto preds =
        predict_inference(state.ema, state.shape, state.latent_bank, state.det_bank, feats,
                          cfg.train.T, derive_seed(cfg.train.seed, kTagEval, state.step));
    std::vector<int> labels;
    labels.reserve(test_idx.size());
    for (std::size_t i : test_idx) labels.push_back(ds.labels[i]);

    pt.accuracy = 1.0 - error_rate(preds, labels);
    pt.uce = expected_uce(preds, labels, 15).uce;
    double mu = 0.0;
    for (const auto& p : preds) mu += p.uncertainty;
    pt.mean_uncertainty = mu / static_cast<double>(preds.size());
    return pt;
}

TrainResult train(const RunConfig& cfg, const Dataset& ds, std::optional<TrainerState> resume_from,
                  const EvalCallback& on_eval, std::uint64_t pause_at_step) {
    const auto labeled_pool = ds.indices_of(Split::Labeled);
    const auto unlabeled_pool = ds.indices_of(Split::Unlabeled);
    if (labeled_pool.empty()) throw std::invalid_argument("train: no labeled samples");
    const std::uint64_t stop_step = pause_at_step == 0
                                        ? cfg.train.total_steps
                                        : std::min<std::uint64_t>(pause_at_step, cfg.train.total_steps);

    TrainResult result{resume_from ? std::move(*resume_from) : init_state(cfg, ds), {}};
    TrainerState& st = result.state;

    // the labeled loader resamples with replacement when the pool is smaller
    // than B, FixMatch style
    const std::size_t batch_l = cfg.train.B;
    const std::size_t batch_u = std::min(cfg.train.ratio_mu * batch_l, unlabeled_pool.size());

    LossBreakdown last_loss;
    double last_lr = cosine_lr(st.step, cfg.train.total_steps, cfg.train.lr0);
    double selected_acc = 0.0;
    std::size_t selected_steps = 0;

    while (st.step < stop_step) {
        Rng batch_rng(derive_seed(cfg.train.seed, kTagBatch, st.step));
        std::vector<std::size_t> lab;
        if (batch_l >= labeled_pool.size()) {
            lab = labeled_pool;
            while (lab.size() < batch_l)
                lab.push_back(labeled_pool[batch_rng.uniform_index(labeled_pool.size())]);
        } else {
            for (std::size_t k : batch_rng.sample_without_replacement(labeled_pool.size(), batch_l))
                lab.push_back(labeled_pool[k]);
        }
        std::vector<std::size_t> unl;
        if (batch_u == unlabeled_pool.size()) {
            unl = unlabeled_pool;
        } else {
            for (std::size_t k : batch_rng.sample_without_replacement(unlabeled_pool.size(), batch_u))
                unl.push_back(unlabeled_pool[k]);
        }

        auto [loss, metrics] = train_step(st, ds, lab, unl, cfg);
        last_loss = loss;
        last_lr = metrics.lr;
        if (metrics.unlabeled_batch > 0) {
            selected_acc +=
                static_cast<double>(metrics.selected) / static_cast<double>(metrics.unlabeled_batch);
        }
        ++selected_steps;

        if (st.step % cfg.eval_interval == 0) {
            const double rate = selected_steps ? selected_acc / static_cast<double>(selected_steps) : 0.0;
            EvalPoint pt = evaluate(st, ds, cfg, last_loss, last_lr, rate);
            if (on_eval) on_eval(pt);
            result.log.push_back(pt);
            selected_acc = 0.0;
            selected_steps = 0;
        }
    }
    return result;
}

}  // namespace npssl
