#include "npssl/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "npssl/rng.hpp"

namespace npssl {

ModelShape shape_for(const ModelConfig& cfg, const Dataset& ds) {
    ModelShape shape;
    shape.cfg = cfg;
    shape.classes = ds.classes;
    if (ds.kind == DataKind::Image) {
        if (cfg.backbone != BackboneKind::Conv)
            throw std::invalid_argument("model: image dataset requires the conv backbone");
        shape.image_h = ds.image_h;
        shape.image_w = ds.image_w;
        shape.input_dim = ds.feature_dim;
    } else {
        if (cfg.backbone != BackboneKind::Mlp)
            throw std::invalid_argument("model: vector dataset requires the mlp backbone");
        shape.input_dim = ds.feature_dim;
    }
    return shape;
}

namespace {

Tensor init_matrix(Rng& rng, std::size_t in, std::size_t out) {
    Tensor t({in, out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

Linear init_linear(Rng& rng, std::size_t in, std::size_t out) {
    return Linear{init_matrix(rng, in, out), Tensor({1, out})};
}

Mlp2 init_mlp(Rng& rng, std::size_t in, std::size_t hidden, std::size_t out) {
    return Mlp2{init_linear(rng, in, hidden), init_linear(rng, hidden, out)};
}

Tensor init_conv(Rng& rng, std::size_t out_ch, std::size_t in_ch, std::size_t k) {
    Tensor t({out_ch, in_ch, k, k});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch * k * k));
    for (auto& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

constexpr std::size_t kConv1Channels = 8;
constexpr std::size_t kConv2Channels = 16;

}  // namespace

NpParams init_params(const ModelShape& shape, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x696e6974u));
    const std::size_t F = shape.cfg.feature_dim;
    const std::size_t M = shape.cfg.hidden_dim;
    const std::size_t L = shape.cfg.latent_dim;
    const std::size_t C = shape.classes;

    NpParams p;
    if (shape.cfg.backbone == BackboneKind::Mlp) {
        p.backbone_mlp = init_mlp(rng, shape.input_dim, shape.cfg.backbone_hidden, F);
    } else {
        p.conv1 = init_conv(rng, kConv1Channels, 1, 3);
        p.conv2 = init_conv(rng, kConv2Channels, kConv1Channels, 3);
        p.conv3 = init_conv(rng, F, kConv2Channels, 3);
    }
    p.latent_encoder = init_mlp(rng, F + C, M, M);
    p.det_encoder = init_mlp(rng, F + C, M, M);
    p.mean_head = init_mlp(rng, M, M, L);
    p.var_head = init_mlp(rng, M, M, L);
    p.decoder = init_mlp(rng, F + L + M, M, M);
    p.classifier = init_matrix(rng, M, C);
    return p;
}

MemoryBank::MemoryBank(std::size_t capacity, std::size_t width)
    : capacity_(capacity), width_(width) {
    if (capacity == 0) throw std::invalid_argument("memory bank: zero capacity");
    if (width == 0) throw std::invalid_argument("memory bank: zero width");
}

void MemoryBank::push(const std::vector<double>& row) {
    if (row.size() != width_)
        throw std::invalid_argument("memory bank: row width " + std::to_string(row.size()) +
                                    " != bank width " + std::to_string(width_));
    buffer_.push_back(row);
    ++inserted_;
    while (buffer_.size() > capacity_) buffer_.pop_front();
}

void MemoryBank::push_rows(const Tensor& rows) {
    if (rows.rank() != 2 || rows.cols() != width_)
        throw std::invalid_argument("memory bank: bad representation shape");
    for (std::size_t r = 0; r < rows.rows(); ++r) {
        std::vector<double> row(rows.data().begin() + r * width_,
                                rows.data().begin() + (r + 1) * width_);
        push(row);
    }
}

std::vector<double> MemoryBank::summary() const {
    if (buffer_.empty()) throw std::logic_error("memory bank: summary of empty bank");
    // contents sit in deterministic FIFO order, so a plain accumulation is
    // reproducible; no canonical reordering needed here
    std::vector<double> out(width_, 0.0);
    for (const auto& row : buffer_)
        for (std::size_t j = 0; j < width_; ++j) out[j] += row[j];
    for (auto& v : out) v /= static_cast<double>(buffer_.size());
    return out;
}

void MemoryBank::restore(std::deque<std::vector<double>> buffer, std::uint64_t inserted) {
    for (const auto& row : buffer)
        if (row.size() != width_) throw std::invalid_argument("memory bank: restore width mismatch");
    if (buffer.size() > capacity_) throw std::invalid_argument("memory bank: restore over capacity");
    buffer_ = std::move(buffer);
    inserted_ = inserted;
}

double entropy_nats(const std::vector<double>& probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

namespace {

Tensor mlp2_forward(const Mlp2& m, const Tensor& x) {
    Tensor h = ops::add(ops::matmul(x, m.l1.w), m.l1.b);
    h = ops::relu(h);
    return ops::add(ops::matmul(h, m.l2.w), m.l2.b);
}

}  // namespace

Tensor backbone_forward(const NpParams& params, const ModelShape& shape, const Tensor& batch) {
    if (shape.cfg.backbone == BackboneKind::Mlp) {
        if (batch.rank() != 2 || batch.cols() != shape.input_dim)
            throw std::invalid_argument("backbone: input width mismatch");
        return mlp2_forward(params.backbone_mlp, batch);
    }
    if (batch.rank() != 4 || batch.shape()[2] != shape.image_h || batch.shape()[3] != shape.image_w)
        throw std::invalid_argument("backbone: image shape mismatch");
    Tensor h = ops::relu(ops::conv2d(batch, params.conv1, 1, 1));
    h = ops::avg_pool2d(h, 2);
    h = ops::relu(ops::conv2d(h, params.conv2, 1, 1));
    h = ops::avg_pool2d(h, 2);
    h = ops::relu(ops::conv2d(h, params.conv3, 1, 1));
    return ops::global_avg_pool(h);
}

Tensor one_hot_rows(const std::vector<int>& labels, std::size_t classes) {
    Tensor out({std::max<std::size_t>(labels.size(), 1), classes});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int c = labels[i];
        if (c < 0 || static_cast<std::size_t>(c) >= classes)
            throw std::invalid_argument("one_hot_rows: label out of range");
        out.at(i, static_cast<std::size_t>(c)) = 1.0;
    }
    if (labels.empty()) return Tensor({1, classes});
    return out;
}

Tensor encode_points(const Mlp2& encoder, const Tensor& features, const Tensor& label_rows) {
    if (features.rows() != label_rows.rows())
        throw std::invalid_argument("encode_points: feature/label count mismatch");
    return mlp2_forward(encoder, ops::concat_cols({&features, &label_rows}));
}

std::vector<double> aggregate(const Tensor& representations) {
    if (representations.rank() != 2)
        throw std::invalid_argument("aggregate: expected a rank-2 row stack");
    const Tensor m = ops::mean_rows(representations);
    return m.data();
}

std::vector<double> aggregate(const std::vector<std::vector<double>>& representations) {
    if (representations.empty()) throw std::invalid_argument("aggregate: empty input");
    return aggregate(rows_to_tensor(representations));
}

Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("rows_to_tensor: no rows");
    Tensor out({rows.size(), rows[0].size()});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size())
            throw std::invalid_argument("rows_to_tensor: ragged rows");
        std::copy(rows[r].begin(), rows[r].end(), out.data().begin() + r * rows[0].size());
    }
    return out;
}

DiagonalGaussian latent_distribution(const NpParams& params, const std::vector<double>& rep) {
    const Tensor row = Tensor::row(rep);
    const Tensor mean = mlp2_forward(params.mean_head, row);
    const Tensor raw = mlp2_forward(params.var_head, row);
    std::vector<double> var(raw.size());
    const Tensor squashed = ops::logistic(raw);
    for (std::size_t i = 0; i < var.size(); ++i)
        var[i] = kVarianceFloor + (1.0 - kVarianceFloor) * squashed[i];
    return DiagonalGaussian(mean.data(), std::move(var));
}

Tensor sample_latent(const DiagonalGaussian& dist, std::size_t T, std::uint64_t seed) {
    if (T < 1) throw std::invalid_argument("sample_latent: T must be >= 1");
    const std::size_t L = dist.dim();
    Rng rng(derive_seed(seed, 0x7a73616du));
    Tensor out({T, L});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < L; ++i)
            out.at(t, i) = dist.mean[i] + std::sqrt(dist.var[i]) * rng.normal();
    return out;
}

std::vector<Tensor> decode_classify(const NpParams& params, const Tensor& features,
                                    const Tensor& latents, const std::vector<double>& det_rep) {
    const std::size_t n = features.rows();
    const std::size_t T = latents.rows();
    const std::size_t f = features.cols(), l = latents.cols(), m = det_rep.size();

    // one pass-major stacked decode: row t*n+i = (feature_i, z_t, det)
    Tensor h({T * n, f + l + m});
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < n; ++i) {
            double* row = &h.data()[(t * n + i) * (f + l + m)];
            std::copy(features.data().begin() + i * f, features.data().begin() + (i + 1) * f, row);
            std::copy(latents.data().begin() + t * l, latents.data().begin() + (t + 1) * l, row + f);
            std::copy(det_rep.begin(), det_rep.end(), row + f + l);
        }
    const Tensor probs =
        ops::softmax_rows(ops::matmul(mlp2_forward(params.decoder, h), params.classifier));

    const std::size_t c = probs.cols();
    std::vector<Tensor> members;
    members.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        Tensor member({n, c});
        std::copy(probs.data().begin() + t * n * c, probs.data().begin() + (t + 1) * n * c,
                  member.data().begin());
        members.push_back(std::move(member));
    }
    return members;
}

std::vector<Prediction> average_members(const std::vector<Tensor>& members, bool keep_members) {
    if (members.empty()) return {};
    const std::size_t n = members[0].rows(), c = members[0].cols();
    std::vector<Prediction> out(n);
    const double inv = 1.0 / static_cast<double>(members.size());
    for (std::size_t i = 0; i < n; ++i) {
        Prediction& pr = out[i];
        pr.probs.assign(c, 0.0);
        for (const Tensor& m : members)
            for (std::size_t j = 0; j < c; ++j) pr.probs[j] += m.at(i, j);
        for (std::size_t j = 0; j < c; ++j) pr.probs[j] *= inv;
        pr.uncertainty = entropy_nats(pr.probs);
        if (keep_members) {
            pr.members.reserve(members.size());
            for (const Tensor& m : members)
                pr.members.emplace_back(m.data().begin() + i * c, m.data().begin() + (i + 1) * c);
        }
    }
    return out;
}

std::vector<Prediction> predict_inference(const NpParams& params, const ModelShape& shape,
                                          const MemoryBank& latent_bank, const MemoryBank& det_bank,
                                          const Tensor& features, std::size_t T, std::uint64_t seed,
                                          bool keep_members) {
    if (features.rows() == 0) return {};
    const DiagonalGaussian dist = latent_distribution(params, latent_bank.summary());
    const Tensor latents = sample_latent(dist, T, seed);
    const auto members = decode_classify(params, features, latents, det_bank.summary());
    return average_members(members, keep_members);
}

std::vector<Prediction> predict_inference(const NpParams& params, const ModelShape& shape,
                                          const MemoryBank& latent_bank, const MemoryBank& det_bank,
                                          const std::vector<std::vector<double>>& features,
                                          std::size_t T, std::uint64_t seed, bool keep_members) {
    if (features.empty()) return {};
    return predict_inference(params, shape, latent_bank, det_bank, rows_to_tensor(features), T,
                             seed, keep_members);
}

std::vector<Prediction> predict_with_context(const NpParams& params, const ModelShape& shape,
                                             const Tensor& context_features,
                                             const std::vector<int>& context_labels,
                                             const Tensor& features, std::size_t T,
                                             std::uint64_t seed, bool keep_members) {
    if (features.rows() == 0) return {};
    const Tensor labels = one_hot_rows(context_labels, shape.classes);
    const Tensor latent_reps = encode_points(params.latent_encoder, context_features, labels);
    const Tensor det_reps = encode_points(params.det_encoder, context_features, labels);
    const DiagonalGaussian dist = latent_distribution(params, aggregate(latent_reps));
    const Tensor latents = sample_latent(dist, T, seed);
    const auto members = decode_classify(params, features, latents, aggregate(det_reps));
    return average_members(members, keep_members);
}

BoundParams map_params(const std::vector<NodeId>& ids, BackboneKind kind) {
    BoundParams bp;
    bp.all = ids;
    std::size_t i = 0;
    if (kind == BackboneKind::Mlp) {
        bp.backbone_mlp = {{bp.all[0], bp.all[1]}, {bp.all[2], bp.all[3]}};
        i = 4;
    } else {
        bp.conv1 = bp.all[0];
        bp.conv2 = bp.all[1];
        bp.conv3 = bp.all[2];
        i = 3;
    }
    auto take_mlp = [&bp, &i]() {
        BoundMlp m{{bp.all[i], bp.all[i + 1]}, {bp.all[i + 2], bp.all[i + 3]}};
        i += 4;
        return m;
    };
    bp.latent_encoder = take_mlp();
    bp.det_encoder = take_mlp();
    bp.mean_head = take_mlp();
    bp.var_head = take_mlp();
    bp.decoder = take_mlp();
    bp.classifier = bp.all[i];
    return bp;
}

BoundParams bind_params(Graph& g, const NpParams& params, BackboneKind kind) {
    std::vector<NodeId> ids;
    for_each_param(const_cast<NpParams&>(params), kind,
                   [&](const char*, Tensor& t) { ids.push_back(g.leaf(t)); });
    return map_params(ids, kind);
}

NodeId mlp2_graph(Graph& g, const BoundMlp& m, NodeId x) {
    NodeId h = g.add(g.matmul(x, m.l1.w), m.l1.b);
    h = g.relu(h);
    return g.add(g.matmul(h, m.l2.w), m.l2.b);
}

NodeId backbone_graph(Graph& g, const BoundParams& bp, const ModelShape& shape, NodeId batch) {
    if (shape.cfg.backbone == BackboneKind::Mlp) return mlp2_graph(g, bp.backbone_mlp, batch);
    NodeId h = g.relu(g.conv2d(batch, bp.conv1, 1, 1));
    h = g.avg_pool2d(h, 2);
    h = g.relu(g.conv2d(h, bp.conv2, 1, 1));
    h = g.avg_pool2d(h, 2);
    h = g.relu(g.conv2d(h, bp.conv3, 1, 1));
    return g.global_avg_pool(h);
}

DistNodes latent_distribution_graph(Graph& g, const BoundParams& bp, NodeId rep_row) {
    DistNodes d;
    d.mean = mlp2_graph(g, bp.mean_head, rep_row);
    const NodeId raw = mlp2_graph(g, bp.var_head, rep_row);
    d.var = g.offset(g.scale(g.logistic(raw), 1.0 - kVarianceFloor), kVarianceFloor);
    return d;
}

}  // namespace npssl
