#include "npssl/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

#include "npssl/rng.hpp"

namespace npssl {

namespace {

std::size_t argmax(const std::vector<double>& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

void require_paired(const std::vector<Prediction>& preds, const std::vector<int>& labels) {
    if (preds.size() != labels.size())
        throw std::invalid_argument("metrics: prediction/label counts differ");
    if (preds.empty()) throw std::invalid_argument("metrics: empty input");
}

// Within-bin sums run over sorted values so reports are exactly invariant
// under sample permutation (and exactly reproducible by a brute-force oracle
// using the same canonical order).
CalibrationReport binned_report(const std::vector<double>& value, const std::vector<bool>& correct,
                                std::size_t n_bins, bool outcome_is_error) {
    CalibrationReport rep;
    rep.n_bins = n_bins;
    rep.bins.assign(n_bins, {});
    std::vector<std::vector<double>> bin_values(n_bins);
    std::vector<std::size_t> hits(n_bins, 0);
    const auto n = value.size();
    for (std::size_t i = 0; i < n; ++i) {
        auto b = static_cast<std::size_t>(value[i] * static_cast<double>(n_bins));
        if (b >= n_bins) b = n_bins - 1;  // right edge closed
        rep.bins[b].count += 1;
        bin_values[b].push_back(value[i]);
        if (correct[i] != outcome_is_error) hits[b] += 1;  // rights for ECE, wrongs for UCE
    }
    double total = 0.0;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (rep.bins[b].count == 0) continue;
        const auto cnt = static_cast<double>(rep.bins[b].count);
        std::sort(bin_values[b].begin(), bin_values[b].end());
        double sum = 0.0;
        for (double v : bin_values[b]) sum += v;
        rep.bins[b].mean_value = sum / cnt;
        rep.bins[b].outcome = static_cast<double>(hits[b]) / cnt;
        total += cnt / static_cast<double>(n) * std::abs(rep.bins[b].outcome - rep.bins[b].mean_value);
    }
    if (outcome_is_error)
        rep.uce = total;
    else
        rep.ece = total;
    return rep;
}

}  // namespace

double error_rate(const std::vector<Prediction>& preds, const std::vector<int>& labels) {
    require_paired(preds, labels);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (static_cast<int>(argmax(preds[i].probs)) != labels[i]) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(preds.size());
}

CalibrationReport expected_uce(const std::vector<Prediction>& preds, const std::vector<int>& labels,
                               std::size_t n_bins) {
    require_paired(preds, labels);
    if (n_bins < 1) throw std::invalid_argument("expected_uce: need at least one bin");
    const double ln_c = std::log(static_cast<double>(preds[0].probs.size()));
    std::vector<double> u(preds.size());
    std::vector<bool> correct(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        u[i] = ln_c > 0.0 ? std::clamp(preds[i].uncertainty / ln_c, 0.0, 1.0) : 0.0;
        correct[i] = static_cast<int>(argmax(preds[i].probs)) == labels[i];
    }
    return binned_report(u, correct, n_bins, true);
}

CalibrationReport expected_ece(const std::vector<Prediction>& preds, const std::vector<int>& labels,
                               std::size_t n_bins) {
    require_paired(preds, labels);
    if (n_bins < 1) throw std::invalid_argument("expected_ece: need at least one bin");
    std::vector<double> conf(preds.size());
    std::vector<bool> correct(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const std::size_t best = argmax(preds[i].probs);
        conf[i] = preds[i].probs[best];
        correct[i] = static_cast<int>(best) == labels[i];
    }
    return binned_report(conf, correct, n_bins, false);
}

std::vector<ClasswiseRow> classwise_uncertainty(const std::vector<Prediction>& preds,
                                                const std::vector<int>& labels) {
    require_paired(preds, labels);
    std::vector<int> present;
    for (int l : labels)
        if (std::find(present.begin(), present.end(), l) == present.end()) present.push_back(l);
    std::sort(present.begin(), present.end());
    std::vector<ClasswiseRow> rows;
    for (int cls : present) {
        ClasswiseRow row;
        row.label = cls;
        std::size_t right = 0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            if (labels[i] != cls) continue;
            row.count += 1;
            row.mean_uncertainty += preds[i].uncertainty;
            if (static_cast<int>(argmax(preds[i].probs)) == cls) ++right;
        }
        row.mean_uncertainty /= static_cast<double>(row.count);
        row.accuracy = static_cast<double>(right) / static_cast<double>(row.count);
        rows.push_back(row);
    }
    return rows;
}

McDropoutBaseline init_baseline(const ModelShape& shape, std::uint64_t seed, double dropout_p) {
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw std::invalid_argument("baseline: dropout_p outside [0,1)");
    const NpParams donor = init_params(shape, derive_seed(seed, 0x64726f70u));
    McDropoutBaseline b;
    b.shape = shape;
    b.backbone_mlp = donor.backbone_mlp;
    b.conv1 = donor.conv1;
    b.conv2 = donor.conv2;
    b.conv3 = donor.conv3;
    b.dropout_p = dropout_p;
    Rng rng(derive_seed(seed, 0x636c6673u));
    const std::size_t f = shape.cfg.feature_dim, c = shape.classes;
    b.classifier = Tensor({f, c});
    const double bound = 1.0 / std::sqrt(static_cast<double>(f));
    for (auto& v : b.classifier.data()) v = rng.uniform(-bound, bound);
    return b;
}

std::vector<Prediction> mc_dropout_baseline_predict(const McDropoutBaseline& model,
                                                    const Tensor& batch, std::size_t T,
                                                    std::uint64_t seed) {
    if (T < 1) throw std::invalid_argument("baseline: T must be >= 1");
    NpParams shim;  // backbone_forward only touches the backbone tensors
    shim.backbone_mlp = model.backbone_mlp;
    shim.conv1 = model.conv1;
    shim.conv2 = model.conv2;
    shim.conv3 = model.conv3;
    Rng rng(derive_seed(seed, 0x6d636470u));
    const double keep = 1.0 - model.dropout_p;
    std::vector<Tensor> members;
    members.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
        // a full stochastic pass each time: that is the cost being measured
        Tensor feats = backbone_forward(shim, model.shape, batch);
        if (model.dropout_p > 0.0) {
            for (auto& v : feats.data()) v = rng.uniform() <= model.dropout_p ? 0.0 : v / keep;
        }
        members.push_back(ops::softmax_rows(ops::matmul(feats, model.classifier)));
    }
    return average_members(members, false);
}

double TimingTable::np_mean(std::size_t t_index) const {
    double acc = 0.0;
    for (const auto& rep : np_seconds) acc += rep[t_index];
    return acc / static_cast<double>(np_seconds.size());
}

double TimingTable::baseline_mean(std::size_t t_index) const {
    double acc = 0.0;
    for (const auto& rep : baseline_seconds) acc += rep[t_index];
    return acc / static_cast<double>(baseline_seconds.size());
}

TimingTable timing_benchmark(const NpParams& params, const ModelShape& shape,
                             const MemoryBank& latent_bank, const MemoryBank& det_bank,
                             const McDropoutBaseline& baseline, const std::vector<std::size_t>& ts,
                             const Tensor& batch, std::size_t repeats, std::uint64_t seed) {
    if (ts.empty() || repeats == 0) throw std::invalid_argument("timing_benchmark: empty plan");
    using clock = std::chrono::steady_clock;
    TimingTable table;
    table.t_values = ts;
    table.np_seconds.assign(repeats, std::vector<double>(ts.size(), 0.0));
    table.baseline_seconds.assign(repeats, std::vector<double>(ts.size(), 0.0));

    // warm-up pass so first-touch costs do not land on T=1
    (void)predict_inference(params, shape, latent_bank, det_bank,
                            backbone_forward(params, shape, batch), 1, seed);
    (void)mc_dropout_baseline_predict(baseline, batch, 1, seed);

    for (std::size_t rep = 0; rep < repeats; ++rep) {
        for (std::size_t i = 0; i < ts.size(); ++i) {
            const std::uint64_t s = derive_seed(seed, 0x74696d65u, rep, i);
            auto t0 = clock::now();
            const Tensor feats = backbone_forward(params, shape, batch);
            (void)predict_inference(params, shape, latent_bank, det_bank, feats, ts[i], s);
            auto t1 = clock::now();
            (void)mc_dropout_baseline_predict(baseline, batch, ts[i], s);
            auto t2 = clock::now();
            table.np_seconds[rep][i] = std::chrono::duration<double>(t1 - t0).count();
            table.baseline_seconds[rep][i] = std::chrono::duration<double>(t2 - t1).count();
        }
    }
    return table;
}

}  // namespace npssl
