#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "npssl/rng.hpp"
#include "npssl/trainer.hpp"
#include "support.hpp"

using namespace npssl;
using namespace npssl::testing;

namespace {

RunConfig tiny_run() {
    RunConfig cfg;
    cfg.train.B = 4;
    cfg.train.ratio_mu = 3;
    cfg.train.T = 3;
    cfg.train.Q = 32;
    cfg.train.total_steps = 4;
    cfg.train.seed = 9;
    cfg.model.feature_dim = 8;
    cfg.model.hidden_dim = 8;
    cfg.model.latent_dim = 4;
    cfg.data.dataset = "two-moons";
    cfg.data.dataset_n = 80;
    cfg.data.labels_per_class = 3;
    cfg.data.test_fraction = 0.25;
    cfg.eval_interval = 2;
    return cfg;
}

Dataset vector_dataset() { return make_two_moons(80, 0.1, 4); }

Dataset tiny_image_dataset() {
    Dataset ds;
    ds.kind = DataKind::Image;
    ds.image_h = 12;
    ds.image_w = 12;
    ds.feature_dim = 144;
    ds.classes = 2;
    Rng rng(6);
    for (int i = 0; i < 8; ++i) {
        std::vector<double> img(144);
        for (auto& v : img) v = rng.uniform();
        ds.samples.push_back(img);
        ds.labels.push_back(i % 2);
    }
    ds.split.assign(ds.size(), Split::Labeled);
    double total = 0.0;
    for (const auto& s : ds.samples)
        for (double v : s) total += v;
    ds.pixel_mean = total / static_cast<double>(ds.size() * ds.feature_dim);
    return ds;
}

}  // namespace

TEST_CASE("augment_weak: deterministic, vector noise near sigma=0.05") {
    const Dataset ds = vector_dataset();
    const auto a = augment_weak(ds, ds.samples[0], 77);
    const auto b = augment_weak(ds, ds.samples[0], 77);
    CHECK(a == b);
    CHECK(a != ds.samples[0]);

    double sq = 0.0;
    std::size_t n = 0;
    for (int trial = 0; trial < 5000; ++trial) {
        const auto noisy = augment_weak(ds, ds.samples[1], derive_seed(5, trial));
        for (std::size_t j = 0; j < noisy.size(); ++j) {
            const double d = noisy[j] - ds.samples[1][j];
            sq += d * d;
            ++n;
        }
    }
    const double sigma = std::sqrt(sq / static_cast<double>(n));
    CHECK(sigma > 0.045);
    CHECK(sigma < 0.055);
}

TEST_CASE("flip involution") {
    Rng rng(8);
    std::vector<double> img(12 * 12);
    for (auto& v : img) v = rng.uniform();
    CHECK(flip_horizontal(flip_horizontal(img, 12, 12), 12, 12) == img);
    CHECK(flip_horizontal(img, 12, 12) != img);
}

TEST_CASE("augment_strong: deterministic and distinct from weak") {
    const Dataset vec = vector_dataset();
    CHECK(augment_strong(vec, vec.samples[0], 3) == augment_strong(vec, vec.samples[0], 3));
    CHECK(augment_strong(vec, vec.samples[0], 3) != augment_weak(vec, vec.samples[0], 3));

    const Dataset img = tiny_image_dataset();
    const auto s = augment_strong(img, img.samples[0], 5);
    CHECK(s == augment_strong(img, img.samples[0], 5));
    CHECK(s != augment_weak(img, img.samples[0], 5));
    for (double v : s) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("strong vector augmentation zeroes features at the standardized mean") {
    const Dataset vec = vector_dataset();
    std::size_t zeroed = 0, total = 0;
    for (int trial = 0; trial < 4000; ++trial) {
        const auto s = augment_strong(vec, vec.samples[trial % vec.size()], derive_seed(31, trial));
        for (double v : s) {
            zeroed += v == 0.0 ? 1 : 0;
            ++total;
        }
    }
    const double rate = static_cast<double>(zeroed) / static_cast<double>(total);
    CHECK(rate > 0.15);
    CHECK(rate < 0.25);
}

TEST_CASE("image cutout fills with the dataset mean") {
    Dataset img = tiny_image_dataset();
    std::size_t mean_hits = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto s = augment_strong(img, img.samples[0], derive_seed(91, trial));
        for (double v : s) mean_hits += v == img.pixel_mean ? 1 : 0;
    }
    CHECK(mean_hits > 0);  // cutout (and rotation fill) stamp the mean value
}

TEST_CASE("select_pseudo_labels gates") {
    std::vector<Prediction> preds(4);
    preds[0].probs = {0.97, 0.03};
    preds[0].uncertainty = 0.2;
    preds[1].probs = {0.90, 0.10};
    preds[1].uncertainty = 0.2;
    preds[2].probs = {0.99, 0.01};
    preds[2].uncertainty = 0.5;
    preds[3].probs = {0.5, 0.5};
    preds[3].uncertainty = 0.1;  // argmax tie -> class 0, but below tau_c

    const auto set = select_pseudo_labels(preds, 0.95, 0.4);
    REQUIRE(set.count() == 1);
    CHECK(set.indices[0] == 0);
    CHECK(set.labels[0] == 0);

    // tie-breaking toward the lowest class index at a permissive gate
    const auto ties = select_pseudo_labels(preds, 0.5, 1.0);
    CHECK(ties.count() == 4);
    CHECK(ties.labels[3] == 0);
}

TEST_CASE("generate_pseudo_labels: empty batch, valid outputs, repeatability") {
    const RunConfig cfg = tiny_run();
    const Dataset ds = build_dataset(cfg);
    TrainerState st = init_state(cfg, ds);

    CHECK(generate_pseudo_labels(st, ds, {}, cfg).empty());

    const auto unl = ds.indices_of(Split::Unlabeled);
    std::vector<std::size_t> batch(unl.begin(), unl.begin() + 5);
    const auto a = generate_pseudo_labels(st, ds, batch, cfg);
    const auto b = generate_pseudo_labels(st, ds, batch, cfg);
    REQUIRE(a.size() == 5);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].probs == b[i].probs);
        double sum = 0.0;
        for (double v : a[i].probs) sum += v;
        CHECK(std::abs(sum - 1.0) <= 1e-9);
        CHECK(a[i].uncertainty <= std::log(2.0) + 1e-12);
    }
}

TEST_CASE("compute_losses: perfect one-hot predictions give zero l_cls") {
    TrainConfig tc;
    tc.T = 2;
    tc.lambda_u = 1.0;
    tc.beta = 0.01;
    Graph g;
    // +-1000 logits: softmax saturates to an exact one-hot in double precision;
    // two stacked passes of two samples
    const NodeId lg = g.leaf(Tensor({4, 2}, {1000.0, -1000.0, -1000.0, 1000.0,  //
                                             1000.0, -1000.0, -1000.0, 1000.0}));
    const DiagonalGaussian d({0.0}, {0.5});
    const DistNodes qc{g.leaf(Tensor::row(d.mean)), g.leaf(Tensor::row(d.var))};
    const DistNodes qt{g.leaf(Tensor::row(d.mean)), g.leaf(Tensor::row(d.var))};
    const LossNodes nodes = compute_losses(g, lg, {0, 1}, kNoNode, {}, 2, qc, qt, 0.5, tc);
    const LossBreakdown out = loss_values(g, nodes);
    CHECK(out.l_cls == 0.0);
    CHECK(out.l_u_cls == 0.0);
    CHECK(std::abs(out.div_term) <= 1e-12);
    CHECK(out.total == out.l_cls + tc.lambda_u * out.l_u_cls + tc.beta * out.div_term);
}

TEST_CASE("compute_losses: Eq-style assembly identity and B_c = 0 behaviour") {
    TrainConfig tc;
    tc.T = 2;
    tc.lambda_u = 0.7;
    tc.beta = 0.05;
    Rng rng(12);
    Graph g;
    const NodeId lg = g.leaf(random_tensor(rng, {6, 4}, -2.0, 2.0));   // T=2 x B=3
    const NodeId ug = g.leaf(random_tensor(rng, {4, 4}, -2.0, 2.0));   // T=2 x B_c=2
    const auto p = random_gaussian(rng, 3);
    const auto q = random_gaussian(rng, 3);
    const DistNodes qc{g.leaf(Tensor::row(p.mean)), g.leaf(Tensor::row(p.var))};
    const DistNodes qt{g.leaf(Tensor::row(q.mean)), g.leaf(Tensor::row(q.var))};

    const LossNodes nodes = compute_losses(g, lg, {0, 1, 2}, ug, {3, 1}, 2, qc, qt, 0.3, tc);
    const LossBreakdown out = loss_values(g, nodes);
    CHECK(out.l_cls >= 0.0);
    CHECK(out.l_u_cls >= 0.0);
    CHECK(out.total == out.l_cls + tc.lambda_u * out.l_u_cls + tc.beta * out.div_term);

    // mismatched stacking is rejected
    CHECK_THROWS_AS(compute_losses(g, lg, {0, 1}, kNoNode, {}, 2, qc, qt, 0.3, tc),
                    std::invalid_argument);

    Graph g2;
    const NodeId lg2 = g2.leaf(g.value(lg));
    const DistNodes qc2{g2.leaf(Tensor::row(p.mean)), g2.leaf(Tensor::row(p.var))};
    const DistNodes qt2{g2.leaf(Tensor::row(q.mean)), g2.leaf(Tensor::row(q.var))};
    const LossNodes none = compute_losses(g2, lg2, {0, 1, 2}, kNoNode, {}, 2, qc2, qt2, 0.3, tc);
    const LossBreakdown out2 = loss_values(g2, none);
    CHECK(out2.l_u_cls == 0.0);
    CHECK(out2.total == out2.l_cls + tc.beta * out2.div_term);
}

TEST_CASE("sgd_step basics") {
    ModelShape shape;
    shape.cfg.feature_dim = 4;
    shape.cfg.hidden_dim = 4;
    shape.cfg.latent_dim = 2;
    shape.input_dim = 2;
    shape.classes = 2;
    NpParams params = init_params(shape, 2);
    NpParams velocity = params;
    for_each_param(velocity, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    const NpParams before = params;

    Graph g;
    const BoundParams bp = bind_params(g, params, shape.cfg.backbone);
    // zero grads, zero decay: parameters unchanged
    std::unordered_map<NodeId, Tensor> grads;
    for (NodeId id : bp.all) grads.emplace(id, Tensor(g.value(id).shape()));
    sgd_step(params, velocity, shape.cfg.backbone, grads, bp.all, 0.1, 0.9, 0.0);
    bool same = true;
    std::vector<const Tensor*> pa, pb;
    for_each_param(params, shape.cfg.backbone, [&](const char*, Tensor& t) { pa.push_back(&t); });
    for_each_param(const_cast<NpParams&>(before), shape.cfg.backbone,
                   [&](const char*, Tensor& t) { pb.push_back(&t); });
    for (std::size_t i = 0; i < pa.size(); ++i) same &= pa[i]->data() == pb[i]->data();
    CHECK(same);

    // lr = 0: unchanged even with nonzero grads
    for (auto& [id, t] : grads)
        for (auto& v : t.data()) v = 1.0;
    sgd_step(params, velocity, shape.cfg.backbone, grads, bp.all, 0.0, 0.9, 0.1);
    same = true;
    for (std::size_t i = 0; i < pa.size(); ++i) same &= pa[i]->data() == pb[i]->data();
    CHECK(same);
}

TEST_CASE("sgd_step scalar update") {
    // theta=1, g=1, lr=0.1, momentum=0, decay=0 -> 0.9
    ModelShape shape;
    shape.cfg.feature_dim = 1;
    shape.cfg.hidden_dim = 1;
    shape.cfg.latent_dim = 1;
    shape.input_dim = 1;
    shape.classes = 2;
    NpParams params = init_params(shape, 3);
    NpParams velocity = params;
    for_each_param(velocity, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    for_each_param(params, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 1.0); });
    Graph g;
    const BoundParams bp = bind_params(g, params, shape.cfg.backbone);
    std::unordered_map<NodeId, Tensor> grads;
    for (NodeId id : bp.all) {
        Tensor t(g.value(id).shape());
        std::fill(t.data().begin(), t.data().end(), 1.0);
        grads.emplace(id, std::move(t));
    }
    sgd_step(params, velocity, shape.cfg.backbone, grads, bp.all, 0.1, 0.0, 0.0);
    for_each_param(params, shape.cfg.backbone, [](const char*, Tensor& t) {
        for (double v : t.data()) CHECK(v == doctest::Approx(0.9).epsilon(1e-15));
    });
}

TEST_CASE("ema_update endpoints and geometric convergence") {
    ModelShape shape;
    shape.cfg.feature_dim = 3;
    shape.cfg.hidden_dim = 3;
    shape.cfg.latent_dim = 2;
    shape.input_dim = 2;
    shape.classes = 2;
    const NpParams live = init_params(shape, 4);

    NpParams ema = init_params(shape, 5);
    const NpParams ema_before = ema;
    ema_update(ema, live, shape.cfg.backbone, 1.0);  // m=1: unchanged
    {
        std::vector<const Tensor*> a, b;
        for_each_param(ema, shape.cfg.backbone, [&](const char*, Tensor& t) { a.push_back(&t); });
        for_each_param(const_cast<NpParams&>(ema_before), shape.cfg.backbone,
                       [&](const char*, Tensor& t) { b.push_back(&t); });
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->data() == b[i]->data());
    }

    ema_update(ema, live, shape.cfg.backbone, 0.0);  // m=0: jumps to live
    {
        std::vector<const Tensor*> a, b;
        for_each_param(ema, shape.cfg.backbone, [&](const char*, Tensor& t) { a.push_back(&t); });
        for_each_param(const_cast<NpParams&>(live), shape.cfg.backbone,
                       [&](const char*, Tensor& t) { b.push_back(&t); });
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->data() == b[i]->data());
    }

    // m=0.999 from zero toward 1: one step lands at 0.001
    NpParams zero = live;
    for_each_param(zero, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    NpParams ones = live;
    for_each_param(ones, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 1.0); });
    ema_update(zero, ones, shape.cfg.backbone, 0.999);
    for_each_param(zero, shape.cfg.backbone, [](const char*, Tensor& t) {
        for (double v : t.data()) CHECK(v == doctest::Approx(0.001).epsilon(1e-12));
    });

    // |ema - theta| shrinks geometrically: after n steps, m^n of the gap
    double gap = 1.0;
    NpParams walk = live;
    for_each_param(walk, shape.cfg.backbone,
                   [](const char*, Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
    for (int n = 1; n <= 5; ++n) {
        ema_update(walk, ones, shape.cfg.backbone, 0.9);
        gap *= 0.9;
        for_each_param(walk, shape.cfg.backbone, [&](const char*, Tensor& t) {
            for (double v : t.data()) CHECK(std::abs(1.0 - v - gap) <= 1e-12);
        });
    }
}

TEST_CASE("cosine_lr schedule") {
    CHECK(cosine_lr(0, 1000, 0.03) == 0.03);
    CHECK(cosine_lr(1000, 1000, 0.03) ==
          doctest::Approx(0.03 * 0.19509032201612825).epsilon(1e-12));
    CHECK(cosine_lr(500, 1000, 0.03) ==
          doctest::Approx(0.03 * std::cos(7.0 * 3.14159265358979323846 / 32.0)).epsilon(1e-12));
    double prev = cosine_lr(0, 1000, 0.03);
    for (std::uint64_t k = 1; k <= 1000; k += 50) {
        const double cur = cosine_lr(k, 1000, 0.03);
        CHECK(cur <= prev);
        prev = cur;
    }
}

TEST_CASE("train_step: determinism and gate bound") {
    const RunConfig cfg = tiny_run();
    const Dataset ds = build_dataset(cfg);
    const auto labeled = ds.indices_of(Split::Labeled);
    auto unl = ds.indices_of(Split::Unlabeled);
    unl.resize(std::min<std::size_t>(unl.size(), cfg.train.ratio_mu * cfg.train.B));

    TrainerState s1 = init_state(cfg, ds);
    TrainerState s2 = init_state(cfg, ds);
    auto [loss1, m1] = train_step(s1, ds, labeled, unl, cfg);
    auto [loss2, m2] = train_step(s2, ds, labeled, unl, cfg);
    CHECK(loss1.total == loss2.total);
    CHECK(loss1.l_cls == loss2.l_cls);
    CHECK(loss1.div_term == loss2.div_term);
    CHECK(m1.selected == m2.selected);
    CHECK(m1.selected <= cfg.train.ratio_mu * cfg.train.B);
    CHECK(loss1.total == loss1.l_cls + cfg.train.lambda_u * loss1.l_u_cls +
                             cfg.train.beta * loss1.div_term);

    // oversized unlabeled batch violates the precondition
    std::vector<std::size_t> too_many(cfg.train.ratio_mu * cfg.train.B + 1, 0);
    CHECK_THROWS_AS(train_step(s1, ds, labeled, too_many, cfg), std::invalid_argument);
}

TEST_CASE("train_step: beta=0 makes updates independent of the divergence form") {
    RunConfig a = tiny_run();
    a.train.beta = 0.0;
    a.train.divergence = DivergenceForm::Js;
    RunConfig b = a;
    b.train.divergence = DivergenceForm::Kl;

    const Dataset ds = build_dataset(a);
    const auto labeled = ds.indices_of(Split::Labeled);
    auto unl = ds.indices_of(Split::Unlabeled);
    unl.resize(std::min<std::size_t>(unl.size(), a.train.ratio_mu * a.train.B));

    TrainerState sa = init_state(a, ds);
    TrainerState sb = init_state(b, ds);
    (void)train_step(sa, ds, labeled, unl, a);
    (void)train_step(sb, ds, labeled, unl, b);

    std::vector<const Tensor*> pa, pb;
    for_each_param(sa.params, a.model.backbone, [&](const char*, Tensor& t) { pa.push_back(&t); });
    for_each_param(sb.params, b.model.backbone, [&](const char*, Tensor& t) { pb.push_back(&t); });
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data() == pb[i]->data());
}

TEST_CASE("train_step: pseudo-label pass leaves nothing in the loss graph") {
    const RunConfig cfg = tiny_run();
    const Dataset ds = build_dataset(cfg);
    const auto labeled = ds.indices_of(Split::Labeled);
    auto unl = ds.indices_of(Split::Unlabeled);
    unl.resize(std::min<std::size_t>(unl.size(), cfg.train.ratio_mu * cfg.train.B));

    TrainerState st = init_state(cfg, ds);
    auto [loss, metrics] = train_step(st, ds, labeled, unl, cfg);
    (void)loss;
    // leaf ancestors of the loss: all params, the augmented views (labeled
    // weak, unlabeled weak, selected strong), encoder one-hot rows (labeled +
    // all-unlabeled pseudo), cross-entropy one-hot rows (labeled + gated
    // subset), the per-pass eta rows, and the mixture's ones constant;
    // nothing from the pseudo-label inference pass
    const std::size_t views = 1 + (metrics.unlabeled_batch > 0 ? 1 : 0) +
                              (metrics.selected > 0 ? 1 : 0);
    const std::size_t onehots = (1 + (metrics.unlabeled_batch > 0 ? 1 : 0)) +
                                (1 + (metrics.selected > 0 ? 1 : 0));
    const std::size_t expected = metrics.param_leaves + views + onehots + cfg.train.T + 1;
    CHECK(metrics.loss_leaf_ancestors == expected);
}

TEST_CASE("supervised limit: no unlabeled data and beta=0") {
    RunConfig cfg = tiny_run();
    cfg.train.ratio_mu = 0;
    cfg.train.beta = 0.0;
    cfg.train.total_steps = 3;
    const Dataset ds = build_dataset(cfg);

    const TrainResult result = train(cfg, ds);
    CHECK(result.state.step == 3);
    // q_context == q_target when targets are exactly the labeled set
    const auto labeled = ds.indices_of(Split::Labeled);
    TrainerState st = init_state(cfg, ds);
    auto [loss, metrics] = train_step(st, ds, labeled, {}, cfg);
    CHECK(loss.l_u_cls == 0.0);
    CHECK(std::abs(loss.div_term) <= 1e-12);
    CHECK(metrics.alpha_u == 0.5);
    CHECK(loss.total == loss.l_cls);
}

TEST_CASE("train: K=0, log length, determinism") {
    RunConfig cfg = tiny_run();
    cfg.train.total_steps = 0;
    const Dataset ds = build_dataset(cfg);
    const TrainResult empty = train(cfg, ds);
    CHECK(empty.state.step == 0);
    CHECK(empty.log.empty());

    cfg.train.total_steps = 6;
    cfg.eval_interval = 2;
    const TrainResult a = train(cfg, ds);
    CHECK(a.log.size() == 3);

    const TrainResult b = train(cfg, ds);
    REQUIRE(b.log.size() == a.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].total == b.log[i].total);
        CHECK(a.log[i].accuracy == b.log[i].accuracy);
        CHECK(a.log[i].mean_uncertainty == b.log[i].mean_uncertainty);
    }
}
