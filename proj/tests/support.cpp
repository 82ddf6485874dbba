#include "support.hpp"

#include <algorithm>

namespace npssl::testing {

namespace {

Tensor fixed_mask(const Tensor& like, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x6d61736bu));
    Tensor mask(like.shape());
    for (auto& v : mask.data()) v = rng.uniform(-1.0, 1.0);
    return mask;
}

// scalar probe: sum(y * mask) with a mask frozen before the check
NodeId probe(Graph& g, NodeId y, const Tensor& mask) {
    return g.sum_all(g.mul(y, g.leaf(mask)));
}

}  // namespace

std::vector<OpGradResult> op_grad_check_suite(std::size_t seeds_per_op) {
    std::vector<OpGradResult> results;
    auto record = [&results](const std::string& name, double err) {
        for (auto& r : results) {
            if (r.op == name) {
                r.error = std::max(r.error, err);
                return;
            }
        }
        results.push_back({name, err});
    };

    constexpr double eps = 1e-5;
    for (std::size_t seed = 0; seed < seeds_per_op; ++seed) {
        Rng rng(derive_seed(seed, 0x6f707363u));

        {  // matmul, both operands
            const Tensor a = random_tensor(rng, {3, 4}, -1.0, 1.0);
            const Tensor b = random_tensor(rng, {4, 2}, -1.0, 1.0);
            const Tensor mask = fixed_mask(ops::matmul(a, b), seed * 100 + 1);
            record("matmul", grad_check_many(
                                 [&](Graph& g, const std::vector<NodeId>& ids) {
                                     return probe(g, g.matmul(ids[0], ids[1]), mask);
                                 },
                                 {a, b}, eps));
        }
        {  // add, equal shapes plus row broadcast
            const Tensor a = random_tensor(rng, {3, 4}, -1.0, 1.0);
            const Tensor b = random_tensor(rng, {3, 4}, -1.0, 1.0);
            const Tensor bias = random_tensor(rng, {1, 4}, -1.0, 1.0);
            const Tensor mask = fixed_mask(a, seed * 100 + 2);
            record("add", grad_check_many(
                              [&](Graph& g, const std::vector<NodeId>& ids) {
                                  return probe(g, g.add(g.add(ids[0], ids[1]), ids[2]), mask);
                              },
                              {a, b, bias}, eps));
        }
        {  // sub / mul / div on safe ranges
            const Tensor a = random_tensor(rng, {2, 5}, -1.0, 1.0);
            const Tensor b = random_tensor(rng, {2, 5}, 0.5, 2.0);
            const Tensor mask = fixed_mask(a, seed * 100 + 3);
            record("sub", grad_check_many(
                              [&](Graph& g, const std::vector<NodeId>& ids) {
                                  return probe(g, g.sub(ids[0], ids[1]), mask);
                              },
                              {a, b}, eps));
            record("mul", grad_check_many(
                              [&](Graph& g, const std::vector<NodeId>& ids) {
                                  return probe(g, g.mul(ids[0], ids[1]), mask);
                              },
                              {a, b}, eps));
            record("div", grad_check_many(
                              [&](Graph& g, const std::vector<NodeId>& ids) {
                                  return probe(g, g.div(ids[0], ids[1]), mask);
                              },
                              {a, b}, eps));
        }
        {  // unary maps
            const Tensor x = random_tensor(rng, {2, 6}, -1.0, 1.0);
            const Tensor pos = random_tensor(rng, {2, 6}, 0.5, 2.5);
            const Tensor signed_x = random_signed_tensor(rng, {2, 6});
            const Tensor mask = fixed_mask(x, seed * 100 + 4);
            record("exp",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.exp(id), mask); }, x, eps));
            record("log", grad_check([&](Graph& g, NodeId id) { return probe(g, g.log(id), mask); },
                                     pos, eps));
            record("logistic",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.logistic(id), mask); }, x,
                              eps));
            record("relu",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.relu(id), mask); },
                              signed_x, eps));
            record("sqrt",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.sqrt(id), mask); }, pos,
                              eps));
        }
        {  // row-wise ops
            const Tensor x = random_tensor(rng, {3, 5}, -2.0, 2.0);
            const Tensor mask = fixed_mask(x, seed * 100 + 5);
            const Tensor row_mask = fixed_mask(ops::mean_rows(x), seed * 100 + 6);
            record("softmax_rows",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.softmax_rows(id), mask); },
                              x, eps));
            record("log_softmax_rows",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.log_softmax_rows(id), mask); },
                       x, eps));
            record("mean_rows",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.mean_rows(id), row_mask); }, x,
                       eps));
            record("sum_all",
                   grad_check([&](Graph& g, NodeId id) { return g.sum_all(g.mul(id, id)); }, x,
                              eps));
        }
        {  // shape ops
            const Tensor a = random_tensor(rng, {3, 2}, -1.0, 1.0);
            const Tensor b = random_tensor(rng, {3, 4}, -1.0, 1.0);
            const Tensor c = random_tensor(rng, {2, 2}, -1.0, 1.0);
            const Tensor row = random_tensor(rng, {1, 4}, -1.0, 1.0);
            const Tensor cols_mask = fixed_mask(Tensor({3, 6}), seed * 100 + 7);
            const Tensor rows_mask = fixed_mask(Tensor({5, 2}), seed * 100 + 8);
            const Tensor b_mask = fixed_mask(b, seed * 100 + 9);
            const Tensor tile_mask = fixed_mask(Tensor({4, 4}), seed * 100 + 10);
            record("concat_cols",
                   grad_check_many(
                       [&](Graph& g, const std::vector<NodeId>& ids) {
                           return probe(g, g.concat_cols({ids[0], ids[1]}), cols_mask);
                       },
                       {a, b}, eps));
            record("concat_rows",
                   grad_check_many(
                       [&](Graph& g, const std::vector<NodeId>& ids) {
                           return probe(g, g.concat_rows({ids[0], ids[1]}), rows_mask);
                       },
                       {a, c}, eps));
            record("scale",
                   grad_check([&](Graph& g, NodeId id) { return probe(g, g.scale(id, 1.7), b_mask); },
                              b, eps));
            record("offset",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.offset(id, -0.3), b_mask); }, b,
                       eps));
            record("repeat_rows",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.repeat_rows(id, 4), tile_mask); },
                       row, eps));
        }
        {  // conv stack
            const Tensor x = random_tensor(rng, {2, 2, 6, 6}, -1.0, 1.0);
            const Tensor k = random_tensor(rng, {3, 2, 3, 3}, -1.0, 1.0);
            const Tensor conv_mask = fixed_mask(ops::conv2d(x, k, 1, 1), seed * 100 + 11);
            const Tensor pool_mask = fixed_mask(ops::avg_pool2d(x, 2), seed * 100 + 12);
            const Tensor gap_mask = fixed_mask(ops::global_avg_pool(x), seed * 100 + 13);
            record("conv2d", grad_check_many(
                                 [&](Graph& g, const std::vector<NodeId>& ids) {
                                     return probe(g, g.conv2d(ids[0], ids[1], 1, 1), conv_mask);
                                 },
                                 {x, k}, eps));
            record("avg_pool2d",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.avg_pool2d(id, 2), pool_mask); },
                       x, eps));
            record("global_avg_pool",
                   grad_check(
                       [&](Graph& g, NodeId id) { return probe(g, g.global_avg_pool(id), gap_mask); },
                       x, eps));
        }
    }
    return results;
}

double end_to_end_grad_error() {
    ModelShape shape;
    shape.cfg.backbone = BackboneKind::Mlp;
    shape.cfg.feature_dim = 8;
    shape.cfg.hidden_dim = 8;
    shape.cfg.latent_dim = 4;
    shape.input_dim = 2;
    shape.classes = 2;

    TrainConfig tc;
    tc.T = 3;
    tc.lambda_u = 1.0;
    tc.beta = 0.01;
    tc.divergence = DivergenceForm::Js;

    NpParams params = init_params(shape, 11);
    std::vector<Tensor> tensors;
    for_each_param(params, shape.cfg.backbone,
                   [&](const char*, Tensor& t) { tensors.push_back(t); });

    Rng rng(derive_seed(17, 0x65326567u));
    StepLossInputs in;
    in.weak_labeled = random_tensor(rng, {3, 2}, -1.5, 1.5);
    in.labels = {0, 1, 0};
    in.strong_selected = random_tensor(rng, {2, 2}, -1.5, 1.5);
    in.pseudo_labels = {1, 0};
    for (std::size_t t = 0; t < tc.T; ++t) in.etas.push_back(random_tensor(rng, {1, 4}, -1.0, 1.0));
    in.fixed_alpha_u = 0.37;  // frozen: the loss treats alpha as a constant

    return grad_check_many(
        [&](Graph& g, const std::vector<NodeId>& ids) {
            const BoundParams bp = map_params(ids, shape.cfg.backbone);
            return build_step_loss(g, bp, shape, in, tc).loss.total;
        },
        tensors, 1e-5);
}

}  // namespace npssl::testing
