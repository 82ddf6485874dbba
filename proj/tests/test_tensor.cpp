#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "npssl/rng.hpp"
#include "npssl/tensor.hpp"
#include "support.hpp"

using namespace npssl;
using namespace npssl::testing;

TEST_CASE("tensor shape/data invariants") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), std::invalid_argument);
    CHECK_THROWS_AS(Tensor({0, 3}), std::invalid_argument);
    const Tensor t({2, 2}, {1, 2, 3, 4});
    CHECK(t.at(1, 0) == 3.0);
    CHECK(t.size() == 4);
}

TEST_CASE("matmul identity") {
    const Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(3);
    const Tensor a = random_tensor(rng, {3, 4}, -2.0, 2.0);
    const Tensor out = ops::matmul(eye, a);
    CHECK(out.data() == a.data());
    CHECK_THROWS_AS(ops::matmul(a, a), std::invalid_argument);
}

TEST_CASE("softmax symmetry and row normalization") {
    const Tensor z = ops::softmax_rows(Tensor({1, 3}, {0, 0, 0}));
    for (double v : z.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    Rng rng(11);
    const Tensor x = random_tensor(rng, {8, 10}, -30.0, 30.0);
    const Tensor p = ops::softmax_rows(x);
    for (std::size_t r = 0; r < p.rows(); ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < p.cols(); ++c) {
            CHECK(p.at(r, c) > 0.0);
            CHECK(p.at(r, c) < 1.0);
            sum += p.at(r, c);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("mean_rows identity on a single row and permutation invariance") {
    const Tensor row({1, 4}, {4, -1, 0.5, 9});
    CHECK(ops::mean_rows(row).data() == row.data());

    Rng rng(5);
    const Tensor x = random_tensor(rng, {7, 3}, -5.0, 5.0);
    const Tensor base = ops::mean_rows(x);
    for (int trial = 0; trial < 20; ++trial) {
        Rng perm_rng(derive_seed(100, trial));
        const auto order = perm_rng.sample_without_replacement(7, 7);
        Tensor shuffled({7, 3});
        for (std::size_t r = 0; r < 7; ++r)
            for (std::size_t c = 0; c < 3; ++c) shuffled.at(r, c) = x.at(order[r], c);
        CHECK(ops::mean_rows(shuffled).data() == base.data());
    }

    // exact cancellation of v and -v
    Tensor pair({2, 3}, {0.1, -2.5, 3.75, -0.1, 2.5, -3.75});
    const Tensor cancelled = ops::mean_rows(pair);
    for (double v : cancelled.data()) CHECK(v == 0.0);
}

TEST_CASE("domain errors") {
    CHECK_THROWS_AS(ops::log(Tensor({1, 2}, {1.0, 0.0})), std::domain_error);
    CHECK_THROWS_AS(ops::log(Tensor({1, 1}, {-3.0})), std::domain_error);
    CHECK_THROWS_AS(ops::sqrt(Tensor({1, 1}, {-1.0})), std::domain_error);
    CHECK_THROWS_AS(ops::div(Tensor({1, 1}, {1.0}), Tensor({1, 1}, {0.0})), std::domain_error);
    CHECK_THROWS_AS(ops::add(Tensor({2, 2}), Tensor({3, 2})), std::invalid_argument);
}

TEST_CASE("forward ops stay finite on finite inputs") {
    Rng rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = random_tensor(rng, {4, 6}, -50.0, 50.0);
        CHECK(ops::softmax_rows(x).all_finite());
        CHECK(ops::log_softmax_rows(x).all_finite());
        CHECK(ops::logistic(x).all_finite());
        CHECK(ops::exp(ops::scale(x, 0.1)).all_finite());
    }
}

TEST_CASE("backward: d(x.x)/dx at 3 is 6") {
    Graph g;
    const NodeId x = g.leaf(Tensor::scalar(3.0));
    const NodeId loss = g.sum_all(g.mul(x, x));
    const auto grads = g.backward(loss);
    CHECK(grads.at(x)[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: softmax + cross-entropy gradient equals p - y") {
    Rng rng(31);
    const Tensor logits = random_tensor(rng, {4, 5}, -2.0, 2.0);
    Tensor y({4, 5});
    y.at(0, 2) = 1.0;
    y.at(1, 0) = 1.0;
    y.at(2, 4) = 1.0;
    y.at(3, 1) = 1.0;

    Graph g;
    const NodeId lg = g.leaf(logits);
    const NodeId loss = g.scale(g.sum_all(g.mul(g.leaf(y), g.log_softmax_rows(lg))), -1.0);
    const auto grads = g.backward(loss);

    const Tensor p = ops::softmax_rows(logits);
    const Tensor& d = grads.at(lg);
    for (std::size_t i = 0; i < p.size(); ++i)
        CHECK(d[i] == doctest::Approx(p[i] - y[i]).epsilon(1e-12));
}

TEST_CASE("backward: disconnected leaf gets a zero gradient") {
    Graph g;
    const NodeId x = g.leaf(Tensor::scalar(2.0));
    const NodeId orphan = g.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    const NodeId loss = g.mul(x, x);
    const auto grads = g.backward(loss);
    CHECK(grads.at(orphan).same_shape(Tensor({2, 3})));
    for (double v : grads.at(orphan).data()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar losses") {
    Graph g;
    const NodeId x = g.leaf(Tensor({2, 2}, {1, 2, 3, 4}));
    const NodeId y = g.mul(x, x);
    CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("grad_check: polynomial") {
    const double err = grad_check(
        [](Graph& g, NodeId id) { return g.sum_all(g.mul(id, id)); }, Tensor({1, 2}, {1.0, 2.0}),
        1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check: logistic composed with matmul") {
    Rng rng(7);
    const Tensor x = random_tensor(rng, {4, 4}, -1.0, 1.0);
    const Tensor w = random_tensor(rng, {4, 4}, -1.0, 1.0);
    const double err = grad_check(
        [&](Graph& g, NodeId id) {
            return g.sum_all(g.logistic(g.matmul(id, g.leaf(w))));
        },
        x, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("grad_check: constant function has zero error") {
    const double err = grad_check(
        [](Graph& g, NodeId id) {
            (void)id;
            return g.leaf(Tensor::scalar(5.0));
        },
        Tensor({1, 3}, {1, 2, 3}), 1e-5);
    CHECK(err == 0.0);
}

TEST_CASE("grad_check validates eps") {
    CHECK_THROWS_AS(grad_check([](Graph& g, NodeId id) { return g.sum_all(id); },
                               Tensor::scalar(1.0), 0.0),
                    std::invalid_argument);
    CHECK_THROWS_AS(grad_check([](Graph& g, NodeId id) { return g.sum_all(id); },
                               Tensor::scalar(1.0), 0.5),
                    std::invalid_argument);
}

TEST_CASE("every op passes grad checks on 100 random seeded inputs") {
    for (const auto& r : op_grad_check_suite(100)) {
        INFO("op: " << r.op);
        CHECK(r.error < 1e-4);
    }
}

TEST_CASE("forward replay reproduces recorded values bit-identically") {
    Rng rng(43);
    Graph g;
    const NodeId a = g.leaf(random_tensor(rng, {3, 4}, -1.0, 1.0));
    const NodeId b = g.leaf(random_tensor(rng, {4, 3}, -1.0, 1.0));
    const NodeId c = g.softmax_rows(g.matmul(a, b));
    const NodeId d = g.mean_rows(g.logistic(g.scale(c, 2.0)));
    const NodeId loss = g.sum_all(g.exp(d));
    (void)loss;

    const auto replayed = g.replay();
    REQUIRE(replayed.size() == g.size());
    for (std::size_t i = 0; i < replayed.size(); ++i)
        CHECK(replayed[i].data() == g.value(static_cast<NodeId>(i)).data());
}

TEST_CASE("ancestor_leaves walks only the loss subgraph") {
    Graph g;
    const NodeId a = g.leaf(Tensor::scalar(1.0));
    const NodeId b = g.leaf(Tensor::scalar(2.0));
    const NodeId orphan = g.leaf(Tensor::scalar(3.0));
    (void)orphan;
    const NodeId loss = g.mul(a, b);
    const auto leaves = g.ancestor_leaves(loss);
    CHECK(leaves == std::vector<NodeId>{a, b});
}
