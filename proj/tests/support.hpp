#pragma once

#include <string>
#include <vector>

#include "npssl/divergence.hpp"
#include "npssl/model.hpp"
#include "npssl/rng.hpp"
#include "npssl/tensor.hpp"
#include "npssl/trainer.hpp"

namespace npssl::testing {

inline Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// magnitudes bounded away from zero so relu corners stay clear of eps
inline Tensor random_signed_tensor(Rng& rng, std::vector<std::size_t> shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
        const double mag = rng.uniform(0.1, 1.0);
        v = rng.uniform_index(2) == 0 ? mag : -mag;
    }
    return t;
}

inline DiagonalGaussian random_gaussian(Rng& rng, std::size_t d) {
    std::vector<double> mean(d), var(d);
    for (auto& m : mean) m = rng.uniform(-3.0, 3.0);
    for (auto& v : var) v = rng.uniform(0.05, 3.0);
    return DiagonalGaussian(std::move(mean), std::move(var));
}

struct OpGradResult {
    std::string op;
    double error = 0.0;
};

// One grad check per op kind per seed, against a random linear functional so
// every output coordinate carries gradient signal.
std::vector<OpGradResult> op_grad_check_suite(std::size_t seeds_per_op);

// Worst relative error of the full training loss at reduced widths
// (F=8, L=4, M=8, T=3) over every parameter tensor, against central
// differences with frozen step inputs.
double end_to_end_grad_error();

}  // namespace npssl::testing
