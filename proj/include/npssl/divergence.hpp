#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "npssl/tensor.hpp"

namespace npssl {

// Smallest admissible per-dimension variance; applied after every variance
// head squash so the geometric mixture never becomes singular.
constexpr double kVarianceFloor = 1e-6;

// Gaussian with diagonal covariance, stored as mean and per-dimension
// variance vectors.
struct DiagonalGaussian {
    std::vector<double> mean;
    std::vector<double> var;

    DiagonalGaussian() = default;
    DiagonalGaussian(std::vector<double> mean_, std::vector<double> var_);

    std::size_t dim() const { return mean.size(); }
    double logpdf(const std::vector<double>& x) const;
};

struct UncertaintyStats {
    double u_context_avg = 0.0;  // nats
    double u_target_avg = 0.0;   // nats
    double alpha_u = 0.5;

    UncertaintyStats() = default;
    UncertaintyStats(double ctx, double tgt);
};

// skew weight from average context/target uncertainties; 0.5 on the 0/0 case
double alpha_from_uncertainty(double u_context_avg, double u_target_avg);

double kl_diag(const DiagonalGaussian& p, const DiagonalGaussian& q);

// normalized weighted geometric mean p^(1-alpha) q^alpha, itself Gaussian
DiagonalGaussian geometric_mean(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha);

// Skew-geometric JS divergence and its dual, both evaluated by the direct
// closed-form expressions (trace/quadratic/log-determinant terms), which the
// tests cross-check against the defining KL decompositions.
double js_skew(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha);
double js_skew_dual(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha);

enum class DivergenceKind { Kl, JsSkew, JsSkewDual };
DivergenceKind divergence_kind_from_string(const std::string& s);
std::string to_string(DivergenceKind k);

struct McResult {
    double estimate = 0.0;
    double std_error = 0.0;
};

// Monte-Carlo oracle for the defining integrals. Independent of the closed
// forms above: the mixture's normalizer and moments come from 1-D quadrature,
// and each expectation is a plain sample mean over draws from its own
// distribution. n_samples >= 1e4.
McResult mc_estimate(DivergenceKind kind, const DiagonalGaussian& p, const DiagonalGaussian& q,
                     double alpha, std::size_t n_samples, std::uint64_t seed);

enum class DivergenceForm { Kl, Js, JsDual };
DivergenceForm divergence_form_from_string(const std::string& s);
std::string to_string(DivergenceForm f);

// mean/variance node pair of a distribution living on a graph (1xD rows)
struct DistNodes {
    NodeId mean = kNoNode;
    NodeId var = kNoNode;
};

// Differentiable divergence between two recorded diagonal Gaussians. alpha is
// treated as a constant; gradients flow to both distributions' parameters.
NodeId divergence_loss(Graph& g, const DistNodes& p, const DistNodes& q, double alpha,
                       DivergenceForm form);

}  // namespace npssl
