#include "npssl/divergence.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "npssl/rng.hpp"

namespace npssl {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

void require_same_dim(const DiagonalGaussian& p, const DiagonalGaussian& q) {
    if (p.dim() != q.dim())
        throw std::invalid_argument("divergence: dimension mismatch (" + std::to_string(p.dim()) +
                                    " vs " + std::to_string(q.dim()) + ")");
}

void require_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("divergence: alpha outside [0,1]");
}

}  // namespace

DiagonalGaussian::DiagonalGaussian(std::vector<double> mean_, std::vector<double> var_)
    : mean(std::move(mean_)), var(std::move(var_)) {
    if (mean.empty()) throw std::invalid_argument("gaussian: dimension must be >= 1");
    if (mean.size() != var.size()) throw std::invalid_argument("gaussian: mean/variance length mismatch");
    for (double v : var) {
        if (!std::isfinite(v) || v < kVarianceFloor)
            throw std::invalid_argument("gaussian: variance below floor");
    }
    for (double m : mean)
        if (!std::isfinite(m)) throw std::invalid_argument("gaussian: non-finite mean");
}

double DiagonalGaussian::logpdf(const std::vector<double>& x) const {
    double acc = 0.0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        const double d = x[i] - mean[i];
        acc += std::log(kTwoPi * var[i]) + d * d / var[i];
    }
    return -0.5 * acc;
}

UncertaintyStats::UncertaintyStats(double ctx, double tgt)
    : u_context_avg(ctx), u_target_avg(tgt), alpha_u(alpha_from_uncertainty(ctx, tgt)) {}

double alpha_from_uncertainty(double u_context_avg, double u_target_avg) {
    if (u_context_avg < 0.0 || u_target_avg < 0.0)
        throw std::invalid_argument("alpha_from_uncertainty: negative uncertainty");
    const double denom = u_context_avg + u_target_avg;
    if (denom == 0.0) return 0.5;
    return u_context_avg / denom;
}

double kl_diag(const DiagonalGaussian& p, const DiagonalGaussian& q) {
    require_same_dim(p, q);
    const std::size_t d = p.dim();
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double r = p.var[i] / q.var[i];
        const double md = q.mean[i] - p.mean[i];
        const double quad = md * md / q.var[i];
        acc += (r + quad) + (std::log(q.var[i]) - std::log(p.var[i]));
    }
    return 0.5 * (acc - static_cast<double>(d));
}

DiagonalGaussian geometric_mean(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha) {
    require_same_dim(p, q);
    require_alpha(alpha);
    if (alpha == 0.0) return p;
    if (alpha == 1.0) return q;
    const std::size_t d = p.dim();
    std::vector<double> mean(d), var(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double prec = (1.0 - alpha) / p.var[i] + alpha / q.var[i];
        var[i] = std::max(kVarianceFloor, 1.0 / prec);
        mean[i] = var[i] * ((1.0 - alpha) * p.mean[i] / p.var[i] + alpha * q.mean[i] / q.var[i]);
    }
    return DiagonalGaussian(std::move(mean), std::move(var));
}

double js_skew(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha) {
    require_same_dim(p, q);
    require_alpha(alpha);
    if (alpha == 0.0 || alpha == 1.0) return 0.0;
    const DiagonalGaussian g = geometric_mean(p, q, alpha);
    const std::size_t d = p.dim();
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double tr = ((1.0 - alpha) * p.var[i] + alpha * q.var[i]) / g.var[i];
        const double dp = g.mean[i] - p.mean[i];
        const double dq = g.mean[i] - q.mean[i];
        const double quad = (1.0 - alpha) * dp * dp / g.var[i] + alpha * dq * dq / g.var[i];
        const double logdet =
            std::log(g.var[i]) - ((1.0 - alpha) * std::log(p.var[i]) + alpha * std::log(q.var[i]));
        acc += tr + quad + logdet;
    }
    return 0.5 * (acc - static_cast<double>(d));
}

double js_skew_dual(const DiagonalGaussian& p, const DiagonalGaussian& q, double alpha) {
    require_same_dim(p, q);
    require_alpha(alpha);
    if (alpha == 0.0 || alpha == 1.0) return 0.0;
    const DiagonalGaussian g = geometric_mean(p, q, alpha);
    const std::size_t d = p.dim();
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double logdet =
            ((1.0 - alpha) * std::log(p.var[i]) + alpha * std::log(q.var[i])) - std::log(g.var[i]);
        const double quad = (1.0 - alpha) * p.mean[i] * p.mean[i] / p.var[i] +
                            alpha * q.mean[i] * q.mean[i] / q.var[i] -
                            g.mean[i] * g.mean[i] / g.var[i];
        acc += logdet + quad;
    }
    return 0.5 * acc;
}

DivergenceKind divergence_kind_from_string(const std::string& s) {
    if (s == "kl") return DivergenceKind::Kl;
    if (s == "js_skew") return DivergenceKind::JsSkew;
    if (s == "js_skew_dual") return DivergenceKind::JsSkewDual;
    throw std::invalid_argument("unknown divergence kind: " + s);
}

std::string to_string(DivergenceKind k) {
    switch (k) {
        case DivergenceKind::Kl: return "kl";
        case DivergenceKind::JsSkew: return "js_skew";
        case DivergenceKind::JsSkewDual: return "js_skew_dual";
    }
    return "?";
}

namespace {

// One dimension of the unnormalized geometric mixture, integrated with
// composite Simpson over a range wide enough that the truncated tails are far
// below the Monte-Carlo noise this backs.
struct MixtureDim {
    double mean = 0.0;
    double var = 1.0;
};

MixtureDim quadrature_mixture_dim(double mp, double vp, double mq, double vq, double alpha) {
    const double sp = std::sqrt(vp), sq = std::sqrt(vq);
    const double lo = std::min(mp - 13.0 * sp, mq - 13.0 * sq);
    const double hi = std::max(mp + 13.0 * sp, mq + 13.0 * sq);
    const std::size_t n = 16384;  // even
    const double h = (hi - lo) / static_cast<double>(n);

    auto log_w = [&](double x) {
        const double dp = x - mp, dq = x - mq;
        const double lp = -0.5 * (std::log(kTwoPi * vp) + dp * dp / vp);
        const double lq = -0.5 * (std::log(kTwoPi * vq) + dq * dq / vq);
        return (1.0 - alpha) * lp + alpha * lq;
    };

    double z = 0.0, m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i <= n; ++i) {
        const double x = lo + h * static_cast<double>(i);
        const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
        const double f = std::exp(log_w(x));
        z += w * f;
        m1 += w * f * x;
        m2 += w * f * x * x;
    }
    const double scale = h / 3.0;
    MixtureDim out;
    const double zz = z * scale;
    out.mean = m1 * scale / zz;
    out.var = m2 * scale / zz - out.mean * out.mean;
    return out;
}

struct RunningMean {
    double mean = 0.0, m2 = 0.0;
    std::size_t n = 0;
    void push(double x) {
        ++n;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
    }
    double variance() const { return n > 1 ? m2 / static_cast<double>(n - 1) : 0.0; }
};

}  // namespace

McResult mc_estimate(DivergenceKind kind, const DiagonalGaussian& p, const DiagonalGaussian& q,
                     double alpha, std::size_t n_samples, std::uint64_t seed) {
    require_same_dim(p, q);
    require_alpha(alpha);
    if (n_samples < 10000) throw std::invalid_argument("mc_estimate: n_samples must be >= 1e4");

    const std::size_t d = p.dim();
    Rng rng(derive_seed(seed, 0x6d63u));
    std::vector<double> x(d);

    auto draw = [&](const std::vector<double>& mean, const std::vector<double>& var) {
        for (std::size_t i = 0; i < d; ++i) x[i] = mean[i] + std::sqrt(var[i]) * rng.normal();
    };

    if (kind == DivergenceKind::Kl) {
        RunningMean acc;
        for (std::size_t s = 0; s < n_samples; ++s) {
            draw(p.mean, p.var);
            acc.push(p.logpdf(x) - q.logpdf(x));
        }
        return {acc.mean, std::sqrt(acc.variance() / static_cast<double>(n_samples))};
    }

    // The normalized geometric mixture of Gaussians is itself Gaussian; its
    // per-dimension moments come from quadrature, and its density is then
    // evaluated as an ordinary Gaussian logpdf. This route never touches the
    // closed-form mixture parameters, and keeps the integrands genuinely
    // random so the standard error reflects real sampling noise.
    std::vector<double> gm(d), gv(d);
    for (std::size_t i = 0; i < d; ++i) {
        const MixtureDim md = quadrature_mixture_dim(p.mean[i], p.var[i], q.mean[i], q.var[i], alpha);
        gm[i] = md.mean;
        gv[i] = std::max(kVarianceFloor, md.var);
    }
    const DiagonalGaussian g_quad(gm, gv);

    if (kind == DivergenceKind::JsSkew) {
        RunningMean from_p, from_q;
        for (std::size_t s = 0; s < n_samples; ++s) {
            draw(p.mean, p.var);
            from_p.push(p.logpdf(x) - g_quad.logpdf(x));
        }
        for (std::size_t s = 0; s < n_samples; ++s) {
            draw(q.mean, q.var);
            from_q.push(q.logpdf(x) - g_quad.logpdf(x));
        }
        const double est = (1.0 - alpha) * from_p.mean + alpha * from_q.mean;
        const double var_est =
            (1.0 - alpha) * (1.0 - alpha) * from_p.variance() / static_cast<double>(n_samples) +
            alpha * alpha * from_q.variance() / static_cast<double>(n_samples);
        return {est, std::sqrt(var_est)};
    }

    // Dual: both expectations run under the mixture. They get independent
    // draws; a shared stream would make the combined integrand pointwise
    // constant (the log-ratios cancel to -log Z) and leave no sampling
    // variance for the standard error to measure.
    RunningMean to_p, to_q;
    for (std::size_t s = 0; s < n_samples; ++s) {
        draw(gm, gv);
        to_p.push(g_quad.logpdf(x) - p.logpdf(x));
    }
    for (std::size_t s = 0; s < n_samples; ++s) {
        draw(gm, gv);
        to_q.push(g_quad.logpdf(x) - q.logpdf(x));
    }
    const double est = (1.0 - alpha) * to_p.mean + alpha * to_q.mean;
    const double var_est =
        (1.0 - alpha) * (1.0 - alpha) * to_p.variance() / static_cast<double>(n_samples) +
        alpha * alpha * to_q.variance() / static_cast<double>(n_samples);
    return {est, std::sqrt(var_est)};
}

DivergenceForm divergence_form_from_string(const std::string& s) {
    if (s == "kl") return DivergenceForm::Kl;
    if (s == "js") return DivergenceForm::Js;
    if (s == "js_dual") return DivergenceForm::JsDual;
    throw std::invalid_argument("unknown divergence form: " + s);
}

std::string to_string(DivergenceForm f) {
    switch (f) {
        case DivergenceForm::Kl: return "kl";
        case DivergenceForm::Js: return "js";
        case DivergenceForm::JsDual: return "js_dual";
    }
    return "?";
}

NodeId divergence_loss(Graph& g, const DistNodes& p, const DistNodes& q, double alpha,
                       DivergenceForm form) {
    require_alpha(alpha);
    const Tensor& mp = g.value(p.mean);
    if (mp.rank() != 2 || mp.rows() != 1)
        throw std::invalid_argument("divergence_loss: distribution parameters must be 1xD rows");
    const std::size_t d = mp.cols();
    if (g.value(p.var).cols() != d || g.value(q.mean).cols() != d || g.value(q.var).cols() != d)
        throw std::invalid_argument("divergence_loss: dimension mismatch");

    if (form == DivergenceForm::Kl) {
        // 0.5 * sum(vp/vq + (mq-mp)^2/vq + log vq - log vp) - D/2
        const NodeId r = g.div(p.var, q.var);
        const NodeId md = g.sub(q.mean, p.mean);
        const NodeId quad = g.div(g.mul(md, md), q.var);
        const NodeId logs = g.sub(g.log(q.var), g.log(p.var));
        const NodeId sum = g.sum_all(g.add(g.add(r, quad), logs));
        return g.scale(g.offset(sum, -static_cast<double>(d)), 0.5);
    }

    // geometric mixture parameters on the graph
    const NodeId ones = g.leaf(Tensor({1, d}, std::vector<double>(d, 1.0)));
    const NodeId prec =
        g.add(g.scale(g.div(ones, p.var), 1.0 - alpha), g.scale(g.div(ones, q.var), alpha));
    const NodeId va = g.div(ones, prec);
    const NodeId ma = g.mul(
        va, g.add(g.scale(g.div(p.mean, p.var), 1.0 - alpha), g.scale(g.div(q.mean, q.var), alpha)));

    if (form == DivergenceForm::Js) {
        const NodeId tr = g.div(g.add(g.scale(p.var, 1.0 - alpha), g.scale(q.var, alpha)), va);
        const NodeId dp = g.sub(ma, p.mean);
        const NodeId dq = g.sub(ma, q.mean);
        const NodeId quad = g.add(g.scale(g.div(g.mul(dp, dp), va), 1.0 - alpha),
                                  g.scale(g.div(g.mul(dq, dq), va), alpha));
        const NodeId logdet = g.sub(
            g.log(va), g.add(g.scale(g.log(p.var), 1.0 - alpha), g.scale(g.log(q.var), alpha)));
        const NodeId sum = g.sum_all(g.add(g.add(tr, quad), logdet));
        return g.scale(g.offset(sum, -static_cast<double>(d)), 0.5);
    }

    const NodeId logdet = g.sub(
        g.add(g.scale(g.log(p.var), 1.0 - alpha), g.scale(g.log(q.var), alpha)), g.log(va));
    const NodeId tp = g.scale(g.div(g.mul(p.mean, p.mean), p.var), 1.0 - alpha);
    const NodeId tq = g.scale(g.div(g.mul(q.mean, q.mean), q.var), alpha);
    const NodeId ta = g.div(g.mul(ma, ma), va);
    const NodeId sum = g.sum_all(g.sub(g.add(logdet, g.add(tp, tq)), ta));
    return g.scale(sum, 0.5);
}

}  // namespace npssl
