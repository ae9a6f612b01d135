#pragma once

// Boundary-rate losses and the combined batch objective.
//
// binomial: -log[ C(N,k) alpha^k (1-alpha)^(N-k) ], smooth in k through
// log-gamma, pulls k/N to alpha. hinge band: max(k/N - alpha, 0) +
// max(beta - k/N, 0), zero anywhere inside [beta, alpha]. minimize_rate is
// the deliberately broken k/N objective kept around to demonstrate collapse.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "flexitokens/autograd.hpp"
#include "flexitokens/calibration.hpp"
#include "flexitokens/common.hpp"

namespace ftok {

// digamma via upward recurrence into the asymptotic series
inline double digamma(double x) {
    if (!(x > 0.0)) throw ConfigError("digamma: x must be positive");
    double r = 0.0;
    while (x < 6.0) {
        r -= 1.0 / x;
        x += 1.0;
    }
    double inv = 1.0 / x, inv2 = inv * inv;
    // ln x - 1/2x - 1/12x^2 + 1/120x^4 - 1/252x^6
    return r + std::log(x) - 0.5 * inv +
           inv2 * (-1.0 / 12.0 + inv2 * (1.0 / 120.0 - inv2 / 252.0));
}

inline void check_binomial_args(double k, int N, double alpha) {
    if (N < 1) throw ConfigError("binomial_regularizer: N must be >= 1");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("binomial_regularizer: alpha must be strictly inside (0,1)");
    if (k < 0.0 || k > static_cast<double>(N))
        throw ConfigError("binomial_regularizer: k must lie in [0, N]");
}

inline double binomial_regularizer(double k, int N, double alpha) {
    check_binomial_args(k, N, alpha);
    double n = static_cast<double>(N);
    double log_pmf = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                     k * std::log(alpha) + (n - k) * std::log1p(-alpha);
    return -log_pmf;
}

inline double binomial_regularizer_dk(double k, int N, double alpha) {
    check_binomial_args(k, N, alpha);
    double n = static_cast<double>(N);
    return digamma(k + 1.0) - digamma(n - k + 1.0) - std::log(alpha) + std::log1p(-alpha);
}

inline double flexitokens_loss(double k, int N, const RateSpec& spec) {
    if (N < 1) throw ConfigError("flexitokens_loss: N must be >= 1");
    spec.validate();
    double r = k / static_cast<double>(N);
    double over = r - spec.alpha;
    double under = spec.beta - r;
    return (over > 0.0 ? over : 0.0) + (under > 0.0 ? under : 0.0);
}

// subgradient in k; zero chosen at the kinks
inline double flexitokens_loss_dk(double k, int N, const RateSpec& spec) {
    if (N < 1) throw ConfigError("flexitokens_loss: N must be >= 1");
    double r = k / static_cast<double>(N);
    if (r > spec.alpha) return 1.0 / static_cast<double>(N);
    if (r < spec.beta) return -1.0 / static_cast<double>(N);
    return 0.0;
}

enum class LossVariant {
    binomial,
    flexitokens,
    minimize_rate,  // diagnostic only: unbounded k/N minimization (collapses)
};

inline LossVariant loss_variant_from_string(const std::string& s) {
    if (s == "binomial") return LossVariant::binomial;
    if (s == "flexitokens") return LossVariant::flexitokens;
    if (s == "minimize-rate" || s == "minimize_rate") return LossVariant::minimize_rate;
    throw ConfigError("unknown loss kind: " + s);
}

inline std::string to_string(LossVariant v) {
    switch (v) {
        case LossVariant::binomial: return "binomial";
        case LossVariant::flexitokens: return "flexitokens";
        case LossVariant::minimize_rate: return "minimize-rate";
    }
    return "?";
}

inline double boundary_loss_value(double k, int N, const RateSpec& spec, LossVariant variant) {
    switch (variant) {
        case LossVariant::binomial: return binomial_regularizer(k, N, spec.alpha);
        case LossVariant::flexitokens: return flexitokens_loss(k, N, spec);
        case LossVariant::minimize_rate: return k / static_cast<double>(N);
    }
    throw ConfigError("bad loss variant");
}

inline double boundary_loss_dk(double k, int N, const RateSpec& spec, LossVariant variant) {
    switch (variant) {
        case LossVariant::binomial: return binomial_regularizer_dk(k, N, spec.alpha);
        case LossVariant::flexitokens: return flexitokens_loss_dk(k, N, spec);
        case LossVariant::minimize_rate: return 1.0 / static_cast<double>(N);
    }
    throw ConfigError("bad loss variant");
}

// ksum: 1x1 tape node holding k (sum of boundary values); the gradient flows
// back into the predictor through the straight-through contract.
inline Var boundary_loss_var(Tape& t, Var ksum, int N, const RateSpec& spec, LossVariant variant) {
    double k = t.val(ksum)(0, 0);
    return t.apply_scalar(ksum, boundary_loss_value(k, N, spec, variant),
                          boundary_loss_dk(k, N, spec, variant));
}

// -------- language-model cross entropy (plain, for evaluation paths) --------

// logits: T x V; targets[t] in [0,V) or -1 to skip. Returns mean nats per
// counted target. Throws if nothing is counted.
inline double lm_cross_entropy(const Mat& logits, const std::vector<int>& targets) {
    if (static_cast<Eigen::Index>(targets.size()) != logits.rows())
        throw ConfigError("lm_cross_entropy: one target per row required");
    double nll = 0.0;
    int count = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        int tgt = targets[static_cast<std::size_t>(r)];
        if (tgt < 0) continue;
        if (tgt >= logits.cols()) throw DataError("lm_cross_entropy: target out of range");
        double m = logits.row(r).maxCoeff();
        double z = (logits.row(r).array() - m).exp().sum();
        nll += -(logits(r, tgt) - m - std::log(z));
        ++count;
    }
    if (count == 0) throw DataError("lm_cross_entropy: no valid target positions");
    return nll / static_cast<double>(count);
}

// -------- batch objective --------

struct SeqLossParts {
    double ce_sum = 0.0;  // summed NLL in nats over this sequence's targets
    int n_targets = 0;
    double k = 0.0;       // boundary count (soft in soft_values mode)
    int N = 0;            // valid positions
    std::string lang;
};

struct BatchLoss {
    double lm_loss = 0.0;        // nats per target token, batch-pooled
    double boundary_loss = 0.0;  // mean per-sequence boundary term
    double total = 0.0;
    long total_targets = 0;
};

inline const RateSpec& spec_for_language(const std::map<std::string, RateSpec>& specs,
                                         const std::string& lang) {
    auto it = specs.find(lang);
    if (it == specs.end()) throw ConfigError("no rate spec for language '" + lang + "'");
    return it->second;
}

inline BatchLoss total_objective(const std::vector<SeqLossParts>& seqs,
                                 const std::map<std::string, RateSpec>& specs, LossVariant variant) {
    if (seqs.empty()) throw ConfigError("total_objective: empty batch");
    BatchLoss out;
    double nll = 0.0;
    long targets = 0;
    double bp = 0.0;
    for (const auto& s : seqs) {
        nll += s.ce_sum;
        targets += s.n_targets;
        bp += boundary_loss_value(s.k, s.N, spec_for_language(specs, s.lang), variant);
    }
    if (targets == 0) throw DataError("total_objective: batch has no target positions");
    out.lm_loss = nll / static_cast<double>(targets);
    out.boundary_loss = bp / static_cast<double>(seqs.size());
    out.total = out.lm_loss + out.boundary_loss;
    out.total_targets = targets;
    return out;
}

}  // namespace ftok
