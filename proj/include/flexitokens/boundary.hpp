#pragma once

// Boundary predictor: per-byte boundary probabilities from hidden states,
// hard 0/1 decisions via a noisy-sigmoid reparameterization, and the
// straight-through gradient contract.
//
// Semantics: b_t = 1 marks byte t as the LAST byte of its segment. The final
// valid position of a chunk is forced to fire (so every byte lives in a
// closed segment); the forced boundary is counted in k.

#include <cmath>
#include <cstdint>
#include <vector>

#include "flexitokens/autograd.hpp"
#include "flexitokens/common.hpp"

namespace ftok {

constexpr double kLogitClamp = 30.0;

struct BoundaryMask {
    std::vector<std::uint8_t> b;  // one entry per valid position, 0 or 1
    int k = 0;

    // positions (0-based) where a segment ends, in order
    std::vector<int> segment_ends() const {
        std::vector<int> ends;
        ends.reserve(static_cast<std::size_t>(k));
        for (std::size_t t = 0; t < b.size(); ++t)
            if (b[t]) ends.push_back(static_cast<int>(t));
        return ends;
    }
};

inline double boundary_rate(const BoundaryMask& mask, int valid_len) {
    if (valid_len < 1) throw ConfigError("rate: valid_len must be >= 1");
    return static_cast<double>(mask.k) / static_cast<double>(valid_len);
}

enum class BoundaryMode { stochastic, deterministic };

struct BoundaryOptions {
    BoundaryMode mode = BoundaryMode::stochastic;
    double temperature = 1.0;
    std::uint64_t noise_seed = 0;
    bool force_final = true;
    // Test hook: carry the SOFT relaxation forward instead of the hard 0/1
    // value (segment structure still comes from the hard decisions). Makes
    // the loss a smooth function of parameters so finite differences apply.
    bool soft_values = false;
    // Test hook: impose the hard decisions instead of sampling them.
    const std::vector<std::uint8_t>* override_mask = nullptr;
};

inline double clamped_logit(double p) {
    if (p <= 0.0) return -kLogitClamp;
    if (p >= 1.0) return kLogitClamp;
    double z = std::log(p) - std::log1p(-p);
    if (z > kLogitClamp) return kLogitClamp;
    if (z < -kLogitClamp) return -kLogitClamp;
    return z;
}

// Plain (value-level) hard sampling; the tape-aware version below shares its
// decision rule. Noise is logistic (a difference of two Gumbel draws) added
// to the clamped logit; temperature scales the soft relaxation only and
// cancels in the threshold test.
inline BoundaryMask sample_hard(const std::vector<double>& probs, double temperature,
                                BoundaryMode mode, std::uint64_t seed, bool force_final = true) {
    if (!(temperature > 0.0)) throw ConfigError("sample_hard: temperature must be > 0");
    BoundaryMask mask;
    mask.b.resize(probs.size());
    Rng rng(seed);
    for (std::size_t t = 0; t < probs.size(); ++t) {
        bool fire;
        if (mode == BoundaryMode::deterministic) {
            fire = probs[t] > 0.5;
        } else {
            double z = clamped_logit(probs[t]);
            double g = rng.logistic();
            fire = (z + g) > 0.0;  // == sigmoid((z+g)/T) > 0.5 for any T > 0
        }
        mask.b[t] = fire ? 1 : 0;
    }
    if (force_final && !mask.b.empty()) mask.b.back() = 1;
    mask.k = 0;
    for (auto v : mask.b) mask.k += v;
    return mask;
}

// -------- tape ops --------

// Soft relaxation s_t = sigmoid((clamped_logit(p_t) + g_t) / T) as a tape op
// over the probability column p (T x 1). noise[t] must hold the same draws
// used for the hard decision.
inline Var boundary_soft(Tape& t, Var p, const std::vector<double>& noise, double temperature) {
    const Mat& pv = t.val(p);
    if (pv.cols() != 1) throw ConfigError("boundary_soft: expected a column of probabilities");
    if (static_cast<std::size_t>(pv.rows()) != noise.size())
        throw ConfigError("boundary_soft: noise length mismatch");
    Eigen::Index n = pv.rows();
    Mat s(n, 1);
    Mat ds(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        double pi = pv(i, 0);
        double z = clamped_logit(pi);
        double u = (z + noise[static_cast<std::size_t>(i)]) / temperature;
        double si = 1.0 / (1.0 + std::exp(-u));
        s(i, 0) = si;
        bool saturated = pi <= 0.0 || pi >= 1.0 || std::abs(std::log(pi) - std::log1p(-pi)) > kLogitClamp;
        ds(i, 0) = saturated ? 0.0 : si * (1.0 - si) / (temperature * pi * (1.0 - pi));
    }
    return t.custom(std::move(s), t.needs(p), [p, ds = std::move(ds)](Tape& tp, const Mat& g) {
        tp.accum(p, g.cwiseProduct(ds).eval());
    });
}

// Straight-through: forward value is the hard 0/1 column, backward passes the
// upstream gradient to the soft relaxation unchanged.
inline Var hard_st(Tape& t, Var soft, const std::vector<std::uint8_t>& hard) {
    const Mat& sv = t.val(soft);
    if (static_cast<std::size_t>(sv.rows()) != hard.size() || sv.cols() != 1)
        throw ConfigError("hard_st: shape mismatch");
    Mat h(sv.rows(), 1);
    for (Eigen::Index i = 0; i < h.rows(); ++i) h(i, 0) = hard[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    return t.custom(std::move(h), t.needs(soft),
                    [soft](Tape& tp, const Mat& g) { tp.accum(soft, g); });
}

struct BoundarySample {
    Var soft;          // the relaxation the gradient flows through
    Var values;        // what downstream consumers multiply/sum: hard via
                       // straight-through, or the soft values in soft_values mode
    BoundaryMask mask; // plain hard decisions (always hard, even in soft_values mode)
};

// Full sampling pipeline on the tape. p must be valid_len x 1.
inline BoundarySample sample_boundaries(Tape& t, Var p, const BoundaryOptions& opts) {
    const Mat& pv = t.val(p);
    int n = static_cast<int>(pv.rows());
    if (n < 1) throw ConfigError("sample_boundaries: empty probability column");
    if (!(opts.temperature > 0.0)) throw ConfigError("sample_boundaries: temperature must be > 0");

    BoundarySample out;
    std::vector<double> noise;
    if (opts.mode == BoundaryMode::stochastic) {
        noise.resize(static_cast<std::size_t>(n));
        Rng rng(opts.noise_seed);
        for (auto& g : noise) g = rng.logistic();
        out.soft = boundary_soft(t, p, noise, opts.temperature);
    } else {
        out.soft = p;  // deterministic mode: the soft value is the probability itself
    }

    // hard decisions
    out.mask.b.resize(static_cast<std::size_t>(n));
    if (opts.override_mask) {
        if (opts.override_mask->size() != static_cast<std::size_t>(n))
            throw ConfigError("sample_boundaries: override mask length mismatch");
        out.mask.b = *opts.override_mask;
    } else if (opts.mode == BoundaryMode::deterministic) {
        for (int i = 0; i < n; ++i) out.mask.b[static_cast<std::size_t>(i)] = pv(i, 0) > 0.5 ? 1 : 0;
    } else {
        for (int i = 0; i < n; ++i) {
            double z = clamped_logit(pv(i, 0));
            out.mask.b[static_cast<std::size_t>(i)] =
                (z + noise[static_cast<std::size_t>(i)]) > 0.0 ? 1 : 0;
        }
    }
    if (opts.force_final) out.mask.b.back() = 1;
    out.mask.k = 0;
    for (auto v : out.mask.b) out.mask.k += v;

    out.values = opts.soft_values ? out.soft : hard_st(t, out.soft, out.mask.b);
    return out;
}

// -------- the predictor MLP --------

// Two linear layers with a GELU between, sigmoid on top; one logit per byte.
struct BoundaryPredictor {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0;

    static BoundaryPredictor init(ParamStore& ps, int d_model, int d_hidden, Rng& rng,
                                  double init_scale = 0.02) {
        BoundaryPredictor bp;
        Mat w1v(d_model, d_hidden), w2v(d_hidden, 1);
        for (Eigen::Index i = 0; i < w1v.size(); ++i) w1v(i) = rng.normal(0.0, init_scale);
        for (Eigen::Index i = 0; i < w2v.size(); ++i) w2v(i) = rng.normal(0.0, init_scale);
        bp.w1 = ps.add("boundary.w1", std::move(w1v));
        bp.b1 = ps.add("boundary.b1", Mat::Zero(1, d_hidden));
        bp.w2 = ps.add("boundary.w2", std::move(w2v));
        bp.b2 = ps.add("boundary.b2", Mat::Zero(1, 1));
        return bp;
    }

    static BoundaryPredictor from_store(const ParamStore& ps) {
        BoundaryPredictor bp;
        bp.w1 = ps.id_of("boundary.w1");
        bp.b1 = ps.id_of("boundary.b1");
        bp.w2 = ps.id_of("boundary.w2");
        bp.b2 = ps.id_of("boundary.b2");
        return bp;
    }

    // hidden: T x d_model -> probabilities T x 1
    Var probs(Tape& t, const ParamStore& ps, Var hidden) const {
        if (t.val(hidden).cols() != ps.value(w1).rows())
            throw ConfigError("predict_probs: hidden width does not match predictor parameters");
        Var h = t.add_bias(t.matmul(hidden, ps.var(t, w1)), ps.var(t, b1));
        h = t.gelu(h);
        Var logits = t.add_bias(t.matmul(h, ps.var(t, w2)), ps.var(t, b2));
        return t.sigmoid(logits);
    }
};

}  // namespace ftok
