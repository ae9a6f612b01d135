#include <catch2/catch_amalgamated.hpp>

#include <flexitokens/objectives.hpp>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "helpers.hpp"

using namespace ftok;
using Catch::Approx;

namespace {
const RateSpec kEnSpec{0.333, 0.264, 0.023, 3.0};
}

TEST_CASE("band loss is zero inside and linear outside", "[objectives]") {
    REQUIRE(flexitokens_loss(300.0, 1000, kEnSpec) == Approx(0.0).margin(1e-15));
    REQUIRE(flexitokens_loss(400.0, 1000, kEnSpec) == Approx(0.067).margin(1e-12));
    REQUIRE(flexitokens_loss(200.0, 1000, kEnSpec) == Approx(0.064).margin(1e-12));
    // exactly on the edges is free
    REQUIRE(flexitokens_loss(333.0, 1000, kEnSpec) == Approx(0.0).margin(1e-12));
    REQUIRE(flexitokens_loss(264.0, 1000, kEnSpec) == Approx(0.0).margin(1e-12));
    REQUIRE_THROWS_AS(flexitokens_loss(1.0, 0, kEnSpec), ConfigError);
}

TEST_CASE("band absorbs anything between beta and alpha", "[objectives]") {
    Rng rng(611);
    for (int c = 0; c < 250; ++c) {
        int N = 10 + static_cast<int>(rng.below(500));
        double alpha = 0.1 + 0.8 * rng.uniform01();
        double beta = alpha * (0.3 + 0.69 * rng.uniform01());
        RateSpec spec{alpha, beta, 0.0, 0.0};
        double r = beta + (alpha - beta) * rng.uniform01();
        REQUIRE(flexitokens_loss(r * N, N, spec) == Approx(0.0).margin(1e-12));
        REQUIRE(flexitokens_loss_dk(r * N, N, spec) == 0.0);
        // stepping outside turns the loss on with the right sign
        double above = alpha + (1.0 - alpha) * rng.uniform_open();
        double below = beta * (1.0 - rng.uniform_open());
        REQUIRE(flexitokens_loss(above * N, N, spec) == Approx(above - alpha).margin(1e-9));
        REQUIRE(flexitokens_loss(below * N, N, spec) == Approx(beta - below).margin(1e-9));
        REQUIRE(flexitokens_loss_dk(above * N, N, spec) == Approx(1.0 / N));
        REQUIRE(flexitokens_loss_dk(below * N, N, spec) == Approx(-1.0 / N));
    }
}

TEST_CASE("band loss escalates monotonically away from the band", "[objectives]") {
    // walking k outward never decreases the penalty
    for (int k = 333; k <= 1000; ++k)
        REQUIRE(flexitokens_loss(k + 1.0, 1000, kEnSpec) >=
                flexitokens_loss(static_cast<double>(k), 1000, kEnSpec));
    for (int k = 264; k >= 1; --k)
        REQUIRE(flexitokens_loss(k - 1.0, 1000, kEnSpec) >=
                flexitokens_loss(static_cast<double>(k), 1000, kEnSpec));
}

TEST_CASE("count likelihood penalty matches closed forms", "[objectives]") {
    // -ln( C(10,5) / 2^10 ) = -ln(252/1024)
    REQUIRE(binomial_regularizer(5.0, 10, 0.5) == Approx(-std::log(252.0 / 1024.0)).margin(1e-12));
    REQUIRE(binomial_regularizer(5.0, 10, 0.5) == Approx(1.4020).margin(1e-4));
    // N=1: -ln(alpha) at k=1
    REQUIRE(binomial_regularizer(1.0, 1, 0.5) == Approx(std::log(2.0)).margin(1e-12));
    REQUIRE(binomial_regularizer(0.0, 1, 0.25) == Approx(-std::log(0.75)).margin(1e-12));
    REQUIRE_THROWS_AS(binomial_regularizer(2.0, 1, 0.5), ConfigError);
    REQUIRE_THROWS_AS(binomial_regularizer(-1.0, 10, 0.5), ConfigError);
    REQUIRE_THROWS_AS(binomial_regularizer(5.0, 10, 0.0), ConfigError);
    REQUIRE_THROWS_AS(binomial_regularizer(5.0, 10, 1.0), ConfigError);
}

TEST_CASE("count penalty derivative matches finite differences", "[objectives]") {
    Rng rng(622);
    for (int c = 0; c < 200; ++c) {
        int N = 4 + static_cast<int>(rng.below(400));
        double alpha = 0.05 + 0.9 * rng.uniform01();
        // keep k away from the [0, N] walls so the symmetric probe stays legal
        double k = 1.0 + (static_cast<double>(N) - 2.0) * rng.uniform01();
        double h = 1e-5 * static_cast<double>(N);
        double fd = (binomial_regularizer(k + h, N, alpha) - binomial_regularizer(k - h, N, alpha)) /
                    (2.0 * h);
        REQUIRE(binomial_regularizer_dk(k, N, alpha) == Approx(fd).margin(1e-4));
    }
    // the penalty is minimized near its own mean, so the slope crosses zero there
    REQUIRE(binomial_regularizer_dk(50.0, 100, 0.5) == Approx(0.0).margin(1e-3));
}

TEST_CASE("variant table routes value and slope", "[objectives]") {
    REQUIRE(boundary_loss_value(400.0, 1000, kEnSpec, LossVariant::flexitokens) ==
            Approx(0.067).margin(1e-9));
    REQUIRE(boundary_loss_value(5.0, 10, RateSpec{0.5, 0.4, 0.0, 0.0}, LossVariant::binomial) ==
            Approx(1.4020).margin(1e-4));
    REQUIRE(boundary_loss_value(30.0, 120, kEnSpec, LossVariant::minimize_rate) == Approx(0.25));
    REQUIRE(boundary_loss_dk(30.0, 120, kEnSpec, LossVariant::minimize_rate) ==
            Approx(1.0 / 120.0));

    REQUIRE(loss_variant_from_string("binomial") == LossVariant::binomial);
    REQUIRE(loss_variant_from_string("flexitokens") == LossVariant::flexitokens);
    REQUIRE(loss_variant_from_string("minimize-rate") == LossVariant::minimize_rate);
    REQUIRE(loss_variant_from_string("minimize_rate") == LossVariant::minimize_rate);
    REQUIRE_THROWS_AS(loss_variant_from_string("nope"), ConfigError);
    REQUIRE(to_string(LossVariant::binomial) == "binomial");
    REQUIRE(loss_variant_from_string(to_string(LossVariant::minimize_rate)) ==
            LossVariant::minimize_rate);
}

TEST_CASE("tape boundary loss pushes gradient into the count", "[objectives]") {
    // above the band: d(loss)/dk = 1/N reaches the ksum node
    ParamStore ps;
    ps.add("k", Mat::Constant(1, 1, 400.0));
    GradSink sink = ps.make_sink();
    Tape t(&sink);
    Var ksum = ps.var(t, 0);
    Var loss = boundary_loss_var(t, ksum, 1000, kEnSpec, LossVariant::flexitokens);
    REQUIRE(t.val(loss)(0, 0) == Approx(0.067).margin(1e-9));
    t.backward(loss);
    REQUIRE(sink.grad(0)(0, 0) == Approx(1.0 / 1000.0));

    // binomial variant: slope matches the closed-form derivative
    ParamStore ps2;
    ps2.add("k", Mat::Constant(1, 1, 30.0));
    GradSink sink2 = ps2.make_sink();
    Tape t2(&sink2);
    Var loss2 = boundary_loss_var(t2, ps2.var(t2, 0), 100, RateSpec{0.5, 0.4, 0.0, 0.0},
                                  LossVariant::binomial);
    REQUIRE(t2.val(loss2)(0, 0) == Approx(binomial_regularizer(30.0, 100, 0.5)).margin(1e-12));
    t2.backward(loss2);
    REQUIRE(sink2.grad(0)(0, 0) == Approx(binomial_regularizer_dk(30.0, 100, 0.5)).margin(1e-12));
}

TEST_CASE("plain cross entropy averages counted targets only", "[objectives]") {
    Mat logits = Mat::Zero(3, 258);  // uniform rows
    std::vector<int> targets{5, -1, 77};
    REQUIRE(lm_cross_entropy(logits, targets) == Approx(std::log(258.0)).margin(1e-12));
    REQUIRE_THROWS_AS(lm_cross_entropy(logits, {1, 2}), ConfigError);
    REQUIRE_THROWS_AS(lm_cross_entropy(logits, {1, 2, 258}), DataError);
    REQUIRE_THROWS_AS(lm_cross_entropy(logits, {-1, -1, -1}), DataError);

    // shift invariance: adding a constant per row changes nothing
    Rng rng(633);
    Mat raw = testutil::random_mat(4, 9, rng);
    Mat shifted = raw;
    for (Eigen::Index r = 0; r < shifted.rows(); ++r) shifted.row(r).array() += 100.0;
    std::vector<int> tg{0, 3, 8, 2};
    REQUIRE(lm_cross_entropy(raw, tg) == Approx(lm_cross_entropy(shifted, tg)).margin(1e-9));
}

TEST_CASE("batch objective pools targets and averages boundary terms", "[objectives]") {
    std::map<std::string, RateSpec> specs;
    specs["en"] = kEnSpec;
    specs["te"] = RateSpec{0.124, 0.100, 0.008, 3.0};

    SeqLossParts a;  // english, above band by 0.067
    a.ce_sum = 10.0;
    a.n_targets = 4;
    a.k = 40.0;
    a.N = 100;
    a.lang = "en";
    SeqLossParts b;  // telugu, inside band
    b.ce_sum = 2.0;
    b.n_targets = 2;
    b.k = 11.0;
    b.N = 100;
    b.lang = "te";

    BatchLoss out = total_objective({a, b}, specs, LossVariant::flexitokens);
    REQUIRE(out.total_targets == 6);
    REQUIRE(out.lm_loss == Approx(12.0 / 6.0).margin(1e-12));
    REQUIRE(out.boundary_loss == Approx((0.067 + 0.0) / 2.0).margin(1e-9));
    REQUIRE(out.total == Approx(out.lm_loss + out.boundary_loss).margin(1e-12));

    // each sequence is judged against its own language's band
    SeqLossParts c = b;
    c.lang = "en";  // k/N = 0.11 is under the english floor 0.264
    BatchLoss out2 = total_objective({c}, specs, LossVariant::flexitokens);
    REQUIRE(out2.boundary_loss == Approx(0.264 - 0.11).margin(1e-9));

    SeqLossParts d = b;
    d.lang = "xx";
    REQUIRE_THROWS_AS(total_objective({d}, specs, LossVariant::flexitokens), ConfigError);
    REQUIRE_THROWS_AS(total_objective({}, specs, LossVariant::flexitokens), ConfigError);
    SeqLossParts e = a;
    e.n_targets = 0;
    REQUIRE_THROWS_AS(total_objective({e}, specs, LossVariant::flexitokens), DataError);
}

TEST_CASE("digamma matches the classic values", "[objectives]") {
    // psi(1) = -gamma, psi(2) = 1 - gamma
    const double gamma = 0.5772156649015329;
    REQUIRE(digamma(1.0) == Approx(-gamma).margin(1e-10));
    REQUIRE(digamma(2.0) == Approx(1.0 - gamma).margin(1e-10));
    REQUIRE(digamma(0.5) == Approx(-gamma - 2.0 * std::log(2.0)).margin(1e-10));
    // recurrence psi(x+1) = psi(x) + 1/x on random draws
    Rng rng(644);
    for (int c = 0; c < 100; ++c) {
        double x = 0.2 + 20.0 * rng.uniform01();
        REQUIRE(digamma(x + 1.0) == Approx(digamma(x) + 1.0 / x).margin(1e-9));
    }
    REQUIRE_THROWS_AS(digamma(0.0), ConfigError);
}
