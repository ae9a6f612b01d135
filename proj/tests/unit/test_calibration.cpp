#include <catch2/catch_amalgamated.hpp>

#include <flexitokens/calibration.hpp>

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "helpers.hpp"

using namespace ftok;
using Catch::Approx;
using testutil::TempDir;

TEST_CASE("alpha scales inversely with mean byte length", "[calibration]") {
    bool clamped = true;
    // same length as the anchor: keep the anchor's rate
    REQUIRE(derive_alpha(0.333, 10.0, 10.0, &clamped) == Approx(0.333).margin(1e-12));
    REQUIRE_FALSE(clamped);
    // twice as long in bytes: half the rate
    REQUIRE(derive_alpha(0.5, 10.0, 20.0) == Approx(0.25).margin(1e-12));
    // shorter than anchor enough to push past 1.0: clamp and flag it
    REQUIRE(derive_alpha(0.9, 10.0, 5.0, &clamped) == Approx(1.0));
    REQUIRE(clamped);

    REQUIRE_THROWS_AS(derive_alpha(0.5, 0.0, 10.0), ConfigError);
    REQUIRE_THROWS_AS(derive_alpha(0.5, 10.0, -1.0), ConfigError);
    REQUIRE_THROWS_AS(derive_alpha(1.5, 10.0, 10.0), ConfigError);
}

TEST_CASE("sigma is the population std of implied per-sample rates", "[calibration]") {
    // lengths 5 and 10 under alpha_A=0.5, mu_A=10 imply rates 1.0 and 0.5
    REQUIRE(derive_sigma(0.5, 10.0, {5.0, 10.0}) == Approx(0.25).margin(1e-12));
    // identical lengths: zero spread
    REQUIRE(derive_sigma(0.3, 12.0, {7.0, 7.0, 7.0}) == Approx(0.0).margin(1e-15));
    REQUIRE_THROWS_AS(derive_sigma(0.5, 10.0, {}), ConfigError);
    REQUIRE_THROWS_AS(derive_sigma(0.5, 10.0, {4.0, 0.0}), ConfigError);
}

TEST_CASE("sigma ignores sample order", "[calibration]") {
    Rng rng(411);
    for (int c = 0; c < 200; ++c) {
        int n = 2 + static_cast<int>(rng.below(12));
        std::vector<double> lens;
        for (int i = 0; i < n; ++i) lens.push_back(3.0 + 40.0 * rng.uniform01());
        double base = derive_sigma(0.4, 15.0, lens);
        auto perm = stable_shuffle(lens.size(), 1000 + c);
        std::vector<double> shuffled;
        for (auto i : perm) shuffled.push_back(lens[i]);
        REQUIRE(derive_sigma(0.4, 15.0, shuffled) == Approx(base).margin(1e-12));
        REQUIRE(base >= 0.0);
    }
}

TEST_CASE("beta backs off lambda sigmas below alpha, with a floor", "[calibration]") {
    REQUIRE(derive_beta(0.333, 0.023, 3.0) == Approx(0.264).margin(1e-12));
    // lambda 0 collapses the band to a point
    REQUIRE(derive_beta(0.2, 0.05, 0.0) == Approx(0.2).margin(1e-15));
    // 0.039 - 3*0.02 would go negative; floor catches it
    REQUIRE(derive_beta(0.039, 0.02, 3.0) == Approx(0.005).margin(1e-15));
    REQUIRE_THROWS_AS(derive_beta(0.0, 0.01, 3.0), ConfigError);
    REQUIRE_THROWS_AS(derive_beta(0.3, -0.1, 3.0), ConfigError);
    REQUIRE_THROWS_AS(derive_beta(0.3, 0.01, -1.0), ConfigError);
    // floor must sit strictly inside (0, alpha)
    REQUIRE_THROWS_AS(derive_beta(0.004, 0.0, 0.0), ConfigError);
}

TEST_CASE("rate spec validation rejects out-of-band values", "[calibration]") {
    RateSpec ok{0.333, 0.264, 0.023, 3.0};
    REQUIRE_NOTHROW(ok.validate());
    RateSpec s = ok;
    s.alpha = 1.2;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
    s = ok;
    s.beta = 0.4;  // above alpha
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
    s = ok;
    s.beta = 0.0;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
    s = ok;
    s.sigma = -0.1;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
    s = ok;
    s.lambda = -1.0;
    REQUIRE_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("unknown languages borrow the most compressive spec", "[calibration]") {
    std::map<std::string, RateSpec> known;
    known["en"] = RateSpec{0.333, 0.264, 0.023, 3.0};
    known["te"] = RateSpec{0.124, 0.100, 0.008, 3.0};
    known["ru"] = RateSpec{0.167, 0.134, 0.011, 3.0};
    RateSpec got = unseen_language_rates(known);
    REQUIRE(got.alpha == Approx(0.124));
    REQUIRE(got.beta == Approx(0.100));
    REQUIRE_THROWS_AS(unseen_language_rates({}), ConfigError);
}

TEST_CASE("calibrate derives one entry per language from parallel lengths", "[calibration]") {
    std::map<std::string, std::vector<double>> lens;
    lens["aa"] = {10.0, 10.0, 10.0};  // anchor, mu 10
    lens["bb"] = {18.0, 22.0};        // mu 20 -> alpha halves
    lens["cc"] = {10.0, 10.0};        // same mu as anchor -> same alpha

    CalibrationReport rep = calibrate(lens, "aa", 0.4, 3.0);
    REQUIRE(rep.anchor == "aa");
    REQUIRE(rep.languages.size() == 3);
    REQUIRE(rep.languages.at("aa").alpha == Approx(0.4).margin(1e-12));
    REQUIRE(rep.languages.at("aa").sigma == Approx(0.0).margin(1e-12));
    REQUIRE(rep.languages.at("aa").beta == Approx(0.4).margin(1e-12));
    REQUIRE(rep.languages.at("bb").alpha == Approx(0.2).margin(1e-12));
    REQUIRE(rep.languages.at("bb").mu == Approx(20.0));
    REQUIRE(rep.languages.at("cc").alpha == Approx(0.4).margin(1e-12));
    // bb's implied rates are 4/18 and 4/22; its beta must back off below alpha
    REQUIRE(rep.languages.at("bb").sigma > 0.0);
    REQUIRE(rep.languages.at("bb").beta < rep.languages.at("bb").alpha);
    REQUIRE(rep.languages.at("bb").beta ==
            Approx(rep.languages.at("bb").alpha - 3.0 * rep.languages.at("bb").sigma)
                .margin(1e-12));
}

TEST_CASE("calibrate flags clamped alphas and handles single samples", "[calibration]") {
    std::map<std::string, std::vector<double>> lens;
    lens["anchor"] = {10.0, 10.0};
    lens["short"] = {4.0, 4.0};  // 0.9 * 10 / 4 > 1
    lens["solo"] = {10.0};
    CalibrationReport rep = calibrate(lens, "anchor", 0.9, 3.0);
    REQUIRE(rep.languages.at("short").alpha == Approx(1.0));
    REQUIRE(rep.languages.at("short").alpha_clamped);
    REQUIRE_FALSE(rep.languages.at("anchor").alpha_clamped);
    // one sentence gives no spread estimate; band collapses to alpha
    REQUIRE(rep.languages.at("solo").sigma == 0.0);
    REQUIRE(rep.languages.at("solo").beta == Approx(rep.languages.at("solo").alpha));
}

TEST_CASE("calibrate rejects missing or empty anchors", "[calibration]") {
    std::map<std::string, std::vector<double>> lens;
    lens["en"] = {10.0};
    REQUIRE_THROWS_AS(calibrate(lens, "xx", 0.4, 3.0), DataError);
    lens["yy"] = {};
    REQUIRE_THROWS_AS(calibrate(lens, "en", 0.4, 3.0), DataError);
    lens.erase("yy");
    lens["en"].clear();
    REQUIRE_THROWS_AS(calibrate(lens, "en", 0.4, 3.0), DataError);
}

TEST_CASE("rate table mirrors the report and passes validation", "[calibration]") {
    std::map<std::string, std::vector<double>> lens;
    lens["aa"] = {10.0, 12.0, 8.0};
    lens["bb"] = {30.0, 34.0, 26.0};
    CalibrationReport rep = calibrate(lens, "aa", 0.35, 2.0);
    auto table = rep.rate_table();
    REQUIRE(table.size() == 2);
    for (const auto& [lang, spec] : table) {
        REQUIRE_NOTHROW(spec.validate());
        REQUIRE(spec.alpha == Approx(rep.languages.at(lang).alpha));
        REQUIRE(spec.beta == Approx(rep.languages.at(lang).beta));
        REQUIRE(spec.sigma == Approx(rep.languages.at(lang).sigma));
        REQUIRE(spec.lambda == Approx(2.0));
    }
}

TEST_CASE("calibration invariants hold on random parallel corpora", "[calibration]") {
    Rng rng(421);
    for (int c = 0; c < 200; ++c) {
        std::map<std::string, std::vector<double>> lens;
        int n_lang = 2 + static_cast<int>(rng.below(4));
        int n_rows = 2 + static_cast<int>(rng.below(10));
        for (int l = 0; l < n_lang; ++l) {
            std::string name(1, static_cast<char>('a' + l));
            std::vector<double> v;
            // keep lengths in a band where alpha stays comfortably above the floor
            for (int r = 0; r < n_rows; ++r) v.push_back(8.0 + 30.0 * rng.uniform01());
            lens[name] = v;
        }
        CalibrationReport rep = calibrate(lens, "a", 0.3, 1.0);
        for (const auto& [lang, cal] : rep.languages) {
            REQUIRE(cal.alpha > 0.0);
            REQUIRE(cal.alpha <= 1.0);
            REQUIRE(cal.beta > 0.0);
            REQUIRE(cal.beta <= cal.alpha + 1e-15);
            REQUIRE(cal.sigma >= 0.0);
            REQUIRE(cal.mu > 0.0);
        }
        // anchor keeps its configured rate unless clamped (it can't be here)
        REQUIRE(rep.languages.at("a").alpha == Approx(0.3).margin(1e-12));
        REQUIRE_NOTHROW(rep.rate_table());
    }
}

TEST_CASE("rates survive a save/load round trip", "[calibration]") {
    TempDir tmp;
    std::map<std::string, std::vector<double>> lens;
    lens["en"] = {11.0, 13.0, 9.0, 14.0};
    lens["te"] = {31.0, 28.0, 35.0, 30.0};
    CalibrationReport rep = calibrate(lens, "en", 0.333, 3.0);
    std::string path = tmp.file("rates.json");
    save_rates(rep, path);
    CalibrationReport back = load_rates(path);
    REQUIRE(back.anchor == rep.anchor);
    REQUIRE(back.alpha_A == Approx(rep.alpha_A));
    REQUIRE(back.lambda == Approx(rep.lambda));
    REQUIRE(back.beta_floor == Approx(rep.beta_floor));
    REQUIRE(back.languages.size() == rep.languages.size());
    for (const auto& [lang, cal] : rep.languages) {
        const auto& b = back.languages.at(lang);
        REQUIRE(b.mu == Approx(cal.mu));
        REQUIRE(b.sigma_len == Approx(cal.sigma_len));
        REQUIRE(b.alpha == Approx(cal.alpha));
        REQUIRE(b.sigma == Approx(cal.sigma));
        REQUIRE(b.beta == Approx(cal.beta));
        REQUIRE(b.alpha_clamped == cal.alpha_clamped);
    }
}

TEST_CASE("rates loading rejects missing or malformed files", "[calibration]") {
    TempDir tmp;
    REQUIRE_THROWS_AS(load_rates(tmp.file("nope.json")), ConfigError);
    {
        std::ofstream out(tmp.file("bad.json"));
        out << "this is not json";
    }
    REQUIRE_THROWS_AS(load_rates(tmp.file("bad.json")), ConfigError);
    {
        std::ofstream out(tmp.file("partial.json"));
        out << "{\"anchor\": \"en\"}";  // missing required keys
    }
    REQUIRE_THROWS_AS(load_rates(tmp.file("partial.json")), ConfigError);
}
