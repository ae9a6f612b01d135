#pragma once

// Per-language boundary-rate targets. An anchor language gets alpha_A by
// hand; every other language's alpha scales by the byte-length ratio of
// aligned sentences, and the band floor beta comes from the spread of
// per-sample implied rates: beta = max(alpha - lambda*sigma, beta_floor).

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "flexitokens/common.hpp"
#include "flexitokens/data.hpp"
#include "json.hpp"

namespace ftok {

struct RateSpec {
    double alpha = 0.0;
    double beta = 0.0;
    double sigma = 0.0;
    double lambda = 0.0;

    void validate() const {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("RateSpec: alpha must be in (0,1]");
        if (!(beta > 0.0 && beta <= alpha)) throw ConfigError("RateSpec: need 0 < beta <= alpha");
        if (sigma < 0.0) throw ConfigError("RateSpec: sigma must be >= 0");
        if (lambda < 0.0) throw ConfigError("RateSpec: lambda must be >= 0");
    }
};

constexpr double kDefaultBetaFloor = 0.005;

inline double derive_alpha(double alpha_A, double mu_A, double mu_L, bool* clamped = nullptr) {
    if (!(mu_A > 0.0) || !(mu_L > 0.0)) throw ConfigError("derive_alpha: mean lengths must be positive");
    if (!(alpha_A > 0.0 && alpha_A <= 1.0)) throw ConfigError("derive_alpha: alpha_A must be in (0,1]");
    double a = alpha_A * mu_A / mu_L;
    if (clamped) *clamped = a > 1.0;
    return a > 1.0 ? 1.0 : a;
}

// population std of the per-sample implied rates r_i = alpha_A * mu_A / len_i
inline double derive_sigma(double alpha_A, double mu_A, const std::vector<double>& lengths_L) {
    if (lengths_L.empty()) throw ConfigError("derive_sigma: empty length list");
    for (double len : lengths_L)
        if (!(len > 0.0)) throw ConfigError("derive_sigma: lengths must be positive");
    std::vector<double> rates;
    rates.reserve(lengths_L.size());
    for (double len : lengths_L) rates.push_back(alpha_A * mu_A / len);
    double mean = 0.0;
    for (double r : rates) mean += r;
    mean /= static_cast<double>(rates.size());
    double var = 0.0;
    for (double r : rates) var += (r - mean) * (r - mean);
    var /= static_cast<double>(rates.size());
    return std::sqrt(var);
}

inline double derive_beta(double alpha, double sigma, double lambda,
                          double beta_floor = kDefaultBetaFloor) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("derive_beta: alpha must be in (0,1]");
    if (sigma < 0.0) throw ConfigError("derive_beta: sigma must be >= 0");
    if (lambda < 0.0) throw ConfigError("derive_beta: lambda must be >= 0");
    if (!(beta_floor > 0.0 && beta_floor < alpha))
        throw ConfigError("derive_beta: need 0 < beta_floor < alpha");
    double b = alpha - lambda * sigma;
    return b < beta_floor ? beta_floor : b;
}

// For a language never calibrated: borrow the most compressive known spec
// (the one with the smallest alpha).
inline RateSpec unseen_language_rates(const std::map<std::string, RateSpec>& known) {
    if (known.empty()) throw ConfigError("unseen_language_rates: no known specs");
    const RateSpec* best = nullptr;
    for (const auto& [lang, spec] : known)
        if (!best || spec.alpha < best->alpha) best = &spec;
    return *best;
}

struct LanguageCalibration {
    double mu = 0.0;         // mean sentence byte length
    double sigma_len = 0.0;  // byte-length std (population)
    double alpha = 0.0;
    double sigma = 0.0;      // std of implied rates
    double beta = 0.0;
    bool alpha_clamped = false;
};

struct CalibrationReport {
    std::string anchor;
    double alpha_A = 0.0;
    double lambda = 0.0;
    double beta_floor = kDefaultBetaFloor;
    std::map<std::string, LanguageCalibration> languages;

    std::map<std::string, RateSpec> rate_table() const {
        std::map<std::string, RateSpec> out;
        for (const auto& [lang, c] : languages) {
            RateSpec s;
            s.alpha = c.alpha;
            s.beta = c.beta;
            s.sigma = c.sigma;
            s.lambda = lambda;
            s.validate();
            out[lang] = s;
        }
        return out;
    }
};

inline CalibrationReport calibrate(const std::map<std::string, std::vector<double>>& lengths_by_lang,
                                   const std::string& anchor, double alpha_A, double lambda,
                                   double beta_floor = kDefaultBetaFloor) {
    auto it = lengths_by_lang.find(anchor);
    if (it == lengths_by_lang.end())
        throw DataError("anchor language '" + anchor + "' not present in parallel corpus");
    if (it->second.empty()) throw DataError("anchor language has no sentences");

    auto mean_of = [](const std::vector<double>& v) {
        double m = 0.0;
        for (double x : v) m += x;
        return m / static_cast<double>(v.size());
    };
    auto pop_std = [&](const std::vector<double>& v, double m) {
        double var = 0.0;
        for (double x : v) var += (x - m) * (x - m);
        return std::sqrt(var / static_cast<double>(v.size()));
    };

    double mu_A = mean_of(it->second);
    CalibrationReport rep;
    rep.anchor = anchor;
    rep.alpha_A = alpha_A;
    rep.lambda = lambda;
    rep.beta_floor = beta_floor;
    for (const auto& [lang, lengths] : lengths_by_lang) {
        if (lengths.empty()) throw DataError("language '" + lang + "' has no sentences");
        LanguageCalibration c;
        c.mu = mean_of(lengths);
        c.sigma_len = pop_std(lengths, c.mu);
        c.alpha = derive_alpha(alpha_A, mu_A, c.mu, &c.alpha_clamped);
        c.sigma = derive_sigma(alpha_A, mu_A, lengths);
        if (lengths.size() == 1) c.sigma = 0.0;  // single sample: no spread, beta == alpha
        c.beta = derive_beta(c.alpha, c.sigma, lambda, beta_floor);
        rep.languages[lang] = c;
    }
    return rep;
}

// -------- JSON round trip (the rates.json consumed by training configs) --------

inline nlohmann::json calibration_to_json(const CalibrationReport& rep) {
    nlohmann::json langs = nlohmann::json::object();
    for (const auto& [lang, c] : rep.languages) {
        langs[lang] = {{"mu", c.mu},       {"sigma_len", c.sigma_len}, {"alpha", c.alpha},
                       {"sigma", c.sigma}, {"beta", c.beta},           {"alpha_clamped", c.alpha_clamped}};
    }
    return nlohmann::json{{"anchor", rep.anchor},
                          {"alpha_A", rep.alpha_A},
                          {"lambda", rep.lambda},
                          {"beta_floor", rep.beta_floor},
                          {"languages", langs}};
}

inline CalibrationReport calibration_from_json(const nlohmann::json& j) {
    CalibrationReport rep;
    try {
        rep.anchor = j.at("anchor").get<std::string>();
        rep.alpha_A = j.at("alpha_A").get<double>();
        rep.lambda = j.at("lambda").get<double>();
        rep.beta_floor = j.value("beta_floor", kDefaultBetaFloor);
        for (const auto& [lang, cj] : j.at("languages").items()) {
            LanguageCalibration c;
            c.mu = cj.at("mu").get<double>();
            c.sigma_len = cj.value("sigma_len", 0.0);
            c.alpha = cj.at("alpha").get<double>();
            c.sigma = cj.at("sigma").get<double>();
            c.beta = cj.at("beta").get<double>();
            c.alpha_clamped = cj.value("alpha_clamped", false);
            rep.languages[lang] = c;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad rates json: ") + e.what());
    }
    return rep;
}

inline void save_rates(const CalibrationReport& rep, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write rates file: " + path);
    out << calibration_to_json(rep).dump(2) << "\n";
}

inline CalibrationReport load_rates(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open rates file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("bad rates json in " + path + ": " + e.what());
    }
    return calibration_from_json(j);
}

}  // namespace ftok
