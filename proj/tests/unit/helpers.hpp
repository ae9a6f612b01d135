#pragma once

// Small shared bits for the unit suites: a generic finite-difference harness
// over ParamStore coordinates and a couple of matrix factories.

#include <flexitokens/flexitokens.hpp>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

namespace testutil {

using ftok::GradSink;
using ftok::Mat;
using ftok::ParamStore;
using ftok::Rng;
using ftok::Tape;
using ftok::Var;

// Builds a scalar loss from the current ParamStore values. Called once with a
// gradient tape for the analytic pass and many times on inference tapes for
// the probes, so it must be a pure function of (tape, store).
using GraphFn = std::function<Var(Tape&, ParamStore&)>;

inline double fd_worst_rel(ParamStore& ps, const GraphFn& f, double h = 1e-6) {
    GradSink sink = ps.make_sink();
    Tape t(&sink);
    t.backward(f(t, ps));

    auto value = [&]() {
        Tape ti;
        return ti.val(f(ti, ps))(0, 0);
    };

    double worst = 0.0;
    for (std::size_t pid = 0; pid < ps.size(); ++pid) {
        Mat g = sink.grad(pid);
        Mat& v = ps.value(pid);
        if (g.size() == 0) g = Mat::Zero(v.rows(), v.cols());
        for (Eigen::Index r = 0; r < v.rows(); ++r) {
            for (Eigen::Index c = 0; c < v.cols(); ++c) {
                double save = v(r, c);
                v(r, c) = save + h;
                double up = value();
                v(r, c) = save - h;
                double dn = value();
                v(r, c) = save;
                double fd = (up - dn) / (2.0 * h);
                // the denominator floor sets an absolute tolerance for
                // near-zero coordinates; central differences carry ~1e-10 of
                // cancellation noise, so anything much tighter than 1e-4 turns
                // that noise into spurious relative error
                double rel =
                    std::abs(fd - g(r, c)) / std::max({std::abs(fd), std::abs(g(r, c)), 1e-4});
                worst = std::max(worst, rel);
            }
        }
    }
    return worst;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.normal(0.0, scale);
    return m;
}

// Scratch directory that cleans up after itself. Addresses are unique per
// instance so parallel test binaries don't collide.
struct TempDir {
    std::filesystem::path p;
    TempDir() {
        p = std::filesystem::temp_directory_path() /
            ("flexitok_test_" + std::to_string(::getpid()) + "_" +
             std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::create_directories(p);
    }
    ~TempDir() { std::filesystem::remove_all(p); }
    std::string file(const char* name) const { return (p / name).string(); }
};

}  // namespace testutil
