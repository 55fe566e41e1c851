#include "doctest.h"

#include <cmath>

#include "mrsim/analysis.hpp"
#include "mrsim/error.hpp"

using namespace mrsim;

namespace {

ForwardProblem oracle(double drift, double s) {
    ForwardProblem p;
    p.drift = CoefficientField::constant(1, 1, {drift});
    p.sigma0 = CoefficientField::constant(1, 1, {s});
    p.constraint = ConstraintModel::linear_expectation(SmoothField::from_expression("x1", 1, "x"), {1, 1, 1});
    p.initial = InitialLaw::gaussian(Vec::Constant(1, 0.0), Vec::Constant(1, 1.0));
    return p;
}

RunConfig config(std::size_t N, std::size_t M, std::uint64_t seed = 1) {
    RunConfig c;
    c.N = N;
    c.M = M;
    c.seed = seed;
    return c;
}

EmpiricalMeasure gaussian_cloud(std::size_t N, std::uint64_t seed) {
    return EmpiricalMeasure(InitialLaw::gaussian(Vec::Constant(1, 0.0), Vec::Constant(1, 1.0)).sample(N, seed));
}

}  // namespace

TEST_CASE("eps_N reference examples") {
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(eps_n_reference(100, 1, inf) == doctest::Approx(0.1));
    CHECK(eps_n_reference(32, 5, inf) == doctest::Approx(std::pow(32.0, -0.4)));
    CHECK(eps_n_reference(32, 5, inf) == doctest::Approx(0.2497).epsilon(1e-3));
    // N^{-1/2} log(1+N) at d = 4 in the i.i.d. case
    CHECK(eps_n_reference(1, 4, inf) == doctest::Approx(std::log(2.0)));
    CHECK(eps_n_reference(100, 2, 4.0) == doctest::Approx(std::pow(100.0, -0.25)));
    CHECK(eps_n_reference(100, 4, 4.0) == doctest::Approx(std::pow(100.0, -0.25) * std::pow(std::log(101.0), 0.5)));
    CHECK(eps_n_reference(100, 6, 4.0) == doctest::Approx(std::pow(100.0, -1.0 / 6.0)));
    CHECK_THROWS_AS(eps_n_reference(10, 1, 2.0), Error);
    CHECK_THROWS_AS(eps_n_reference(0.5, 1, inf), Error);
    for (std::size_t d : {1, 4, 7})
        for (double N = 4; N < 1e5; N *= 3) CHECK(eps_n_reference(3 * N, d, 6.0) < eps_n_reference(N, d, 6.0));
    // continuity in p towards the i.i.d. limit
    CHECK(eps_n_reference(100, 1, 1e12) == doctest::Approx(eps_n_reference(100, 1, inf)));
}

TEST_CASE("line fit recovers a known slope") {
    auto f = fit_line({0, 1, 2, 3}, {1, -1, -3, -5});
    CHECK(f.slope == doctest::Approx(-2.0));
    CHECK(f.intercept == doctest::Approx(1.0));
    CHECK(f.slope_stderr == doctest::Approx(0.0));
}

TEST_CASE("chaos experiment: errors positive and decreasing") {
    auto p = oracle(-1.0, 1.0);
    ChaosOptions opt;
    opt.Ns = {16, 64, 256};
    opt.reps = 6;
    auto rep = chaos_rate_experiment(p, opt, config(0, 20));
    REQUIRE(rep.rows.size() == 3);
    CHECK(rep.reference_N == 2048);
    for (const auto& r : rep.rows) CHECK(r.mean_err > 0.0);
    CHECK(rep.rows[2].mean_err < rep.rows[0].mean_err);
    CHECK(rep.fitted_slope < 0.0);
    opt.reference_N = 100;
    CHECK_THROWS_AS(chaos_rate_experiment(p, opt, config(0, 20)), Error);
}

TEST_CASE("chaos experiment under common noise couples references by W") {
    auto p = oracle(-1.0, 1.0);
    p.sigma1 = CoefficientField::constant(1, 1, {0.5});
    ChaosOptions opt;
    opt.Ns = {8, 32};
    opt.reps = 3;
    auto rep = chaos_rate_experiment(p, opt, config(0, 10));
    CHECK(rep.rows[1].mean_err < rep.rows[0].mean_err);
}

TEST_CASE("Feynman-Kac examples") {
    auto p = oracle(-1.0, 1.0);
    auto mu0 = gaussian_cloud(256, 7);
    auto one = feynman_kac_estimate(p, [](const PointMatrix&) { return 1.0; }, 0, mu0, 4, 256, config(0, 20));
    CHECK(one.value == 1.0);
    CHECK(one.stderr_ == 0.0);
    auto mean = feynman_kac_estimate(p, [](const PointMatrix& X) { return X.mean(); }, 0, mu0, 8, 512, config(0, 40));
    CHECK(std::abs(mean.value) <= 3 * mean.stderr_ + 1e-9);
    const auto H = *p.constraint;
    auto h = feynman_kac_estimate(p, [&](const PointMatrix& X) { return H.evaluate(X); }, 5, mu0, 4, 256, config(0, 20));
    CHECK(h.value >= -1e-10);
}

TEST_CASE("DPP: constant functional has zero gap; oracle gap within noise") {
    auto p = oracle(-1.0, 1.0);
    auto mu0 = gaussian_cloud(256, 3);
    auto c = dpp_check(p, [](const PointMatrix&) { return 2.5; }, 0, 10, mu0, 4, 256, 2, config(0, 20));
    CHECK(c.gap == 0.0);
    auto G = [](const PointMatrix& X) { return X.squaredNorm() / static_cast<double>(X.rows()); };
    auto r = dpp_check(p, G, 0, 10, mu0, 16, 256, 2, config(0, 20));
    CHECK(r.gap <= 3 * r.stderr_);
    CHECK_THROWS_AS(dpp_check(p, G, 10, 10, mu0, 4, 256, 1, config(0, 20)), Error);
}

TEST_CASE("terminal projection study: displacement shrinks with N") {
    BackwardProblem b;
    b.g = BackwardProblem::g_from_expressions({"w1"}, 1);
    b.driver = Driver::constant({-1.0});
    b.constraint = ConstraintModel::linear_expectation(SmoothField::from_expression("x1", 1, "x"), {1, 1, 1});
    auto rows = terminal_projection_study(b, {128, 512, 2048}, 20, config(0, 1));
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) CHECK(r.min_H_after >= 0.0);
    CHECK(rows[1].mean_displacement < rows[0].mean_displacement);
    CHECK(rows[2].mean_displacement < rows[1].mean_displacement);
}
