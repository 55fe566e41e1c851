#include "doctest.h"

#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/fokker_planck.hpp"

using namespace mrsim;

namespace {

ForwardProblem oracle(double drift, double s, double m0, double sd) {
    ForwardProblem p;
    p.drift = CoefficientField::constant(1, 1, {drift});
    p.sigma0 = CoefficientField::constant(1, 1, {s});
    p.constraint = ConstraintModel::linear_expectation(SmoothField::from_expression("x1", 1, "x"), {1, 1, 1});
    p.initial = InitialLaw::gaussian(Vec::Constant(1, m0), Vec::Constant(1, sd));
    return p;
}

}  // namespace

TEST_CASE("grid validation") {
    CHECK_THROWS_AS(Grid1D(0, 1, 8), Error);
    CHECK_THROWS_AS(Grid1D(1, 1, 32), Error);
    Grid1D g(-1, 1, 20);
    CHECK(g.dx() == doctest::Approx(0.1));
    CHECK(g.center(0) == doctest::Approx(-0.95));
}

TEST_CASE("still density with slack constraint stays constant") {
    auto p = oracle(0.0, 0.0, 0.5, 0.2);
    auto dp = solve_reflected_fp(p, Grid1D(-2, 3, 100), 20);
    for (double k : dp.K) CHECK(k == 0.0);
    CHECK(dp.rho.back() == dp.rho.front());
}

TEST_CASE("drifted oracle: K grows like c t and the mean is pinned") {
    auto p = oracle(-1.0, 1.0, 0.0, 1.0);
    auto dp = solve_reflected_fp(p, Grid1D(-11, 11, 400), 400);
    CHECK(dp.K.back() == doctest::Approx(1.0).epsilon(0.03));
    CHECK(dp.K[200] == doctest::Approx(0.5).epsilon(0.03));
    for (std::size_t m = 0; m < dp.rho.size(); ++m) {
        CHECK(std::abs(dp.mass(m) - 1.0) <= 1e-8);
        CHECK(dp.H[m] >= -1e-10);
        CHECK(std::abs(dp.mean(m)) <= 0.01);
        for (double v : dp.rho[m]) CHECK(v >= 0.0);
    }
    for (std::size_t m = 1; m < dp.K.size(); ++m) CHECK(dp.K[m] >= dp.K[m - 1]);
    CHECK(dp.boundary_flux <= 1e-6);
}

TEST_CASE("CFL violation suggests a step count") {
    auto p = oracle(-1.0, 1.0, 0.0, 1.0);
    try {
        solve_reflected_fp(p, Grid1D(-11, 11, 400), 100);
        FAIL("expected CFL failure");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::stability);
        CHECK(std::string(e.what()).find("use M >=") != std::string::npos);
    }
}

TEST_CASE("narrow domain trips the boundary audit") {
    auto p = oracle(-1.0, 1.0, 0.0, 1.0);
    try {
        solve_reflected_fp(p, Grid1D(-3, 3, 60), 200);
        FAIL("expected boundary failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("widen the domain") != std::string::npos);
    }
}

TEST_CASE("quantiles of a uniform cell density") {
    DensityPath dp;
    dp.grid = Grid1D(0, 1, 16);
    dp.rho.push_back(std::vector<double>(16, 1.0));
    auto q = dp.quantiles(0, 4);
    CHECK(q[0] == doctest::Approx(0.125));
    CHECK(q[3] == doctest::Approx(0.875));
}

TEST_CASE("density against itself and against particles") {
    auto p = oracle(-1.0, 1.0, 0.0, 1.0);
    auto dp = solve_reflected_fp(p, Grid1D(-11, 11, 400), 400);
    const std::size_t N = 10000;
    auto q = dp.quantiles(400, N);
    RunConfig c;
    c.N = N;
    c.M = 400;
    c.seed = 3;
    c.record_stride = 100;
    auto b = simulate_reflected(p, c);
    auto rows = compare_to_particles(dp, b, {0.0, 0.5, 1.0});
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
        CHECK(r.w2 <= 0.05 * 1.5);
        CHECK(std::abs(r.K_fp - r.K_particles) <= 0.05);
    }
    CHECK_THROWS_AS(compare_to_particles(dp, b, {0.3}), Error);
    CHECK(wasserstein2_1d(EmpiricalMeasure(q, 1), EmpiricalMeasure(dp.quantiles(400, N), 1)) == 0.0);
}
