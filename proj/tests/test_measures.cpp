#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mrsim/error.hpp"
#include "mrsim/measures.hpp"

using namespace mrsim;

namespace {

EmpiricalMeasure cloud1(std::vector<double> v) { return EmpiricalMeasure(v, 1); }

EmpiricalMeasure random_cloud(std::mt19937_64& gen, std::size_t N, std::size_t n) {
    std::normal_distribution<double> g;
    std::vector<double> v(N * n);
    for (auto& x : v) x = g(gen);
    return EmpiricalMeasure(v, n);
}

double brute_w2(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    std::vector<std::size_t> perm(a.size());
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < perm.size(); ++i)
            s += (a.points().row(i) - b.points().row(perm[i])).squaredNorm();
        best = std::min(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return std::sqrt(best / a.size());
}

}  // namespace

TEST_CASE("moment examples") {
    CHECK(moment(cloud1({0, 0, 0}), 2) == 0.0);
    CHECK(moment(EmpiricalMeasure(std::vector<double>{1, 0, 0, 1}, 2), 2) == doctest::Approx(1.0));
    CHECK(moment(cloud1({-2, 1, 4}), 1) == doctest::Approx(7.0 / 3.0));
    CHECK_THROWS_AS(moment(cloud1({1}), 0.0), Error);
}

TEST_CASE("stats examples") {
    auto s0 = stats(cloud1({0}));
    CHECK(s0.mean(0) == 0.0);
    CHECK(s0.second_moment(0, 0) == 0.0);
    auto s1 = stats(cloud1({-1, 1}));
    CHECK(s1.mean(0) == 0.0);
    CHECK(s1.second_moment(0, 0) == 1.0);
    auto s2 = stats(EmpiricalMeasure(std::vector<double>{1, 1, 3, -1}, 2));
    CHECK(s2.mean(0) == doctest::Approx(2));
    CHECK(s2.mean(1) == doctest::Approx(0));
    CHECK(s2.second_moment(0, 0) == doctest::Approx(5));
    CHECK(s2.second_moment(0, 1) == doctest::Approx(-1));
    CHECK(s2.second_moment(1, 0) == doctest::Approx(-1));
    CHECK(s2.second_moment(1, 1) == doctest::Approx(1));
}

TEST_CASE("construction rejects empty clouds") {
    CHECK_THROWS_AS(EmpiricalMeasure(std::vector<double>{}, 1), Error);
}

TEST_CASE("wasserstein2_1d examples") {
    auto mu = cloud1({0.3, -1, 2});
    CHECK(wasserstein2_1d(mu, mu) == 0.0);
    CHECK(wasserstein2_1d(cloud1({0, 0}), cloud1({1, 1})) == doctest::Approx(1.0));
    CHECK(wasserstein2_1d(cloud1({0, 2}), cloud1({1, 5})) == doctest::Approx(std::sqrt(5.0)));
    CHECK_THROWS_AS(wasserstein2_1d(cloud1({0, 2}), cloud1({1})), Error);
    CHECK_THROWS_AS(wasserstein2_1d(EmpiricalMeasure(std::vector<double>{1, 1}, 2),
                                    EmpiricalMeasure(std::vector<double>{1, 1}, 2)),
                    Error);
}

TEST_CASE("wasserstein2_exact examples") {
    std::mt19937_64 gen(7);
    auto mu = random_cloud(gen, 20, 2);
    CHECK(wasserstein2_exact(mu, mu) == doctest::Approx(0.0).epsilon(1e-12));
    PointMatrix shifted = mu.points();
    shifted.col(0).array() += 3.0;
    shifted.col(1).array() -= 4.0;
    CHECK(wasserstein2_exact(mu, EmpiricalMeasure(shifted)) == doctest::Approx(5.0).epsilon(1e-12));
    auto a = EmpiricalMeasure(std::vector<double>{0, 0, 1, 0}, 2);
    auto b = EmpiricalMeasure(std::vector<double>{0, 1, 1, 1}, 2);
    CHECK(wasserstein2_exact(a, b) == doctest::Approx(1.0));
    CHECK_THROWS_AS(wasserstein2_exact(a, cloud1({0, 1})), Error);
}

TEST_CASE("exact W2 equals brute force for N <= 6") {
    std::mt19937_64 gen(11);
    for (std::size_t N = 1; N <= 6; ++N)
        for (std::size_t n = 1; n <= 3; ++n) {
            auto a = random_cloud(gen, N, n), b = random_cloud(gen, N, n);
            CHECK(std::abs(wasserstein2_exact(a, b) - brute_w2(a, b)) <= 1e-12);
        }
}

TEST_CASE("W2 symmetry, triangle inequality and 1-D agreement") {
    std::mt19937_64 gen(3);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t N = 1 + gen() % 64, n = 1 + gen() % 3;
        auto a = random_cloud(gen, N, n), b = random_cloud(gen, N, n), c = random_cloud(gen, N, n);
        const double ab = wasserstein2_exact(a, b), ba = wasserstein2_exact(b, a);
        CHECK(std::abs(ab - ba) <= 1e-9);
        CHECK(ab <= wasserstein2_exact(a, c) + wasserstein2_exact(c, b) + 1e-9);
        if (n == 1) CHECK(std::abs(ab - wasserstein2_1d(a, b)) <= 1e-12);
    }
}

TEST_CASE("second moment decomposition") {
    std::mt19937_64 gen(5);
    auto a = random_cloud(gen, 50, 3);
    auto s = stats(a);
    const Mat cov = s.second_moment - s.mean * s.mean.transpose();
    CHECK(std::abs(moment(a, 2) - (s.mean.squaredNorm() + cov.trace())) <= 1e-12);
    CHECK(std::abs(moment(a, 2) - s.second_moment.trace()) <= 1e-12);
}
