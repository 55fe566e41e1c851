#include "doctest.h"

#include <cmath>
#include <random>

#include "mrsim/constraints.hpp"
#include "mrsim/error.hpp"

using namespace mrsim;

namespace {

EmpiricalMeasure cloud(std::vector<double> v, std::size_t n) { return EmpiricalMeasure(v, n); }

EmpiricalMeasure random_cloud(std::mt19937_64& gen, std::size_t N, std::size_t n, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<double> v(N * n);
    for (auto& x : v) x = g(gen);
    return EmpiricalMeasure(v, n);
}

ConstraintModel linear(const std::string& h, std::size_t n = 1) {
    return ConstraintModel::linear_expectation(SmoothField::from_expression(h, n, "x"), {1, 1, 1});
}
ConstraintModel first(const std::string& f, std::size_t n) {
    return ConstraintModel::first_moment(SmoothField::from_expression(f, n, "m"), {1, 1, 1});
}
ConstraintModel second(const std::string& f, std::size_t n) {
    return ConstraintModel::second_moment(SymmetricMatrixField::from_expression(f, n), {4, 1, 1});
}

Vec v2(double a, double b) {
    Vec x(2);
    x << a, b;
    return x;
}

Mat B2() { return Mat::Identity(1, 1); }

}  // namespace

TEST_CASE("evaluate examples") {
    CHECK(first("m1", 1).evaluate(cloud({-1, 1}, 1)) == 0.0);
    CHECK(linear("x1").evaluate(cloud({2, 4}, 1)) == doctest::Approx(3.0));
    CHECK(second("a11 + a22 - 1", 2).evaluate(cloud({1, 0, 0, 1}, 2)) == doctest::Approx(0.0));
    CHECK_THROWS_AS(linear("x1").evaluate(cloud({1, 2}, 2)), Error);
}

TEST_CASE("lions_derivative examples") {
    Vec x(1);
    x << 5.0;
    CHECK(linear("x1").lions_derivative(cloud({0.2, 7}, 1), x)(0) == 1.0);
    auto d1 = first("m1", 2).lions_derivative(cloud({3, 1, -2, 8}, 2), v2(4, 4));
    CHECK(d1(0) == 1.0);
    CHECK(d1(1) == 0.0);
    auto d2 = second("a11 + a22", 2).lions_derivative(cloud({0.3, 1, -2, 8}, 2), v2(1, 2));
    CHECK(d2(0) == doctest::Approx(2.0));
    CHECK(d2(1) == doctest::Approx(4.0));
}

TEST_CASE("partial_y_lions examples") {
    auto mu = cloud({1, 0, 0, 1}, 2);
    CHECK(first("m1 + m2^2", 2).partial_y_lions(mu, v2(1, 2)).norm() == 0.0);
    Vec x(1);
    x << 0.7;
    CHECK(linear("x1^2/2").partial_y_lions(cloud({1, 2}, 1), x)(0, 0) == doctest::Approx(1.0));
    Mat g = second("a11 + a22", 2).partial_y_lions(mu, v2(1, 2));
    CHECK(g(0, 0) == doctest::Approx(2.0));
    CHECK(g(1, 1) == doctest::Approx(2.0));
    CHECK(g(0, 1) == doctest::Approx(0.0));
}

TEST_CASE("lions_second_derivative examples") {
    auto mu = cloud({1, 0, 0.5, 1}, 2);
    CHECK(linear("x1*x2", 2).lions_second_derivative(mu, v2(1, 2), v2(3, 4)).norm() == 0.0);
    Mat q = first("m1^2 + 3*m1*m2", 2).lions_second_derivative(mu, v2(1, 2), v2(-3, 4));
    CHECK(q(0, 0) == doctest::Approx(2.0));
    CHECK(q(0, 1) == doctest::Approx(3.0));
    CHECK(q(1, 0) == doctest::Approx(3.0));
    CHECK(q(1, 1) == doctest::Approx(0.0));
    CHECK(second("a11 + a22", 2).lions_second_derivative(mu, v2(1, 2), v2(3, 4)).norm() == 0.0);
}

TEST_CASE("second derivative matches the lifted second-order identity") {
    // d/d(x_j) of N * dH^N/dx_i equals (1/N) D2 H(x_i, x_j) for i != j.
    std::mt19937_64 gen(21);
    auto H = second("exp(a11) + a11*a22 + a12^2 - tanh(a22)", 2);
    auto mu = random_cloud(gen, 5, 2, 0.6);
    const std::size_t N = mu.size();
    const double eps = 1e-5;
    for (std::size_t j = 1; j < N; ++j)
        for (std::size_t k = 0; k < 2; ++k) {
            PointMatrix P = mu.points(), M = mu.points();
            P(j, k) += eps;
            M(j, k) -= eps;
            const Vec xi = mu.points().row(0).transpose();
            const Vec fd = (H.lions_derivative(EmpiricalMeasure(P), xi) -
                            H.lions_derivative(EmpiricalMeasure(M), xi)) /
                           (2 * eps) * static_cast<double>(N);
            const Mat d2 = H.lions_second_derivative(mu, xi, Vec(mu.points().row(j).transpose()));
            CHECK((fd - d2.col(k)).cwiseAbs().maxCoeff() <= 1e-6);
        }
}

TEST_CASE("pairwise second-derivative sum collapses through f2_gradient_derivative") {
    std::mt19937_64 gen(17);
    const std::size_t N = 12, n = 2, d = 2;
    const auto mu = random_cloud(gen, N, n);
    const auto H = second("a11^2 + a11*a22 + tanh(a12) - 1", n);
    const auto ctx = H.context(mu.points());
    std::normal_distribution<double> g;
    std::vector<Mat> S(N, Mat(n, d));
    for (auto& m : S)
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = g(gen);

    double pairwise = 0.0;
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
            pairwise += (H.lions_second_derivative(ctx, mu.point(i), mu.point(j)).array() *
                         (S[i] * S[j].transpose()).array())
                            .sum();

    double collapsed = 0.0;
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(d); ++c) {
        Mat B = Mat::Zero(n, n);
        for (std::size_t j = 0; j < N; ++j) {
            const Eigen::Map<const Vec> xj(mu.point(j).data(), 2);
            B += S[j].col(c) * xj.transpose() + xj * S[j].col(c).transpose();
        }
        const Mat G = 2.0 * H.f2_gradient_derivative(ctx, B);
        for (std::size_t i = 0; i < N; ++i) {
            const Eigen::Map<const Vec> xi(mu.point(i).data(), 2);
            collapsed += S[i].col(c).dot(G * xi);
        }
    }
    CHECK(collapsed == doctest::Approx(pairwise).epsilon(1e-12));
    CHECK_THROWS_AS(linear("x1").f2_gradient_derivative(linear("x1").context(mu.points().leftCols(1)), B2()),
                    Error);
}

TEST_CASE("lifted finite-difference check examples") {
    std::mt19937_64 gen(1);
    auto c1 = random_cloud(gen, 7, 1);
    CHECK(lifted_fd_check(linear("x1^3 - 2*x1"), c1, 3, 1e-4) <= 1e-7);
    auto c3 = cloud({1, 2, -1, 0.5, 3, 0}, 2);
    CHECK(lifted_fd_check(first("2*m1 - m2 + 1", 2), c3, 1, 1e-4) <= 1e-10);
    CHECK(lifted_fd_check(second("a11 + a22", 2), cloud({1, 0, 0, 1}, 2), 0, 1e-4) <= 1e-6);
}

TEST_CASE("lifted check on random clouds for every family") {
    std::mt19937_64 gen(99);
    const ConstraintModel models[] = {linear("x1 + tanh(x2) - x1^2/10", 2), first("m1 - m2^2 + exp(m1/3)", 2),
                                      second("a11 + 2*a22 - a12 + (a11 - a22)^2/5", 2)};
    for (const auto& H : models)
        for (int rep = 0; rep < 50; ++rep) {
            auto mu = random_cloud(gen, 10, 2);
            CHECK(lifted_fd_check(H, mu, static_cast<std::size_t>(rep) % 10, 1e-4) <= 1e-6);
        }
}

TEST_CASE("linear derivative is measure-independent") {
    std::mt19937_64 gen(4);
    auto H = linear("x1*x2 + exp(x1)", 2);
    const Vec x = v2(0.4, -1.3);
    const Vec ref = H.lions_derivative(random_cloud(gen, 5, 2), x);
    for (int r = 0; r < 10; ++r) CHECK(H.lions_derivative(random_cloud(gen, 9, 2), x) == ref);
}

TEST_CASE("normal energy on constraint boundaries respects beta") {
    std::mt19937_64 gen(8);
    // h(x) = x on R: boundary = mean zero clouds, |D|^2 = 1 = beta^2.
    auto H1 = linear("x1");
    auto c = random_cloud(gen, 100, 1);
    PointMatrix p = c.points();
    p.array() -= p.mean();
    auto ctx = H1.context(p);
    CHECK(H1.normal_energy(ctx, p) >= 1.0 - 1e-9);
    // f2 = trace - 1 on R^2: boundary = clouds with E|x|^2 = 1, energy = 4 E|x|^2 = 4 >= beta^2 = 1.
    auto H2 = second("a11 + a22 - 1", 2);
    auto c2 = random_cloud(gen, 100, 2);
    PointMatrix q = c2.points();
    q /= std::sqrt(q.squaredNorm() / 100.0);
    auto ctx2 = H2.context(q);
    CHECK(std::abs(ctx2.value) <= 1e-12);
    CHECK(H2.normal_energy(ctx2, q) >= 1.0 - 1e-9);
}

TEST_CASE("constants are validated") {
    auto f = SmoothField::from_expression("x1", 1, "x");
    CHECK_THROWS_AS(ConstraintModel::linear_expectation(f, {1, 2, 1}), Error);
    CHECK_THROWS_AS(ConstraintModel::linear_expectation(f, {1, 0, 1}), Error);
    CHECK_THROWS_AS(ConstraintModel::linear_expectation(f, {1, 1, 0}), Error);
}

TEST_CASE("psi examples and invariants") {
    PenaltySchedule s(10, ConstantRate{5});
    CHECK(s.psi(0, 0.3) == 0.0);
    CHECK(s.psi(0, -1) == 5.0);
    CHECK(s.psi(0, -0.05) == doctest::Approx(2.5));
    PenaltySchedule cap(4, CommonNoiseCap{});
    CHECK(cap.psi(0, -1) == 16.0);
    CHECK(cap.psi(0, -0.1) == doctest::Approx(6.4));
    double prev = s.psi(0, -2);
    for (double x = -2; x <= 1; x += 1e-3) {
        const double v = s.psi(0, x);
        CHECK(v >= 0.0);
        CHECK(v <= 5.0);
        CHECK(x * v <= 0.0);
        if (x >= 0) CHECK(v == 0.0);
        CHECK(std::abs(v - prev) <= 10 * 5 * 1e-3 + 1e-12);
        prev = v;
    }
    CHECK_THROWS_AS(PenaltySchedule(0.5, ConstantRate{1}), Error);
    CHECK_THROWS_AS(PenaltySchedule(2, ConstantRate{0}), Error);
    CHECK_THROWS_AS(cap.scaled(2.0), Error);
    CHECK(s.scaled(2.0).psi(0, -1) == 10.0);
}

TEST_CASE("rate schedule examples") {
    auto flat = rate_schedule(0.3, 0.5, 0.0, 2.0, 3.0, 1.0);
    for (double r : flat.rate) CHECK(r == doctest::Approx(3.0 / 4.0 * std::sqrt(1.5)));
    auto tab = rate_schedule(0.7, 0.2, 1.3, 0.8, 1.1, 2.0);
    CHECK(tab.rate.front() == doctest::Approx(1.1 / 0.64 * std::sqrt(1.2)));
    for (std::size_t i = 1; i < tab.rate.size(); ++i) CHECK(tab.rate[i] >= tab.rate[i - 1]);
    auto e = rate_schedule(0.0, 0.0, 1.0, 1.0, 1.0, 1.0);
    for (double t : {0.0, 0.25, 0.5, 1.0}) CHECK(e.at(t) == doctest::Approx(std::exp(t / 2)).epsilon(1e-9));
    CHECK_THROWS_AS(rate_schedule(0, 0, 1, 0, 1, 1), Error);
    CHECK_THROWS_AS(rate_schedule(0, 0, 1, 1, -1, 1), Error);
}

TEST_CASE("rate schedule satisfies its fixed point") {
    const double C0 = 0.7, C1 = 0.2, M = 1.3, beta = 0.8, C = 1.1, T = 2.0;
    auto tab = rate_schedule(C0, C1, M, beta, C, T);
    double worst = 0.0;
    for (std::size_t i = 0; i < tab.times.size(); ++i) {
        const double u = tab.times[i];
        const double rhs = C * C / std::pow(beta, 4) * (1 + C1 + M * M * std::exp(C0 * u) * tab.integral[i]);
        worst = std::max(worst, std::abs(tab.rate[i] * tab.rate[i] - rhs) / rhs);
    }
    CHECK(worst <= 1e-6);
}
