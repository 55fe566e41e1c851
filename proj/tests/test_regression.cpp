#include "doctest.h"

#include <cmath>
#include <random>

#include "mrsim/error.hpp"
#include "mrsim/regression.hpp"

using namespace mrsim;

namespace {

PointMatrix features1(std::mt19937_64& gen, std::size_t N) {
    std::normal_distribution<double> g;
    PointMatrix F(static_cast<Eigen::Index>(N), 1);
    for (std::size_t i = 0; i < N; ++i) F(static_cast<Eigen::Index>(i), 0) = g(gen);
    return F;
}

}  // namespace

TEST_CASE("basis enumerates monomials by total degree") {
    PolynomialBasis b({0, 1}, 2);
    CHECK(b.size() == 6);
    double out[6];
    const double x[] = {2.0, 3.0};
    b.evaluate(x, out);
    CHECK(out[0] == 1.0);
    CHECK(out[1] == 2.0);
    CHECK(out[2] == 3.0);
    CHECK(out[3] == 4.0);
    CHECK(out[4] == 6.0);
    CHECK(out[5] == 9.0);
}

TEST_CASE("constant responses give a constant fit with R2 = 1") {
    std::mt19937_64 gen(1);
    auto F = features1(gen, 100);
    Mat y = Mat::Constant(100, 1, 3.5);
    auto fit = regress_conditional(y, F, 3);
    CHECK(fit.r2[0] == 1.0);
    const double x[] = {0.7};
    CHECK(fit.predict(x) == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("linear responses are fitted exactly") {
    std::mt19937_64 gen(2);
    auto F = features1(gen, 200);
    Mat y = 2.0 * Mat(F);
    auto fit = regress_conditional(y, F, 2);
    CHECK(std::abs(fit.coefficients(1, 0) - 2.0) <= 1e-10);
    CHECK(std::abs(fit.coefficients(0, 0)) <= 1e-10);
    CHECK(fit.r2[0] == doctest::Approx(1.0));
}

TEST_CASE("quadratic coefficient within three standard errors") {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> noise(0.0, 0.1);
    auto F = features1(gen, 10000);
    Mat y(10000, 1);
    for (Eigen::Index i = 0; i < 10000; ++i) y(i, 0) = F(i, 0) * F(i, 0) + noise(gen);
    auto fit = regress_conditional(y, F, 2);
    CHECK(std::abs(fit.coefficients(2, 0) - 1.0) <= 3.0 * fit.stderr_coefficients(2, 0));
    CHECK(fit.stderr_coefficients(2, 0) > 0.0);
    CHECK(fit.stderr_coefficients(2, 0) < 0.01);
    CHECK(fit.condition >= 1.0);
}

TEST_CASE("zero-variance features are dropped") {
    PointMatrix F = PointMatrix::Zero(50, 2);
    for (Eigen::Index i = 0; i < 50; ++i) F(i, 1) = static_cast<double>(i) / 10.0;
    Mat y(50, 1);
    for (Eigen::Index i = 0; i < 50; ++i) y(i, 0) = 1.0 + F(i, 1);
    auto fit = regress_conditional(y, F, 3);
    CHECK(fit.dropped == std::vector<std::size_t>{0});
    CHECK(fit.basis.size() == 4);
    const double x[] = {0.0, 2.0};
    CHECK(fit.predict(x) == doctest::Approx(3.0));
}

TEST_CASE("rank deficiency and tiny samples are regression errors") {
    PointMatrix F(6, 1);
    F << 0, 1, 0, 1, 0, 1;
    Mat y = Mat::Ones(6, 1);
    try {
        regress_conditional(y, F, 3);
        FAIL("expected rank deficiency");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::regression);
        CHECK(std::string(e.what()).find("reduce the degree") != std::string::npos);
    }
    PointMatrix G(3, 1);
    G << 0.1, 0.5, 0.9;
    CHECK_THROWS_AS(regress_conditional(Mat::Ones(3, 1), G, 3), Error);
}
