#include "doctest.h"

#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/expr.hpp"

using mrsim::expr::Expression;

TEST_CASE("parse and evaluate arithmetic") {
    const auto e = Expression::parse("1 + 2*x1 - x2/4 + x1^2", {"x1", "x2"});
    const double v[] = {3.0, 8.0};
    CHECK(e.eval(v) == doctest::Approx(1 + 6 - 2 + 9));
}

TEST_CASE("functions and unary minus") {
    const auto e = Expression::parse("-exp(t) + tanh(x1) + pow(x1, 3)", {"t", "x1"});
    const double v[] = {0.5, 0.7};
    CHECK(e.eval(v) == doctest::Approx(-std::exp(0.5) + std::tanh(0.7) + std::pow(0.7, 3)));
}

TEST_CASE("symbolic derivatives match finite differences") {
    const auto e = Expression::parse("x1*exp(x2) + tanh(x1*x2) - x2^3/3", {"x1", "x2"});
    const double x[] = {0.3, -0.8};
    for (std::size_t i = 0; i < 2; ++i) {
        double xp[] = {x[0], x[1]}, xm[] = {x[0], x[1]};
        xp[i] += 1e-6;
        xm[i] -= 1e-6;
        const double fd = (e.eval(xp) - e.eval(xm)) / 2e-6;
        CHECK(e.derivative(i).eval(x) == doctest::Approx(fd).epsilon(1e-7));
    }
}

TEST_CASE("constant folding and dependence") {
    const auto e = Expression::parse("2*x1", {"x1", "x2"});
    CHECK(e.depends_on(0));
    CHECK_FALSE(e.depends_on(1));
    CHECK(e.derivative(0).constant_value().value() == 2.0);
    CHECK(e.derivative(1).constant_value().value() == 0.0);
}

TEST_CASE("syntax errors are config errors") {
    CHECK_THROWS_AS(Expression::parse("x1 +", {"x1"}), mrsim::Error);
    CHECK_THROWS_AS(Expression::parse("y7", {"x1"}), mrsim::Error);
    CHECK_THROWS_AS(Expression::parse("x1^x1", {"x1"}), mrsim::Error);
    try {
        Expression::parse("sin(x1)", {"x1"});
        FAIL("expected throw");
    } catch (const mrsim::Error& e) {
        CHECK(e.code() == mrsim::ErrorCode::config);
    }
}
