#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mrsim/measures.hpp"

namespace mrsim {

/// Monomials up to a total degree in the selected feature coordinates,
/// ordered by degree then lexicographically (constant first).
class PolynomialBasis {
public:
    PolynomialBasis() = default;
    PolynomialBasis(std::vector<std::size_t> coords, int degree);

    std::size_t size() const noexcept { return exponents_.size(); }
    int degree() const noexcept { return degree_; }
    const std::vector<std::size_t>& coords() const noexcept { return coords_; }
    const std::vector<std::vector<int>>& exponents() const noexcept { return exponents_; }
    void evaluate(std::span<const double> x, std::span<double> out) const;

private:
    std::vector<std::size_t> coords_;
    int degree_ = 0;
    std::vector<std::vector<int>> exponents_;
};

/// Least-squares fit of E[response | features] on a polynomial basis.
struct RegressionFit {
    PolynomialBasis basis;
    Mat coefficients;           ///< basis size x responses
    Mat stderr_coefficients;    ///< same shape
    std::vector<double> r2;     ///< per response column
    std::vector<double> fitted_variance;
    double condition = 1.0;     ///< of the column-normalized design
    std::vector<std::size_t> dropped;  ///< zero-variance feature coordinates

    std::size_t responses() const { return static_cast<std::size_t>(coefficients.cols()); }
    void predict(std::span<const double> x, std::span<double> out) const;
    double predict(std::span<const double> x, std::size_t column = 0) const;
    double min_r2() const;
};

/// OLS on monomials up to total `degree` of the feature rows. Feature
/// coordinates with zero sample variance are dropped (their monomials are
/// collinear with the constant). Throws a regression error on rank
/// deficiency, suggesting a lower degree.
RegressionFit regress_conditional(const Mat& responses, const PointMatrix& features, int degree);

}  // namespace mrsim
