#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <vector>

namespace mrsim {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
/// N x n particle coordinates, one particle per row.
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Uniform-weight point cloud standing in for a probability measure on R^n.
class EmpiricalMeasure {
public:
    explicit EmpiricalMeasure(PointMatrix points);
    /// Row-major flat coordinates, `dim` values per point.
    EmpiricalMeasure(std::span<const double> flat, std::size_t dim);

    std::size_t size() const noexcept { return static_cast<std::size_t>(points_.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(points_.cols()); }
    const PointMatrix& points() const noexcept { return points_; }
    std::span<const double> point(std::size_t i) const noexcept {
        return {points_.data() + i * dim(), dim()};
    }

private:
    PointMatrix points_;
};

struct MeasureStats {
    Vec mean;
    Mat second_moment;  ///< (1/N) sum x x^T
};

/// (1/N) sum |x_i|^q, q > 0.
double moment(const EmpiricalMeasure& mu, double q);

MeasureStats stats(const EmpiricalMeasure& mu);
MeasureStats stats(const PointMatrix& points);

/// Exact W2 between equal-size 1-D clouds via sorted pairing.
double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

/// Exact W2 between equal-size clouds via minimum-cost perfect matching on
/// squared Euclidean costs. Cubic in N; intended for N <= 2048.
double wasserstein2_exact(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu);

/// Minimum-cost perfect matching for a dense square cost matrix
/// (shortest augmenting paths with dual potentials). Returns the column
/// assigned to each row.
std::vector<std::size_t> solve_assignment(const Mat& cost);

}  // namespace mrsim
