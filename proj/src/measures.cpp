#include "mrsim/measures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mrsim/error.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

EmpiricalMeasure::EmpiricalMeasure(PointMatrix points) : points_(std::move(points)) {
    require(points_.rows() >= 1, ErrorCode::invalid_argument, "empirical measure needs at least one point");
    require(points_.cols() >= 1, ErrorCode::invalid_argument, "empirical measure needs dimension >= 1");
}

EmpiricalMeasure::EmpiricalMeasure(std::span<const double> flat, std::size_t dim) {
    require(dim >= 1, ErrorCode::invalid_argument, "empirical measure needs dimension >= 1");
    require(!flat.empty() && flat.size() % dim == 0, ErrorCode::invalid_argument,
            "point buffer length must be a positive multiple of the dimension");
    const auto n = static_cast<Eigen::Index>(flat.size() / dim);
    points_ = Eigen::Map<const PointMatrix>(flat.data(), n, static_cast<Eigen::Index>(dim));
}

double moment(const EmpiricalMeasure& mu, double q) {
    require(q > 0.0, ErrorCode::invalid_argument, "moment order must be positive");
    std::vector<double> terms(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
        const double r = mu.points().row(static_cast<Eigen::Index>(i)).norm();
        terms[i] = q == 2.0 ? r * r : std::pow(r, q);
    }
    return pairwise_sum(terms) / static_cast<double>(mu.size());
}

MeasureStats stats(const PointMatrix& points) {
    const auto N = static_cast<std::size_t>(points.rows());
    const auto n = static_cast<Eigen::Index>(points.cols());
    MeasureStats s{Vec::Zero(n), Mat::Zero(n, n)};
    std::vector<double> col(N);
    for (Eigen::Index a = 0; a < n; ++a) {
        for (std::size_t i = 0; i < N; ++i) col[i] = points(static_cast<Eigen::Index>(i), a);
        s.mean(a) = pairwise_sum(col) / static_cast<double>(N);
        for (Eigen::Index b = a; b < n; ++b) {
            for (std::size_t i = 0; i < N; ++i) {
                const auto r = static_cast<Eigen::Index>(i);
                col[i] = points(r, a) * points(r, b);
            }
            s.second_moment(a, b) = s.second_moment(b, a) = pairwise_sum(col) / static_cast<double>(N);
        }
    }
    return s;
}

MeasureStats stats(const EmpiricalMeasure& mu) { return stats(mu.points()); }

namespace {
void check_pair(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    require(mu.size() == nu.size(), ErrorCode::dimension_mismatch,
            "W2 needs equal-size clouds (" + std::to_string(mu.size()) + " vs " + std::to_string(nu.size()) +
                "); subsample upstream");
    require(mu.dim() == nu.dim(), ErrorCode::dimension_mismatch, "W2 needs clouds of equal dimension");
}
}  // namespace

double wasserstein2_1d(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    check_pair(mu, nu);
    require(mu.dim() == 1, ErrorCode::dimension_mismatch, "wasserstein2_1d needs 1-dimensional clouds");
    std::vector<double> x(mu.points().data(), mu.points().data() + mu.size());
    std::vector<double> y(nu.points().data(), nu.points().data() + nu.size());
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - y[i]) * (x[i] - y[i]);
    return std::sqrt(pairwise_sum(x) / static_cast<double>(x.size()));
}

std::vector<std::size_t> solve_assignment(const Mat& cost) {
    require(cost.rows() == cost.cols(), ErrorCode::invalid_argument, "assignment needs a square cost matrix");
    const auto n = static_cast<std::size_t>(cost.rows());
    constexpr double kInf = std::numeric_limits<double>::infinity();
    // 1-based arrays; column 0 is the virtual root of each augmenting search.
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    std::vector<char> used(n + 1);
    for (std::size_t row = 1; row <= n; ++row) {
        match[0] = row;
        std::size_t j0 = 0;
        std::fill(minv.begin(), minv.end(), kInf);
        std::fill(used.begin(), used.end(), 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            double delta = kInf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(n);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[match[j] - 1] = j - 1;
    return row_to_col;
}

double wasserstein2_exact(const EmpiricalMeasure& mu, const EmpiricalMeasure& nu) {
    check_pair(mu, nu);
    const auto N = static_cast<Eigen::Index>(mu.size());
    Mat cost(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) cost(i, j) = (mu.points().row(i) - nu.points().row(j)).squaredNorm();
    const auto assignment = solve_assignment(cost);
    std::vector<double> terms(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i)
        terms[i] = cost(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(assignment[i]));
    return std::sqrt(pairwise_sum(terms) / static_cast<double>(mu.size()));
}

}  // namespace mrsim
