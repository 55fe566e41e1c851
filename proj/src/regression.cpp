#include "mrsim/regression.hpp"

#include <algorithm>
#include <cmath>

#include "mrsim/error.hpp"

namespace mrsim {

namespace {

void exponents_of_degree(std::size_t dims, int total, std::vector<int>& cur, std::size_t pos,
                         std::vector<std::vector<int>>& out) {
    if (pos + 1 == dims) {
        cur[pos] = total;
        out.push_back(cur);
        return;
    }
    for (int e = total; e >= 0; --e) {
        cur[pos] = e;
        exponents_of_degree(dims, total - e, cur, pos + 1, out);
    }
    cur[pos] = 0;
}

}  // namespace

PolynomialBasis::PolynomialBasis(std::vector<std::size_t> coords, int degree)
    : coords_(std::move(coords)), degree_(degree) {
    require(degree >= 0, ErrorCode::invalid_argument, "regression degree must be >= 0");
    exponents_.push_back(std::vector<int>(coords_.size(), 0));
    if (coords_.empty()) return;
    std::vector<int> cur(coords_.size(), 0);
    for (int k = 1; k <= degree; ++k) exponents_of_degree(coords_.size(), k, cur, 0, exponents_);
}

void PolynomialBasis::evaluate(std::span<const double> x, std::span<double> out) const {
    for (std::size_t b = 0; b < exponents_.size(); ++b) {
        double v = 1.0;
        for (std::size_t c = 0; c < coords_.size(); ++c)
            for (int e = 0; e < exponents_[b][c]; ++e) v *= x[coords_[c]];
        out[b] = v;
    }
}

void RegressionFit::predict(std::span<const double> x, std::span<double> out) const {
    double buf[64];
    std::vector<double> heap;
    double* phi = buf;
    if (basis.size() > 64) {
        heap.resize(basis.size());
        phi = heap.data();
    }
    basis.evaluate(x, {phi, basis.size()});
    for (Eigen::Index r = 0; r < coefficients.cols(); ++r) {
        double v = 0.0;
        for (std::size_t b = 0; b < basis.size(); ++b) v += phi[b] * coefficients(static_cast<Eigen::Index>(b), r);
        out[static_cast<std::size_t>(r)] = v;
    }
}

double RegressionFit::predict(std::span<const double> x, std::size_t column) const {
    std::vector<double> out(responses());
    predict(x, out);
    return out[column];
}

double RegressionFit::min_r2() const { return r2.empty() ? 1.0 : *std::min_element(r2.begin(), r2.end()); }

RegressionFit regress_conditional(const Mat& responses, const PointMatrix& features, int degree) {
    const auto N = features.rows();
    require(N >= 1 && responses.rows() == N, ErrorCode::dimension_mismatch,
            "regression needs one response row per feature row");
    require(responses.cols() >= 1, ErrorCode::invalid_argument, "regression needs at least one response column");

    RegressionFit fit;
    std::vector<std::size_t> kept;
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
        const double mean = features.col(c).mean();
        const double var = (features.col(c).array() - mean).square().mean();
        const double floor = 1e-12 * (1.0 + std::abs(mean));
        if (var > floor * floor)
            kept.push_back(static_cast<std::size_t>(c));
        else
            fit.dropped.push_back(static_cast<std::size_t>(c));
    }
    fit.basis = PolynomialBasis(kept, degree);
    const auto p = static_cast<Eigen::Index>(fit.basis.size());
    if (N <= p)
        fail(ErrorCode::regression, "regression needs more samples (" + std::to_string(N) + ") than basis functions (" +
                                        std::to_string(p) + "); reduce the degree or increase N");

    Mat A(N, p);
    std::vector<double> row(static_cast<std::size_t>(p));
    for (Eigen::Index i = 0; i < N; ++i) {
        fit.basis.evaluate({features.data() + i * features.cols(), static_cast<std::size_t>(features.cols())}, row);
        for (Eigen::Index b = 0; b < p; ++b) A(i, b) = row[static_cast<std::size_t>(b)];
    }
    Vec scale = A.colwise().norm().transpose();
    for (Eigen::Index b = 0; b < p; ++b)
        if (!(scale(b) > 0.0) || !std::isfinite(scale(b)))
            fail(ErrorCode::regression, "degenerate regression feature; reduce the degree " + std::to_string(degree));
    A = A * scale.cwiseInverse().asDiagonal();

    Eigen::ColPivHouseholderQR<Mat> qr(A);
    qr.setThreshold(1e-10);
    if (qr.rank() < p)
        fail(ErrorCode::regression, "rank-deficient regression design (rank " + std::to_string(qr.rank()) + " of " +
                                        std::to_string(p) + "); reduce the degree from " + std::to_string(degree));
    const Mat R = qr.matrixR().topLeftCorner(p, p).triangularView<Eigen::Upper>();
    Eigen::JacobiSVD<Mat> svd(R);
    const auto& sv = svd.singularValues();
    fit.condition = sv(0) / sv(p - 1);

    const Mat coef_s = qr.solve(responses);
    fit.coefficients = scale.cwiseInverse().asDiagonal() * coef_s;

    const Mat Rinv = R.triangularView<Eigen::Upper>().solve(Mat::Identity(p, p));
    const Mat cov_perm = Rinv * Rinv.transpose();
    const Mat cov = qr.colsPermutation() * cov_perm * qr.colsPermutation().transpose();

    const Mat fitted = A * coef_s;
    fit.stderr_coefficients.resize(p, responses.cols());
    for (Eigen::Index r = 0; r < responses.cols(); ++r) {
        const auto y = responses.col(r);
        const double ymean = y.mean();
        const double tss = (y.array() - ymean).square().sum();
        const double rss = (y - fitted.col(r)).squaredNorm();
        const double ysq = y.squaredNorm();
        double r2 = 1.0;
        if (tss > 1e-24 * (1.0 + ysq)) r2 = 1.0 - rss / tss;
        fit.r2.push_back(r2);
        const double fmean = fitted.col(r).mean();
        fit.fitted_variance.push_back((fitted.col(r).array() - fmean).square().mean());
        const double sigma2 = rss / static_cast<double>(N - p);
        for (Eigen::Index b = 0; b < p; ++b)
            fit.stderr_coefficients(b, r) = std::sqrt(std::max(0.0, sigma2 * cov(b, b))) / scale(b);
    }
    return fit;
}

}  // namespace mrsim
