#include "mrsim/constraints.hpp"

#include <algorithm>
#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/expr.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

SmoothField SmoothField::from_expression(const std::string& text, std::size_t dim, const std::string& prefix) {
    require(dim >= 1, ErrorCode::invalid_argument, "field dimension must be >= 1");
    const auto names = expr::indexed_names(prefix, dim);
    auto f = std::make_shared<expr::Expression>(expr::Expression::parse(text, names));
    auto grad = std::make_shared<std::vector<expr::Expression>>();
    auto hess = std::make_shared<std::vector<expr::Expression>>();
    for (std::size_t a = 0; a < dim; ++a) grad->push_back(f->derivative(a));
    for (std::size_t a = 0; a < dim; ++a)
        for (std::size_t b = 0; b < dim; ++b) hess->push_back((*grad)[a].derivative(b));

    SmoothField out;
    out.dim = dim;
    out.value = [f](std::span<const double> x) { return f->eval(x); };
    out.gradient = [grad](std::span<const double> x, std::span<double> g) {
        for (std::size_t a = 0; a < grad->size(); ++a) g[a] = (*grad)[a].eval(x);
    };
    out.hessian = [hess, dim](std::span<const double> x, Mat& h) {
        h.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
        for (std::size_t a = 0; a < dim; ++a)
            for (std::size_t b = 0; b < dim; ++b)
                h(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = (*hess)[a * dim + b].eval(x);
    };
    return out;
}

SymmetricMatrixField SymmetricMatrixField::from_expression(const std::string& text, std::size_t dim) {
    require(dim >= 1 && dim <= 9, ErrorCode::invalid_argument, "matrix field dimension must be in 1..9");
    std::vector<std::string> names;
    for (std::size_t i = 1; i <= dim; ++i)
        for (std::size_t j = 1; j <= dim; ++j) names.push_back("a" + std::to_string(i) + std::to_string(j));
    const std::size_t nn = dim * dim;
    auto f = std::make_shared<expr::Expression>(expr::Expression::parse(text, names));
    auto d1 = std::make_shared<std::vector<expr::Expression>>();
    auto d2 = std::make_shared<std::vector<expr::Expression>>();
    for (std::size_t p = 0; p < nn; ++p) d1->push_back(f->derivative(p));
    for (std::size_t p = 0; p < nn; ++p)
        for (std::size_t q = 0; q < nn; ++q) d2->push_back((*d1)[p].derivative(q));

    auto flatten = [dim](const Mat& A) {
        std::vector<double> v(dim * dim);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j)
                v[i * dim + j] = A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        return v;
    };
    const auto n = static_cast<Eigen::Index>(dim);

    SymmetricMatrixField out;
    out.dim = dim;
    out.value = [f, flatten](const Mat& A) { return f->eval(flatten(A)); };
    out.gradient = [d1, flatten, n, dim](const Mat& A) {
        const auto v = flatten(A);
        Mat raw(n, n);
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = 0; j < dim; ++j)
                raw(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*d1)[i * dim + j].eval(v);
        return Mat(0.5 * (raw + raw.transpose()));
    };
    out.gradient_derivative = [d2, flatten, n, dim, nn](const Mat& A, const Mat& B) {
        const auto v = flatten(A);
        Mat raw = Mat::Zero(n, n);
        for (std::size_t p = 0; p < nn; ++p)
            for (std::size_t q = 0; q < nn; ++q) {
                const double bq = B(static_cast<Eigen::Index>(q / dim), static_cast<Eigen::Index>(q % dim));
                if (bq != 0.0)
                    raw(static_cast<Eigen::Index>(p / dim), static_cast<Eigen::Index>(p % dim)) +=
                        (*d2)[p * nn + q].eval(v) * bq;
            }
        return Mat(0.5 * (raw + raw.transpose()));
    };
    return out;
}

namespace {
void check_constants(const ConstraintConstants& c) {
    require(c.beta > 0.0 && c.beta <= c.M, ErrorCode::invalid_argument,
            "constraint constants must satisfy 0 < beta <= M");
    require(c.eta > 0.0, ErrorCode::invalid_argument, "constraint band width eta must be positive");
}
}  // namespace

ConstraintModel ConstraintModel::linear_expectation(SmoothField h, ConstraintConstants c, std::string label) {
    check_constants(c);
    ConstraintModel m;
    m.kind_ = ConstraintKind::linear_expectation;
    m.dim_ = h.dim;
    m.constants_ = c;
    m.label_ = std::move(label);
    m.field_ = std::make_shared<const SmoothField>(std::move(h));
    return m;
}

ConstraintModel ConstraintModel::first_moment(SmoothField f1, ConstraintConstants c, std::string label) {
    check_constants(c);
    ConstraintModel m;
    m.kind_ = ConstraintKind::first_moment;
    m.dim_ = f1.dim;
    m.constants_ = c;
    m.label_ = std::move(label);
    m.field_ = std::make_shared<const SmoothField>(std::move(f1));
    return m;
}

ConstraintModel ConstraintModel::second_moment(SymmetricMatrixField f2, ConstraintConstants c, std::string label) {
    check_constants(c);
    ConstraintModel m;
    m.kind_ = ConstraintKind::second_moment;
    m.dim_ = f2.dim;
    m.constants_ = c;
    m.label_ = std::move(label);
    m.matrix_field_ = std::make_shared<const SymmetricMatrixField>(std::move(f2));
    return m;
}

void ConstraintModel::check_dim(std::size_t n) const {
    require(n == dim_, ErrorCode::dimension_mismatch,
            "constraint '" + label_ + "' expects dimension " + std::to_string(dim_) + ", got " + std::to_string(n));
}

ConstraintModel::Context ConstraintModel::context(const PointMatrix& points, ThreadPool* pool) const {
    check_dim(static_cast<std::size_t>(points.cols()));
    Context ctx;
    const auto N = static_cast<std::size_t>(points.rows());
    switch (kind_) {
        case ConstraintKind::linear_expectation: {
            std::vector<double> vals(N);
            auto body = [&](std::size_t b, std::size_t e) {
                for (std::size_t i = b; i < e; ++i)
                    vals[i] = field_->value({points.data() + i * dim_, dim_});
            };
            if (pool) pool->parallel_for(N, body);
            else body(0, N);
            ctx.value = pairwise_sum(vals) / static_cast<double>(N);
            break;
        }
        case ConstraintKind::first_moment: {
            auto s = stats(points);
            ctx.mean = std::move(s.mean);
            ctx.value = field_->value({ctx.mean.data(), dim_});
            ctx.f1_gradient.resize(static_cast<Eigen::Index>(dim_));
            field_->gradient({ctx.mean.data(), dim_}, {ctx.f1_gradient.data(), dim_});
            field_->hessian({ctx.mean.data(), dim_}, ctx.f1_hessian);
            break;
        }
        case ConstraintKind::second_moment: {
            auto s = stats(points);
            ctx.mean = std::move(s.mean);
            ctx.second_moment = std::move(s.second_moment);
            ctx.value = matrix_field_->value(ctx.second_moment);
            ctx.f2_gradient = matrix_field_->gradient(ctx.second_moment);
            break;
        }
    }
    return ctx;
}

double ConstraintModel::evaluate(const PointMatrix& points, ThreadPool* pool) const {
    check_dim(static_cast<std::size_t>(points.cols()));
    switch (kind_) {
        case ConstraintKind::linear_expectation: return context(points, pool).value;
        case ConstraintKind::first_moment: {
            const Vec mean = stats(points).mean;
            return field_->value({mean.data(), dim_});
        }
        case ConstraintKind::second_moment: return matrix_field_->value(stats(points).second_moment);
    }
    fail(ErrorCode::internal, "unknown constraint kind");
}

double ConstraintModel::evaluate(const EmpiricalMeasure& mu) const { return evaluate(mu.points()); }

void ConstraintModel::lions_derivative(const Context& ctx, std::span<const double> x, std::span<double> out) const {
    switch (kind_) {
        case ConstraintKind::linear_expectation: field_->gradient(x, out); return;
        case ConstraintKind::first_moment:
            for (std::size_t a = 0; a < dim_; ++a) out[a] = ctx.f1_gradient(static_cast<Eigen::Index>(a));
            return;
        case ConstraintKind::second_moment: {
            // d/dx_i f2((1/N) sum x_j x_j^T) = (2/N) grad f2(A) x_i
            const auto n = static_cast<Eigen::Index>(dim_);
            for (Eigen::Index a = 0; a < n; ++a) {
                double s = 0.0;
                for (Eigen::Index b = 0; b < n; ++b) s += ctx.f2_gradient(a, b) * x[static_cast<std::size_t>(b)];
                out[static_cast<std::size_t>(a)] = 2.0 * s;
            }
            return;
        }
    }
}

Vec ConstraintModel::lions_derivative(const EmpiricalMeasure& mu, const Vec& x) const {
    check_dim(static_cast<std::size_t>(x.size()));
    const Context ctx = context(mu.points());
    Vec out(x.size());
    lions_derivative(ctx, {x.data(), dim_}, {out.data(), dim_});
    return out;
}

Mat ConstraintModel::partial_y_lions(const Context& ctx, std::span<const double> x) const {
    const auto n = static_cast<Eigen::Index>(dim_);
    switch (kind_) {
        case ConstraintKind::linear_expectation: {
            Mat h;
            field_->hessian(x, h);
            return h;
        }
        case ConstraintKind::first_moment: return Mat::Zero(n, n);
        case ConstraintKind::second_moment: return 2.0 * ctx.f2_gradient;
    }
    fail(ErrorCode::internal, "unknown constraint kind");
}

Mat ConstraintModel::partial_y_lions(const EmpiricalMeasure& mu, const Vec& x) const {
    check_dim(static_cast<std::size_t>(x.size()));
    return partial_y_lions(context(mu.points()), {x.data(), dim_});
}

Mat ConstraintModel::lions_second_derivative(const Context& ctx, std::span<const double> x,
                                             std::span<const double> x2) const {
    const auto n = static_cast<Eigen::Index>(dim_);
    switch (kind_) {
        case ConstraintKind::linear_expectation: return Mat::Zero(n, n);
        case ConstraintKind::first_moment: return ctx.f1_hessian;
        case ConstraintKind::second_moment: {
            // column k: 2 D_A grad f2(A)[e_k x2^T + x2 e_k^T] x
            const Eigen::Map<const Vec> xv(x.data(), n), yv(x2.data(), n);
            Mat out(n, n);
            for (Eigen::Index k = 0; k < n; ++k) {
                Mat B = Mat::Zero(n, n);
                B.row(k) += yv.transpose();
                B.col(k) += yv;
                out.col(k) = 2.0 * matrix_field_->gradient_derivative(ctx.second_moment, B) * xv;
            }
            return out;
        }
    }
    fail(ErrorCode::internal, "unknown constraint kind");
}

Mat ConstraintModel::lions_second_derivative(const EmpiricalMeasure& mu, const Vec& x, const Vec& x2) const {
    check_dim(static_cast<std::size_t>(x.size()));
    check_dim(static_cast<std::size_t>(x2.size()));
    return lions_second_derivative(context(mu.points()), {x.data(), dim_}, {x2.data(), dim_});
}

Mat ConstraintModel::f2_gradient_derivative(const Context& ctx, const Mat& B) const {
    require(kind_ == ConstraintKind::second_moment, ErrorCode::invalid_argument,
            "f2 gradient derivative needs a second-moment constraint");
    return matrix_field_->gradient_derivative(ctx.second_moment, B);
}

double ConstraintModel::normal_energy(const Context& ctx, const PointMatrix& points, ThreadPool* pool) const {
    const auto N = static_cast<std::size_t>(points.rows());
    std::vector<double> vals(N);
    auto body = [&](std::size_t b, std::size_t e) {
        std::vector<double> g(dim_);
        for (std::size_t i = b; i < e; ++i) {
            lions_derivative(ctx, {points.data() + i * dim_, dim_}, g);
            double s = 0.0;
            for (double v : g) s += v * v;
            vals[i] = s;
        }
    };
    if (pool) pool->parallel_for(N, body);
    else body(0, N);
    return pairwise_sum(vals) / static_cast<double>(N);
}

double lifted_fd_check(const ConstraintModel& H, const EmpiricalMeasure& cloud, std::size_t i, double eps) {
    require(eps > 0.0, ErrorCode::invalid_argument, "finite-difference step must be positive");
    require(i < cloud.size(), ErrorCode::invalid_argument, "particle index out of range");
    const std::size_t n = cloud.dim();
    const auto N = static_cast<double>(cloud.size());
    const auto ctx = H.context(cloud.points());
    std::vector<double> analytic(n);
    H.lions_derivative(ctx, cloud.point(i), analytic);

    PointMatrix shifted = cloud.points();
    const auto row = static_cast<Eigen::Index>(i);
    double worst = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
        const auto col = static_cast<Eigen::Index>(c);
        const double x0 = shifted(row, col);
        shifted(row, col) = x0 + eps;
        const double up = H.evaluate(shifted);
        shifted(row, col) = x0 - eps;
        const double down = H.evaluate(shifted);
        shifted(row, col) = x0;
        const double fd = (up - down) / (2.0 * eps);
        worst = std::max(worst, std::abs(fd - analytic[c] / N));
    }
    return worst;
}

double RateTable::at(double t) const {
    if (times.empty()) fail(ErrorCode::invalid_argument, "empty rate table");
    if (t <= times.front()) return rate.front();
    if (t >= times.back()) return rate.back();
    const auto it = std::upper_bound(times.begin(), times.end(), t);
    const auto j = static_cast<std::size_t>(it - times.begin());
    const double w = (t - times[j - 1]) / (times[j] - times[j - 1]);
    return (1.0 - w) * rate[j - 1] + w * rate[j];
}

RateTable rate_schedule(double C0, double C1T, double M, double beta, double C, double T, std::size_t steps) {
    require(C > 0.0 && beta > 0.0 && T > 0.0, ErrorCode::invalid_argument,
            "rate schedule needs C > 0, beta > 0 and T > 0");
    require(C0 >= 0.0 && C1T >= 0.0 && M >= 0.0, ErrorCode::invalid_argument,
            "rate schedule needs C0, C1(T), M >= 0");
    require(steps >= 1, ErrorCode::invalid_argument, "rate schedule needs at least one step");
    const double c = C * C / std::pow(beta, 4);
    auto rhs = [&](double u, double rho) { return c * (1.0 + C1T + M * M * std::exp(C0 * u) * rho); };

    RateTable table;
    table.times.resize(steps + 1);
    table.integral.resize(steps + 1);
    table.rate.resize(steps + 1);
    const double h = T / static_cast<double>(steps);
    double rho = 0.0;
    for (std::size_t s = 0; s <= steps; ++s) {
        const double u = h * static_cast<double>(s);
        table.times[s] = u;
        table.integral[s] = rho;
        table.rate[s] = std::sqrt(rhs(u, rho));
        if (s == steps) break;
        const double k1 = rhs(u, rho);
        const double k2 = rhs(u + 0.5 * h, rho + 0.5 * h * k1);
        const double k3 = rhs(u + 0.5 * h, rho + 0.5 * h * k2);
        const double k4 = rhs(u + h, rho + h * k3);
        rho += h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0;
    }
    return table;
}

PenaltySchedule::PenaltySchedule(double k, Mode mode) : k_(k), mode_(std::move(mode)) {
    require(k >= 1.0, ErrorCode::invalid_argument, "penalty index k must be >= 1");
    if (const auto* c = std::get_if<ConstantRate>(&mode_))
        require(c->r > 0.0, ErrorCode::invalid_argument, "penalty rate must be positive");
    if (const auto* s = std::get_if<ScheduledRate>(&mode_))
        require(!s->table.times.empty(), ErrorCode::invalid_argument, "scheduled penalty rate needs a table");
}

double PenaltySchedule::rate(double t) const {
    if (const auto* c = std::get_if<ConstantRate>(&mode_)) return c->r;
    if (const auto* s = std::get_if<ScheduledRate>(&mode_)) return s->table.at(t);
    return k_ * k_;
}

double PenaltySchedule::psi(double t, double x) const {
    if (x >= 0.0) return 0.0;
    const double r = rate(t);
    if (x <= -1.0 / k_) return r;
    return -k_ * r * x;
}

double PenaltySchedule::max_rate(double T) const {
    if (const auto* s = std::get_if<ScheduledRate>(&mode_)) {
        double best = 0.0;
        for (std::size_t j = 0; j < s->table.times.size(); ++j)
            if (s->table.times[j] <= T || j == 0) best = std::max(best, s->table.rate[j]);
        return std::max(best, s->table.at(T));
    }
    return rate(0.0);
}

PenaltySchedule PenaltySchedule::scaled(double factor) const {
    if (const auto* c = std::get_if<ConstantRate>(&mode_)) return {k_, ConstantRate{c->r * factor}};
    if (const auto* s = std::get_if<ScheduledRate>(&mode_)) {
        ScheduledRate copy = *s;
        for (double& r : copy.table.rate) r *= factor;
        return {k_, copy};
    }
    fail(ErrorCode::invalid_argument, "the common-noise cap has a fixed plateau k^2 and cannot be rescaled");
}

}  // namespace mrsim
