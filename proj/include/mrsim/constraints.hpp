#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mrsim/measures.hpp"

namespace mrsim {

class ThreadPool;

/// Scalar field on R^n with gradient and Hessian.
struct SmoothField {
    std::size_t dim = 1;
    std::function<double(std::span<const double>)> value;
    std::function<void(std::span<const double>, std::span<double>)> gradient;
    std::function<void(std::span<const double>, Mat&)> hessian;

    /// Variables are `prefix1 .. prefixN` (e.g. x1, x2 or m1, m2).
    static SmoothField from_expression(const std::string& text, std::size_t dim, const std::string& prefix);
};

/// Scalar function of a symmetric n x n matrix. The gradient follows the
/// duality <grad f(A), B> = d/de f(A + eB) over symmetric B.
struct SymmetricMatrixField {
    std::size_t dim = 1;
    std::function<double(const Mat&)> value;
    std::function<Mat(const Mat&)> gradient;
    /// d/de grad f(A + eB)
    std::function<Mat(const Mat&, const Mat&)> gradient_derivative;

    /// Variables a11, a12, ..., ann (n <= 9); a_ij and a_ji read the same entry.
    static SymmetricMatrixField from_expression(const std::string& text, std::size_t dim);
};

/// Declared constants of assumption (HH): |D_mu H| bound M, lower bound beta
/// of the normal energy inside the band -eta <= H <= 0.
struct ConstraintConstants {
    double M = 1.0;
    double beta = 1.0;
    double eta = 1.0;
};

enum class ConstraintKind { linear_expectation, first_moment, second_moment };

/// A constraint H on probability measures with its Lions derivatives.
///   linear_expectation: H(mu) = int h dmu
///   first_moment:       H(mu) = f1(int y mu(dy))
///   second_moment:      H(mu) = f2(int x x^T mu(dx))
class ConstraintModel {
public:
    static ConstraintModel linear_expectation(SmoothField h, ConstraintConstants c, std::string label = "h");
    static ConstraintModel first_moment(SmoothField f1, ConstraintConstants c, std::string label = "f1");
    static ConstraintModel second_moment(SymmetricMatrixField f2, ConstraintConstants c, std::string label = "f2");

    /// Per-measure quantities shared by every derivative evaluation.
    struct Context {
        double value = 0.0;
        Vec mean;
        Mat second_moment;
        Vec f1_gradient;
        Mat f1_hessian;
        Mat f2_gradient;
    };

    ConstraintKind kind() const noexcept { return kind_; }
    std::size_t dim() const noexcept { return dim_; }
    const ConstraintConstants& constants() const noexcept { return constants_; }
    const std::string& label() const noexcept { return label_; }

    Context context(const PointMatrix& points, ThreadPool* pool = nullptr) const;
    double evaluate(const PointMatrix& points, ThreadPool* pool = nullptr) const;
    double evaluate(const EmpiricalMeasure& mu) const;

    void lions_derivative(const Context& ctx, std::span<const double> x, std::span<double> out) const;
    Vec lions_derivative(const EmpiricalMeasure& mu, const Vec& x) const;

    /// d/dy D_mu H(mu)(y), n x n.
    Mat partial_y_lions(const Context& ctx, std::span<const double> x) const;
    Mat partial_y_lions(const EmpiricalMeasure& mu, const Vec& x) const;

    /// D^2_{mu mu} H(mu)(x, x2): entry (p, k) is d/d(x2)_k of D_mu H(mu)(x)_p.
    Mat lions_second_derivative(const Context& ctx, std::span<const double> x, std::span<const double> x2) const;
    Mat lions_second_derivative(const EmpiricalMeasure& mu, const Vec& x, const Vec& x2) const;

    /// d/de grad f2(A + eB) at the context's second moment (second_moment only).
    Mat f2_gradient_derivative(const Context& ctx, const Mat& B) const;

    /// (1/N) sum |D_mu H(mu)(x_i)|^2
    double normal_energy(const Context& ctx, const PointMatrix& points, ThreadPool* pool = nullptr) const;

private:
    ConstraintModel() = default;
    void check_dim(std::size_t n) const;

    ConstraintKind kind_ = ConstraintKind::linear_expectation;
    std::size_t dim_ = 1;
    ConstraintConstants constants_;
    std::string label_;
    std::shared_ptr<const SmoothField> field_;
    std::shared_ptr<const SymmetricMatrixField> matrix_field_;
};

/// max_c | central difference of H^N in coordinate c of x_i
///        - (1/N) D_mu H(mu^N)(x_i)_c |
double lifted_fd_check(const ConstraintModel& H, const EmpiricalMeasure& cloud, std::size_t i, double eps);

/// r(t) table solving r^2(u) = C^2 beta^-4 (1 + C1(T) + M^2 e^{C0 u} int_0^u r^2).
struct RateTable {
    std::vector<double> times;
    std::vector<double> rate;
    std::vector<double> integral;  ///< rho(u) = int_0^u r^2

    double at(double t) const;
};

RateTable rate_schedule(double C0, double C1T, double M, double beta, double C, double T, std::size_t steps = 4096);

struct ConstantRate {
    double r = 1.0;
};
struct ScheduledRate {
    RateTable table;
};
/// Cap k^2 and slope k^3.
struct CommonNoiseCap {};

/// psi_k(t, x) = rate(t) for x <= -1/k, -k rate(t) x on [-1/k, 0], 0 for x >= 0.
class PenaltySchedule {
public:
    using Mode = std::variant<ConstantRate, ScheduledRate, CommonNoiseCap>;

    PenaltySchedule(double k, Mode mode);

    double k() const noexcept { return k_; }
    const Mode& mode() const noexcept { return mode_; }
    double rate(double t) const;
    double psi(double t, double x) const;
    /// sup of the plateau over [0, T]
    double max_rate(double T) const;
    /// Copy with the plateau multiplied by `factor` (constant or scheduled).
    PenaltySchedule scaled(double factor) const;

private:
    double k_;
    Mode mode_;
};

}  // namespace mrsim
