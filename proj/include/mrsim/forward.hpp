#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrsim/constraints.hpp"
#include "mrsim/measures.hpp"
#include "mrsim/rng.hpp"

namespace mrsim {

class ThreadPool;

/// Coefficient (t, x) -> rows x cols matrix, written row-major into `out`.
class CoefficientField {
public:
    using Fn = std::function<void(double, std::span<const double>, std::span<double>)>;

    CoefficientField() = default;
    CoefficientField(std::size_t rows, std::size_t cols, Fn fn, bool state_independent = false);

    static CoefficientField constant(std::size_t rows, std::size_t cols, std::vector<double> values);
    /// Row-major expressions in t and `prefix1 .. prefix<state_dim>`.
    static CoefficientField from_expressions(const std::vector<std::string>& entries, std::size_t rows,
                                             std::size_t cols, std::size_t state_dim,
                                             const std::string& prefix = "x");

    void eval(double t, std::span<const double> x, std::span<double> out) const { fn_(t, x, out); }
    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool valid() const noexcept { return static_cast<bool>(fn_); }
    bool state_independent() const noexcept { return state_independent_; }
    /// True when every entry is the constant 0.
    bool is_zero() const noexcept { return zero_; }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Fn fn_;
    bool state_independent_ = false;
    bool zero_ = false;
};

/// Law of X_0, sampled with the counter-based initial stream.
struct InitialLaw {
    enum class Kind { gaussian, point, uniform, cloud };

    Kind kind = Kind::point;
    Vec a;  ///< mean / point / lower corner
    Vec b;  ///< std / unused / upper corner
    std::shared_ptr<const PointMatrix> cloud;

    static InitialLaw gaussian(Vec mean, Vec std);
    static InitialLaw point(Vec x);
    static InitialLaw uniform(Vec low, Vec high);
    /// Uses the cloud as-is when N matches its size, else resamples i.i.d.
    static InitialLaw from_cloud(const EmpiricalMeasure& mu);

    std::size_t dim() const;
    PointMatrix sample(std::size_t N, std::uint64_t seed) const;
};

struct ForwardProblem {
    std::size_t n = 1;  ///< state dimension
    std::size_t d = 1;  ///< Brownian dimension
    CoefficientField drift;                  ///< n x 1
    CoefficientField sigma0;                 ///< n x d, idiosyncratic noise
    std::optional<CoefficientField> sigma1;  ///< n x d, common noise
    std::optional<ConstraintModel> constraint;
    InitialLaw initial;
    double T = 1.0;

    void validate() const;
};

/// Numerical settings shared by the particle solvers.
struct RunConfig {
    std::size_t N = 1000;
    std::size_t M = 100;
    std::uint64_t seed = 0;
    std::optional<rng::NoiseSeeds> seeds;  ///< overrides derivation from `seed`
    unsigned threads = 1;
    double tol_H = 1e-10;      ///< projection accepts H in [0, tol_H (1 + |H|)]
    double tol_flow = 1e-3;    ///< normal-flow sub-step times sup |D_mu H|
    double kappa_max = 1e3;    ///< flow budget of one projection
    double eta_init = -1.0;    ///< max initial deficit repaired; <0 uses the model's eta
    std::size_t record_stride = 1;
    int regression_degree = 3;
    int brownian_regression_degree = 1;
    int adequacy_restarts = 3;

    rng::NoiseSeeds noise_seeds(std::uint64_t member = 0) const;
    double dt(double T) const { return T / static_cast<double>(M); }
};

enum class ForwardMode { penalized, reflected };

struct PathBundle {
    ForwardMode mode = ForwardMode::reflected;
    double dt = 0.0;
    std::size_t start_step = 0;
    std::vector<double> times;             ///< grid from the start step to T
    std::vector<std::size_t> recorded;     ///< indices into `times` with stored clouds
    std::vector<PointMatrix> X;            ///< one cloud per recorded index
    std::vector<double> K;                 ///< nondecreasing, K[0] = 0
    std::vector<double> H;                 ///< H(mu^N) on the grid
    std::vector<double> common_increments; ///< shared dW, (times.size()-1) x d, empty without common noise
    rng::NoiseSeeds seeds;
    double initial_deficit = 0.0;          ///< H of the raw X_0 cloud
    double initial_kappa = 0.0;            ///< flow time used to repair X_0
    double penalty_k = 0.0;
    double penalty_rate = 0.0;             ///< plateau after adequacy restarts
    int rate_restarts = 0;
    bool rate_adequate = true;

    std::size_t particles() const { return X.empty() ? 0 : static_cast<std::size_t>(X.front().rows()); }
    std::size_t dim() const { return X.empty() ? 0 : static_cast<std::size_t>(X.front().cols()); }
    const PointMatrix& final_cloud() const { return X.back(); }
    /// Stored cloud at grid index m (must be recorded).
    const PointMatrix& cloud_at(std::size_t m) const;
    bool has_cloud(std::size_t m) const;
};

struct ProjectionResult {
    PointMatrix cloud;
    double kappa = 0.0;
    double value = 0.0;  ///< H after projection
};

/// Moves the cloud along dx_i = D_mu H(mu)(x_i) dkappa until H lands in
/// [0, tol]; returns the smallest such kappa (0 when H >= 0 already).
ProjectionResult normal_flow_project(const PointMatrix& cloud, const ConstraintModel& H, double kappa_max,
                                     double tol_H, double tol_flow = 1e-3, ThreadPool* pool = nullptr);
ProjectionResult normal_flow_project(const EmpiricalMeasure& cloud, const ConstraintModel& H, double kappa_max,
                                     double tol_H, double tol_flow = 1e-3);

struct ForwardStart {
    std::size_t step = 0;               ///< grid index of the initial time
    std::optional<PointMatrix> cloud;   ///< initial particles; sampled from the law when absent
    bool repair_initial = true;         ///< project an infeasible initial cloud
};

/// Throws a stability error unless k * max rate * dt <= 1.
void check_penalty_guard(const PenaltySchedule& sched, double T, double dt);

PathBundle simulate_penalized(const ForwardProblem& p, const PenaltySchedule& sched, const RunConfig& cfg,
                              const ForwardStart& start = {});
PathBundle simulate_reflected(const ForwardProblem& p, const RunConfig& cfg, const ForwardStart& start = {});

/// `outer` bundles, member j using its own W path (and its own B and X_0).
std::vector<PathBundle> simulate_common_noise_ensemble(const ForwardProblem& p, const RunConfig& cfg,
                                                       std::size_t outer);

struct SkorokhodReport {
    double min_H = 0.0;
    double complementarity = 0.0;  ///< sum H dK, H taken where the increment acts
    double K_total = 0.0;
    double K_lipschitz = 0.0;      ///< max dK / dt
};

SkorokhodReport skorokhod_report(const PathBundle& bundle);

struct ItoResidual {
    double pathwise = 0.0;     ///< realized martingale terms included
    double drift_form = 0.0;   ///< martingale terms dropped (expectation form)
    double increment = 0.0;    ///< H(mu_T) - H(mu_0)
    double drift = 0.0;
    double second_order = 0.0;
    double reflection = 0.0;
    double martingale = 0.0;
};

/// Particle Ito formula for H(mu^N_t) checked along a stored bundle. Needs
/// every grid cloud (record_stride 1); Brownian increments are regenerated
/// from the bundle's seeds.
ItoResidual ito_residual(const PathBundle& bundle, const ForwardProblem& p);

/// Largest finite-difference derivative norm of a coefficient over sample points.
double lipschitz_estimate(const CoefficientField& field, double t, const PointMatrix& sample, double h = 1e-5);

}  // namespace mrsim
