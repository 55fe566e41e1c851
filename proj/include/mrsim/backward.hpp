#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mrsim/constraints.hpp"
#include "mrsim/forward.hpp"
#include "mrsim/regression.hpp"

namespace mrsim {

/// Driver f(t, x, y) -> R^n.
struct Driver {
    std::function<void(double, std::span<const double>, std::span<const double>, std::span<double>)> fn;
    bool uses_x = true;

    /// Expressions in t, x1..x<state_dim>, y1..y<n>.
    static Driver from_expressions(const std::vector<std::string>& entries, std::size_t n, std::size_t state_dim);
    static Driver constant(std::vector<double> value);
};

/// BSDE with a normal constraint on the law of Y.
///   brownian:  xi = g(B_T), g given in w1..wd; regression features are B_t.
///   markovian: xi = phi(X_T, [X_T]) for an unconstrained forward X; phi
///              may read x1..xn and the terminal mean m1..mn.
struct BackwardProblem {
    enum class Terminal { brownian, markovian };

    std::size_t n = 1;
    std::size_t d = 1;
    double T = 1.0;
    Terminal terminal = Terminal::brownian;
    std::function<void(std::span<const double>, std::span<double>)> g;
    std::optional<ForwardProblem> forward;
    std::function<void(std::span<const double>, const Vec&, std::span<double>)> phi;
    Driver driver;
    std::optional<ConstraintModel> constraint;
    std::optional<Vec> fallback;   ///< point Lambda with H(delta_Lambda) > 0
    double fallback_std = 0.0;

    static std::function<void(std::span<const double>, std::span<double>)> g_from_expressions(
        const std::vector<std::string>& entries, std::size_t d);
    static std::function<void(std::span<const double>, const Vec&, std::span<double>)> phi_from_expressions(
        const std::vector<std::string>& entries, std::size_t state_dim);

    void validate() const;
    std::size_t feature_dim() const { return terminal == Terminal::brownian ? d : forward->n; }
};

struct TerminalReport {
    double eta_N = 0.0;
    double H_before = 0.0;
    double H_after = 0.0;
    double kappa = 0.0;
    double kappa_budget = 0.0;
    double displacement = 0.0;        ///< (1/N) sum |xi~ - xi|^2
    double displacement_bound = 0.0;  ///< M eta_N^2 / beta^4
    bool bad_event = false;
};

struct TerminalProjection {
    PointMatrix samples;
    TerminalReport report;
};

/// Repairs a terminal cloud so that H >= 0: normal-flow projection within the
/// budget eta_N / beta^2 when H >= -eta_N, else fresh draws around the
/// fallback point. eta_N^2 is the W2 distance between the two halves of the
/// sample.
TerminalProjection project_terminal(const PointMatrix& samples, const ConstraintModel& H,
                                    const std::optional<Vec>& fallback, double fallback_std, std::uint64_t seed,
                                    const RunConfig& cfg);
double estimate_eta_N(const PointMatrix& samples);

struct BSDEBundle {
    ForwardMode mode = ForwardMode::reflected;
    double dt = 0.0;
    std::vector<double> times;
    std::vector<PointMatrix> Y;  ///< N x n per grid time
    std::vector<Mat> Z;          ///< N x (n d) per step
    std::vector<double> K;       ///< forward in time, K[0] = 0
    std::vector<double> H;
    std::vector<double> r2;         ///< min R^2 of the Y regression per step
    std::vector<double> condition;  ///< design condition number per step
    TerminalReport terminal;
    PointMatrix xi_raw;             ///< terminal draws before projection
    double penalty_k = 0.0;
    double penalty_rate = 0.0;
    int rate_restarts = 0;
    bool rate_adequate = true;
    rng::NoiseSeeds seeds;
};

/// Raw terminal draws xi (before projection) with the run's seeds.
PointMatrix sample_terminal(const BackwardProblem& p, const RunConfig& cfg);

BSDEBundle solve_reflected_particle_bsde(const BackwardProblem& p, const RunConfig& cfg);
BSDEBundle solve_penalized_bsde(const BackwardProblem& p, const PenaltySchedule& sched, const RunConfig& cfg);

struct DecouplingTable {
    std::vector<double> times;
    std::vector<Vec> points;
    std::vector<std::vector<Vec>> value;   ///< [time][point]
    std::vector<std::vector<Vec>> stderr_; ///< [time][point]
};

/// u(t, x) along the frozen law flow and K of one mean-field run from mu0
/// at time 0; `steps` are grid indices in [0, M).
DecouplingTable decoupling_field(const BackwardProblem& p, const EmpiricalMeasure& mu0,
                                 const std::vector<std::size_t>& steps, const std::vector<Vec>& points,
                                 const RunConfig& cfg);

}  // namespace mrsim
