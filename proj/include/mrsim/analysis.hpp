#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "mrsim/backward.hpp"
#include "mrsim/forward.hpp"

namespace mrsim {

/// Empirical-measure convergence rate for moment order p (p = infinity for
/// the i.i.d. case) in dimension d.
double eps_n_reference(double N, std::size_t d, double p = std::numeric_limits<double>::infinity());

struct MeanStderr {
    double mean = 0.0;
    double stderr_ = 0.0;
};
MeanStderr mean_stderr(const std::vector<double>& values);

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

struct ChaosRow {
    std::size_t N = 0;
    double mean_err = 0.0;
    double stderr_ = 0.0;
    double eps_ref = 0.0;
};

struct ChaosReport {
    std::vector<ChaosRow> rows;
    std::size_t reference_N = 0;
    std::size_t reps = 0;
    double fitted_slope = 0.0;
    double slope_stderr = 0.0;
};

struct ChaosOptions {
    std::vector<std::size_t> Ns;
    std::size_t reps = 20;
    std::size_t reference_N = 0;  ///< 0 selects 8 * max(Ns)
    std::size_t time_points = 64;
    double p = std::numeric_limits<double>::infinity();
};

/// E[sup_t W2^2(mu^N_t, mu^ref_t)] against a large reference run; under common
/// noise every repetition draws its own W shared with its own reference.
ChaosReport chaos_rate_experiment(const ForwardProblem& p, const ChaosOptions& opt, const RunConfig& cfg);

struct ProjectionStudyRow {
    std::size_t N = 0;
    double mean_displacement = 0.0;
    double stderr_ = 0.0;
    double mean_eta = 0.0;
    double min_H_after = 0.0;
    std::size_t bad_events = 0;
};

/// Terminal-projection displacement (1/N) sum |xi~ - xi|^2 across N.
std::vector<ProjectionStudyRow> terminal_projection_study(const BackwardProblem& p, const std::vector<std::size_t>& Ns,
                                                          std::size_t reps, const RunConfig& cfg);

using MeasureFunctional = std::function<double(const PointMatrix&)>;

struct FKEstimate {
    double value = 0.0;
    double stderr_ = 0.0;
    std::size_t outer = 0;
    std::size_t inner = 0;
};

/// Mean over `outer` reflected runs (each with its own W) of G applied to the
/// terminal N_inner-particle cloud started from mu0 at grid step t0.
/// `member_offset` selects a disjoint block of seeds.
FKEstimate feynman_kac_estimate(const ForwardProblem& p, const MeasureFunctional& G, std::size_t t0_step,
                                const EmpiricalMeasure& mu0, std::size_t outer, std::size_t N_inner,
                                const RunConfig& cfg, std::uint64_t member_offset = 0);

struct DPPResult {
    double lhs = 0.0;
    double rhs = 0.0;
    double gap = 0.0;
    double stderr_ = 0.0;  ///< combined
    double lhs_stderr = 0.0;
    double rhs_stderr = 0.0;
};

/// u(t0, mu0) against E[u(tau, [X_tau | W])] with u re-estimated by `nested`
/// restarts from each time-tau cloud.
DPPResult dpp_check(const ForwardProblem& p, const MeasureFunctional& G, std::size_t t0_step, std::size_t tau_step,
                    const EmpiricalMeasure& mu0, std::size_t outer, std::size_t N_inner, std::size_t nested,
                    const RunConfig& cfg);

}  // namespace mrsim
