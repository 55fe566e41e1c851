#pragma once

#include <vector>

#include "mrsim/forward.hpp"

namespace mrsim {

/// Uniform 1-D cell grid with no-flux boundaries.
struct Grid1D {
    double x_min = -1.0;
    double x_max = 1.0;
    std::size_t J = 16;

    Grid1D() = default;
    Grid1D(double lo, double hi, std::size_t cells);

    double dx() const { return (x_max - x_min) / static_cast<double>(J); }
    double center(std::size_t j) const { return x_min + (static_cast<double>(j) + 0.5) * dx(); }
    double face(std::size_t f) const { return x_min + static_cast<double>(f) * dx(); }
};

struct DensityPath {
    Grid1D grid;
    std::vector<double> times;
    std::vector<std::vector<double>> rho;  ///< (M+1) x J cell averages
    std::vector<double> K;
    std::vector<double> H;
    double boundary_flux = 0.0;  ///< mass that would have left through the walls

    double mass(std::size_t m) const;
    double mean(std::size_t m) const;
    /// N midpoint quantiles (i + 1/2)/N of the piecewise-constant density at step m.
    std::vector<double> quantiles(std::size_t m, std::size_t N) const;
};

struct FPOptions {
    double tol_H = 1e-10;
    double boundary_tol = 1e-6;
};

/// Finite-volume solver for the reflected Fokker-Planck equation of a 1-D
/// problem with an expectation constraint: upwind advection, centred
/// diffusion, then transport along h' until H(rho) >= 0.
DensityPath solve_reflected_fp(const ForwardProblem& p, const Grid1D& grid, std::size_t M, const FPOptions& opt = {});

struct FPComparisonRow {
    double t = 0.0;
    double w2 = 0.0;
    double K_fp = 0.0;
    double K_particles = 0.0;
};

/// W2 between inverse-CDF samples of the density and the particle cloud,
/// and the K discrepancy, at the requested times (present on both grids).
std::vector<FPComparisonRow> compare_to_particles(const DensityPath& dp, const PathBundle& bundle,
                                                  const std::vector<double>& times);

}  // namespace mrsim
