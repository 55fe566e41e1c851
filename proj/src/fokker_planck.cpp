#include "mrsim/fokker_planck.hpp"

#include <algorithm>
#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

Grid1D::Grid1D(double lo, double hi, std::size_t cells) : x_min(lo), x_max(hi), J(cells) {
    require(hi > lo, ErrorCode::invalid_argument, "grid needs x_max > x_min");
    require(cells >= 16, ErrorCode::invalid_argument, "grid needs at least 16 cells");
}

double DensityPath::mass(std::size_t m) const { return pairwise_sum(rho[m]) * grid.dx(); }

double DensityPath::mean(std::size_t m) const {
    std::vector<double> w(grid.J);
    for (std::size_t j = 0; j < grid.J; ++j) w[j] = grid.center(j) * rho[m][j];
    return pairwise_sum(w) * grid.dx();
}

std::vector<double> DensityPath::quantiles(std::size_t m, std::size_t N) const {
    const auto& r = rho[m];
    const double dx = grid.dx();
    const double total = mass(m);
    std::vector<double> out(N);
    std::size_t j = 0;
    double below = 0.0;  // mass left of cell j
    for (std::size_t i = 0; i < N; ++i) {
        const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(N) * total;
        while (j + 1 < grid.J && below + r[j] * dx < u) {
            below += r[j] * dx;
            ++j;
        }
        const double cell = r[j] * dx;
        const double frac = cell > 0.0 ? std::clamp((u - below) / cell, 0.0, 1.0) : 0.5;
        out[i] = grid.face(j) + frac * dx;
    }
    return out;
}

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::vector<double> initial_density(const InitialLaw& law, const Grid1D& g) {
    std::vector<double> rho(g.J, 0.0);
    const double dx = g.dx();
    switch (law.kind) {
    case InitialLaw::Kind::gaussian: {
        const double m = law.a(0), s = law.b(0);
        if (s > 0.0) {
            for (std::size_t j = 0; j < g.J; ++j)
                rho[j] = (normal_cdf((g.face(j + 1) - m) / s) - normal_cdf((g.face(j) - m) / s)) / dx;
            break;
        }
        [[fallthrough]];
    }
    case InitialLaw::Kind::point: {
        const double x = law.a(0);
        require(x >= g.x_min && x < g.x_max, ErrorCode::invalid_argument, "initial point outside the grid");
        rho[std::min(g.J - 1, static_cast<std::size_t>((x - g.x_min) / dx))] = 1.0 / dx;
        break;
    }
    case InitialLaw::Kind::uniform: {
        const double lo = law.a(0), hi = law.b(0);
        for (std::size_t j = 0; j < g.J; ++j) {
            const double overlap = std::max(0.0, std::min(hi, g.face(j + 1)) - std::max(lo, g.face(j)));
            rho[j] = overlap / (hi - lo) / dx;
        }
        break;
    }
    case InitialLaw::Kind::cloud: {
        const auto& c = *law.cloud;
        for (Eigen::Index i = 0; i < c.rows(); ++i) {
            const double x = c(i, 0);
            require(x >= g.x_min && x < g.x_max, ErrorCode::invalid_argument, "initial cloud point outside the grid");
            rho[std::min(g.J - 1, static_cast<std::size_t>((x - g.x_min) / dx))] += 1.0 / dx;
        }
        for (auto& v : rho) v /= static_cast<double>(c.rows());
        break;
    }
    }
    const double total = pairwise_sum(rho) * dx;
    require(total > 0.0, ErrorCode::invalid_argument, "initial density has no mass on the grid");
    for (auto& v : rho) v /= total;
    return rho;
}

/// One conservative upwind transport step with face velocities v (size J+1,
/// walls at 0) over duration s.
void upwind(std::vector<double>& rho, const std::vector<double>& v, double s, double dx) {
    const std::size_t J = rho.size();
    std::vector<double> flux(J + 1, 0.0);
    for (std::size_t f = 1; f < J; ++f) flux[f] = v[f] > 0.0 ? v[f] * rho[f - 1] : v[f] * rho[f];
    for (std::size_t j = 0; j < J; ++j) rho[j] -= s / dx * (flux[j + 1] - flux[j]);
}

std::string fmt(double v) { return std::to_string(v); }

}  // namespace

DensityPath solve_reflected_fp(const ForwardProblem& p, const Grid1D& grid, std::size_t M, const FPOptions& opt) {
    p.validate();
    require(p.n == 1 && p.d == 1, ErrorCode::invalid_argument, "Fokker-Planck solver is one-dimensional");
    require(!p.sigma1 || p.sigma1->is_zero(), ErrorCode::invalid_argument,
            "Fokker-Planck solver does not handle common noise");
    require(p.constraint && p.constraint->kind() == ConstraintKind::linear_expectation, ErrorCode::invalid_argument,
            "Fokker-Planck solver needs an expectation constraint");
    require(M >= 1, ErrorCode::invalid_argument, "M must be >= 1");
    const auto& H = *p.constraint;
    const std::size_t J = grid.J;
    const double dx = grid.dx(), dt = p.T / static_cast<double>(M);

    // h on cell centres, h' on interior faces (walls carry no flux).
    std::vector<double> hval(J), hface(J + 1, 0.0);
    auto h_of = [&](double x) {
        PointMatrix pt(1, 1);
        pt(0, 0) = x;
        return H.evaluate(pt);
    };
    auto dh_of = [&](double x) {
        return H.lions_derivative(EmpiricalMeasure(std::vector<double>{x}, 1), Vec::Constant(1, x))(0);
    };
    for (std::size_t j = 0; j < J; ++j) hval[j] = h_of(grid.center(j));
    for (std::size_t f = 1; f < J; ++f) hface[f] = dh_of(grid.face(f));
    double vmax = 0.0;
    for (double v : hface) vmax = std::max(vmax, std::abs(v));

    auto Hrho = [&](const std::vector<double>& r) {
        std::vector<double> w(J);
        for (std::size_t j = 0; j < J; ++j) w[j] = hval[j] * r[j];
        return pairwise_sum(w) * dx;
    };

    DensityPath out;
    out.grid = grid;
    out.times.resize(M + 1);
    for (std::size_t m = 0; m <= M; ++m) out.times[m] = static_cast<double>(m) * dt;
    out.rho.reserve(M + 1);
    out.rho.push_back(initial_density(p.initial, grid));
    out.K.assign(M + 1, 0.0);
    out.H.assign(M + 1, 0.0);
    out.H[0] = Hrho(out.rho[0]);
    require(out.H[0] >= -opt.tol_H * (1.0 + std::abs(out.H[0])), ErrorCode::invalid_argument,
            "initial density violates the constraint: H = " + fmt(out.H[0]));

    std::vector<double> bface(J + 1), aface(J + 1), flux(J + 1);
    double xs[1], bo[1], so[1];
    for (std::size_t m = 0; m < M; ++m) {
        const double t = out.times[m];
        double bmax = 0.0, amax = 0.0;
        for (std::size_t f = 0; f <= J; ++f) {
            xs[0] = grid.face(f);
            p.drift.eval(t, xs, bo);
            p.sigma0.eval(t, xs, so);
            bface[f] = bo[0];
            aface[f] = so[0] * so[0];
            bmax = std::max(bmax, std::abs(bo[0]));
            amax = std::max(amax, aface[f]);
        }
        const double cfl = dt * (bmax / dx + amax / (dx * dx));
        if (cfl > 1.0 + 1e-12) {
            const auto suggest = static_cast<std::size_t>(std::ceil(p.T * (bmax / dx + amax / (dx * dx))));
            fail(ErrorCode::stability, "Fokker-Planck CFL violated at step " + std::to_string(m) + ": dt*(|b|/dx + a/dx^2) = " +
                                           fmt(cfl) + " > 1; use M >= " + std::to_string(suggest),
                 m);
        }
        auto rho = out.rho.back();
        for (std::size_t f = 1; f < J; ++f) {
            const double adv = bface[f] > 0.0 ? bface[f] * rho[f - 1] : bface[f] * rho[f];
            const double dif = -0.5 * aface[f] * (rho[f] - rho[f - 1]) / dx;
            flux[f] = adv + dif;
        }
        flux[0] = flux[J] = 0.0;
        const double out_left = std::max(0.0, -bface[0]) * rho[0] + 0.5 * aface[0] * rho[0] / dx;
        const double out_right = std::max(0.0, bface[J]) * rho[J - 1] + 0.5 * aface[J] * rho[J - 1] / dx;
        out.boundary_flux += (out_left + out_right) * dt;
        for (std::size_t j = 0; j < J; ++j) rho[j] -= dt / dx * (flux[j + 1] - flux[j]);

        double Hv = Hrho(rho), dK = 0.0;
        if (Hv < 0.0) {
            require(vmax > 0.0, ErrorCode::root_find, "constraint gradient vanishes on the grid");
            const double tol = opt.tol_H * (1.0 + std::abs(Hv));
            const double step = 0.5 * dx / vmax;
            int guard = 0;
            while (true) {
                auto trial = rho;
                upwind(trial, hface, step, dx);
                const double Ht = Hrho(trial);
                if (Ht < 0.0) {
                    if (!(Ht > Hv) || ++guard > 1000000)
                        fail(ErrorCode::root_find, "reflection transport does not raise H (step " + std::to_string(m) + ")", m);
                    rho = std::move(trial);
                    Hv = Ht;
                    dK += step;
                    continue;
                }
                // H is affine in the duration of a single upwind step.
                const double target = 0.5 * tol;
                double s = step * (target - Hv) / (Ht - Hv);
                s = std::clamp(s, 0.0, step);
                auto part = rho;
                upwind(part, hface, s, dx);
                double Hp = Hrho(part);
                if (Hp < 0.0 || Hp > tol) {
                    part = std::move(trial);
                    Hp = Ht;
                    s = step;
                    if (Hp > tol)
                        fail(ErrorCode::root_find, "reflection root find overshoots at step " + std::to_string(m), m);
                }
                rho = std::move(part);
                Hv = Hp;
                dK += s;
                break;
            }
        }
        for (double v : rho)
            if (v < -1e-12 || !std::isfinite(v))
                fail(ErrorCode::numerical, "negative or non-finite density at step " + std::to_string(m + 1), m + 1);
        out.rho.push_back(std::move(rho));
        out.H[m + 1] = Hv;
        out.K[m + 1] = out.K[m] + dK;
    }
    if (out.boundary_flux > opt.boundary_tol)
        fail(ErrorCode::invalid_argument, "boundary mass flux " + fmt(out.boundary_flux) + " exceeds " +
                                              fmt(opt.boundary_tol) + "; widen the domain [" + fmt(grid.x_min) + ", " +
                                              fmt(grid.x_max) + "]");
    return out;
}

std::vector<FPComparisonRow> compare_to_particles(const DensityPath& dp, const PathBundle& bundle,
                                                  const std::vector<double>& times) {
    require(bundle.dim() == 1, ErrorCode::invalid_argument, "particle bundle must be one-dimensional");
    require(!dp.times.empty() && std::abs(dp.times.back() - bundle.times.back()) <= 1e-9 * (1.0 + dp.times.back()),
            ErrorCode::invalid_argument, "density path and particle bundle have different horizons");
    auto locate = [](const std::vector<double>& grid, double t) -> std::optional<std::size_t> {
        const auto it = std::lower_bound(grid.begin(), grid.end(), t - 1e-9 * (1.0 + std::abs(t)));
        if (it == grid.end() || std::abs(*it - t) > 1e-9 * (1.0 + std::abs(t))) return std::nullopt;
        return static_cast<std::size_t>(it - grid.begin());
    };
    std::vector<FPComparisonRow> rows;
    for (double t : times) {
        const auto a = locate(dp.times, t), b = locate(bundle.times, t);
        if (!a || !b || !bundle.has_cloud(*b))
            fail(ErrorCode::invalid_argument, "time " + std::to_string(t) + " is not on both grids");
        const auto& cloud = bundle.cloud_at(*b);
        const auto q = dp.quantiles(*a, static_cast<std::size_t>(cloud.rows()));
        FPComparisonRow row;
        row.t = t;
        row.w2 = wasserstein2_1d(EmpiricalMeasure(q, 1), EmpiricalMeasure(cloud));
        row.K_fp = dp.K[*a];
        row.K_particles = bundle.K[*b];
        rows.push_back(row);
    }
    return rows;
}

}  // namespace mrsim
