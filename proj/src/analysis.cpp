#include "mrsim/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

double eps_n_reference(double N, std::size_t d, double p) {
    require(N >= 1.0, ErrorCode::invalid_argument, "eps_N needs N >= 1");
    require(d >= 1, ErrorCode::invalid_argument, "eps_N needs d >= 1");
    require(p > 2.0, ErrorCode::invalid_argument, "eps_N needs p > 2 (or infinity)");
    const double inv_p = std::isinf(p) ? 0.0 : 1.0 / p;
    if (d < 4) return std::pow(N, -0.5 + inv_p);
    if (d == 4) return std::pow(N, -0.5 + inv_p) * std::pow(std::log(1.0 + N), 1.0 - 2.0 * inv_p);
    return std::pow(N, -2.0 * (1.0 - 2.0 * inv_p) / static_cast<double>(d));
}

MeanStderr mean_stderr(const std::vector<double>& values) {
    require(!values.empty(), ErrorCode::invalid_argument, "mean of an empty sample");
    MeanStderr r;
    r.mean = pairwise_sum(values) / static_cast<double>(values.size());
    if (values.size() >= 2) {
        std::vector<double> sq(values.size());
        for (std::size_t i = 0; i < values.size(); ++i) sq[i] = (values[i] - r.mean) * (values[i] - r.mean);
        const double var = pairwise_sum(sq) / static_cast<double>(values.size() - 1);
        r.stderr_ = std::sqrt(var / static_cast<double>(values.size()));
    }
    return r;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument, "line fit needs >= 2 points");
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    require(sxx > 0.0, ErrorCode::invalid_argument, "line fit needs distinct abscissae");
    LineFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    if (x.size() > 2) {
        double rss = 0;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double e = y[i] - f.intercept - f.slope * x[i];
            rss += e * e;
        }
        f.slope_stderr = std::sqrt(rss / (n - 2.0) / sxx);
    }
    return f;
}

namespace {

/// W2^2 between an N-cloud and a reference cloud of size N_ref.
double w2sq_to_reference(const PointMatrix& X, const PointMatrix& ref, std::uint64_t seed) {
    const auto N = X.rows(), R = ref.rows();
    PointMatrix a, b;
    if (R % N == 0) {
        const auto rep = R / N;
        a.resize(R, X.cols());
        for (Eigen::Index i = 0; i < N; ++i)
            for (Eigen::Index k = 0; k < rep; ++k) a.row(i * rep + k) = X.row(i);
        b = ref;
    } else {
        const rng::Stream s(seed);
        a = X;
        b.resize(N, X.cols());
        for (Eigen::Index i = 0; i < N; ++i) {
            const auto j = std::min<Eigen::Index>(R - 1, static_cast<Eigen::Index>(s.uniform(static_cast<std::uint64_t>(i), 0) *
                                                                                   static_cast<double>(R)));
            b.row(i) = ref.row(j);
        }
    }
    const EmpiricalMeasure ma(std::move(a)), mb(std::move(b));
    const double w = X.cols() == 1 ? wasserstein2_1d(ma, mb) : wasserstein2_exact(ma, mb);
    return w * w;
}

}  // namespace

ChaosReport chaos_rate_experiment(const ForwardProblem& p, const ChaosOptions& opt, const RunConfig& cfg) {
    require(opt.Ns.size() >= 2, ErrorCode::invalid_argument, "chaos experiment needs at least two particle counts");
    for (std::size_t i = 0; i < opt.Ns.size(); ++i) {
        require(opt.Ns[i] >= 2, ErrorCode::invalid_argument, "particle counts must be >= 2");
        if (i) require(opt.Ns[i] > opt.Ns[i - 1], ErrorCode::invalid_argument, "Ns must be strictly increasing");
    }
    require(opt.reps >= 2, ErrorCode::invalid_argument, "chaos experiment needs reps >= 2");
    require(opt.time_points >= 2, ErrorCode::invalid_argument, "time subgrid needs >= 2 points");
    const std::size_t maxN = opt.Ns.back();
    const std::size_t ref_N = opt.reference_N ? opt.reference_N : 8 * maxN;
    require(ref_N >= 8 * maxN, ErrorCode::invalid_argument, "reference_N must be at least 8 * max(Ns)");
    if (p.n > 1)
        require(ref_N <= 2048, ErrorCode::invalid_argument,
                "multi-dimensional chaos runs use exact matching; keep reference_N <= 2048");

    const bool common = p.sigma1 && !p.sigma1->is_zero();
    RunConfig base = cfg;
    base.record_stride = std::max<std::size_t>(1, (cfg.M + opt.time_points - 2) / (opt.time_points - 1));

    auto seeds_for = [&](std::uint64_t a, std::uint64_t b, std::uint64_t rep) {
        auto s = rng::NoiseSeeds::from_master(rng::derive_seed(cfg.seed, a, b));
        if (common) s.common = rng::derive_seed(cfg.seed, 0xC0, rep);
        return s;
    };
    auto reference = [&](std::size_t rep) {
        RunConfig c = base;
        c.N = ref_N;
        c.seeds = seeds_for(0, rep, rep);
        return simulate_reflected(p, c);
    };

    ChaosReport rep;
    rep.reference_N = ref_N;
    rep.reps = opt.reps;
    std::vector<std::vector<double>> errs(opt.Ns.size());
    std::optional<PathBundle> shared_ref;
    if (!common) shared_ref = reference(0);
    for (std::size_t r = 0; r < opt.reps; ++r) {
        std::optional<PathBundle> own_ref;
        if (common) own_ref = reference(r + 1);
        const PathBundle& ref = common ? *own_ref : *shared_ref;
        for (std::size_t k = 0; k < opt.Ns.size(); ++k) {
            RunConfig c = base;
            c.N = opt.Ns[k];
            c.seeds = seeds_for(k + 1, r, common ? r + 1 : 0);
            const auto b = simulate_reflected(p, c);
            double sup = 0.0;
            for (std::size_t idx = 0; idx < b.recorded.size(); ++idx)
                sup = std::max(sup, w2sq_to_reference(b.X[idx], ref.cloud_at(b.recorded[idx]),
                                                      rng::derive_seed(cfg.seed, 0x5B, k * 100003 + r)));
            errs[k].push_back(sup);
        }
    }
    std::vector<double> lx, ly;
    for (std::size_t k = 0; k < opt.Ns.size(); ++k) {
        const auto ms = mean_stderr(errs[k]);
        rep.rows.push_back({opt.Ns[k], ms.mean, ms.stderr_, eps_n_reference(static_cast<double>(opt.Ns[k]), p.n, opt.p)});
        require(ms.mean > 0.0, ErrorCode::numerical, "chaos error vanished; reference and sub-runs coincide");
        lx.push_back(std::log(static_cast<double>(opt.Ns[k])));
        ly.push_back(std::log(ms.mean));
    }
    const auto fit = fit_line(lx, ly);
    rep.fitted_slope = fit.slope;
    rep.slope_stderr = fit.slope_stderr;
    return rep;
}

std::vector<ProjectionStudyRow> terminal_projection_study(const BackwardProblem& p, const std::vector<std::size_t>& Ns,
                                                          std::size_t reps, const RunConfig& cfg) {
    require(p.constraint.has_value(), ErrorCode::invalid_argument, "projection study needs a constraint");
    require(reps >= 2, ErrorCode::invalid_argument, "projection study needs reps >= 2");
    std::vector<ProjectionStudyRow> rows;
    for (std::size_t k = 0; k < Ns.size(); ++k) {
        ProjectionStudyRow row;
        row.N = Ns[k];
        row.min_H_after = INFINITY;
        std::vector<double> disp, eta;
        for (std::size_t r = 0; r < reps; ++r) {
            RunConfig c = cfg;
            c.N = Ns[k];
            c.seeds = rng::NoiseSeeds::from_master(rng::derive_seed(cfg.seed, k + 1, r));
            const auto xi = sample_terminal(p, c);
            const auto tp = project_terminal(xi, *p.constraint, p.fallback, p.fallback_std, c.seeds->initial, c);
            disp.push_back(tp.report.displacement);
            eta.push_back(tp.report.eta_N);
            row.min_H_after = std::min(row.min_H_after, p.constraint->evaluate(tp.samples));
            row.bad_events += tp.report.bad_event ? 1 : 0;
        }
        const auto ms = mean_stderr(disp);
        row.mean_displacement = ms.mean;
        row.stderr_ = ms.stderr_;
        row.mean_eta = mean_stderr(eta).mean;
        rows.push_back(row);
    }
    return rows;
}

namespace {

PointMatrix start_cloud(const EmpiricalMeasure& mu0, std::size_t N, std::uint64_t seed) {
    if (mu0.size() == N) return mu0.points();
    return InitialLaw::from_cloud(mu0).sample(N, seed);
}

double run_G(const ForwardProblem& p, const MeasureFunctional& G, std::size_t step, const EmpiricalMeasure& mu,
             std::size_t N, const RunConfig& cfg, std::uint64_t member) {
    RunConfig c = cfg;
    c.N = N;
    c.record_stride = cfg.M;
    c.seeds = cfg.noise_seeds(member);
    ForwardStart s;
    s.step = step;
    s.cloud = start_cloud(mu, N, c.seeds->initial);
    return G(simulate_reflected(p, c, s).final_cloud());
}

}  // namespace

FKEstimate feynman_kac_estimate(const ForwardProblem& p, const MeasureFunctional& G, std::size_t t0_step,
                                const EmpiricalMeasure& mu0, std::size_t outer, std::size_t N_inner,
                                const RunConfig& cfg, std::uint64_t member_offset) {
    require(outer >= 2 && N_inner >= 2, ErrorCode::invalid_argument, "Feynman-Kac needs outer, inner >= 2");
    require(t0_step < cfg.M, ErrorCode::invalid_argument, "t0 must precede T");
    std::vector<double> vals(outer);
    for (std::size_t j = 0; j < outer; ++j) vals[j] = run_G(p, G, t0_step, mu0, N_inner, cfg, member_offset + j + 1);
    const auto ms = mean_stderr(vals);
    return {ms.mean, ms.stderr_, outer, N_inner};
}

DPPResult dpp_check(const ForwardProblem& p, const MeasureFunctional& G, std::size_t t0_step, std::size_t tau_step,
                    const EmpiricalMeasure& mu0, std::size_t outer, std::size_t N_inner, std::size_t nested,
                    const RunConfig& cfg) {
    require(t0_step < tau_step && tau_step < cfg.M, ErrorCode::invalid_argument, "DPP needs t0 < tau < T");
    require(nested >= 1, ErrorCode::invalid_argument, "DPP needs at least one nested restart");
    const auto lhs = feynman_kac_estimate(p, G, t0_step, mu0, outer, N_inner, cfg, 0);
    const std::uint64_t rhs_base = 1ull << 32;
    std::vector<double> u(outer);
    for (std::size_t j = 0; j < outer; ++j) {
        RunConfig c = cfg;
        c.N = N_inner;
        c.record_stride = 1;
        c.seeds = cfg.noise_seeds(rhs_base + j);
        ForwardStart s;
        s.step = t0_step;
        s.cloud = start_cloud(mu0, N_inner, c.seeds->initial);
        const auto b = simulate_reflected(p, c, s);
        const EmpiricalMeasure at_tau(b.cloud_at(tau_step - t0_step));
        double acc = 0.0;
        for (std::size_t q = 0; q < nested; ++q)
            acc += run_G(p, G, tau_step, at_tau, N_inner, cfg, rhs_base + outer + j * nested + q);
        u[j] = acc / static_cast<double>(nested);
    }
    const auto rhs = mean_stderr(u);
    DPPResult r;
    r.lhs = lhs.value;
    r.rhs = rhs.mean;
    r.gap = std::abs(r.lhs - r.rhs);
    r.lhs_stderr = lhs.stderr_;
    r.rhs_stderr = rhs.stderr_;
    r.stderr_ = std::sqrt(lhs.stderr_ * lhs.stderr_ + rhs.stderr_ * rhs.stderr_);
    return r;
}

}  // namespace mrsim
