#include "mrsim/backward.hpp"

#include <algorithm>
#include <cmath>

#include "mrsim/error.hpp"
#include "mrsim/expr.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

// ---------------------------------------------------------------- problem pieces

Driver Driver::from_expressions(const std::vector<std::string>& entries, std::size_t n, std::size_t state_dim) {
    require(entries.size() == n, ErrorCode::dimension_mismatch,
            "driver needs " + std::to_string(n) + " expressions, got " + std::to_string(entries.size()));
    std::vector<std::string> names{"t"};
    for (auto& s : expr::indexed_names("x", state_dim)) names.push_back(s);
    for (auto& s : expr::indexed_names("y", n)) names.push_back(s);
    auto exprs = std::make_shared<std::vector<expr::Expression>>();
    Driver drv;
    drv.uses_x = false;
    for (const auto& text : entries) {
        exprs->push_back(expr::Expression::parse(text, names));
        for (std::size_t v = 1; v <= state_dim; ++v) drv.uses_x = drv.uses_x || exprs->back().depends_on(v);
    }
    const std::size_t total = 1 + state_dim + n;
    drv.fn = [exprs, state_dim, n, total](double t, std::span<const double> x, std::span<const double> y,
                                          std::span<double> out) {
        std::vector<double> v(total);
        v[0] = t;
        for (std::size_t c = 0; c < state_dim && c < x.size(); ++c) v[1 + c] = x[c];
        for (std::size_t c = 0; c < n; ++c) v[1 + state_dim + c] = y[c];
        for (std::size_t e = 0; e < exprs->size(); ++e) out[e] = (*exprs)[e].eval(v);
    };
    return drv;
}

Driver Driver::constant(std::vector<double> value) {
    Driver drv;
    drv.uses_x = false;
    auto shared = std::make_shared<const std::vector<double>>(std::move(value));
    drv.fn = [shared](double, std::span<const double>, std::span<const double>, std::span<double> out) {
        std::copy(shared->begin(), shared->end(), out.begin());
    };
    return drv;
}

std::function<void(std::span<const double>, std::span<double>)> BackwardProblem::g_from_expressions(
    const std::vector<std::string>& entries, std::size_t d) {
    const auto names = expr::indexed_names("w", d);
    auto exprs = std::make_shared<std::vector<expr::Expression>>();
    for (const auto& text : entries) exprs->push_back(expr::Expression::parse(text, names));
    return [exprs](std::span<const double> w, std::span<double> out) {
        for (std::size_t e = 0; e < exprs->size(); ++e) out[e] = (*exprs)[e].eval(w);
    };
}

std::function<void(std::span<const double>, const Vec&, std::span<double>)> BackwardProblem::phi_from_expressions(
    const std::vector<std::string>& entries, std::size_t state_dim) {
    auto names = expr::indexed_names("x", state_dim);
    for (auto& s : expr::indexed_names("m", state_dim)) names.push_back(s);
    auto exprs = std::make_shared<std::vector<expr::Expression>>();
    for (const auto& text : entries) exprs->push_back(expr::Expression::parse(text, names));
    return [exprs, state_dim](std::span<const double> x, const Vec& mean, std::span<double> out) {
        std::vector<double> v(2 * state_dim);
        for (std::size_t c = 0; c < state_dim; ++c) {
            v[c] = x[c];
            v[state_dim + c] = mean(static_cast<Eigen::Index>(c));
        }
        for (std::size_t e = 0; e < exprs->size(); ++e) out[e] = (*exprs)[e].eval(v);
    };
}

void BackwardProblem::validate() const {
    require(n >= 1 && d >= 1, ErrorCode::invalid_argument, "BSDE dimensions must be >= 1");
    require(T > 0.0, ErrorCode::invalid_argument, "horizon T must be positive");
    require(static_cast<bool>(driver.fn), ErrorCode::invalid_argument, "BSDE driver is missing");
    if (constraint)
        require(constraint->dim() == n, ErrorCode::dimension_mismatch, "constraint dimension differs from Y dimension");
    if (terminal == Terminal::brownian) {
        require(static_cast<bool>(g), ErrorCode::invalid_argument, "Brownian terminal needs g(w)");
        require(!driver.uses_x, ErrorCode::invalid_argument,
                "driver may not depend on x for a Brownian terminal condition");
    } else {
        require(forward.has_value(), ErrorCode::invalid_argument, "Markovian terminal needs a forward problem");
        require(!forward->constraint.has_value(), ErrorCode::invalid_argument,
                "the forward problem of a Markovian BSDE must be unconstrained");
        require(static_cast<bool>(phi), ErrorCode::invalid_argument, "Markovian terminal needs phi(x, m)");
        require(forward->d == d, ErrorCode::dimension_mismatch, "forward noise dimension differs from BSDE d");
        require(std::abs(forward->T - T) <= 1e-12 * T, ErrorCode::invalid_argument,
                "forward and backward horizons differ");
        forward->validate();
    }
    if (fallback) require(static_cast<std::size_t>(fallback->size()) == n, ErrorCode::dimension_mismatch,
                          "fallback point dimension differs from Y dimension");
}

// ---------------------------------------------------------------- terminal projection

double estimate_eta_N(const PointMatrix& samples) {
    const auto N = samples.rows();
    require(N >= 4, ErrorCode::invalid_argument, "eta_N estimate needs at least 4 samples");
    const Eigen::Index h = std::min<Eigen::Index>(N / 2, samples.cols() == 1 ? N / 2 : 1024);
    const EmpiricalMeasure a(PointMatrix(samples.topRows(h)));
    const EmpiricalMeasure b(PointMatrix(samples.middleRows(N / 2, h)));
    const double w = samples.cols() == 1 ? wasserstein2_1d(a, b) : wasserstein2_exact(a, b);
    return std::sqrt(w);
}

TerminalProjection project_terminal(const PointMatrix& samples, const ConstraintModel& H,
                                    const std::optional<Vec>& fallback, double fallback_std, std::uint64_t seed,
                                    const RunConfig& cfg) {
    TerminalProjection out{samples, {}};
    auto& rep = out.report;
    rep.H_before = H.evaluate(samples);
    rep.eta_N = estimate_eta_N(samples);
    const double beta = H.constants().beta, M = H.constants().M;
    rep.displacement_bound = M * rep.eta_N * rep.eta_N / std::pow(beta, 4);
    if (rep.H_before >= 0.0) {
        rep.H_after = rep.H_before;
        return out;
    }
    if (rep.H_before >= -rep.eta_N) {
        rep.kappa_budget = rep.eta_N / (beta * beta) * (1.0 + 1e-9);
        auto proj = normal_flow_project(samples, H, rep.kappa_budget, cfg.tol_H, cfg.tol_flow);
        out.samples = std::move(proj.cloud);
        rep.kappa = proj.kappa;
        rep.H_after = proj.value;
    } else {
        rep.bad_event = true;
        if (!fallback)
            fail(ErrorCode::invalid_argument, "terminal cloud violates the constraint by more than eta_N = " +
                                                  std::to_string(rep.eta_N) + " and no fallback point is configured");
        const auto n = static_cast<std::size_t>(samples.cols());
        const rng::Stream stream(seed);
        std::vector<double> z(n);
        for (Eigen::Index i = 0; i < samples.rows(); ++i) {
            stream.normals(static_cast<std::uint64_t>(i), 1u << 30, z);
            for (std::size_t c = 0; c < n; ++c)
                out.samples(i, static_cast<Eigen::Index>(c)) = (*fallback)(static_cast<Eigen::Index>(c)) + fallback_std * z[c];
        }
        rep.H_after = H.evaluate(out.samples);
        if (rep.H_after < 0.0) {
            auto proj = normal_flow_project(out.samples, H, cfg.kappa_max, cfg.tol_H, cfg.tol_flow);
            out.samples = std::move(proj.cloud);
            rep.kappa = proj.kappa;
            rep.H_after = proj.value;
        }
    }
    rep.displacement = (out.samples - samples).rowwise().squaredNorm().mean();
    return out;
}

// ---------------------------------------------------------------- recursion

namespace {

struct Features {
    std::vector<PointMatrix> F;   ///< per grid step, N x feature_dim
    PointMatrix xi;               ///< N x n raw terminal values
    rng::NoiseSeeds seeds;
};

Features build_features(const BackwardProblem& p, const RunConfig& cfg, const rng::NoiseSeeds& seeds) {
    Features f;
    f.seeds = seeds;
    const std::size_t N = cfg.N, M = cfg.M, n = p.n;
    const double dt = p.T / static_cast<double>(M), sqdt = std::sqrt(dt);
    f.xi.resize(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
    if (p.terminal == BackwardProblem::Terminal::brownian) {
        const std::size_t d = p.d;
        const rng::Stream brown(seeds.brownian);
        f.F.assign(M + 1, PointMatrix::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(d)));
        std::vector<double> z(d);
        for (std::size_t i = 0; i < N; ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            for (std::size_t m = 0; m < M; ++m) {
                brown.normals(i, static_cast<std::uint32_t>(m), z);
                for (std::size_t c = 0; c < d; ++c)
                    f.F[m + 1](r, static_cast<Eigen::Index>(c)) = f.F[m](r, static_cast<Eigen::Index>(c)) + sqdt * z[c];
            }
            p.g({f.F[M].data() + i * d, d}, {f.xi.data() + i * n, n});
        }
    } else {
        RunConfig fc = cfg;
        fc.record_stride = 1;
        fc.seeds = seeds;
        auto bundle = simulate_reflected(*p.forward, fc);
        f.F = std::move(bundle.X);
        const auto& XT = f.F.back();
        const Vec mean = XT.colwise().mean().transpose();
        const std::size_t k = p.forward->n;
        for (std::size_t i = 0; i < N; ++i) p.phi({XT.data() + i * k, k}, mean, {f.xi.data() + i * n, n});
    }
    require(f.xi.allFinite(), ErrorCode::numerical, "non-finite terminal values");
    return f;
}

BSDEBundle run_backward(const BackwardProblem& p, const PenaltySchedule* sched, const RunConfig& cfg,
                        const Features& feat, ThreadPool& pool) {
    const std::size_t N = cfg.N, M = cfg.M, n = p.n, d = p.d;
    const double dt = p.T / static_cast<double>(M), sqdt = std::sqrt(dt);
    const ConstraintModel* H = p.constraint ? &*p.constraint : nullptr;
    const int degree =
        p.terminal == BackwardProblem::Terminal::brownian ? cfg.brownian_regression_degree : cfg.regression_degree;

    BSDEBundle out;
    out.mode = sched ? ForwardMode::penalized : ForwardMode::reflected;
    out.dt = dt;
    out.seeds = feat.seeds;
    out.times.resize(M + 1);
    for (std::size_t m = 0; m <= M; ++m) out.times[m] = static_cast<double>(m) * dt;
    out.Y.resize(M + 1);
    out.Z.resize(M);
    out.K.assign(M + 1, 0.0);
    out.H.assign(M + 1, 0.0);
    out.r2.assign(M, 1.0);
    out.condition.assign(M, 1.0);
    out.xi_raw = feat.xi;
    if (sched) {
        out.penalty_k = sched->k();
        out.penalty_rate = sched->max_rate(p.T);
    }

    if (H) {
        auto tp = project_terminal(feat.xi, *H, p.fallback, p.fallback_std, feat.seeds.initial, cfg);
        out.Y[M] = std::move(tp.samples);
        out.terminal = tp.report;
        out.H[M] = H->evaluate(out.Y[M]);
    } else {
        out.Y[M] = feat.xi;
    }

    const rng::Stream brown(feat.seeds.brownian);
    std::vector<double> dK(M, 0.0);
    for (std::size_t mm = M; mm-- > 0;) {
        const std::size_t m = mm;
        const double t = out.times[m];
        const PointMatrix& F = feat.F[m];
        const auto fd = static_cast<std::size_t>(F.cols());
        const PointMatrix& Ynext = out.Y[m + 1];

        const Mat resp = Ynext;
        auto fitY = regress_conditional(resp, F, degree);
        out.r2[m] = fitY.min_r2();
        out.condition[m] = fitY.condition;

        // Z regresses (Y_{m+1} - E[Y_{m+1} | F_m]) dB / dt: the subtracted part is
        // F_m-measurable, so the target is unchanged and the variance drops.
        Mat zresp(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n * d));
        pool.parallel_for(N, [&](std::size_t b, std::size_t e) {
            std::vector<double> z(d), yhat(n);
            for (std::size_t i = b; i < e; ++i) {
                brown.normals(i, static_cast<std::uint32_t>(m), z);
                fitY.predict({F.data() + i * fd, fd}, yhat);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c)
                        zresp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r * d + c)) =
                            (Ynext(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) - yhat[r]) * z[c] *
                            sqdt / dt;
            }
        });
        auto fitZ = regress_conditional(zresp, F, degree);

        PointMatrix pred(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
        Mat Zm(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n * d));
        pool.parallel_for(N, [&](std::size_t b, std::size_t e) {
            std::vector<double> yhat(n), fv(n), zv(n * d);
            for (std::size_t i = b; i < e; ++i) {
                const std::span<const double> x(F.data() + i * fd, fd);
                fitY.predict(x, yhat);
                fitZ.predict(x, zv);
                p.driver.fn(t, x, yhat, fv);
                for (std::size_t r = 0; r < n; ++r)
                    pred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = yhat[r] + fv[r] * dt;
                for (std::size_t c = 0; c < n * d; ++c) Zm(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = zv[c];
            }
        });
        if (!pred.allFinite()) fail(ErrorCode::numerical, "non-finite Y at step " + std::to_string(m), m);
        out.Z[m] = std::move(Zm);

        if (!H) {
            out.Y[m] = std::move(pred);
        } else if (sched) {
            const auto ctx = H->context(pred, &pool);
            const double psi = sched->psi(t, ctx.value);
            dK[m] = psi * dt;
            if (psi > 0.0) {
                pool.parallel_for(N, [&](std::size_t b, std::size_t e) {
                    std::vector<double> D(n);
                    for (std::size_t i = b; i < e; ++i) {
                        H->lions_derivative(ctx, {pred.data() + i * n, n}, D);
                        for (std::size_t r = 0; r < n; ++r) pred(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) += D[r] * dK[m];
                    }
                });
            }
            out.Y[m] = std::move(pred);
        } else {
            try {
                auto proj = normal_flow_project(pred, *H, cfg.kappa_max, cfg.tol_H, cfg.tol_flow, &pool);
                dK[m] = proj.kappa;
                out.Y[m] = std::move(proj.cloud);
            } catch (const Error& e) {
                fail(e.code(), std::string(e.what()) + " (backward step " + std::to_string(m) + ")", m);
            }
        }
        if (H) out.H[m] = H->evaluate(out.Y[m], &pool);
    }
    for (std::size_t m = 0; m < M; ++m) out.K[m + 1] = out.K[m] + dK[m];
    return out;
}

void check_backward_config(const BackwardProblem& p, const RunConfig& cfg) {
    p.validate();
    require(cfg.N >= 4, ErrorCode::invalid_argument, "BSDE solver needs N >= 4");
    require(cfg.M >= 1, ErrorCode::invalid_argument, "M must be >= 1");
}

}  // namespace

PointMatrix sample_terminal(const BackwardProblem& p, const RunConfig& cfg) {
    check_backward_config(p, cfg);
    return build_features(p, cfg, cfg.noise_seeds()).xi;
}

BSDEBundle solve_reflected_particle_bsde(const BackwardProblem& p, const RunConfig& cfg) {
    check_backward_config(p, cfg);
    ThreadPool pool(cfg.threads);
    const auto feat = build_features(p, cfg, cfg.noise_seeds());
    return run_backward(p, nullptr, cfg, feat, pool);
}

BSDEBundle solve_penalized_bsde(const BackwardProblem& p, const PenaltySchedule& sched, const RunConfig& cfg) {
    check_backward_config(p, cfg);
    require(p.constraint.has_value(), ErrorCode::invalid_argument, "penalized BSDE needs a constraint");
    const double dt = p.T / static_cast<double>(cfg.M);
    ThreadPool pool(cfg.threads);
    const auto feat = build_features(p, cfg, cfg.noise_seeds());
    PenaltySchedule current = sched;
    const bool scalable = !std::holds_alternative<CommonNoiseCap>(sched.mode());
    for (int restart = 0;; ++restart) {
        check_penalty_guard(current, p.T, dt);
        auto out = run_backward(p, &current, cfg, feat, pool);
        out.rate_restarts = restart;
        const double min_H = *std::min_element(out.H.begin(), out.H.end());
        out.rate_adequate = min_H >= -2.0 / current.k();
        if (out.rate_adequate || !scalable || restart >= cfg.adequacy_restarts) return out;
        const auto doubled = current.scaled(2.0);
        if (current.k() * doubled.max_rate(p.T) * dt > 1.0 + 1e-12) return out;
        current = doubled;
    }
}

// ---------------------------------------------------------------- decoupling field

DecouplingTable decoupling_field(const BackwardProblem& p, const EmpiricalMeasure& mu0,
                                 const std::vector<std::size_t>& steps, const std::vector<Vec>& points,
                                 const RunConfig& cfg) {
    require(p.terminal == BackwardProblem::Terminal::markovian, ErrorCode::invalid_argument,
            "decoupling field needs a Markovian terminal condition");
    check_backward_config(p, cfg);
    const std::size_t N = cfg.N, M = cfg.M, n = p.n;
    const std::size_t k = p.forward->n;
    require(mu0.dim() == k, ErrorCode::dimension_mismatch, "mu0 dimension differs from the forward state");
    for (auto s : steps) require(s < M, ErrorCode::invalid_argument, "decoupling steps must be < M");
    for (const auto& x : points)
        require(static_cast<std::size_t>(x.size()) == k, ErrorCode::dimension_mismatch,
                "decoupling points must live in the forward state space");

    BackwardProblem mf = p;
    mf.forward->initial = InitialLaw::from_cloud(mu0);
    ThreadPool pool(cfg.threads);
    const auto feat = build_features(mf, cfg, cfg.noise_seeds());
    const auto flow = run_backward(mf, nullptr, cfg, feat, pool);
    const Vec terminal_mean = feat.F.back().colwise().mean().transpose();
    const double dt = p.T / static_cast<double>(M);
    std::vector<ConstraintModel::Context> law(M + 1);
    if (p.constraint)
        for (std::size_t m = 0; m <= M; ++m) law[m] = p.constraint->context(flow.Y[m], &pool);

    DecouplingTable table;
    table.points = points;
    table.value.assign(steps.size(), std::vector<Vec>(points.size(), Vec::Zero(static_cast<Eigen::Index>(n))));
    table.stderr_ = table.value;
    for (auto s : steps) table.times.push_back(static_cast<double>(s) * dt);

    std::uint64_t member = 1;
    for (std::size_t si = 0; si < steps.size(); ++si) {
        const std::size_t s = steps[si];
        for (std::size_t xi = 0; xi < points.size(); ++xi, ++member) {
            RunConfig pc = cfg;
            pc.record_stride = 1;
            pc.seeds = cfg.noise_seeds(member);
            ForwardStart start;
            start.step = s;
            start.cloud = PointMatrix(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(k));
            for (std::size_t i = 0; i < N; ++i) start.cloud->row(static_cast<Eigen::Index>(i)) = points[xi].transpose();
            start.repair_initial = false;
            const auto pilot = simulate_reflected(*p.forward, pc, start);

            PointMatrix Y(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
            const auto& XT = pilot.X.back();
            for (std::size_t i = 0; i < N; ++i) p.phi({XT.data() + i * k, k}, terminal_mean, {Y.data() + i * n, n});
            if (p.constraint && flow.terminal.kappa > 0.0) {
                // Transport along the frozen terminal normal for the mean-field flow time.
                const auto& ctx = law[M];
                std::vector<double> D(n);
                for (std::size_t i = 0; i < N; ++i) {
                    p.constraint->lions_derivative(ctx, {Y.data() + i * n, n}, D);
                    for (std::size_t r = 0; r < n; ++r)
                        Y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) += D[r] * flow.terminal.kappa;
                }
            }
            // Monte Carlo error proxy: dispersion of the pilots' terminal values.
            Vec last_stderr(static_cast<Eigen::Index>(n));
            for (std::size_t r = 0; r < n; ++r) {
                const auto col = Y.col(static_cast<Eigen::Index>(r));
                last_stderr(static_cast<Eigen::Index>(r)) =
                    std::sqrt((col.array() - col.mean()).square().sum() / static_cast<double>(N - 1) /
                              static_cast<double>(N));
            }
            for (std::size_t m = M; m-- > s;) {
                const PointMatrix& F = pilot.X[m - s];
                const auto fit = regress_conditional(Mat(Y), F, cfg.regression_degree);
                const double dK = flow.K[m + 1] - flow.K[m];
                const double t = static_cast<double>(m) * dt;
                PointMatrix next(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
                std::vector<double> yhat(n), fv(n), D(n);
                for (std::size_t i = 0; i < N; ++i) {
                    const std::span<const double> x(F.data() + i * k, k);
                    fit.predict(x, yhat);
                    p.driver.fn(t, x, yhat, fv);
                    for (std::size_t r = 0; r < n; ++r) yhat[r] += fv[r] * dt;
                    if (p.constraint && dK > 0.0) {
                        p.constraint->lions_derivative(law[m], yhat, D);
                        for (std::size_t r = 0; r < n; ++r) yhat[r] += D[r] * dK;
                    }
                    for (std::size_t r = 0; r < n; ++r) next(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) = yhat[r];
                }
                Y = std::move(next);
            }
            table.value[si][xi] = Y.colwise().mean().transpose();
            table.stderr_[si][xi] = last_stderr;
        }
    }
    return table;
}

}  // namespace mrsim
