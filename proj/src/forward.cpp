#include "mrsim/forward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "mrsim/error.hpp"
#include "mrsim/expr.hpp"
#include "mrsim/parallel.hpp"

namespace mrsim {

// ---------------------------------------------------------------- coefficients

CoefficientField::CoefficientField(std::size_t rows, std::size_t cols, Fn fn, bool state_independent)
    : rows_(rows), cols_(cols), fn_(std::move(fn)), state_independent_(state_independent) {
    require(rows >= 1 && cols >= 1, ErrorCode::invalid_argument, "coefficient shape must be at least 1 x 1");
    require(static_cast<bool>(fn_), ErrorCode::invalid_argument, "coefficient function is empty");
}

CoefficientField CoefficientField::constant(std::size_t rows, std::size_t cols, std::vector<double> values) {
    require(values.size() == rows * cols, ErrorCode::dimension_mismatch,
            "constant coefficient needs " + std::to_string(rows * cols) + " entries, got " +
                std::to_string(values.size()));
    const bool zero = std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0; });
    auto shared = std::make_shared<const std::vector<double>>(std::move(values));
    CoefficientField out(
        rows, cols,
        [shared](double, std::span<const double>, std::span<double> o) {
            std::copy(shared->begin(), shared->end(), o.begin());
        },
        true);
    out.zero_ = zero;
    return out;
}

CoefficientField CoefficientField::from_expressions(const std::vector<std::string>& entries, std::size_t rows,
                                                    std::size_t cols, std::size_t state_dim,
                                                    const std::string& prefix) {
    require(entries.size() == rows * cols, ErrorCode::dimension_mismatch,
            "coefficient needs " + std::to_string(rows * cols) + " expressions, got " +
                std::to_string(entries.size()));
    std::vector<std::string> names{"t"};
    for (auto& s : expr::indexed_names(prefix, state_dim)) names.push_back(s);
    auto exprs = std::make_shared<std::vector<expr::Expression>>();
    bool independent = true;
    bool zero = true;
    for (const auto& text : entries) {
        exprs->push_back(expr::Expression::parse(text, names));
        for (std::size_t v = 1; v <= state_dim; ++v) independent = independent && !exprs->back().depends_on(v);
        const auto c = exprs->back().constant_value();
        zero = zero && c && *c == 0.0;
    }
    CoefficientField out(
        rows, cols,
        [exprs, state_dim](double t, std::span<const double> x, std::span<double> o) {
            double vars[16];
            std::vector<double> heap;
            double* v = vars;
            if (state_dim + 1 > 16) {
                heap.resize(state_dim + 1);
                v = heap.data();
            }
            v[0] = t;
            std::copy(x.begin(), x.end(), v + 1);
            const std::span<const double> all(v, state_dim + 1);
            for (std::size_t e = 0; e < exprs->size(); ++e) o[e] = (*exprs)[e].eval(all);
        },
        independent);
    out.zero_ = zero;
    return out;
}

// ---------------------------------------------------------------- initial law

InitialLaw InitialLaw::gaussian(Vec mean, Vec std) {
    require(mean.size() == std.size() && mean.size() > 0, ErrorCode::dimension_mismatch,
            "gaussian initial law: mean and std sizes differ");
    require((std.array() >= 0.0).all(), ErrorCode::invalid_argument, "gaussian initial law: std must be >= 0");
    InitialLaw l;
    l.kind = Kind::gaussian;
    l.a = std::move(mean);
    l.b = std::move(std);
    return l;
}

InitialLaw InitialLaw::point(Vec x) {
    require(x.size() > 0, ErrorCode::invalid_argument, "point initial law needs a coordinate");
    InitialLaw l;
    l.kind = Kind::point;
    l.a = std::move(x);
    return l;
}

InitialLaw InitialLaw::uniform(Vec low, Vec high) {
    require(low.size() == high.size() && low.size() > 0, ErrorCode::dimension_mismatch,
            "uniform initial law: bound sizes differ");
    require((high.array() > low.array()).all(), ErrorCode::invalid_argument,
            "uniform initial law: high must exceed low");
    InitialLaw l;
    l.kind = Kind::uniform;
    l.a = std::move(low);
    l.b = std::move(high);
    return l;
}

InitialLaw InitialLaw::from_cloud(const EmpiricalMeasure& mu) {
    InitialLaw l;
    l.kind = Kind::cloud;
    l.cloud = std::make_shared<const PointMatrix>(mu.points());
    return l;
}

std::size_t InitialLaw::dim() const {
    return kind == Kind::cloud ? static_cast<std::size_t>(cloud->cols()) : static_cast<std::size_t>(a.size());
}

PointMatrix InitialLaw::sample(std::size_t N, std::uint64_t seed) const {
    require(N >= 1, ErrorCode::invalid_argument, "particle count must be >= 1");
    const std::size_t n = dim();
    require(n >= 1, ErrorCode::invalid_argument, "initial law has no dimension");
    const rng::Stream stream(seed);
    PointMatrix X(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(n));
    std::vector<double> z(n);
    for (std::size_t i = 0; i < N; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        switch (kind) {
        case Kind::gaussian:
            stream.normals(i, 0, z);
            for (std::size_t c = 0; c < n; ++c) X(r, c) = a[c] + b[c] * z[c];
            break;
        case Kind::point:
            X.row(r) = a.transpose();
            break;
        case Kind::uniform:
            for (std::size_t c = 0; c < n; ++c)
                X(r, c) = a[c] + (b[c] - a[c]) * stream.uniform(i, 0, static_cast<std::uint32_t>(c));
            break;
        case Kind::cloud:
            if (static_cast<std::size_t>(cloud->rows()) == N) {
                X.row(r) = cloud->row(r);
            } else {
                const auto size = static_cast<std::size_t>(cloud->rows());
                const auto j = std::min(size - 1, static_cast<std::size_t>(stream.uniform(i, 0) * size));
                X.row(r) = cloud->row(static_cast<Eigen::Index>(j));
            }
            break;
        }
    }
    return X;
}

// ---------------------------------------------------------------- problem

void ForwardProblem::validate() const {
    require(n >= 1 && d >= 1, ErrorCode::invalid_argument, "state and noise dimensions must be >= 1");
    require(T > 0.0 && std::isfinite(T), ErrorCode::invalid_argument, "horizon T must be positive");
    require(drift.valid() && sigma0.valid(), ErrorCode::invalid_argument, "drift and sigma0 are required");
    require(drift.rows() == n && drift.cols() == 1, ErrorCode::dimension_mismatch, "drift must be n x 1");
    require(sigma0.rows() == n && sigma0.cols() == d, ErrorCode::dimension_mismatch, "sigma0 must be n x d");
    if (sigma1) {
        require(sigma1->valid(), ErrorCode::invalid_argument, "sigma1 is empty");
        require(sigma1->rows() == n && sigma1->cols() == d, ErrorCode::dimension_mismatch, "sigma1 must be n x d");
    }
    if (constraint)
        require(constraint->dim() == n, ErrorCode::dimension_mismatch,
                "constraint dimension " + std::to_string(constraint->dim()) + " differs from state dimension " +
                    std::to_string(n));
    require(initial.dim() == n, ErrorCode::dimension_mismatch, "initial law dimension differs from state dimension");
}

rng::NoiseSeeds RunConfig::noise_seeds(std::uint64_t member) const {
    if (!seeds) return rng::NoiseSeeds::from_master(seed, member);
    if (member == 0) return *seeds;
    return {rng::derive_seed(seeds->initial, member), rng::derive_seed(seeds->brownian, member),
            rng::derive_seed(seeds->common, member)};
}

const PointMatrix& PathBundle::cloud_at(std::size_t m) const {
    const auto it = std::lower_bound(recorded.begin(), recorded.end(), m);
    if (it == recorded.end() || *it != m)
        fail(ErrorCode::invalid_argument, "grid index " + std::to_string(m) + " was not recorded");
    return X[static_cast<std::size_t>(it - recorded.begin())];
}

bool PathBundle::has_cloud(std::size_t m) const { return std::binary_search(recorded.begin(), recorded.end(), m); }

// ---------------------------------------------------------------- projection

namespace {

void lions_field(const ConstraintModel& H, const ConstraintModel::Context& ctx, const PointMatrix& X,
                 PointMatrix& D, ThreadPool* pool) {
    D.resize(X.rows(), X.cols());
    const std::size_t n = static_cast<std::size_t>(X.cols());
    auto body = [&](std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i)
            H.lions_derivative(ctx, {X.data() + i * n, n}, {D.data() + i * n, n});
    };
    if (pool)
        pool->parallel_for(static_cast<std::size_t>(X.rows()), body);
    else
        body(0, static_cast<std::size_t>(X.rows()));
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

ProjectionResult normal_flow_project(const PointMatrix& cloud, const ConstraintModel& H, double kappa_max,
                                     double tol_H, double tol_flow, ThreadPool* pool) {
    require(kappa_max > 0.0, ErrorCode::invalid_argument, "kappa_max must be positive");
    require(tol_H > 0.0 && tol_flow > 0.0, ErrorCode::invalid_argument, "projection tolerances must be positive");
    ProjectionResult res{cloud, 0.0, 0.0};
    auto ctx = H.context(res.cloud, pool);
    res.value = ctx.value;
    if (ctx.value >= 0.0) return res;

    const double beta = H.constants().beta;
    const double energy = H.normal_energy(ctx, res.cloud, pool);
    if (!(energy >= 0.5 * beta * beta))
        fail(ErrorCode::root_find, "degenerate normal: (1/N) sum |D_mu H|^2 = " + fmt(energy) + " < beta^2/2 = " +
                                       fmt(0.5 * beta * beta) + " at H = " + fmt(ctx.value));

    const double tol = tol_H * (1.0 + std::abs(ctx.value));
    const double target = 0.5 * tol;
    PointMatrix D, trial;
    auto eval_at = [&](double s) {
        trial = res.cloud + s * D;
        return H.evaluate(trial, pool);
    };

    while (true) {
        lions_field(H, ctx, res.cloud, D, pool);
        const double dmax = D.cwiseAbs().maxCoeff();
        if (!(dmax > 0.0) || !std::isfinite(dmax))
            fail(ErrorCode::root_find, "normal flow stalled: D_mu H vanishes at H = " + fmt(ctx.value));
        const double remaining = kappa_max - res.kappa;
        if (remaining <= 0.0)
            fail(ErrorCode::root_find, "normal flow exhausted kappa_max = " + fmt(kappa_max) +
                                           " with H = " + fmt(ctx.value));
        const double step = std::min(tol_flow / dmax, remaining);
        const double Hb = eval_at(step);
        if (Hb < 0.0) {
            res.cloud = trial;
            res.kappa += step;
            ctx = H.context(res.cloud, pool);
            continue;
        }
        if (Hb <= tol) {
            res.cloud = trial;
            res.kappa += step;
            res.value = Hb;
            return res;
        }
        // Illinois regula falsi on g(s) = H(X + sD) - target over [0, step].
        double a = 0.0, ga = ctx.value - target;
        double b = step, gb = Hb - target;
        int side = 0;
        for (int it = 0; it < 200; ++it) {
            double c = b - gb * (b - a) / (gb - ga);
            if (!(c > a && c < b)) c = 0.5 * (a + b);
            const double Hc = eval_at(c);
            if (Hc >= 0.0 && Hc <= tol) {
                res.cloud = trial;
                res.kappa += c;
                res.value = Hc;
                return res;
            }
            const double gc = Hc - target;
            if (gc < 0.0) {
                a = c;
                ga = gc;
                if (side == -1) gb *= 0.5;
                side = -1;
            } else {
                b = c;
                gb = gc;
                if (side == 1) ga *= 0.5;
                side = 1;
            }
            if (b - a <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, b)) break;
        }
        fail(ErrorCode::root_find, "projection root find did not reach H in [0, " + fmt(tol) + "]");
    }
}

ProjectionResult normal_flow_project(const EmpiricalMeasure& cloud, const ConstraintModel& H, double kappa_max,
                                     double tol_H, double tol_flow) {
    return normal_flow_project(cloud.points(), H, kappa_max, tol_H, tol_flow, nullptr);
}

// ---------------------------------------------------------------- particle engine

namespace {

bool all_finite(const PointMatrix& X) { return X.allFinite(); }

void fill_common(const rng::Stream& common, std::size_t step, std::size_t d, double sqdt, double* out) {
    common.normals(0, static_cast<std::uint32_t>(step), {out, d});
    for (std::size_t c = 0; c < d; ++c) out[c] *= sqdt;
}

PathBundle run_particles(const ForwardProblem& p, const PenaltySchedule* sched, const RunConfig& cfg,
                         const ForwardStart& start, const rng::NoiseSeeds& seeds, ThreadPool& pool) {
    p.validate();
    require(cfg.N >= 1, ErrorCode::invalid_argument, "N must be >= 1");
    require(cfg.M >= 1, ErrorCode::invalid_argument, "M must be >= 1");
    require(cfg.record_stride >= 1, ErrorCode::invalid_argument, "record_stride must be >= 1");
    require(start.step < cfg.M, ErrorCode::invalid_argument, "start step must precede the final step");
    const ConstraintModel* H = p.constraint ? &*p.constraint : nullptr;
    require(H != nullptr || sched == nullptr, ErrorCode::invalid_argument, "penalized run needs a constraint");

    const std::size_t n = p.n, d = p.d, N = cfg.N;
    const double dt = cfg.dt(p.T);
    const double sqdt = std::sqrt(dt);

    PathBundle out;
    out.mode = sched ? ForwardMode::penalized : ForwardMode::reflected;
    out.dt = dt;
    out.start_step = start.step;
    out.seeds = seeds;
    const std::size_t steps = cfg.M - start.step;
    out.times.resize(steps + 1);
    for (std::size_t m = 0; m <= steps; ++m) out.times[m] = static_cast<double>(start.step + m) * dt;
    out.K.assign(steps + 1, 0.0);
    if (H) out.H.assign(steps + 1, 0.0);
    if (sched) {
        out.penalty_k = sched->k();
        out.penalty_rate = sched->max_rate(p.T);
    }

    PointMatrix X;
    if (start.cloud) {
        X = *start.cloud;
        require(static_cast<std::size_t>(X.rows()) == N && static_cast<std::size_t>(X.cols()) == n,
                ErrorCode::dimension_mismatch, "start cloud must be N x n");
    } else {
        X = p.initial.sample(N, seeds.initial);
    }

    const bool common = p.sigma1 && !p.sigma1->is_zero();
    if (common) out.common_increments.resize(steps * d);
    const rng::Stream brown(seeds.brownian), comm(seeds.common);

    if (H) {
        out.initial_deficit = H->evaluate(X, &pool);
        if (start.repair_initial && out.initial_deficit < 0.0) {
            const double eta = cfg.eta_init < 0.0 ? H->constants().eta : cfg.eta_init;
            if (out.initial_deficit < -eta)
                fail(ErrorCode::invalid_argument, "initial cloud violates the constraint by " +
                                                      fmt(-out.initial_deficit) + " > eta = " + fmt(eta) +
                                                      "; increase N or start inside the constraint set");
            auto proj = normal_flow_project(X, *H, cfg.kappa_max, cfg.tol_H, cfg.tol_flow, &pool);
            X = std::move(proj.cloud);
            out.initial_kappa = proj.kappa;
        }
    }

    auto record = [&](std::size_t m) {
        if (m % cfg.record_stride == 0 || m == steps) {
            out.recorded.push_back(m);
            out.X.push_back(X);
        }
    };
    record(0);

    PointMatrix Xn(X.rows(), X.cols()), D;
    std::vector<double> dW(d, 0.0);
    ConstraintModel::Context ctx;
    if (H) {
        ctx = H->context(X, &pool);
        out.H[0] = ctx.value;
    }

    for (std::size_t m = 0; m < steps; ++m) {
        const std::size_t g = start.step + m;
        const double t = out.times[m];
        if (common) {
            fill_common(comm, g, d, sqdt, dW.data());
            std::copy(dW.begin(), dW.end(), out.common_increments.begin() + static_cast<std::ptrdiff_t>(m * d));
        }
        double psi = 0.0;
        if (sched) {
            psi = sched->psi(t, ctx.value);
            if (psi > 0.0) lions_field(*H, ctx, X, D, &pool);
        }
        pool.parallel_for(N, [&](std::size_t b, std::size_t e) {
            std::vector<double> bx(n), s0(n * d), s1(common ? n * d : 0), z(d);
            for (std::size_t i = b; i < e; ++i) {
                const std::span<const double> x(X.data() + i * n, n);
                double* y = Xn.data() + i * n;
                p.drift.eval(t, x, bx);
                p.sigma0.eval(t, x, s0);
                brown.normals(i, static_cast<std::uint32_t>(g), z);
                for (std::size_t r = 0; r < n; ++r) {
                    double v = x[r] + bx[r] * dt;
                    for (std::size_t c = 0; c < d; ++c) v += s0[r * d + c] * z[c] * sqdt;
                    y[r] = v;
                }
                if (common) {
                    p.sigma1->eval(t, x, s1);
                    for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < d; ++c) y[r] += s1[r * d + c] * dW[c];
                }
                if (psi > 0.0)
                    for (std::size_t r = 0; r < n; ++r) y[r] += D(static_cast<Eigen::Index>(i), r) * psi * dt;
            }
        });
        if (!all_finite(Xn))
            fail(ErrorCode::numerical, "non-finite particle state at step " + std::to_string(g + 1), g + 1);

        double dK = 0.0;
        if (sched) {
            dK = psi * dt;
            X.swap(Xn);
            ctx = H->context(X, &pool);
            out.H[m + 1] = ctx.value;
        } else if (H) {
            try {
                auto proj = normal_flow_project(Xn, *H, cfg.kappa_max, cfg.tol_H, cfg.tol_flow, &pool);
                X = std::move(proj.cloud);
                dK = proj.kappa;
                out.H[m + 1] = proj.value;
            } catch (const Error& e) {
                fail(e.code(), std::string(e.what()) + " (step " + std::to_string(g + 1) + ")", g + 1);
            }
            ctx = H->context(X, &pool);
        } else {
            X.swap(Xn);
        }
        out.K[m + 1] = out.K[m] + dK;
        record(m + 1);
    }
    return out;
}

void check_guard(const PenaltySchedule& sched, double T, double dt) {
    const double r = sched.max_rate(T);
    const double prod = sched.k() * r * dt;
    if (prod > 1.0 + 1e-12)
        fail(ErrorCode::stability, "penalty stability guard violated: k = " + fmt(sched.k()) + ", rate = " + fmt(r) +
                                       ", dt = " + fmt(dt) + ", k*rate*dt = " + fmt(prod) +
                                       " > 1; increase M or lower k");
}

}  // namespace

void check_penalty_guard(const PenaltySchedule& sched, double T, double dt) { check_guard(sched, T, dt); }

PathBundle simulate_penalized(const ForwardProblem& p, const PenaltySchedule& sched, const RunConfig& cfg,
                              const ForwardStart& start) {
    require(p.constraint.has_value(), ErrorCode::invalid_argument, "penalized run needs a constraint");
    require(cfg.M >= 1, ErrorCode::invalid_argument, "M must be >= 1");
    ThreadPool pool(cfg.threads);
    const auto seeds = cfg.noise_seeds();
    PenaltySchedule current = sched;
    const bool scalable = !std::holds_alternative<CommonNoiseCap>(sched.mode());
    for (int restart = 0;; ++restart) {
        check_guard(current, p.T, cfg.dt(p.T));
        PathBundle out = run_particles(p, &current, cfg, start, seeds, pool);
        out.rate_restarts = restart;
        const double min_H = *std::min_element(out.H.begin(), out.H.end());
        out.rate_adequate = min_H >= -2.0 / current.k();
        if (out.rate_adequate || !scalable || restart >= cfg.adequacy_restarts) return out;
        const auto doubled = current.scaled(2.0);
        if (current.k() * doubled.max_rate(p.T) * cfg.dt(p.T) > 1.0 + 1e-12) return out;
        current = doubled;
    }
}

PathBundle simulate_reflected(const ForwardProblem& p, const RunConfig& cfg, const ForwardStart& start) {
    ThreadPool pool(cfg.threads);
    return run_particles(p, nullptr, cfg, start, cfg.noise_seeds(), pool);
}

std::vector<PathBundle> simulate_common_noise_ensemble(const ForwardProblem& p, const RunConfig& cfg,
                                                       std::size_t outer) {
    require(outer >= 1, ErrorCode::invalid_argument, "ensemble size must be >= 1");
    require(p.sigma1.has_value(), ErrorCode::invalid_argument, "common-noise ensemble needs sigma1");
    ThreadPool pool(cfg.threads);
    std::vector<PathBundle> out;
    out.reserve(outer);
    for (std::size_t j = 0; j < outer; ++j) out.push_back(run_particles(p, nullptr, cfg, {}, cfg.noise_seeds(j), pool));
    return out;
}

// ---------------------------------------------------------------- diagnostics

SkorokhodReport skorokhod_report(const PathBundle& bundle) {
    require(!bundle.H.empty(), ErrorCode::invalid_argument, "bundle carries no constraint values");
    SkorokhodReport r;
    r.min_H = *std::min_element(bundle.H.begin(), bundle.H.end());
    r.K_total = bundle.K.back();
    std::vector<double> terms(bundle.K.size() - 1);
    for (std::size_t m = 0; m + 1 < bundle.K.size(); ++m) {
        const double dK = bundle.K[m + 1] - bundle.K[m];
        const double h = bundle.mode == ForwardMode::reflected ? bundle.H[m + 1] : bundle.H[m];
        terms[m] = h * dK;
        r.K_lipschitz = std::max(r.K_lipschitz, dK / bundle.dt);
    }
    r.complementarity = pairwise_sum(terms);
    return r;
}

ItoResidual ito_residual(const PathBundle& bundle, const ForwardProblem& p) {
    require(p.constraint.has_value(), ErrorCode::invalid_argument, "Ito residual needs a constraint");
    const std::size_t steps = bundle.times.size() - 1;
    for (std::size_t m = 0; m <= steps; ++m)
        if (!bundle.has_cloud(m))
            fail(ErrorCode::invalid_argument, "Ito residual needs every grid cloud; rerun with record_stride 1");
    const ConstraintModel& H = *p.constraint;
    const std::size_t n = p.n, d = p.d, N = bundle.particles();
    const double dt = bundle.dt, sqdt = std::sqrt(dt), invN = 1.0 / static_cast<double>(N);
    const bool common = !bundle.common_increments.empty();
    const bool curved = H.kind() != ConstraintKind::linear_expectation;
    const rng::Stream brown(bundle.seeds.brownian);

    std::vector<double> drift(steps), second(steps), refl(steps), mart(steps);
    std::vector<double> per(N), per2(N), per3(N), per4(N);
    for (std::size_t m = 0; m < steps; ++m) {
        const PointMatrix& X = bundle.cloud_at(m);
        const double t = bundle.times[m];
        const std::size_t g = bundle.start_step + m;
        const double dK = bundle.K[m + 1] - bundle.K[m];
        const auto ctx = H.context(X);
        const double* dW = common ? bundle.common_increments.data() + m * d : nullptr;

        std::vector<Mat> S1(common ? N : 0);
        for (std::size_t i = 0; i < N; ++i) {
            const std::span<const double> x(X.data() + i * n, n);
            Vec Di(n), bx(n);
            H.lions_derivative(ctx, x, {Di.data(), n});
            p.drift.eval(t, x, {bx.data(), n});
            Mat s0(n, d);
            std::vector<double> buf(n * d), z(d);
            p.sigma0.eval(t, x, buf);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) s0(r, c) = buf[r * d + c];
            Mat a = s0 * s0.transpose();
            brown.normals(i, static_cast<std::uint32_t>(g), z);
            double mg = 0.0;
            for (std::size_t c = 0; c < d; ++c) mg += (Di.transpose() * s0.col(c))(0) * z[c] * sqdt;
            if (common) {
                Mat s1(n, d);
                p.sigma1->eval(t, x, buf);
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < d; ++c) s1(r, c) = buf[r * d + c];
                a += s1 * s1.transpose();
                for (std::size_t c = 0; c < d; ++c) mg += (Di.transpose() * s1.col(c))(0) * dW[c];
                S1[i] = std::move(s1);
            }
            const Mat dy = H.partial_y_lions(ctx, x);
            double so = 0.5 * (dy.array() * a.array()).sum() * dt;
            if (curved) {
                const Mat d2 = H.lions_second_derivative(ctx, x, x);
                so += 0.5 * invN * (d2.array() * (s0 * s0.transpose()).array()).sum() * dt;
            }
            per[i] = Di.dot(bx) * dt;
            per2[i] = so;
            per3[i] = Di.squaredNorm() * dK;
            per4[i] = mg;
        }
        drift[m] = invN * pairwise_sum(per);
        second[m] = invN * pairwise_sum(per2);
        refl[m] = invN * pairwise_sum(per3);
        mart[m] = invN * pairwise_sum(per4);

        if (common && curved) {
            double cross = 0.0;
            if (H.kind() == ConstraintKind::first_moment) {
                Mat S = Mat::Zero(n, d);
                for (const auto& s : S1) S += s;
                cross = (ctx.f1_hessian.array() * (S * S.transpose()).array()).sum();
            } else {
                // D2(x, x') is linear in x' through B = s x'^T + x' s^T, so the
                // double sum over particle pairs collapses column by column.
                const auto ni = static_cast<Eigen::Index>(n);
                for (std::size_t c = 0; c < d; ++c) {
                    const auto ci = static_cast<Eigen::Index>(c);
                    Mat Bc = Mat::Zero(ni, ni);
                    for (std::size_t j = 0; j < N; ++j) {
                        const Eigen::Map<const Vec> xj(X.data() + j * n, ni);
                        Bc += S1[j].col(ci) * xj.transpose() + xj * S1[j].col(ci).transpose();
                    }
                    const Mat Gc = 2.0 * H.f2_gradient_derivative(ctx, Bc);
                    for (std::size_t i = 0; i < N; ++i) {
                        const Eigen::Map<const Vec> xi(X.data() + i * n, ni);
                        cross += S1[i].col(ci).dot(Gc * xi);
                    }
                }
            }
            second[m] += 0.5 * invN * invN * cross * dt;
        }
    }

    ItoResidual r;
    r.increment = bundle.H.back() - bundle.H.front();
    r.drift = pairwise_sum(drift);
    r.second_order = pairwise_sum(second);
    r.reflection = pairwise_sum(refl);
    r.martingale = pairwise_sum(mart);
    const double predicted = r.drift + r.second_order + r.reflection;
    r.pathwise = std::abs(r.increment - predicted - r.martingale);
    r.drift_form = std::abs(r.increment - predicted);
    return r;
}

double lipschitz_estimate(const CoefficientField& field, double t, const PointMatrix& sample, double h) {
    require(h > 0.0, ErrorCode::invalid_argument, "finite-difference step must be positive");
    const std::size_t n = static_cast<std::size_t>(sample.cols());
    const std::size_t size = field.rows() * field.cols();
    std::vector<double> x(n), fp(size), fm(size);
    double best = 0.0;
    for (Eigen::Index i = 0; i < sample.rows(); ++i) {
        for (std::size_t c = 0; c < n; ++c) x[c] = sample(i, static_cast<Eigen::Index>(c));
        for (std::size_t c = 0; c < n; ++c) {
            const double x0 = x[c];
            x[c] = x0 + h;
            field.eval(t, x, fp);
            x[c] = x0 - h;
            field.eval(t, x, fm);
            x[c] = x0;
            double norm = 0.0;
            for (std::size_t e = 0; e < size; ++e) norm += (fp[e] - fm[e]) * (fp[e] - fm[e]);
            best = std::max(best, std::sqrt(norm) / (2.0 * h));
        }
    }
    return best;
}

}  // namespace mrsim
