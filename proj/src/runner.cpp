#include "mrsim/runner.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "mrsim/analysis.hpp"
#include "mrsim/backward.hpp"
#include "mrsim/fokker_planck.hpp"
#include "mrsim/forward.hpp"
#include "mrsim/parallel.hpp"
#include "mrsim/svg.hpp"

namespace mrsim {

const char* version_string() noexcept { return "0.1.0"; }

namespace {

namespace fs = std::filesystem;

const std::vector<std::string> kCommands = {"forward", "backward", "chaos", "fp-compare", "fk", "dpp"};

// ------------------------------------------------------------ validation

/// Configuration error carrying one entry per offending field.
class ConfigIssues : public Error {
public:
    explicit ConfigIssues(std::vector<std::string> issues)
        : Error(ErrorCode::config, join(issues)), issues_(std::move(issues)) {}
    const std::vector<std::string>& issues() const noexcept { return issues_; }

private:
    static std::string join(const std::vector<std::string>& v) {
        std::string s = "invalid configuration: ";
        for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "; " : "") + v[i];
        return s;
    }
    std::vector<std::string> issues_;
};

struct Issues {
    std::vector<std::string> list;
    void add(const std::string& path, const std::string& msg) {
        std::string entry = path + ": " + msg;
        if (std::find(list.begin(), list.end(), entry) == list.end()) list.push_back(std::move(entry));
    }
};

enum class Sign { any, positive, nonnegative };

/// Reads one JSON object, filling defaults in place and recording problems.
class Section {
public:
    Section(Json& node, std::string path, Issues& issues) : node_(node), path_(std::move(path)), issues_(issues) {
        if (!node_.is_object()) {
            if (!node_.is_null()) issues_.add(path_, "must be an object");
            node_ = Json::object();
        }
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    bool has(const std::string& key) const { return node_.contains(key) && !node_[key].is_null(); }
    Json& raw(const std::string& key) {
        seen_.insert(key);
        return node_[key];
    }
    Issues& issues() { return issues_; }

    double number(const std::string& key, std::optional<double> def, Sign sign = Sign::any) {
        seen_.insert(key);
        if (!has(key)) {
            if (!def) {
                issues_.add(at(key), "required number is missing");
                return std::numeric_limits<double>::quiet_NaN();
            }
            node_[key] = *def;
            return *def;
        }
        const Json& v = node_[key];
        if (!v.is_number()) {
            issues_.add(at(key), "must be a number");
            return def.value_or(std::numeric_limits<double>::quiet_NaN());
        }
        const double x = v.get<double>();
        if (!std::isfinite(x)) issues_.add(at(key), "must be finite");
        if (sign == Sign::positive && !(x > 0)) issues_.add(at(key), "must be positive");
        if (sign == Sign::nonnegative && !(x >= 0)) issues_.add(at(key), "must be nonnegative");
        return x;
    }

    std::uint64_t integer(const std::string& key, std::optional<std::uint64_t> def, std::uint64_t min_value = 0) {
        seen_.insert(key);
        if (!has(key)) {
            if (!def) {
                issues_.add(at(key), "required integer is missing");
                return min_value;
            }
            node_[key] = *def;
            return *def;
        }
        const Json& v = node_[key];
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
            issues_.add(at(key), "must be a nonnegative integer");
            return def.value_or(min_value);
        }
        const std::uint64_t x = v.get<std::uint64_t>();
        if (x < min_value) issues_.add(at(key), "must be >= " + std::to_string(min_value));
        return x;
    }

    std::string choice(const std::string& key, std::optional<std::string> def, const std::vector<std::string>& options) {
        seen_.insert(key);
        if (!has(key)) {
            if (!def) {
                issues_.add(at(key), "required field is missing");
                return options.front();
            }
            node_[key] = *def;
            return *def;
        }
        const Json& v = node_[key];
        if (v.is_string()) {
            const std::string s = v.get<std::string>();
            if (std::find(options.begin(), options.end(), s) != options.end()) return s;
        }
        std::string opts;
        for (const auto& o : options) opts += (opts.empty() ? "" : ", ") + o;
        issues_.add(at(key), "must be one of {" + opts + "}");
        return def.value_or(options.front());
    }

    bool flag(const std::string& key, bool def) {
        seen_.insert(key);
        if (!has(key)) {
            node_[key] = def;
            return def;
        }
        if (!node_[key].is_boolean()) {
            issues_.add(at(key), "must be true or false");
            return def;
        }
        return node_[key].get<bool>();
    }

    /// List of strings; a bare string is accepted as a one-element list.
    std::optional<std::vector<std::string>> strings(const std::string& key, bool required, std::size_t expected) {
        seen_.insert(key);
        if (!has(key)) {
            if (required) issues_.add(at(key), "required expression list is missing");
            return std::nullopt;
        }
        Json& v = node_[key];
        if (v.is_string()) v = Json::array({v});
        if (!v.is_array()) {
            issues_.add(at(key), "must be a list of expressions");
            return std::nullopt;
        }
        std::vector<std::string> out;
        for (const auto& e : v) {
            if (!e.is_string()) {
                issues_.add(at(key), "entries must be strings");
                return std::nullopt;
            }
            out.push_back(e.get<std::string>());
        }
        if (out.size() != expected) {
            issues_.add(at(key), "expected " + std::to_string(expected) + " entries, got " + std::to_string(out.size()));
            return std::nullopt;
        }
        return out;
    }

    /// Numeric vector; a bare number is broadcast to `expected` entries.
    std::optional<Vec> vector(const std::string& key, bool required, std::size_t expected, Sign sign = Sign::any) {
        seen_.insert(key);
        if (!has(key)) {
            if (required) issues_.add(at(key), "required vector is missing");
            return std::nullopt;
        }
        Json& v = node_[key];
        if (v.is_number()) v = Json::array({v});
        if (!v.is_array()) {
            issues_.add(at(key), "must be a list of numbers");
            return std::nullopt;
        }
        std::vector<double> vals;
        for (const auto& e : v) {
            if (!e.is_number()) {
                issues_.add(at(key), "entries must be numbers");
                return std::nullopt;
            }
            vals.push_back(e.get<double>());
        }
        if (vals.size() == 1 && expected > 1) {
            vals.assign(expected, vals[0]);
            v = vals;
        }
        if (vals.size() != expected) {
            issues_.add(at(key), "expected " + std::to_string(expected) + " entries, got " + std::to_string(vals.size()));
            return std::nullopt;
        }
        const auto bad = [&](double x) {
            return (sign == Sign::positive && !(x > 0)) || (sign == Sign::nonnegative && !(x >= 0));
        };
        if (std::any_of(vals.begin(), vals.end(), bad))
            issues_.add(at(key), sign == Sign::positive ? "entries must be positive" : "entries must be nonnegative");
        return Eigen::Map<const Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
    }

    std::vector<double> number_list(const std::string& key, const std::vector<double>& def) {
        seen_.insert(key);
        if (!has(key)) {
            node_[key] = def;
            return def;
        }
        const Json& v = node_[key];
        std::vector<double> out;
        if (!v.is_array()) {
            issues_.add(at(key), "must be a list of numbers");
            return def;
        }
        for (const auto& e : v) {
            if (!e.is_number()) {
                issues_.add(at(key), "entries must be numbers");
                return def;
            }
            out.push_back(e.get<double>());
        }
        return out;
    }

    Section child(const std::string& key, bool create = true) {
        seen_.insert(key);
        if (create && !has(key)) node_[key] = Json::object();
        return Section(node_[key], at(key), issues_);
    }

    /// Reports keys that no reader asked for.
    void finish() {
        for (auto it = node_.begin(); it != node_.end(); ++it)
            if (!seen_.count(it.key())) issues_.add(at(it.key()), "unknown field");
    }

private:
    Json& node_;
    std::string path_;
    Issues& issues_;
    std::set<std::string> seen_;
};

template <class F>
auto guarded(Issues& issues, const std::string& path, F&& make) -> std::optional<decltype(make())> {
    try {
        return make();
    } catch (const std::exception& e) {
        issues.add(path, e.what());
        return std::nullopt;
    }
}

// ------------------------------------------------------------ run plan

struct Functional {
    std::string kind = "expectation";
    MeasureFunctional G;
};

struct Plan {
    std::string command;
    std::uint64_t seed = 0;
    ForwardProblem forward;
    bool forward_ready = false;
    std::optional<BackwardProblem> backward;
    RunConfig cfg;
    ForwardMode mode = ForwardMode::reflected;
    std::optional<PenaltySchedule> schedule;
    std::size_t ensemble = 0;
    ChaosOptions chaos;
    Grid1D fp_grid;
    std::size_t fp_M = 0;
    std::vector<double> fp_times;
    Functional functional;
    double t0 = 0.0;
    double tau = 0.0;
    std::size_t outer = 64;
    std::size_t N_inner = 2048;
    std::size_t nested = 1;
    bool write_paths = true;
    std::size_t path_particles = 64;
};

std::optional<ConstraintModel> read_constraint(Section s, std::size_t dim) {
    const std::string family =
        s.choice("family", std::nullopt, {"linear_expectation", "first_moment", "second_moment"});
    ConstraintConstants c;
    c.M = s.number("M", 1.0, Sign::positive);
    c.beta = s.number("beta", 1.0, Sign::positive);
    c.eta = s.number("eta", 1.0, Sign::positive);
    std::optional<std::string> text;
    if (s.has("expr") && s.raw("expr").is_string()) text = s.raw("expr").get<std::string>();
    else s.issues().add(s.at("expr"), "required expression string is missing");
    s.finish();
    if (!text) return std::nullopt;
    return guarded(s.issues(), s.at("expr"), [&] {
        if (family == "linear_expectation")
            return ConstraintModel::linear_expectation(SmoothField::from_expression(*text, dim, "x"), c, *text);
        if (family == "first_moment")
            return ConstraintModel::first_moment(SmoothField::from_expression(*text, dim, "m"), c, *text);
        return ConstraintModel::second_moment(SymmetricMatrixField::from_expression(*text, dim), c, *text);
    });
}

std::optional<InitialLaw> read_initial(Section s, std::size_t n) {
    const std::string law = s.choice("law", std::nullopt, {"gaussian", "point", "uniform"});
    std::optional<InitialLaw> out;
    if (law == "gaussian") {
        if (!s.has("mean")) s.raw("mean") = std::vector<double>(n, 0.0);
        if (!s.has("std")) s.raw("std") = std::vector<double>(n, 1.0);
        auto mean = s.vector("mean", true, n);
        auto sd = s.vector("std", true, n, Sign::nonnegative);
        if (mean && sd) out = InitialLaw::gaussian(*mean, *sd);
    } else if (law == "point") {
        auto x = s.vector("x", true, n);
        if (x) out = InitialLaw::point(*x);
    } else {
        auto lo = s.vector("low", true, n), hi = s.vector("high", true, n);
        if (lo && hi) {
            if (((*hi - *lo).array() <= 0).any()) s.issues().add(s.at("high"), "must exceed low in every coordinate");
            else out = InitialLaw::uniform(*lo, *hi);
        }
    }
    s.finish();
    return out;
}

std::optional<CoefficientField> read_field(Section& s, const std::string& key, bool required, std::size_t rows,
                                           std::size_t cols, std::size_t state_dim) {
    auto entries = s.strings(key, required, rows * cols);
    if (!entries) return std::nullopt;
    return guarded(s.issues(), s.at(key),
                   [&] { return CoefficientField::from_expressions(*entries, rows, cols, state_dim); });
}

Plan build_plan(Json& config) {
    Issues issues;
    Plan plan;
    Section root(config, "", issues);
    const std::string schema = root.choice("$schema", std::string(kConfigSchema), {kConfigSchema});
    (void)schema;
    plan.command = root.choice("command", std::nullopt, kCommands);
    plan.seed = root.integer("seed", 0);
    const std::string& cmd = plan.command;

    // ---- problem
    Section prob = root.child("problem");
    const std::size_t n = prob.integer("dim", 1, 1);
    const std::size_t d = prob.integer("brownian_dim", 1, 1);
    const double T = prob.number("T", 1.0, Sign::positive);
    const bool brownian_bsde =
        cmd == "backward" && prob.has("backward") && prob.raw("backward").is_object() &&
        prob.raw("backward").value("terminal", std::string("brownian")) == "brownian";
    const bool needs_forward = !brownian_bsde;

    ForwardProblem& fp = plan.forward;
    fp.n = n;
    fp.d = d;
    fp.T = T;
    auto drift = read_field(prob, "drift", needs_forward, n, 1, n);
    auto sigma0 = read_field(prob, "sigma0", needs_forward, n, d, n);
    auto sigma1 = read_field(prob, "sigma1", cmd == "fk" || cmd == "dpp", n, d, n);
    if (!prob.has("sigma1")) prob.raw("sigma1") = nullptr;
    if (drift) fp.drift = *drift;
    if (sigma0) fp.sigma0 = *sigma0;
    if (sigma1) fp.sigma1 = *sigma1;
    if (prob.has("constraint")) fp.constraint = read_constraint(prob.child("constraint"), n);
    else prob.raw("constraint") = nullptr;
    if (prob.has("initial") || needs_forward) {
        auto init = read_initial(prob.child("initial"), n);
        if (init) fp.initial = *init;
    }
    plan.forward_ready = needs_forward && drift && sigma0;

    if (prob.has("backward")) {
        Section bw = prob.child("backward");
        BackwardProblem bp;
        bp.n = bw.integer("dim", 1, 1);
        bp.d = d;
        bp.T = T;
        const std::string term = bw.choice("terminal", std::string("brownian"), {"brownian", "markovian"});
        bp.terminal = term == "brownian" ? BackwardProblem::Terminal::brownian : BackwardProblem::Terminal::markovian;
        if (bp.terminal == BackwardProblem::Terminal::brownian) {
            if (auto g = bw.strings("g", true, bp.n))
                if (auto f = guarded(issues, bw.at("g"), [&] { return BackwardProblem::g_from_expressions(*g, d); }))
                    bp.g = *f;
        } else {
            if (auto phi = bw.strings("phi", true, bp.n))
                if (auto f = guarded(issues, bw.at("phi"),
                                     [&] { return BackwardProblem::phi_from_expressions(*phi, n); }))
                    bp.phi = *f;
            if (fp.constraint) issues.add("problem.constraint", "the forward state of a backward problem is unconstrained");
            ForwardProblem fwd = fp;
            fwd.constraint.reset();
            bp.forward = fwd;
        }
        std::vector<std::string> zero(bp.n, "0");
        if (!bw.has("driver")) bw.raw("driver") = zero;
        if (auto drv = bw.strings("driver", false, bp.n))
            if (auto f = guarded(issues, bw.at("driver"), [&] { return Driver::from_expressions(*drv, bp.n, n); }))
                bp.driver = *f;
        if (bw.has("constraint")) bp.constraint = read_constraint(bw.child("constraint"), bp.n);
        else bw.raw("constraint") = nullptr;
        if (bw.has("fallback")) bp.fallback = bw.vector("fallback", false, bp.n);
        else bw.raw("fallback") = nullptr;
        bp.fallback_std = bw.number("fallback_std", 0.0, Sign::nonnegative);
        bw.finish();
        plan.backward = std::move(bp);
    } else if (cmd == "backward") {
        issues.add("problem.backward", "required for the backward command");
    }
    prob.finish();

    // ---- numerics
    Section num = root.child("numerics");
    RunConfig& cfg = plan.cfg;
    cfg.N = num.integer("N", 1000, 2);
    cfg.M = num.integer("M", 100, 1);
    cfg.seed = plan.seed;
    const std::string mode = num.choice("mode", std::string("reflected"), {"reflected", "penalized"});
    plan.mode = mode == "reflected" ? ForwardMode::reflected : ForwardMode::penalized;
    const double k = num.number("k", 100.0, Sign::positive);
    {
        Section rate = num.child("rate");
        const std::string rmode =
            rate.choice("mode", std::string("constant"), {"constant", "scheduled", "common_noise_cap"});
        std::optional<PenaltySchedule::Mode> pm;
        if (rmode == "constant") {
            pm = ConstantRate{rate.number("value", 1.0, Sign::positive)};
        } else if (rmode == "scheduled") {
            const double C0 = rate.number("C0", 0.0, Sign::nonnegative);
            const double C1T = rate.number("C1T", 0.0, Sign::nonnegative);
            const double C = rate.number("C", 1.0, Sign::positive);
            const ConstraintModel* H = cmd == "backward" && plan.backward && plan.backward->constraint
                                           ? &*plan.backward->constraint
                                           : (fp.constraint ? &*fp.constraint : nullptr);
            if (!H) {
                if (plan.mode == ForwardMode::penalized)
                    issues.add(rate.at("mode"), "a scheduled rate needs a constraint (for M and beta)");
            } else if (auto tab = guarded(issues, rate.at("mode"), [&] {
                           return rate_schedule(C0, C1T, H->constants().M, H->constants().beta, C, T);
                       })) {
                pm = ScheduledRate{*tab};
            }
        } else {
            pm = CommonNoiseCap{};
        }
        rate.finish();
        if (pm) plan.schedule.emplace(k, *pm);
    }
    cfg.tol_H = num.number("tol_H", 1e-10, Sign::positive);
    cfg.tol_flow = num.number("tol_flow", 1e-3, Sign::positive);
    cfg.kappa_max = num.number("kappa_max", 1e3, Sign::positive);
    cfg.eta_init = num.number("eta_init", -1.0);
    cfg.record_stride = num.integer("record_stride", 1, 1);
    cfg.regression_degree = static_cast<int>(num.integer("regression_degree", 3, 0));
    cfg.brownian_regression_degree = static_cast<int>(num.integer("brownian_regression_degree", 1, 0));
    cfg.adequacy_restarts = static_cast<int>(num.integer("adequacy_restarts", 3, 0));
    num.finish();

    // ---- experiment
    Section ex = root.child("experiment");
    plan.ensemble = ex.integer("ensemble", 0);
    if (cmd == "forward" && plan.ensemble > 0 && !fp.sigma1)
        issues.add("experiment.ensemble", "an ensemble of common-noise paths needs problem.sigma1");
    {
        Section ch = ex.child("chaos");
        std::vector<double> Ns = ch.number_list("Ns", {64, 128, 256, 512});
        plan.chaos.Ns.clear();
        for (double v : Ns) {
            if (!(v >= 2) || v != std::floor(v)) {
                issues.add(ch.at("Ns"), "entries must be integers >= 2");
                break;
            }
            plan.chaos.Ns.push_back(static_cast<std::size_t>(v));
        }
        if (cmd == "chaos" && plan.chaos.Ns.empty()) issues.add(ch.at("Ns"), "must not be empty");
        if (plan.chaos.Ns.size() == Ns.size()) ch.raw("Ns") = plan.chaos.Ns;
        plan.chaos.reps = ch.integer("reps", 20, 2);
        plan.chaos.reference_N = ch.integer("reference_N", 0);
        if (plan.chaos.reference_N != 0 && !plan.chaos.Ns.empty() &&
            plan.chaos.reference_N < 8 * *std::max_element(plan.chaos.Ns.begin(), plan.chaos.Ns.end()))
            issues.add(ch.at("reference_N"), "must be 0 (automatic) or at least 8 * max(Ns)");
        plan.chaos.time_points = ch.integer("time_points", 64, 2);
        if (ch.has("p")) plan.chaos.p = ch.number("p", std::nullopt, Sign::positive);
        else ch.raw("p") = nullptr;
        ch.finish();
    }
    {
        Section f = ex.child("fp");
        const double lo = f.number("x_min", -11.0), hi = f.number("x_max", 11.0);
        const std::size_t J = f.integer("J", 400, 16);
        if (!(hi > lo)) issues.add(f.at("x_max"), "must exceed x_min");
        else plan.fp_grid = Grid1D(lo, hi, J);
        plan.fp_M = f.integer("M", 0);
        if (plan.fp_M == 0) plan.fp_M = cfg.M;
        plan.fp_times = f.number_list("times", {0.25 * T, 0.5 * T, 0.75 * T, T});
        if (T > 0)
            for (double t : plan.fp_times)
                if (!(t >= 0 && t <= T)) issues.add(f.at("times"), "entries must lie in [0, T]");
        f.finish();
    }
    {
        Section f = ex.child("fk");
        Section g = f.child("functional");
        plan.functional.kind = g.choice("kind", std::string("expectation"), {"expectation", "constant", "constraint"});
        if (plan.functional.kind == "expectation") {
            if (!g.has("expr")) g.raw("expr") = "x1";
            if (!g.raw("expr").is_string()) issues.add(g.at("expr"), "must be an expression string");
            else if (auto h = guarded(issues, g.at("expr"), [&] {
                         return SmoothField::from_expression(g.raw("expr").get<std::string>(), n, "x");
                     })) {
                auto field = std::make_shared<SmoothField>(*h);
                plan.functional.G = [field](const PointMatrix& X) {
                    std::vector<double> v(static_cast<std::size_t>(X.rows()));
                    for (Eigen::Index i = 0; i < X.rows(); ++i)
                        v[static_cast<std::size_t>(i)] =
                            field->value({X.data() + i * X.cols(), static_cast<std::size_t>(X.cols())});
                    return pairwise_sum(v) / static_cast<double>(X.rows());
                };
            }
        } else if (plan.functional.kind == "constant") {
            const double c = g.number("value", 1.0);
            plan.functional.G = [c](const PointMatrix&) { return c; };
        } else {
            if (!fp.constraint) issues.add(g.at("kind"), "the constraint functional needs problem.constraint");
            else {
                auto H = std::make_shared<ConstraintModel>(*fp.constraint);
                plan.functional.G = [H](const PointMatrix& X) { return H->evaluate(X); };
            }
        }
        g.finish();
        plan.t0 = f.number("t0", 0.0, Sign::nonnegative);
        plan.tau = f.number("tau", 0.5 * T, Sign::nonnegative);
        plan.outer = f.integer("outer", 64, 2);
        plan.N_inner = f.integer("N_inner", 2048, 2);
        plan.nested = f.integer("nested", 1, 1);
        f.finish();
    }
    ex.finish();

    Section out = root.child("output");
    plan.write_paths = out.flag("paths", true);
    plan.path_particles = out.integer("path_particles", 64, 1);
    out.finish();
    root.finish();

    // ---- mode-specific requirements
    if ((cmd == "fk" || cmd == "dpp") && plan.mode != ForwardMode::reflected)
        issues.add("numerics.mode", "fk and dpp run the reflected particle system");
    if (plan.mode == ForwardMode::penalized && cmd != "chaos" && cmd != "fp-compare") {
        const bool has_constraint = cmd == "backward" ? plan.backward && plan.backward->constraint.has_value()
                                                      : fp.constraint.has_value();
        if (!has_constraint) issues.add("numerics.mode", "penalized mode needs a constraint");
    }
    if (cmd == "fp-compare" && !fp.constraint) issues.add("problem.constraint", "required for fp-compare");
    if (cmd == "dpp" && !(plan.tau > plan.t0)) issues.add("experiment.fk.tau", "must exceed t0");
    if (cmd == "fk" || cmd == "dpp") {
        const double dt = T / static_cast<double>(cfg.M);
        for (auto [name, t] : {std::pair<const char*, double>{"t0", plan.t0}, {"tau", plan.tau}}) {
            if (std::string(name) == "tau" && cmd == "fk") continue;
            const double s = t / dt;
            if (t >= T || std::abs(s - std::round(s)) > 1e-9 * std::max(1.0, s))
                issues.add(std::string("experiment.fk.") + name, "must be a grid time in [0, T)");
        }
    }
    if (!issues.list.empty()) throw ConfigIssues(issues.list);

    if (plan.forward_ready) {
        try {
            fp.validate();
        } catch (const Error& e) {
            throw ConfigIssues({std::string("problem: ") + e.what()});
        }
    }
    if (plan.backward) {
        try {
            plan.backward->validate();
        } catch (const Error& e) {
            throw ConfigIssues({std::string("problem.backward: ") + e.what()});
        }
    }
    return plan;
}

// ------------------------------------------------------------ output

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

class CsvWriter {
public:
    CsvWriter(const fs::path& path, const std::string& schema, const std::vector<std::string>& columns)
        : out_(path), path_(path) {
        if (!out_) fail(ErrorCode::io, "cannot write " + path.string());
        out_ << "# " << schema << '\n';
        for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
        out_ << '\n';
    }
    void row(const std::vector<double>& values) {
        for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << fmt(values[i]);
        out_ << '\n';
    }
    ~CsvWriter() = default;
    void close() {
        out_.close();
        if (!out_) fail(ErrorCode::io, "failed writing " + path_.string());
    }

private:
    std::ofstream out_;
    fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    f << text;
    f.close();
    if (!f) fail(ErrorCode::io, "cannot write " + path.string());
}

void write_plot(const fs::path& dir, const PlotSpec& spec) {
    write_text(dir / "plot.svg", "<!-- mrsim.plot/1 -->\n" + render_svg(spec));
}

Json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Json finite_or_null(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

void write_k_path(const fs::path& dir, const std::vector<double>& t, const std::vector<double>& K,
                  const std::vector<double>& H) {
    CsvWriter w(dir / "k_path.csv", "mrsim.k_path/1", {"t", "K", "H"});
    for (std::size_t m = 0; m < t.size(); ++m)
        w.row({t[m], m < K.size() ? K[m] : 0.0,
               m < H.size() ? H[m] : std::numeric_limits<double>::quiet_NaN()});
    w.close();
}

void write_paths(const fs::path& dir, const std::vector<double>& times, const std::vector<std::size_t>& indices,
                 const std::vector<PointMatrix>& clouds, std::size_t max_particles, const std::string& prefix) {
    if (clouds.empty()) return;
    const std::size_t n = static_cast<std::size_t>(clouds.front().cols());
    std::vector<std::string> cols = {"t", "particle"};
    for (std::size_t c = 0; c < n; ++c) cols.push_back(prefix + std::to_string(c + 1));
    CsvWriter w(dir / "paths.csv", "mrsim.paths/1", cols);
    const std::size_t P = std::min<std::size_t>(max_particles, static_cast<std::size_t>(clouds.front().rows()));
    std::vector<double> row(2 + n);
    for (std::size_t r = 0; r < clouds.size(); ++r)
        for (std::size_t i = 0; i < P; ++i) {
            row[0] = times[indices[r]];
            row[1] = static_cast<double>(i);
            for (std::size_t c = 0; c < n; ++c) row[2 + c] = clouds[r](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
            w.row(row);
        }
    w.close();
}

Json cloud_moments(const PointMatrix& X) {
    const double N = static_cast<double>(X.rows());
    const Vec mean = X.colwise().mean().transpose();
    Vec sd(X.cols());
    for (Eigen::Index c = 0; c < X.cols(); ++c)
        sd(c) = std::sqrt((X.col(c).array() - mean(c)).square().sum() / std::max(1.0, N - 1.0));
    return Json{{"mean", vec_json(mean)}, {"stderr", vec_json(sd / std::sqrt(N))}};
}

Json penalty_json(double k, double rate, int restarts, bool adequate) {
    return Json{{"k", k}, {"rate", rate}, {"rate_restarts", restarts}, {"rate_adequate", adequate}};
}

PlotSpec k_plot(const std::string& title, const std::vector<double>& t, const std::vector<double>& K,
                const std::vector<double>& H) {
    PlotSpec s;
    s.title = title;
    s.xlabel = "t";
    s.ylabel = "value";
    s.series.push_back({"K_t", t, K, false});
    if (!H.empty()) s.series.push_back({"H(mu_t)", t, H, false});
    return s;
}

// ------------------------------------------------------------ commands

PathBundle run_forward_bundle(const Plan& plan, const RunConfig& cfg) {
    if (plan.mode == ForwardMode::penalized) return simulate_penalized(plan.forward, *plan.schedule, cfg);
    return simulate_reflected(plan.forward, cfg);
}

Json forward_bundle_json(const Plan& plan, const PathBundle& b) {
    Json r;
    r["mode"] = plan.mode == ForwardMode::reflected ? "reflected" : "penalized";
    r["K_T"] = b.K.back();
    r["X_T"] = cloud_moments(b.final_cloud());
    r["initial_deficit"] = b.initial_deficit;
    r["initial_kappa"] = b.initial_kappa;
    if (!b.H.empty()) {
        const auto sk = skorokhod_report(b);
        r["H_T"] = b.H.back();
        r["min_H"] = sk.min_H;
        r["complementarity"] = sk.complementarity;
        r["K_lipschitz"] = sk.K_lipschitz;
    }
    if (plan.mode == ForwardMode::penalized)
        r["penalty"] = penalty_json(b.penalty_k, b.penalty_rate, b.rate_restarts, b.rate_adequate);
    return r;
}

Json cmd_forward(const Plan& plan, const fs::path& dir) {
    const ForwardProblem& p = plan.forward;
    Json res;
    PathBundle b;
    if (plan.ensemble > 0) {
        std::vector<double> KT, meanT;
        for (std::size_t j = 0; j < plan.ensemble; ++j) {
            RunConfig c = plan.cfg;
            c.seeds = plan.cfg.noise_seeds(j);
            PathBundle bj = run_forward_bundle(plan, c);
            KT.push_back(bj.K.back());
            meanT.push_back(bj.final_cloud().col(0).mean());
            if (j == 0) b = std::move(bj);
        }
        const auto k = mean_stderr(KT), m = mean_stderr(meanT);
        res["ensemble"] = Json{{"members", plan.ensemble},
                               {"K_T_mean", k.mean},
                               {"K_T_stderr", k.stderr_},
                               {"mean_x1_T_mean", m.mean},
                               {"mean_x1_T_stderr", m.stderr_}};
    } else {
        b = run_forward_bundle(plan, plan.cfg);
    }
    res.update(forward_bundle_json(plan, b));

    if (p.constraint && plan.cfg.record_stride == 1) {
        const auto ito = ito_residual(b, p);
        res["ito_residual"] = Json{{"pathwise", ito.pathwise},     {"drift_form", ito.drift_form},
                                   {"increment", ito.increment},   {"drift", ito.drift},
                                   {"second_order", ito.second_order}, {"reflection", ito.reflection},
                                   {"martingale", ito.martingale}};
    }
    {
        const PointMatrix& X0 = b.X.front();
        const Eigen::Index S = std::min<Eigen::Index>(64, X0.rows());
        const PointMatrix sample = X0.topRows(S);
        Json lip{{"drift", lipschitz_estimate(p.drift, 0.0, sample)},
                 {"sigma0", lipschitz_estimate(p.sigma0, 0.0, sample)}};
        if (p.sigma1) lip["sigma1"] = lipschitz_estimate(*p.sigma1, 0.0, sample);
        res["lipschitz_t0"] = lip;
    }

    write_k_path(dir, b.times, b.K, b.H);
    if (plan.write_paths) {
        std::vector<PointMatrix> clouds(b.X.begin(), b.X.end());
        write_paths(dir, b.times, b.recorded, clouds, plan.path_particles, "x");
    }
    write_plot(dir, k_plot("forward: K_t and H(mu_t)", b.times, b.K, b.H));
    return res;
}

Json cmd_backward(const Plan& plan, const fs::path& dir) {
    const BackwardProblem& p = *plan.backward;
    BSDEBundle b = plan.mode == ForwardMode::penalized ? solve_penalized_bsde(p, *plan.schedule, plan.cfg)
                                                       : solve_reflected_particle_bsde(p, plan.cfg);
    Json res;
    res["mode"] = plan.mode == ForwardMode::reflected ? "reflected" : "penalized";
    res["K_T"] = b.K.back();
    res["Y_0"] = cloud_moments(b.Y.front());
    res["Y_T"] = cloud_moments(b.Y.back());
    if (!b.H.empty()) {
        res["min_H"] = *std::min_element(b.H.begin(), b.H.end());
        res["H_0"] = b.H.front();
    }
    if (!b.r2.empty()) res["min_r2"] = *std::min_element(b.r2.begin(), b.r2.end());
    if (!b.condition.empty()) res["max_condition"] = finite_or_null(*std::max_element(b.condition.begin(), b.condition.end()));
    const TerminalReport& t = b.terminal;
    res["terminal"] = Json{{"eta_N", t.eta_N},
                           {"H_before", t.H_before},
                           {"H_after", t.H_after},
                           {"kappa", t.kappa},
                           {"kappa_budget", t.kappa_budget},
                           {"displacement", t.displacement},
                           {"displacement_bound", finite_or_null(t.displacement_bound)},
                           {"bad_event", t.bad_event}};
    if (plan.mode == ForwardMode::penalized)
        res["penalty"] = penalty_json(b.penalty_k, b.penalty_rate, b.rate_restarts, b.rate_adequate);

    write_k_path(dir, b.times, b.K, b.H);
    if (plan.write_paths) {
        std::vector<std::size_t> idx;
        std::vector<PointMatrix> clouds;
        for (std::size_t m = 0; m < b.Y.size(); m += plan.cfg.record_stride) {
            idx.push_back(m);
            clouds.push_back(b.Y[m]);
        }
        if (idx.back() != b.Y.size() - 1) {
            idx.push_back(b.Y.size() - 1);
            clouds.push_back(b.Y.back());
        }
        write_paths(dir, b.times, idx, clouds, plan.path_particles, "y");
    }
    write_plot(dir, k_plot("backward: K_t and H([Y_t])", b.times, b.K, b.H));
    return res;
}

Json cmd_chaos(const Plan& plan, const fs::path& dir) {
    const ChaosReport rep = chaos_rate_experiment(plan.forward, plan.chaos, plan.cfg);
    CsvWriter w(dir / "chaos.csv", "mrsim.chaos/1", {"N", "mean_err", "stderr", "eps_ref"});
    Json rows = Json::array();
    PlotSpec s;
    s.title = "propagation of chaos: E sup_t W2^2";
    s.xlabel = "N";
    s.ylabel = "error";
    s.logx = s.logy = true;
    PlotSeries err{"mean_err", {}, {}, true}, ref{"eps_N (scaled)", {}, {}, false};
    for (const auto& r : rep.rows) {
        w.row({static_cast<double>(r.N), r.mean_err, r.stderr_, r.eps_ref});
        rows.push_back(Json{{"N", r.N}, {"mean_err", r.mean_err}, {"stderr", r.stderr_}, {"eps_ref", r.eps_ref}});
        err.x.push_back(static_cast<double>(r.N));
        err.y.push_back(r.mean_err);
    }
    w.close();
    if (!rep.rows.empty() && rep.rows.front().eps_ref > 0) {
        const double scale = rep.rows.front().mean_err / rep.rows.front().eps_ref;
        for (const auto& r : rep.rows) {
            ref.x.push_back(static_cast<double>(r.N));
            ref.y.push_back(scale * r.eps_ref);
        }
    }
    s.series = {err, ref};
    write_plot(dir, s);
    return Json{{"rows", rows},
                {"reference_N", rep.reference_N},
                {"reps", rep.reps},
                {"fitted_slope", finite_or_null(rep.fitted_slope)},
                {"slope_stderr", finite_or_null(rep.slope_stderr)}};
}

Json cmd_fp_compare(const Plan& plan, const fs::path& dir) {
    const DensityPath dp = solve_reflected_fp(plan.forward, plan.fp_grid, plan.fp_M);
    RunConfig cfg = plan.cfg;
    cfg.record_stride = 1;
    const PathBundle b = simulate_reflected(plan.forward, cfg);
    const auto rows = compare_to_particles(dp, b, plan.fp_times);
    CsvWriter w(dir / "fp_compare.csv", "mrsim.fp_compare/1", {"t", "w2", "K_fp", "K_particles"});
    Json jr = Json::array();
    double max_w2 = 0.0;
    for (const auto& r : rows) {
        w.row({r.t, r.w2, r.K_fp, r.K_particles});
        jr.push_back(Json{{"t", r.t}, {"w2", r.w2}, {"K_fp", r.K_fp}, {"K_particles", r.K_particles}});
        max_w2 = std::max(max_w2, r.w2);
    }
    w.close();
    double mass_err = 0.0;
    for (std::size_t m = 0; m < dp.times.size(); ++m) mass_err = std::max(mass_err, std::abs(dp.mass(m) - 1.0));
    write_k_path(dir, b.times, b.K, b.H);
    PlotSpec s = k_plot("fp-compare: K_t, particles vs Fokker-Planck", b.times, b.K, {});
    s.series.front().name = "K_t particles";
    s.series.push_back({"K_t Fokker-Planck", dp.times, dp.K, false});
    write_plot(dir, s);
    return Json{{"rows", jr},
                {"K_T_fp", dp.K.back()},
                {"K_T_particles", b.K.back()},
                {"dK_T", std::abs(dp.K.back() - b.K.back())},
                {"max_w2", max_w2},
                {"max_mass_error", mass_err},
                {"boundary_flux", dp.boundary_flux},
                {"fp_M", plan.fp_M},
                {"fp_J", plan.fp_grid.J}};
}

std::size_t grid_step(double t, const Plan& plan) {
    return static_cast<std::size_t>(std::llround(t / plan.cfg.dt(plan.forward.T)));
}

EmpiricalMeasure initial_measure(const Plan& plan) {
    return EmpiricalMeasure(plan.forward.initial.sample(plan.N_inner, plan.cfg.noise_seeds(0).initial));
}

Json cmd_fk(const Plan& plan) {
    const auto est = feynman_kac_estimate(plan.forward, plan.functional.G, grid_step(plan.t0, plan),
                                          initial_measure(plan), plan.outer, plan.N_inner, plan.cfg);
    return Json{{"value", est.value}, {"stderr", est.stderr_}, {"outer", est.outer}, {"inner", est.inner},
                {"t0", plan.t0},     {"functional", plan.functional.kind}};
}

Json cmd_dpp(const Plan& plan) {
    const auto r = dpp_check(plan.forward, plan.functional.G, grid_step(plan.t0, plan), grid_step(plan.tau, plan),
                             initial_measure(plan), plan.outer, plan.N_inner, plan.nested, plan.cfg);
    return Json{{"lhs", r.lhs},
                {"rhs", r.rhs},
                {"gap", r.gap},
                {"stderr", r.stderr_},
                {"lhs_stderr", r.lhs_stderr},
                {"rhs_stderr", r.rhs_stderr},
                {"gap_over_stderr", r.stderr_ > 0 ? Json(std::abs(r.gap) / r.stderr_) : Json(nullptr)},
                {"t0", plan.t0},
                {"tau", plan.tau},
                {"functional", plan.functional.kind}};
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

Json provenance() {
    return Json{{"mrsim", version_string()},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"compiler", __VERSION__},
                {"cxx_standard", __cplusplus}};
}

}  // namespace

// ------------------------------------------------------------ public

Json parse_config_text(const std::string& text) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        fail(ErrorCode::config, std::string("config is not valid JSON: ") + e.what());
    }
}

Json load_config_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::io, "cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

void apply_override(Json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) fail(ErrorCode::config, "override must look like key=value: " + assignment);
    const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(text);
    } catch (const Json::parse_error&) {
        value = text;
    }
    if (!config.is_object()) fail(ErrorCode::config, "config must be a JSON object");
    Json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) fail(ErrorCode::config, "override key has an empty component: " + key);
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        Json& next = (*node)[part];
        if (next.is_null()) next = Json::object();
        if (!next.is_object()) fail(ErrorCode::config, "override path crosses a non-object at " + key.substr(0, dot));
        node = &next;
        start = dot + 1;
    }
}

Json normalize_config(const Json& config) {
    Json copy = config;
    build_plan(copy);
    return copy;
}

std::string config_hash(const Json& config) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

RunOutcome run_experiment(const Json& config, const std::string& out_dir, unsigned threads) {
    const auto started = std::chrono::steady_clock::now();
    if (threads == 0) threads = threads_from_env();
    RunOutcome outcome;
    Json& summary = outcome.summary;
    summary["$schema"] = kSummarySchema;
    summary["versions"] = provenance();
    Json normalized = config;
    const fs::path dir(out_dir);

    try {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) fail(ErrorCode::io, "cannot create output directory " + out_dir + ": " + ec.message());
        Plan plan = build_plan(normalized);
        plan.cfg.threads = threads;
        summary["command"] = plan.command;
        summary["seed"] = plan.seed;
        Json results;
        if (plan.command == "forward") results = cmd_forward(plan, dir);
        else if (plan.command == "backward") results = cmd_backward(plan, dir);
        else if (plan.command == "chaos") results = cmd_chaos(plan, dir);
        else if (plan.command == "fp-compare") results = cmd_fp_compare(plan, dir);
        else if (plan.command == "fk") results = cmd_fk(plan);
        else results = cmd_dpp(plan);
        summary["results"] = results;
        summary["status"] = "ok";
    } catch (const ConfigIssues& e) {
        outcome.status = static_cast<int>(e.code());
        summary["status"] = "error";
        summary["error"] = Json{{"code", error_code_name(e.code())}, {"message", e.what()}, {"fields", e.issues()}};
    } catch (const Error& e) {
        outcome.status = static_cast<int>(e.code());
        summary["status"] = "error";
        summary["error"] = Json{{"code", error_code_name(e.code())},
                                {"message", e.what()},
                                {"step", e.step() ? Json(*e.step()) : Json(nullptr)}};
    } catch (const std::exception& e) {
        outcome.status = static_cast<int>(ErrorCode::internal);
        summary["status"] = "error";
        summary["error"] = Json{{"code", error_code_name(ErrorCode::internal)}, {"message", e.what()}};
    }
    summary["config"] = normalized;
    summary["config_hash"] = config_hash(normalized);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    summary["runtime"] = Json{{"timestamp", utc_timestamp()}, {"elapsed_seconds", secs}, {"threads", threads}};

    try {
        std::error_code ec;
        fs::create_directories(dir, ec);
        write_text(dir / "summary.json", summary.dump(2) + "\n");
    } catch (const Error& e) {
        if (outcome.status == 0) outcome.status = static_cast<int>(e.code());
        summary["status"] = "error";
        summary["error"] = Json{{"code", error_code_name(e.code())}, {"message", e.what()}};
    }
    return outcome;
}

}  // namespace mrsim
