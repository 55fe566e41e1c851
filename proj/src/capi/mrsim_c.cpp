#include "mrsim/mrsim.h"

#include <cstring>
#include <limits>
#include <string>

#include "mrsim/analysis.hpp"
#include "mrsim/measures.hpp"
#include "mrsim/parallel.hpp"
#include "mrsim/runner.hpp"

struct mrsim_config {
    mrsim::Json json;
};

struct mrsim_result {
    mrsim_status status = MRSIM_OK;
    mrsim::Json summary;
};

namespace {

thread_local std::string g_last_error;

mrsim_status set_error(mrsim_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

mrsim_status from_code(mrsim::ErrorCode c) { return static_cast<mrsim_status>(static_cast<int>(c)); }

/// Runs `body`, translating exceptions into status codes.
template <class F>
mrsim_status guard(F&& body) {
    try {
        g_last_error.clear();
        return body();
    } catch (const mrsim::Error& e) {
        return set_error(from_code(e.code()), e.what());
    } catch (const std::bad_alloc&) {
        return set_error(MRSIM_ERR_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(MRSIM_ERR_INTERNAL, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* p = static_cast<char*>(std::malloc(s.size() + 1));
    if (!p) throw std::bad_alloc();
    std::memcpy(p, s.c_str(), s.size() + 1);
    return p;
}

#define MRSIM_REQUIRE_ARG(cond, what) \
    if (!(cond)) return set_error(MRSIM_ERR_INVALID_ARGUMENT, what)

}  // namespace

extern "C" {

const char* mrsim_version(void) { return mrsim::version_string(); }

const char* mrsim_status_string(mrsim_status status) {
    if (status == MRSIM_OK) return "ok";
    if (status < MRSIM_ERR_INVALID_ARGUMENT || status > MRSIM_ERR_INTERNAL) return "unknown";
    return mrsim::error_code_name(static_cast<mrsim::ErrorCode>(status));
}

const char* mrsim_last_error(void) { return g_last_error.c_str(); }

void mrsim_string_free(char* s) { std::free(s); }

uint32_t mrsim_default_threads(void) { return mrsim::threads_from_env(); }

mrsim_status mrsim_config_parse(const char* json, mrsim_config** out) {
    MRSIM_REQUIRE_ARG(json && out, "null argument");
    *out = nullptr;
    return guard([&] {
        auto cfg = std::make_unique<mrsim_config>();
        cfg->json = mrsim::parse_config_text(json);
        if (!cfg->json.is_object()) return set_error(MRSIM_ERR_CONFIG, "config must be a JSON object");
        *out = cfg.release();
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_load(const char* path, mrsim_config** out) {
    MRSIM_REQUIRE_ARG(path && out, "null argument");
    *out = nullptr;
    return guard([&] {
        auto cfg = std::make_unique<mrsim_config>();
        cfg->json = mrsim::load_config_file(path);
        if (!cfg->json.is_object()) return set_error(MRSIM_ERR_CONFIG, "config must be a JSON object");
        *out = cfg.release();
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_set(mrsim_config* cfg, const char* assignment) {
    MRSIM_REQUIRE_ARG(cfg && assignment, "null argument");
    return guard([&] {
        mrsim::apply_override(cfg->json, assignment);
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_set_command(mrsim_config* cfg, const char* command) {
    MRSIM_REQUIRE_ARG(cfg && command, "null argument");
    return guard([&] {
        cfg->json["command"] = command;
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_set_seed(mrsim_config* cfg, uint64_t seed) {
    MRSIM_REQUIRE_ARG(cfg, "null argument");
    return guard([&] {
        cfg->json["seed"] = seed;
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_validate(const mrsim_config* cfg) {
    MRSIM_REQUIRE_ARG(cfg, "null argument");
    return guard([&] {
        mrsim::normalize_config(cfg->json);
        return MRSIM_OK;
    });
}

mrsim_status mrsim_config_json(const mrsim_config* cfg, char** out) {
    MRSIM_REQUIRE_ARG(cfg && out, "null argument");
    *out = nullptr;
    return guard([&] {
        *out = dup_string(mrsim::normalize_config(cfg->json).dump(2));
        return MRSIM_OK;
    });
}

void mrsim_config_free(mrsim_config* cfg) { delete cfg; }

mrsim_status mrsim_run(const mrsim_config* cfg, const char* out_dir, uint32_t threads, mrsim_result** out) {
    MRSIM_REQUIRE_ARG(cfg && out_dir, "null argument");
    if (out) *out = nullptr;
    return guard([&] {
        auto res = std::make_unique<mrsim_result>();
        mrsim::RunOutcome o = mrsim::run_experiment(cfg->json, out_dir, threads);
        res->status = static_cast<mrsim_status>(o.status);
        res->summary = std::move(o.summary);
        const mrsim_status s = res->status;
        if (s != MRSIM_OK) set_error(s, res->summary["error"].value("message", std::string("run failed")));
        if (out) *out = res.release();
        return s;
    });
}

mrsim_status mrsim_result_status(const mrsim_result* res) {
    return res ? res->status : MRSIM_ERR_INVALID_ARGUMENT;
}

mrsim_status mrsim_result_summary(const mrsim_result* res, char** out) {
    MRSIM_REQUIRE_ARG(res && out, "null argument");
    *out = nullptr;
    return guard([&] {
        *out = dup_string(res->summary.dump(2));
        return MRSIM_OK;
    });
}

mrsim_status mrsim_result_number(const mrsim_result* res, const char* path, double* out) {
    MRSIM_REQUIRE_ARG(res && path && out, "null argument");
    return guard([&] {
        if (!res->summary.contains("results")) return set_error(MRSIM_ERR_INVALID_ARGUMENT, "run produced no results");
        const mrsim::Json* node = &res->summary["results"];
        std::string p(path);
        std::size_t start = 0;
        while (start <= p.size()) {
            const auto dot = p.find('.', start);
            const std::string part = p.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
            if (node->is_object() && node->contains(part)) {
                node = &(*node)[part];
            } else if (node->is_array() && !part.empty() &&
                       part.find_first_not_of("0123456789") == std::string::npos &&
                       std::stoul(part) < node->size()) {
                node = &(*node)[std::stoul(part)];
            } else {
                return set_error(MRSIM_ERR_INVALID_ARGUMENT, std::string("no result at ") + path);
            }
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        if (node->is_null()) {
            *out = std::numeric_limits<double>::quiet_NaN();
            return MRSIM_OK;
        }
        if (node->is_boolean()) {
            *out = node->get<bool>() ? 1.0 : 0.0;
            return MRSIM_OK;
        }
        if (!node->is_number()) return set_error(MRSIM_ERR_INVALID_ARGUMENT, std::string("result is not a number: ") + path);
        *out = node->get<double>();
        return MRSIM_OK;
    });
}

void mrsim_result_free(mrsim_result* res) { delete res; }

mrsim_status mrsim_wasserstein2(const double* a, const double* b, size_t n_points, size_t dim, double* out) {
    MRSIM_REQUIRE_ARG(a && b && out, "null argument");
    MRSIM_REQUIRE_ARG(n_points > 0 && dim > 0, "clouds must be non-empty");
    return guard([&] {
        const mrsim::EmpiricalMeasure mu({a, n_points * dim}, dim), nu({b, n_points * dim}, dim);
        *out = dim == 1 ? mrsim::wasserstein2_1d(mu, nu) : mrsim::wasserstein2_exact(mu, nu);
        return MRSIM_OK;
    });
}

mrsim_status mrsim_eps_n_reference(double n, size_t d, double p, double* out) {
    MRSIM_REQUIRE_ARG(out, "null argument");
    return guard([&] {
        *out = mrsim::eps_n_reference(n, d, p > 0 ? p : std::numeric_limits<double>::infinity());
        return MRSIM_OK;
    });
}

}  // extern "C"
