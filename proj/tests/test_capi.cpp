#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mrsim/mrsim.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSlack = R"({
  "$schema": "mrsim.config/1",
  "command": "forward",
  "seed": 42,
  "problem": {
    "drift": ["0"], "sigma0": ["1"],
    "constraint": {"family": "linear_expectation", "expr": "x1 + 5"},
    "initial": {"law": "gaussian", "mean": [0], "std": [1]}
  },
  "numerics": {"N": 400, "M": 40}
})";

const char* kOracle = R"({
  "command": "forward",
  "seed": 7,
  "problem": {
    "drift": ["-1"], "sigma0": ["1"],
    "constraint": {"family": "linear_expectation", "expr": "x1"},
    "initial": {"law": "gaussian", "mean": [0], "std": [1]}
  },
  "numerics": {"N": 3000, "M": 100}
})";

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mrsim_capi_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(f, l);) out.push_back(l);
    return out;
}

struct Config {
    mrsim_config* h = nullptr;
    explicit Config(const char* text) { REQUIRE(mrsim_config_parse(text, &h) == MRSIM_OK); }
    ~Config() { mrsim_config_free(h); }
};

struct Result {
    mrsim_result* h = nullptr;
    ~Result() { mrsim_result_free(h); }
    double number(const char* path) const {
        double v = NAN;
        REQUIRE_MESSAGE(mrsim_result_number(h, path, &v) == MRSIM_OK, std::string(mrsim_last_error()));
        return v;
    }
    json summary() const {
        char* s = nullptr;
        REQUIRE(mrsim_result_summary(h, &s) == MRSIM_OK);
        json j = json::parse(s);
        mrsim_string_free(s);
        return j;
    }
};

json without_runtime(json j) {
    j.erase("runtime");
    return j;
}

}  // namespace

TEST_CASE("version and status strings") {
    CHECK(std::string(mrsim_version()).size() > 0);
    CHECK(std::string(mrsim_status_string(MRSIM_OK)) == "ok");
    CHECK(std::string(mrsim_status_string(MRSIM_ERR_CONFIG)) == "config");
    CHECK(std::string(mrsim_status_string(static_cast<mrsim_status>(77))) == "unknown");
    CHECK(mrsim_default_threads() >= 1);
}

TEST_CASE("null arguments are rejected") {
    mrsim_config* c = nullptr;
    CHECK(mrsim_config_parse(nullptr, &c) == MRSIM_ERR_INVALID_ARGUMENT);
    CHECK(std::string(mrsim_last_error()).size() > 0);
    CHECK(mrsim_config_set(nullptr, "a=1") == MRSIM_ERR_INVALID_ARGUMENT);
    CHECK(mrsim_run(nullptr, "x", 1, nullptr) == MRSIM_ERR_INVALID_ARGUMENT);
    CHECK(mrsim_result_status(nullptr) == MRSIM_ERR_INVALID_ARGUMENT);
    mrsim_config_free(nullptr);
    mrsim_result_free(nullptr);
    mrsim_string_free(nullptr);
}

TEST_CASE("malformed JSON is a config error") {
    mrsim_config* c = nullptr;
    CHECK(mrsim_config_parse("{not json", &c) == MRSIM_ERR_CONFIG);
    CHECK(c == nullptr);
    CHECK(mrsim_config_parse("[1, 2]", &c) == MRSIM_ERR_CONFIG);
    CHECK(mrsim_config_load("/nonexistent/file.json", &c) == MRSIM_ERR_IO);
}

TEST_CASE("validation lists every offending field") {
    Config c(R"({"command": "forward", "problem": {"T": -1, "drift": ["-1", "1"], "sigma0": ["1+"],
                 "initial": {"law": "gaussian"}}, "numerics": {"N": 1, "mode": "sideways", "typo": 3}})");
    CHECK(mrsim_config_validate(c.h) == MRSIM_ERR_CONFIG);
    const std::string msg = mrsim_last_error();
    for (const char* field : {"problem.T", "problem.drift", "problem.sigma0", "numerics.N", "numerics.mode",
                              "numerics.typo"})
        CHECK_MESSAGE(msg.find(field) != std::string::npos, field);
}

TEST_CASE("mode-specific requirements") {
    Config fk(R"({"command": "fk", "problem": {"drift": ["-1"], "sigma0": ["1"],
                  "initial": {"law": "point", "x": [0]}}})");
    CHECK(mrsim_config_validate(fk.h) == MRSIM_ERR_CONFIG);
    CHECK(std::string(mrsim_last_error()).find("problem.sigma1") != std::string::npos);

    Config pen(R"({"command": "forward", "problem": {"drift": ["-1"], "sigma0": ["1"],
                   "initial": {"law": "point", "x": [0]}}, "numerics": {"mode": "penalized"}})");
    CHECK(mrsim_config_validate(pen.h) == MRSIM_ERR_CONFIG);
    CHECK(std::string(mrsim_last_error()).find("numerics.mode") != std::string::npos);

    Config bw(R"({"command": "backward", "problem": {}})");
    CHECK(mrsim_config_validate(bw.h) == MRSIM_ERR_CONFIG);
    CHECK(std::string(mrsim_last_error()).find("problem.backward") != std::string::npos);
}

TEST_CASE("overrides, seed and command setters") {
    Config c(kSlack);
    CHECK(mrsim_config_set(c.h, "numerics.N=64") == MRSIM_OK);
    CHECK(mrsim_config_set(c.h, "problem.constraint.expr=x1 + 6") == MRSIM_OK);
    CHECK(mrsim_config_set(c.h, "experiment.chaos.Ns=[8,16]") == MRSIM_OK);
    CHECK(mrsim_config_set_seed(c.h, 99) == MRSIM_OK);
    CHECK(mrsim_config_set_command(c.h, "chaos") == MRSIM_OK);
    CHECK(mrsim_config_set(c.h, "no_equals_sign") == MRSIM_ERR_CONFIG);
    CHECK(mrsim_config_set(c.h, "numerics..N=3") == MRSIM_ERR_CONFIG);
    CHECK(mrsim_config_set(c.h, "seed.deeper=3") == MRSIM_ERR_CONFIG);
    char* text = nullptr;
    REQUIRE(mrsim_config_json(c.h, &text) == MRSIM_OK);
    const json j = json::parse(text);
    mrsim_string_free(text);
    CHECK(j["numerics"]["N"] == 64);
    CHECK(j["problem"]["constraint"]["expr"] == "x1 + 6");
    CHECK(j["experiment"]["chaos"]["Ns"] == json::array({8, 16}));
    CHECK(j["seed"] == 99);
    CHECK(j["command"] == "chaos");
    CHECK(j["numerics"]["tol_H"] == 1e-10);  // defaults are filled in
}

TEST_CASE("slack forward run: K stays zero and artifacts declare schemas") {
    Config c(kSlack);
    const fs::path dir = fresh_dir("slack");
    Result r;
    REQUIRE(mrsim_run(c.h, dir.c_str(), 1, &r.h) == MRSIM_OK);
    CHECK(mrsim_result_status(r.h) == MRSIM_OK);
    CHECK(r.number("K_T") == 0.0);
    CHECK(r.number("min_H") > 4.0);
    CHECK(std::isfinite(r.number("X_T.mean.0")));
    double v = 0;
    CHECK(mrsim_result_number(r.h, "X_T.mean.7", &v) == MRSIM_ERR_INVALID_ARGUMENT);
    CHECK(mrsim_result_number(r.h, "mode", &v) == MRSIM_ERR_INVALID_ARGUMENT);

    const auto k = lines(dir / "k_path.csv");
    REQUIRE(k.size() == 2 + 41);
    CHECK(k[0] == "# mrsim.k_path/1");
    CHECK(k[1] == "t,K,H");
    for (std::size_t i = 2; i < k.size(); ++i) {
        const auto a = k[i].find(','), b = k[i].find(',', a + 1);
        CHECK(std::stod(k[i].substr(a + 1, b - a - 1)) == 0.0);
    }
    const auto p = lines(dir / "paths.csv");
    CHECK(p[0] == "# mrsim.paths/1");
    CHECK(p[1] == "t,particle,x1");
    CHECK(lines(dir / "plot.svg")[0] == "<!-- mrsim.plot/1 -->");
    const json s = json::parse(slurp(dir / "summary.json"));
    CHECK(slurp(dir / "summary.json").rfind("{\n  \"$schema\": \"mrsim.summary/1\"", 0) == 0);
    CHECK(s["status"] == "ok");
    CHECK(s["seed"] == 42);
    CHECK(s["config_hash"].get<std::string>().size() == 16);
    CHECK(s["versions"].contains("mrsim"));
    CHECK(s["runtime"].contains("timestamp"));
}

TEST_CASE("same config and seed give identical summaries modulo runtime") {
    Config c(kOracle);
    const fs::path a = fresh_dir("rep_a"), b = fresh_dir("rep_b");
    Result ra, rb;
    REQUIRE(mrsim_run(c.h, a.c_str(), 1, &ra.h) == MRSIM_OK);
    REQUIRE(mrsim_run(c.h, b.c_str(), 1, &rb.h) == MRSIM_OK);
    CHECK(without_runtime(ra.summary()) == without_runtime(rb.summary()));
    CHECK(slurp(a / "k_path.csv") == slurp(b / "k_path.csv"));
    CHECK(slurp(a / "paths.csv") == slurp(b / "paths.csv"));
}

TEST_CASE("numeric outputs do not depend on the thread count") {
    Config c(kOracle);
    const fs::path a = fresh_dir("thr_1"), b = fresh_dir("thr_3");
    Result ra, rb;
    REQUIRE(mrsim_run(c.h, a.c_str(), 1, &ra.h) == MRSIM_OK);
    REQUIRE(mrsim_run(c.h, b.c_str(), 3, &rb.h) == MRSIM_OK);
    for (const char* f : {"k_path.csv", "paths.csv", "plot.svg"}) CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
    CHECK(without_runtime(ra.summary()) == without_runtime(rb.summary()));
    CHECK(rb.summary()["runtime"]["threads"] == 3);
}

TEST_CASE("embedded config round-trips to identical results") {
    Config c(kOracle);
    const fs::path a = fresh_dir("rt_a"), b = fresh_dir("rt_b");
    Result ra;
    REQUIRE(mrsim_run(c.h, a.c_str(), 1, &ra.h) == MRSIM_OK);
    const json s = ra.summary();
    Config again(s["config"].dump().c_str());
    Result rb;
    REQUIRE(mrsim_run(again.h, b.c_str(), 1, &rb.h) == MRSIM_OK);
    CHECK(rb.summary()["results"] == s["results"]);
    CHECK(rb.summary()["config_hash"] == s["config_hash"]);
}

TEST_CASE("chaos run writes one row per N") {
    Config c(kOracle);
    REQUIRE(mrsim_config_set_command(c.h, "chaos") == MRSIM_OK);
    REQUIRE(mrsim_config_set(c.h, "experiment.chaos={\"Ns\": [64, 128], \"reps\": 3, \"reference_N\": 1024}") ==
            MRSIM_OK);
    REQUIRE(mrsim_config_set(c.h, "numerics.M=20") == MRSIM_OK);
    REQUIRE(mrsim_config_set(c.h, "experiment.chaos.reference_N=512") == MRSIM_OK);
    CHECK(mrsim_config_validate(c.h) == MRSIM_ERR_CONFIG);
    CHECK(std::string(mrsim_last_error()).find("experiment.chaos.reference_N") != std::string::npos);
    REQUIRE(mrsim_config_set(c.h, "experiment.chaos.reference_N=1024") == MRSIM_OK);
    const fs::path dir = fresh_dir("chaos");
    Result r;
    REQUIRE_MESSAGE(mrsim_run(c.h, dir.c_str(), 1, &r.h) == MRSIM_OK, std::string(mrsim_last_error()));
    const auto rows = lines(dir / "chaos.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == "# mrsim.chaos/1");
    CHECK(rows[1] == "N,mean_err,stderr,eps_ref");
    CHECK(rows[2].rfind("64,", 0) == 0);
    CHECK(rows[3].rfind("128,", 0) == 0);
    CHECK(r.number("rows.1.N") == 128);
    double v = 0;
    CHECK(mrsim_result_number(r.h, "mean_err", &v) == MRSIM_ERR_INVALID_ARGUMENT);
}

TEST_CASE("solver failures are recorded with the failing step") {
    Config c(R"({"command": "forward", "problem": {"drift": ["x1*x1*x1"], "sigma0": ["1"],
                 "initial": {"law": "point", "x": [10]}}, "numerics": {"N": 8, "M": 10}})");
    const fs::path dir = fresh_dir("blowup");
    Result r;
    const mrsim_status s = mrsim_run(c.h, dir.c_str(), 1, &r.h);
    CHECK(s != MRSIM_OK);
    CHECK(mrsim_result_status(r.h) == s);
    const json sum = json::parse(slurp(dir / "summary.json"));
    CHECK(sum["status"] == "error");
    CHECK(sum["error"]["step"].is_number_unsigned());
    CHECK(sum["error"]["code"] == mrsim_status_string(s));
    CHECK(std::string(mrsim_last_error()).size() > 0);
}

TEST_CASE("config errors still produce a summary record") {
    Config c(R"({"command": "forward", "numerics": {"N": 0}})");
    const fs::path dir = fresh_dir("badcfg");
    Result r;
    CHECK(mrsim_run(c.h, dir.c_str(), 1, &r.h) == MRSIM_ERR_CONFIG);
    const json sum = json::parse(slurp(dir / "summary.json"));
    CHECK(sum["error"]["code"] == "config");
    CHECK(sum["error"]["fields"].size() >= 3);
}

TEST_CASE("numerical kernels") {
    const std::vector<double> a = {0.0, 1.0, 2.0, 3.0}, b = {0.5, 1.5, 2.5, 3.5};
    double w = 0;
    REQUIRE(mrsim_wasserstein2(a.data(), b.data(), 4, 1, &w) == MRSIM_OK);
    CHECK(w == doctest::Approx(0.5));
    const std::vector<double> p = {0, 0, 1, 1}, q = {1, 1, 0, 0};
    REQUIRE(mrsim_wasserstein2(p.data(), q.data(), 2, 2, &w) == MRSIM_OK);
    CHECK(w == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(mrsim_wasserstein2(a.data(), b.data(), 0, 1, &w) == MRSIM_ERR_INVALID_ARGUMENT);
    double e = 0;
    REQUIRE(mrsim_eps_n_reference(100, 1, 0, &e) == MRSIM_OK);
    CHECK(e == doctest::Approx(0.1));
}
