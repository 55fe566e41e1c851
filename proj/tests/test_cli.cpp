#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = MRSIM_CLI_PATH;
const fs::path kConfigs = MRSIM_CONFIG_DIR;

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("mrsim_cli_" + name);
    fs::remove_all(p);
    return p;
}

struct Outcome {
    int code = -1;
    std::string err;
};

Outcome run(const std::string& args, const std::string& env = "") {
    const fs::path err = fs::temp_directory_path() / "mrsim_cli_stderr.txt";
    const std::string cmd = env + " '" + kCli + "' " + args + " >/dev/null 2>'" + err.string() + "'";
    const int raw = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    std::ifstream f(err);
    std::stringstream ss;
    ss << f.rdbuf();
    o.err = ss.str();
    return o;
}

json summary(const fs::path& dir) {
    std::ifstream f(dir / "summary.json");
    return json::parse(f);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("forward slack config exits 0 with an all-zero K column") {
    const fs::path out = fresh_dir("slack");
    const auto o = run("forward --config '" + (kConfigs / "forward_slack.json").string() + "' --out '" +
                       out.string() + "'");
    REQUIRE_MESSAGE(o.code == 0, o.err);
    std::ifstream f(out / "k_path.csv");
    std::string line;
    std::getline(f, line);
    CHECK(line == "# mrsim.k_path/1");
    std::getline(f, line);
    CHECK(line == "t,K,H");
    int rows = 0;
    while (std::getline(f, line)) {
        const auto a = line.find(','), b = line.find(',', a + 1);
        CHECK(std::stod(line.substr(a + 1, b - a - 1)) == 0.0);
        ++rows;
    }
    CHECK(rows == 51);
}

TEST_CASE("subcommand, --seed and repeated --set override the config") {
    const fs::path out = fresh_dir("overrides");
    const auto o = run("backward --config '" + (kConfigs / "backward_oracle.json").string() + "' --out '" +
                       out.string() + "' --seed 77 --set numerics.N=500 --set numerics.M=20");
    REQUIRE_MESSAGE(o.code == 0, o.err);
    const json s = summary(out);
    CHECK(s["command"] == "backward");
    CHECK(s["seed"] == 77);
    CHECK(s["config"]["numerics"]["N"] == 500);
    CHECK(s["config"]["numerics"]["M"] == 20);
}

TEST_CASE("MR_SIM_THREADS is the fallback for --threads") {
    const std::string cfg = (kConfigs / "forward_slack.json").string();
    const fs::path a = fresh_dir("env"), b = fresh_dir("flag");
    REQUIRE(run("forward --config '" + cfg + "' --out '" + a.string() + "'", "MR_SIM_THREADS=3").code == 0);
    REQUIRE(run("forward --config '" + cfg + "' --out '" + b.string() + "' --threads 2", "MR_SIM_THREADS=3").code ==
            0);
    CHECK(summary(a)["runtime"]["threads"] == 3);
    CHECK(summary(b)["runtime"]["threads"] == 2);
    CHECK(slurp(a / "k_path.csv") == slurp(b / "k_path.csv"));
}

TEST_CASE("invalid configuration exits nonzero with a machine-readable record") {
    const fs::path out = fresh_dir("invalid");
    const auto o = run("forward --config '" + (kConfigs / "forward_slack.json").string() + "' --out '" +
                       out.string() + "' --set numerics.N=0 --set problem.T=-2");
    CHECK(o.code == 7);
    const json rec = json::parse(o.err);
    CHECK(rec["status"] == "error");
    CHECK(rec["code"] == "config");
    CHECK(rec["fields"].size() == 2);
    CHECK(summary(out)["status"] == "error");
}

TEST_CASE("usage errors") {
    CHECK(run("").code != 0);
    CHECK(run("forward").code != 0);
    CHECK(run("forward --config /nonexistent.json").code != 0);
    CHECK(run("teleport --config x").code != 0);
    CHECK(run("--version").code == 0);
}
