#pragma once

// Configuration-driven experiment runner shared by the C API and the CLI.

#include <string>
#include <vector>

#include "json.hpp"
#include "mrsim/error.hpp"

namespace mrsim {

using Json = nlohmann::json;

inline constexpr const char* kConfigSchema = "mrsim.config/1";
inline constexpr const char* kSummarySchema = "mrsim.summary/1";
const char* version_string() noexcept;

Json parse_config_text(const std::string& text);
Json load_config_file(const std::string& path);

/// Applies "dotted.path=value"; the value is read as JSON when it parses,
/// otherwise as a string.
void apply_override(Json& config, const std::string& assignment);

/// Fills defaults and checks every field; throws a config error listing all
/// offending fields.
Json normalize_config(const Json& config);

/// FNV-1a over the canonical (sorted, compact) dump.
std::string config_hash(const Json& config);

struct RunOutcome {
    int status = 0;  ///< 0 or an ErrorCode value
    Json summary;
};

/// Runs config["command"], writing summary.json and the command's artifacts
/// into out_dir. Solver failures are recorded in summary.json and reflected
/// in the status; they are not thrown. threads = 0 reads MR_SIM_THREADS.
RunOutcome run_experiment(const Json& config, const std::string& out_dir, unsigned threads);

}  // namespace mrsim
