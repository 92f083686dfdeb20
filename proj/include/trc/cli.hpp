#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "trc/calibration.hpp"
#include "trc/error.hpp"
#include "trc/io.hpp"
#include "trc/simulation.hpp"

namespace trc {

enum class OutputFormat { table, json };

// Values given on the command line win over the config file.
struct CliOverrides {
    std::optional<std::string> output;
    std::optional<std::string> format;
    std::optional<std::uint64_t> seed;
    std::optional<long long> reps;
    std::optional<int> threads;
    std::optional<double> ci_level;
};

struct AnalysisConfig {
    std::string main_csv;
    std::string validation_csv;
    std::string outcome;
    std::vector<std::string> surrogates;
    std::vector<std::string> confounders;
    std::vector<std::string> exposures;
    std::string method = "all";  // naive | original-rc | transportable-rc | all
    double ci_level = 0.95;
    OutputFormat format = OutputFormat::table;
    std::string output;
    Vec units;  // per-exposure multiplier, empty means 1

    void validate() const;
};

struct SimulationConfig {
    ScenarioSpec spec;
    Index replications = 1000;
    std::uint64_t seed = 20240501;
    int parallelism = 1;
    double ci_level = 0.95;
    OutputFormat format = OutputFormat::table;
    std::string output;
};

AnalysisConfig load_analysis_config(const std::string& path, const CliOverrides& o);
SimulationConfig load_simulation_config(const std::string& path, const CliOverrides& o);
SimulationConfig simulation_config_from_map(const ConfigMap& map, const CliOverrides& o);

struct CommandResult {
    int exit_code = 0;
    std::string text;     // what goes to stdout
    nlohmann::json json;  // the machine-readable report
};

CommandResult cmd_analyze(const AnalysisConfig& cfg);
CommandResult cmd_simulate(const SimulationConfig& cfg);
std::string cmd_version();

nlohmann::json summary_to_json(const ReplicationSummary& s);
std::string summary_table(const ReplicationSummary& s);

// 0 ok, 1 usage, 2 InvalidSpec/InvalidLevel, 3 FileNotFound, 4 ParseError,
// 5 MissingColumn, 6 numerical failure, 7 more than 1% of replications failed
int exit_code_for(Errc c) noexcept;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitReplicationFailures = 7;

}  // namespace trc
