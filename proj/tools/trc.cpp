#include <CLI11.hpp>
#include <iostream>

#include "trc/cli.hpp"

namespace {

void add_common(CLI::App* cmd, std::string& config, trc::CliOverrides& o) {
    cmd->add_option("--config", config, "configuration file")->required();
    cmd->add_option_function<std::string>("--output", [&o](const std::string& v) { o.output = v; },
                                           "write the JSON report here");
    cmd->add_option_function<std::string>("--format", [&o](const std::string& v) { o.format = v; },
                                           "stdout format: table or json");
    cmd->add_option_function<double>("--ci-level", [&o](const double& v) { o.ci_level = v; },
                                      "confidence level in (0, 1)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Transportable regression calibration"};
    app.require_subcommand(1);

    std::string config;
    trc::CliOverrides o;

    auto* analyze = app.add_subcommand("analyze", "correct a main-study regression using an external validation study");
    add_common(analyze, config, o);

    auto* simulate = app.add_subcommand("simulate", "run a Monte Carlo study");
    add_common(simulate, config, o);
    simulate->add_option_function<std::uint64_t>("--seed", [&o](const std::uint64_t& v) { o.seed = v; }, "base seed");
    simulate->add_option_function<long long>("--reps", [&o](const long long& v) { o.reps = v; }, "replications");
    simulate->add_option_function<int>("--threads", [&o](const int& v) { o.threads = v; }, "worker threads");

    auto* version = app.add_subcommand("version", "print version and RNG identifier");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : trc::kExitUsage;
    }

    try {
        if (version->parsed()) {
            std::cout << trc::cmd_version() << "\n";
            return 0;
        }
        trc::CommandResult r;
        if (analyze->parsed())
            r = trc::cmd_analyze(trc::load_analysis_config(config, o));
        else
            r = trc::cmd_simulate(trc::load_simulation_config(config, o));
        std::cout << r.text;
        if (r.exit_code == trc::kExitReplicationFailures)
            std::cerr << "error: more than 1% of replications failed\n";
        return r.exit_code;
    } catch (const trc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return trc::exit_code_for(e.code());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 6;
    }
}
