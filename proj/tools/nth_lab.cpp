// nth-lab: command-line harness for the NTK/NTH experiments.
//
//   nth-lab <command> --config <path> [--out <dir>] [--threads N] [--heavy]
//
// Exit codes: 0 pass, 2 check failure, 3 numerical failure, 4 config error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "nthlab/experiment.hpp"
#include "nthlab/version.hpp"

namespace fs = std::filesystem;
using namespace nthlab;

namespace {

struct CliOptions {
    std::string config_path;
    std::string out_dir = ".";
    std::size_t threads = 1;
    bool heavy = false;
};

int dispatch(const std::string& command, const CliOptions& opt) {
    ExperimentSpec spec = load_spec(opt.config_path);
    if (!spec.command.empty() && spec.command != command)
        throw ConfigError("config names command '" + spec.command + "' but '" + command +
                          "' was invoked");
    if (opt.heavy) spec.heavy = true;
    apply_env_overrides(spec);
    fs::create_directories(opt.out_dir);

    if (command == "grad-check") return cmd_grad_check(spec, opt.out_dir);
    if (command == "flow") return cmd_flow(spec, opt.out_dir);
    if (command == "drift-scan") return cmd_drift_scan(spec, opt.out_dir, opt.threads);
    if (command == "depth-scan") return cmd_depth_scan(spec, opt.out_dir, opt.threads);
    if (command == "limit-gram") return cmd_limit_gram(spec, opt.out_dir, opt.threads);
    if (command == "nth-check") return cmd_nth_check(spec, opt.out_dir);
    if (command == "kernel-regression") return cmd_kernel_regression(spec, opt.out_dir, opt.threads);
    throw ConfigError("unknown command '" + command + "'");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"nth-lab: finite-width ResNet NTK/NTH numerical laboratory"};
    app.set_version_flag("--version", std::string(build_id()));
    app.require_subcommand(1);

    CliOptions opt;
    const std::vector<std::string> commands = {"grad-check", "flow",      "drift-scan",
                                               "depth-scan", "limit-gram", "nth-check",
                                               "kernel-regression"};
    for (const std::string& name : commands) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("--config", opt.config_path, "experiment spec (JSON)")->required();
        sub->add_option("--out", opt.out_dir, "output directory");
        sub->add_option("--threads", opt.threads, "sweep worker threads");
        sub->add_flag("--heavy", opt.heavy, "enable the m=4096 tier");
    }

    CLI11_PARSE(app, argc, argv);

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        return dispatch(command, opt);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    }
}
