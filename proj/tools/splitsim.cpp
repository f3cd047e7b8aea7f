#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "splitsim/config.hpp"
#include "splitsim/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitInternal = 4;

void env_output_dir_fallback(splitsim::Json& cfg_json) {
    if (cfg_json.is_object() && !cfg_json.contains("output_dir")) {
        if (const char* dir = std::getenv("SPLITSIM_OUTPUT_DIR")) cfg_json["output_dir"] = std::string(dir);
    }
}

int run_cmd(const std::string& config_path, const std::vector<std::string>& overrides,
            bool emit_events, const std::string& output_dir) {
    splitsim::Json j = splitsim::read_json_file(config_path);
    env_output_dir_fallback(j);
    for (const auto& o : overrides) splitsim::apply_override(j, o);
    if (emit_events) j["emit_event_log"] = true;
    if (!output_dir.empty()) j["output_dir"] = output_dir;
    splitsim::ExperimentConfig cfg = splitsim::parse_config(j);
    splitsim::RunResult result = splitsim::run_config(cfg);
    splitsim::write_experiment(cfg, result);
    std::cout << splitsim::summary_line(result.report) << "\n";
    return kExitOk;
}

int sweep_cmd(const std::string& sweep_path, const std::vector<std::string>& overrides, int jobs) {
    splitsim::Json j = splitsim::read_json_file(sweep_path);
    if (j.is_object() && j.contains("base_path")) {
        // Inline the referenced base (path relative to the working directory)
        // so --set overrides apply uniformly.
        j["base"] = splitsim::read_json_file(j["base_path"].get<std::string>());
        j.erase("base_path");
    }
    if (j.is_object() && j.contains("base") && j["base"].is_object()) {
        env_output_dir_fallback(j["base"]);
        for (const auto& o : overrides) splitsim::apply_override(j["base"], o);
    }
    splitsim::SweepSpec spec = splitsim::parse_sweep(j);
    splitsim::SweepOutcome outcome = splitsim::run_sweep(spec, jobs);
    for (const auto& row : outcome.rows) {
        std::cout << spec.axis << "=" << splitsim::sanitize_value(row.value) << ": "
                  << (row.ok ? splitsim::summary_line(row.report) : "FAILED: " + row.error) << "\n";
    }
    std::cout << "sweep.csv: " << outcome.csv_path.string() << "\n";
    return outcome.all_ok ? kExitOk : 1;
}

int validate_cmd(const std::string& config_path, const std::vector<std::string>& overrides) {
    splitsim::Json j = splitsim::read_json_file(config_path);
    env_output_dir_fallback(j);
    for (const auto& o : overrides) splitsim::apply_override(j, o);
    splitsim::ExperimentConfig cfg = splitsim::parse_config(j);
    if (!cfg.trace_path.empty()) {
        std::ifstream f(cfg.trace_path);
        if (!f) throw splitsim::ConfigError("workload.trace: cannot open '" + cfg.trace_path + "'");
    }
    std::cout << "ok\n";
    return kExitOk;
}

int replay_cmd(const std::string& events_path, const std::string& out_dir) {
    splitsim::MetricsReport rep = splitsim::replay_file(events_path);
    std::filesystem::path dir =
        out_dir.empty() ? std::filesystem::path(events_path).parent_path() : std::filesystem::path(out_dir);
    if (dir.empty()) dir = ".";
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw splitsim::IoError("cannot create '" + dir.string() + "': " + ec.message());
    splitsim::write_file_atomic(dir / "replay_report.json",
                                splitsim::report_to_json(rep).dump(2) + "\n");
    std::cout << splitsim::summary_line(rep) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"splitsim: discrete-event simulator of single-GPU LLM inference serving"};
    app.require_subcommand(1);

    std::string config_path, sweep_path, events_path, output_dir, replay_out;
    std::vector<std::string> overrides;
    bool emit_events = false;
    int jobs = 1;

    auto* run = app.add_subcommand("run", "run one experiment and write its reports");
    run->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--set", overrides, "override a config field: key.path=value");
    run->add_flag("--emit-events", emit_events, "also write events.csv");
    run->add_option("--output-dir", output_dir, "override output_dir");

    auto* sweep = app.add_subcommand("sweep", "run a parameter sweep");
    sweep->add_option("-c,--config", sweep_path, "sweep spec (JSON)")->required();
    sweep->add_option("--set", overrides, "override a base-config field: key.path=value");
    sweep->add_option("--jobs", jobs, "parallel sub-runs")->default_val(1);

    auto* validate = app.add_subcommand("validate", "check a config and exit");
    validate->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    validate->add_option("--set", overrides, "override a config field: key.path=value");

    auto* replay = app.add_subcommand("replay", "rebuild a report from an event log");
    replay->add_option("events", events_path, "events.csv from a previous run")->required();
    replay->add_option("--out", replay_out, "directory for replay_report.json");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return run_cmd(config_path, overrides, emit_events, output_dir);
        if (sweep->parsed()) return sweep_cmd(sweep_path, overrides, jobs);
        if (validate->parsed()) return validate_cmd(config_path, overrides);
        if (replay->parsed()) return replay_cmd(events_path, replay_out);
    } catch (const splitsim::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const splitsim::ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const splitsim::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const splitsim::ContractViolation& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitInternal;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInternal;
    }
    return kExitOk;
}
