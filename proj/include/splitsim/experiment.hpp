#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "splitsim/config.hpp"
#include "splitsim/engine.hpp"
#include "splitsim/event_log.hpp"
#include "splitsim/metrics.hpp"
#include "splitsim/schedulers.hpp"

namespace splitsim {

struct RunResult {
    EventLog log;
    MetricsReport report;
};

// Run a fully parsed config in memory (no files). The workhorse for tests,
// sweeps and the CLI alike.
inline RunResult run_config(const ExperimentConfig& cfg) {
    SimulationInputs in = assemble(cfg);
    PolicyScheduler sched(in.requests, cfg.scheduler, cfg.cost.kv_handoff_s);
    RunResult r;
    r.log = run_simulation(in, sched);
    r.report = build_report(r.log);
    return r;
}

inline Json report_to_json(const MetricsReport& rep) {
    Json j;
    j["n_requests"] = rep.n_requests;
    j["total_output_tokens"] = rep.total_output_tokens;
    j["makespan_s"] = rep.makespan_s;
    j["throughput"] = Json{{"tokens_per_s", rep.tokens_per_s},
                           {"requests_per_s", rep.requests_per_s},
                           {"steady_state_tokens_per_s", rep.steady_tokens_per_s}};
    j["latency"] = Json{{"mean_e2e_s", rep.mean_e2e_s},
                        {"median_e2e_s", rep.median_e2e_s},
                        {"p99_e2e_s", rep.p99_e2e_s},
                        {"mean_ttft_s", rep.mean_ttft_s},
                        {"mean_tbt_s", rep.mean_tbt_s}};
    auto phase_json = [](const PhaseAggregates& p) {
        return Json{{"present", p.present},
                    {"elapsed_s", p.elapsed_s},
                    {"mean_kv_pct", p.mean_kv_pct},
                    {"mean_compute_pct", p.mean_compute_pct},
                    {"mean_mem_pct", p.mean_mem_pct}};
    };
    j["phase"] = Json{{"prompt", phase_json(rep.prompt_phase)}, {"token", phase_json(rep.token_phase)}};
    Json batches = Json::array();
    for (const auto& per_inst : rep.batch_elapsed_s) batches.push_back(per_inst);
    j["batch_elapsed"] = Json{{"mean_s", rep.mean_batch_elapsed_s}, {"per_instance", batches}};
    Json reqs = Json::array();
    for (const auto& r : rep.requests) {
        reqs.push_back(Json{{"id", r.id},
                            {"instance", r.instance},
                            {"arrival_s", r.arrival_s},
                            {"input_tokens", r.input_tokens},
                            {"output_tokens", r.output_tokens},
                            {"prompt_start_s", r.prompt_start_s},
                            {"first_token_s", r.first_token_s},
                            {"finish_s", r.finish_s},
                            {"ttft_s", r.ttft_s},
                            {"e2e_s", r.e2e_s},
                            {"tbt_mean_s", r.tbt_mean_s}});
    }
    j["per_request"] = reqs;
    Json kv = Json::array();
    for (const auto& series : rep.kv_pct) {
        Json s = Json::array();
        for (const auto& p : series) s.push_back(Json{{"time_s", p.time_s}, {"pct", p.value}});
        kv.push_back(s);
    }
    j["kv_series"] = kv;
    Json util = Json::array();
    for (const auto& p : rep.util)
        util.push_back(Json{{"time_s", p.time_s}, {"compute_pct", p.compute_pct}, {"mem_pct", p.mem_pct}});
    j["util_series"] = util;
    return j;
}

inline std::string summary_line(const MetricsReport& rep) {
    return "makespan_s=" + format_double(rep.makespan_s) +
           ", tokens_per_s=" + format_double(rep.tokens_per_s) +
           ", mean_ttft_s=" + format_double(rep.mean_ttft_s);
}

inline std::string requests_csv(const MetricsReport& rep) {
    std::string out = "id,arrival_s,ttft_s,e2e_s,tbt_mean_s\n";
    for (const auto& r : rep.requests) {
        out += std::to_string(r.id);
        out += ',';
        out += format_double(r.arrival_s);
        out += ',';
        out += format_double(r.ttft_s);
        out += ',';
        out += format_double(r.e2e_s);
        out += ',';
        out += format_double(r.tbt_mean_s);
        out += '\n';
    }
    return out;
}

// Per-instance rows at the union of the instance's KV and utilization
// breakpoints; values are piecewise-constant from that time on.
inline std::string timeseries_csv(const MetricsReport& rep) {
    struct Row {
        double t;
        int inst;
        double kv, c, m;
    };
    std::vector<Row> rows;
    const std::size_t n_inst = rep.instance_util.size();
    for (std::size_t i = 0; i < n_inst; ++i) {
        const auto& kv = rep.kv_pct[i];
        const auto& ut = rep.instance_util[i];
        std::vector<double> times;
        for (const auto& p : kv) times.push_back(p.time_s);
        for (const auto& p : ut) times.push_back(p.time_s);
        std::sort(times.begin(), times.end());
        times.erase(std::unique(times.begin(), times.end()), times.end());
        std::size_t ik = 0, iu = 0;
        for (double t : times) {
            while (ik + 1 < kv.size() && kv[ik + 1].time_s <= t) ++ik;
            while (iu + 1 < ut.size() && ut[iu + 1].time_s <= t) ++iu;
            const double kvv = kv.empty() ? 0.0 : kv[ik].value;
            const double cv = ut.empty() ? 0.0 : ut[iu].compute_pct;
            const double mv = ut.empty() ? 0.0 : ut[iu].mem_pct;
            rows.push_back({t, static_cast<int>(i), kvv, cv, mv});
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        if (a.t != b.t) return a.t < b.t;
        return a.inst < b.inst;
    });
    std::string out = "time_s,instance,kv_pct,compute_pct,mem_pct\n";
    for (const auto& r : rows) {
        out += format_double(r.t);
        out += ',';
        out += std::to_string(r.inst);
        out += ',';
        out += format_double(r.kv);
        out += ',';
        out += format_double(r.c);
        out += ',';
        out += format_double(r.m);
        out += '\n';
    }
    return out;
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out << content;
        if (!out) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename to '" + path.string() + "' failed: " + ec.message());
}

struct ExperimentFiles {
    std::filesystem::path report_json;
    std::filesystem::path requests_csv;
    std::filesystem::path timeseries_csv;
    std::filesystem::path events_csv;  // empty unless emit_event_log
};

// Run and persist one experiment under cfg.output_dir.
inline ExperimentFiles write_experiment(const ExperimentConfig& cfg, const RunResult& result) {
    const std::filesystem::path dir(cfg.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output_dir '" + dir.string() + "': " + ec.message());
    ExperimentFiles files;
    files.report_json = dir / "report.json";
    files.requests_csv = dir / "requests.csv";
    files.timeseries_csv = dir / "timeseries.csv";
    write_file_atomic(files.report_json, report_to_json(result.report).dump(2) + "\n");
    write_file_atomic(files.requests_csv, requests_csv(result.report));
    write_file_atomic(files.timeseries_csv, timeseries_csv(result.report));
    if (cfg.emit_event_log) {
        files.events_csv = dir / "events.csv";
        write_file_atomic(files.events_csv, serialize_event_log(result.log));
    }
    return files;
}

inline std::string sanitize_value(const Json& v) {
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    for (char& c : s)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '.')) c = '_';
    return s;
}

struct SweepRow {
    Json value;
    bool ok = false;
    std::string error;
    MetricsReport report;
};

struct SweepOutcome {
    std::vector<SweepRow> rows;
    std::filesystem::path csv_path;
    bool all_ok = true;
};

inline std::string sweep_csv(const SweepSpec& spec, const std::vector<SweepRow>& rows) {
    std::string out = "value,status,makespan_s,tokens_per_s,requests_per_s,steady_tokens_per_s,"
                      "mean_ttft_s,mean_tbt_s,mean_e2e_s,p99_e2e_s,mean_batch_elapsed_s\n";
    (void)spec;
    for (const auto& r : rows) {
        out += sanitize_value(r.value);
        out += ',';
        out += r.ok ? "ok" : "failed";
        if (r.ok) {
            const MetricsReport& m = r.report;
            for (double v : {m.makespan_s, m.tokens_per_s, m.requests_per_s, m.steady_tokens_per_s,
                             m.mean_ttft_s, m.mean_tbt_s, m.mean_e2e_s, m.p99_e2e_s,
                             m.mean_batch_elapsed_s}) {
                out += ',';
                out += format_double(v);
            }
        } else {
            for (int i = 0; i < 9; ++i) out += ",";
        }
        out += '\n';
    }
    return out;
}

// One sub-directory per axis value; failures are marked and do not stop the
// remaining runs.
inline SweepOutcome run_sweep(const SweepSpec& spec, int jobs = 1) {
    SweepOutcome outcome;
    outcome.rows.resize(spec.values.size());
    const std::filesystem::path root(spec.base.output_dir);
    std::error_code ec;
    std::filesystem::create_directories(root, ec);
    if (ec) throw IoError("cannot create output_dir '" + root.string() + "': " + ec.message());

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= spec.values.size()) return;
            SweepRow& row = outcome.rows[i];
            row.value = spec.values[i];
            try {
                Json patched = spec.base_json;
                set_path(patched, spec.axis, spec.values[i]);
                set_path(patched, "output_dir", Json((root / sanitize_value(spec.values[i])).string()));
                ExperimentConfig cfg = parse_config(patched);
                RunResult result = run_config(cfg);
                write_experiment(cfg, result);
                row.report = std::move(result.report);
                row.ok = true;
            } catch (const std::exception& e) {
                row.ok = false;
                row.error = e.what();
            }
        }
    };
    if (jobs < 1) jobs = 1;
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (int t = 0; t < jobs; ++t) threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    for (const auto& r : outcome.rows)
        if (!r.ok) outcome.all_ok = false;
    outcome.csv_path = root / "sweep.csv";
    write_file_atomic(outcome.csv_path, sweep_csv(spec, outcome.rows));
    return outcome;
}

// Recompute a report from a written event log (the replay-equality check).
inline MetricsReport replay_file(const std::filesystem::path& events_path) {
    std::ifstream in(events_path);
    if (!in) throw IoError("cannot open event log '" + events_path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return build_report(parse_event_log(ss.str()));
}

}  // namespace splitsim
