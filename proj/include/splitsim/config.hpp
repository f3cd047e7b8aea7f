#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "splitsim/engine.hpp"
#include "splitsim/errors.hpp"
#include "splitsim/gpu_model.hpp"
#include "splitsim/request.hpp"
#include "splitsim/schedulers.hpp"

namespace splitsim {

using Json = nlohmann::ordered_json;

// GPU memory geometry as configured. The effective KV capacity is derived
// from the budget unless kv_capacity_blocks pins it explicitly; duplicated
// weights shrink the derived capacity instead of failing.
struct GpuConfig {
    double compute_capacity = 1.0e6;
    double mem_bandwidth = 1.0e5;
    double mem_budget_units = 22016.0;
    double block_mem_unit = 1.0;
    double weight_mem_units = 16.0;
    bool shared_weights = true;
    int block_tokens = 16;
    long long kv_capacity_blocks = 0;  // 0 = derive from budget
};

struct ExperimentConfig {
    std::optional<WorkloadSpec> workload;  // one of workload / trace_path
    std::string trace_path;
    GpuConfig gpu;
    CostModel cost;
    SchedulerConfig scheduler;
    SharingDiscipline discipline;
    std::string output_dir = "out";
    bool emit_event_log = false;
    std::uint64_t seed = 0;
};

struct SweepSpec {
    ExperimentConfig base;
    std::string axis;
    std::vector<Json> values;
    Json base_json;  // raw, for re-applying axis overrides
};

inline int model_instances(const SchedulerConfig& s) {
    switch (s.policy) {
        case PolicyKind::PipelinedSplitwiser: return s.splitwiser_processes;
        case PolicyKind::MultiInstance: return s.n_instances;
        default: return 1;
    }
}

// K = floor((budget - weights) / block_unit); with duplicated weights the
// extra copies cost ceil(extra / block_unit) blocks of KV headroom.
inline long long derive_kv_capacity(const GpuConfig& g, int n_instances) {
    if (g.kv_capacity_blocks > 0) return g.kv_capacity_blocks;
    if (!(g.block_mem_unit > 0)) throw ConfigError("gpu.block_mem_unit: must be > 0");
    const long long base =
        static_cast<long long>(std::floor((g.mem_budget_units - g.weight_mem_units) / g.block_mem_unit));
    long long k = base;
    if (!g.shared_weights && n_instances > 1) {
        const double extra = g.weight_mem_units * (n_instances - 1);
        k -= static_cast<long long>(std::ceil(extra / g.block_mem_unit));
    }
    if (k < 1)
        throw ConfigError("gpu.mem_budget_units: no KV capacity left after weight accounting");
    return k;
}

namespace cfg_detail {

inline void expect_keys(const Json& j, const std::string& where,
                        std::initializer_list<const char*> keys) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : keys)
            if (it.key() == k) ok = true;
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
T get_or(const Json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception&) {
        throw ConfigError(where + "." + key + ": wrong type");
    }
}

inline TokenRange parse_token_range(const Json& j, const std::string& where) {
    TokenRange r;
    if (j.is_number_integer()) {
        r.min = r.max = j.get<int>();
    } else if (j.is_array() && j.size() == 2 && j[0].is_number_integer() && j[1].is_number_integer()) {
        r.min = j[0].get<int>();
        r.max = j[1].get<int>();
    } else {
        throw ConfigError(where + ": expected an integer or [min, max]");
    }
    return r;
}

inline Json dump_token_range(const TokenRange& r) {
    if (r.min == r.max) return Json(r.min);
    return Json::array({r.min, r.max});
}

inline PolicyKind parse_policy(const std::string& s, const std::string& where) {
    if (s == "sequential") return PolicyKind::Sequential;
    if (s == "pipelined_splitwiser") return PolicyKind::PipelinedSplitwiser;
    if (s == "continuous_batching") return PolicyKind::ContinuousBatching;
    if (s == "mixed_batching") return PolicyKind::MixedBatching;
    if (s == "multi_instance") return PolicyKind::MultiInstance;
    throw ConfigError(where + ": unknown policy '" + s + "'");
}

inline SharingDiscipline::Mode parse_mode(const std::string& s, const std::string& where) {
    if (s == "exclusive") return SharingDiscipline::Mode::Exclusive;
    if (s == "mps_concurrent") return SharingDiscipline::Mode::MpsConcurrent;
    if (s == "time_sliced") return SharingDiscipline::Mode::TimeSliced;
    throw ConfigError(where + ": unknown mode '" + s + "'");
}

}  // namespace cfg_detail

inline ExperimentConfig parse_config(const Json& j) {
    using namespace cfg_detail;
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    expect_keys(j, "config",
                {"workload", "gpu", "cost", "scheduler", "discipline", "output_dir",
                 "emit_event_log", "seed"});
    ExperimentConfig c;
    c.seed = get_or<std::uint64_t>(j, "seed", 0, "config");
    c.output_dir = get_or<std::string>(j, "output_dir", "out", "config");
    c.emit_event_log = get_or<bool>(j, "emit_event_log", false, "config");

    if (!j.contains("workload")) throw ConfigError("workload: required");
    const Json& w = j.at("workload");
    if (w.contains("trace")) {
        expect_keys(w, "workload", {"trace"});
        c.trace_path = w.at("trace").get<std::string>();
        if (c.trace_path.empty()) throw ConfigError("workload.trace: empty path");
    } else {
        expect_keys(w, "workload",
                    {"n_requests", "input_tokens", "output_tokens", "arrival", "seed"});
        WorkloadSpec spec;
        spec.n_requests = get_or<int>(w, "n_requests", 0, "workload");
        if (w.contains("input_tokens"))
            spec.input_tokens = parse_token_range(w.at("input_tokens"), "workload.input_tokens");
        if (w.contains("output_tokens"))
            spec.output_tokens = parse_token_range(w.at("output_tokens"), "workload.output_tokens");
        spec.seed = get_or<std::uint64_t>(w, "seed", c.seed, "workload");
        if (w.contains("arrival")) {
            const Json& a = w.at("arrival");
            if (a.is_string() && a.get<std::string>() == "all_at_zero") {
                spec.arrival = ArrivalAllAtZero{};
            } else if (a.is_object() && a.contains("fixed_interval_s")) {
                expect_keys(a, "workload.arrival", {"fixed_interval_s"});
                spec.arrival = ArrivalFixedInterval{a.at("fixed_interval_s").get<double>()};
            } else if (a.is_object() && a.contains("poisson_rate_per_s")) {
                expect_keys(a, "workload.arrival", {"poisson_rate_per_s"});
                spec.arrival = ArrivalPoissonRate{a.at("poisson_rate_per_s").get<double>()};
            } else {
                throw ConfigError(
                    "workload.arrival: expected \"all_at_zero\", {fixed_interval_s} or {poisson_rate_per_s}");
            }
        }
        validate(spec);
        c.workload = spec;
    }

    if (j.contains("gpu")) {
        const Json& g = j.at("gpu");
        expect_keys(g, "gpu",
                    {"compute_capacity", "mem_bandwidth", "mem_budget_units", "block_mem_unit",
                     "weight_mem_units", "shared_weights", "block_tokens", "kv_capacity_blocks"});
        c.gpu.compute_capacity = get_or<double>(g, "compute_capacity", c.gpu.compute_capacity, "gpu");
        c.gpu.mem_bandwidth = get_or<double>(g, "mem_bandwidth", c.gpu.mem_bandwidth, "gpu");
        c.gpu.mem_budget_units = get_or<double>(g, "mem_budget_units", c.gpu.mem_budget_units, "gpu");
        c.gpu.block_mem_unit = get_or<double>(g, "block_mem_unit", c.gpu.block_mem_unit, "gpu");
        c.gpu.weight_mem_units = get_or<double>(g, "weight_mem_units", c.gpu.weight_mem_units, "gpu");
        c.gpu.shared_weights = get_or<bool>(g, "shared_weights", c.gpu.shared_weights, "gpu");
        c.gpu.block_tokens = get_or<int>(g, "block_tokens", c.gpu.block_tokens, "gpu");
        c.gpu.kv_capacity_blocks = get_or<long long>(g, "kv_capacity_blocks", 0, "gpu");
    }
    if (c.gpu.block_tokens < 1) throw ConfigError("gpu.block_tokens: must be >= 1");
    if (!(c.gpu.compute_capacity > 0)) throw ConfigError("gpu.compute_capacity: must be > 0");
    if (!(c.gpu.mem_bandwidth > 0)) throw ConfigError("gpu.mem_bandwidth: must be > 0");
    if (!(c.gpu.weight_mem_units >= 0)) throw ConfigError("gpu.weight_mem_units: must be >= 0");

    if (j.contains("cost")) {
        const Json& k = j.at("cost");
        expect_keys(k, "cost",
                    {"prompt_compute_per_token", "prompt_mem_per_token", "token_compute_per_req",
                     "token_mem_weight_fraction", "token_mem_per_kv_block", "prompt_overhead_s",
                     "step_overhead_s", "kv_handoff_s"});
        c.cost.prompt_compute_per_token =
            get_or<double>(k, "prompt_compute_per_token", c.cost.prompt_compute_per_token, "cost");
        c.cost.prompt_mem_per_token =
            get_or<double>(k, "prompt_mem_per_token", c.cost.prompt_mem_per_token, "cost");
        c.cost.token_compute_per_req =
            get_or<double>(k, "token_compute_per_req", c.cost.token_compute_per_req, "cost");
        c.cost.token_mem_weight_fraction =
            get_or<double>(k, "token_mem_weight_fraction", c.cost.token_mem_weight_fraction, "cost");
        c.cost.token_mem_per_kv_block =
            get_or<double>(k, "token_mem_per_kv_block", c.cost.token_mem_per_kv_block, "cost");
        c.cost.prompt_overhead_s = get_or<double>(k, "prompt_overhead_s", c.cost.prompt_overhead_s, "cost");
        c.cost.step_overhead_s = get_or<double>(k, "step_overhead_s", c.cost.step_overhead_s, "cost");
        c.cost.kv_handoff_s = get_or<double>(k, "kv_handoff_s", c.cost.kv_handoff_s, "cost");
    }
    validate(c.cost);

    if (j.contains("scheduler")) {
        const Json& s = j.at("scheduler");
        expect_keys(s, "scheduler", {"policy", "max_batch", "P", "n_instances", "inner"});
        if (s.contains("policy"))
            c.scheduler.policy = parse_policy(s.at("policy").get<std::string>(), "scheduler.policy");
        c.scheduler.max_batch = get_or<int>(s, "max_batch", 0, "scheduler");
        c.scheduler.splitwiser_processes = get_or<int>(s, "P", 1, "scheduler");
        c.scheduler.n_instances = get_or<int>(s, "n_instances", 2, "scheduler");
        if (s.contains("inner"))
            c.scheduler.inner = parse_policy(s.at("inner").get<std::string>(), "scheduler.inner");
    }
    validate(c.scheduler);

    if (j.contains("discipline")) {
        const Json& d = j.at("discipline");
        expect_keys(d, "discipline", {"mode", "quantum_s", "switch_cost_s"});
        if (d.contains("mode"))
            c.discipline.mode = parse_mode(d.at("mode").get<std::string>(), "discipline.mode");
        c.discipline.quantum_s = get_or<double>(d, "quantum_s", c.discipline.quantum_s, "discipline");
        c.discipline.switch_cost_s =
            get_or<double>(d, "switch_cost_s", c.discipline.switch_cost_s, "discipline");
    }
    validate(c.discipline);
    if (c.discipline.mode == SharingDiscipline::Mode::Exclusive && model_instances(c.scheduler) > 1)
        throw ConfigError("discipline.mode: exclusive requires a single-instance scheduler "
                          "(use mps_concurrent or time_sliced)");
    derive_kv_capacity(c.gpu, model_instances(c.scheduler));  // fail early if budget is broken
    return c;
}

inline Json to_json(const ExperimentConfig& c) {
    using namespace cfg_detail;
    Json j;
    Json w;
    if (!c.trace_path.empty()) {
        w["trace"] = c.trace_path;
    } else {
        const WorkloadSpec& spec = *c.workload;
        w["n_requests"] = spec.n_requests;
        w["input_tokens"] = dump_token_range(spec.input_tokens);
        w["output_tokens"] = dump_token_range(spec.output_tokens);
        if (std::holds_alternative<ArrivalAllAtZero>(spec.arrival)) {
            w["arrival"] = "all_at_zero";
        } else if (const auto* fi = std::get_if<ArrivalFixedInterval>(&spec.arrival)) {
            w["arrival"] = Json{{"fixed_interval_s", fi->interval_s}};
        } else {
            w["arrival"] = Json{{"poisson_rate_per_s", std::get<ArrivalPoissonRate>(spec.arrival).rate_per_s}};
        }
        w["seed"] = spec.seed;
    }
    j["workload"] = w;
    j["gpu"] = Json{{"compute_capacity", c.gpu.compute_capacity},
                    {"mem_bandwidth", c.gpu.mem_bandwidth},
                    {"mem_budget_units", c.gpu.mem_budget_units},
                    {"block_mem_unit", c.gpu.block_mem_unit},
                    {"weight_mem_units", c.gpu.weight_mem_units},
                    {"shared_weights", c.gpu.shared_weights},
                    {"block_tokens", c.gpu.block_tokens},
                    {"kv_capacity_blocks", c.gpu.kv_capacity_blocks}};
    j["cost"] = Json{{"prompt_compute_per_token", c.cost.prompt_compute_per_token},
                     {"prompt_mem_per_token", c.cost.prompt_mem_per_token},
                     {"token_compute_per_req", c.cost.token_compute_per_req},
                     {"token_mem_weight_fraction", c.cost.token_mem_weight_fraction},
                     {"token_mem_per_kv_block", c.cost.token_mem_per_kv_block},
                     {"prompt_overhead_s", c.cost.prompt_overhead_s},
                     {"step_overhead_s", c.cost.step_overhead_s},
                     {"kv_handoff_s", c.cost.kv_handoff_s}};
    j["scheduler"] = Json{{"policy", to_string(c.scheduler.policy)},
                          {"max_batch", c.scheduler.max_batch},
                          {"P", c.scheduler.splitwiser_processes},
                          {"n_instances", c.scheduler.n_instances},
                          {"inner", to_string(c.scheduler.inner)}};
    j["discipline"] = Json{{"mode", to_string(c.discipline.mode)},
                           {"quantum_s", c.discipline.quantum_s},
                           {"switch_cost_s", c.discipline.switch_cost_s}};
    j["output_dir"] = c.output_dir;
    j["emit_event_log"] = c.emit_event_log;
    j["seed"] = c.seed;
    return j;
}

// Set a dotted field path ("gpu.compute_capacity") to a JSON value, creating
// intermediate objects as needed.
inline void set_path(Json& j, const std::string& path, const Json& value) {
    Json* node = &j;
    std::string part;
    std::istringstream ps(path);
    std::vector<std::string> parts;
    while (std::getline(ps, part, '.')) parts.push_back(part);
    if (parts.empty()) throw ConfigError("override: empty key path");
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (node->is_null()) *node = Json::object();
        if (!node->is_object()) throw ConfigError("override: '" + parts[i] + "' is not an object");
        node = &(*node)[parts[i]];
    }
    if (node->is_null()) *node = Json::object();
    if (!node->is_object()) throw ConfigError("override: path does not address an object field");
    (*node)[parts.back()] = value;
}

// Dotted-path override: "gpu.compute_capacity=2e6". The value is parsed as a
// JSON literal when possible, otherwise taken as a string.
inline void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("--set: expected key.path=value, got '" + assignment + "'");
    const std::string path = assignment.substr(0, eq);
    const std::string value_text = assignment.substr(eq + 1);
    Json value;
    try {
        value = Json::parse(value_text);
    } catch (const Json::exception&) {
        value = value_text;
    }
    set_path(j, path, value);
}

inline Json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return Json::parse(ss.str());
    } catch (const Json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
}

inline SweepSpec parse_sweep(const Json& j) {
    using namespace cfg_detail;
    if (!j.is_object()) throw ConfigError("sweep: expected a JSON object");
    expect_keys(j, "sweep", {"base", "base_path", "axis", "values"});
    SweepSpec s;
    if (j.contains("base")) {
        s.base_json = j.at("base");
    } else if (j.contains("base_path")) {
        s.base_json = read_json_file(j.at("base_path").get<std::string>());
    } else {
        throw ConfigError("sweep.base: required (inline object or base_path)");
    }
    s.base = parse_config(s.base_json);
    s.axis = get_or<std::string>(j, "axis", "", "sweep");
    if (s.axis.empty()) throw ConfigError("sweep.axis: required");
    if (!j.contains("values") || !j.at("values").is_array() || j.at("values").empty())
        throw ConfigError("sweep.values: non-empty array required");
    for (const auto& v : j.at("values")) {
        if (!(v.is_number() || v.is_string() || v.is_boolean()))
            throw ConfigError("sweep.values: entries must be numbers, strings or booleans");
        s.values.push_back(v);
    }
    return s;
}

// Resolve workload and effective capacities into engine inputs.
inline SimulationInputs assemble(const ExperimentConfig& c) {
    SimulationInputs in;
    if (!c.trace_path.empty()) {
        std::ifstream f(c.trace_path);
        if (!f) throw ConfigError("workload.trace: cannot open '" + c.trace_path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        in.requests = parse_trace(ss.str());
    } else {
        in.requests = generate(*c.workload);
    }
    in.gpu.compute_capacity = c.gpu.compute_capacity;
    in.gpu.mem_bandwidth = c.gpu.mem_bandwidth;
    in.gpu.weight_mem_units = c.gpu.weight_mem_units;
    in.gpu.shared_weights = c.gpu.shared_weights;
    in.gpu.kv_capacity_blocks = derive_kv_capacity(c.gpu, model_instances(c.scheduler));
    in.cost = c.cost;
    in.block_tokens = c.gpu.block_tokens;
    in.discipline = c.discipline;
    validate(in.gpu);
    return in;
}

}  // namespace splitsim
