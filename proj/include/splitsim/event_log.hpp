#pragma once

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/gpu_model.hpp"
#include "splitsim/request.hpp"

namespace splitsim {

// The engine emits a flat record stream; every metric in the report is a
// fold over this stream, so `replay` of a written log reproduces the report
// exactly (same code path, %.17g round-trips every double).
enum class LogKind {
    Arrival,
    BatchDef,
    TaskStart,
    TaskComplete,
    RequestFinish,
    Kv,
    Slice,
    RunEnd,
};

inline const char* to_string(LogKind k) {
    switch (k) {
        case LogKind::Arrival: return "arrival";
        case LogKind::BatchDef: return "batch_def";
        case LogKind::TaskStart: return "task_start";
        case LogKind::TaskComplete: return "task_complete";
        case LogKind::RequestFinish: return "request_finish";
        case LogKind::Kv: return "kv";
        case LogKind::Slice: return "slice";
        case LogKind::RunEnd: return "run_end";
    }
    return "?";
}

struct LogRecord {
    double time_s = 0.0;
    LogKind kind = LogKind::RunEnd;
    int request = -1;        // Arrival, RequestFinish
    int instance = -1;       // Arrival, TaskStart, Kv, Slice (-1 in Slice = none runnable)
    int task_id = -1;        // TaskStart, TaskComplete
    TaskKind task_kind = TaskKind::Prompt;  // TaskStart
    int batch_id = -1;       // TaskStart
    double compute = 0.0;    // TaskStart
    double mem = 0.0;        // TaskStart
    double alone_s = 0.0;    // TaskStart
    int input_tokens = 0;    // Arrival
    int output_tokens = 0;   // Arrival
    long long kv_blocks = 0; // Kv: instance total after the change
};

struct EventLog {
    // Meta needed to interpret the stream without the original config.
    double compute_capacity = 0.0;
    double mem_bandwidth = 0.0;
    int block_tokens = 16;
    std::vector<long long> kv_capacity;  // per instance
    std::string discipline = "exclusive";

    std::vector<std::vector<int>> batches;  // BatchDef bodies, indexed by batch_id
    std::vector<LogRecord> records;
};

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += '|';
        s += std::to_string(v[i]);
    }
    return s;
}

inline std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::string cur;
    for (char c : s) {
        if (c == '|') {
            if (!cur.empty()) out.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::stoi(cur));
    return out;
}

inline std::vector<long long> split_lls(const std::string& s) {
    std::vector<long long> out;
    std::string cur;
    for (char c : s) {
        if (c == '|') {
            if (!cur.empty()) out.push_back(std::stoll(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(std::stoll(cur));
    return out;
}

}  // namespace detail

inline std::string serialize_event_log(const EventLog& log) {
    std::string out = "time_s,kind,detail\n";
    out += "0,meta,compute_capacity=" + format_double(log.compute_capacity) +
           ";mem_bandwidth=" + format_double(log.mem_bandwidth) +
           ";block_tokens=" + std::to_string(log.block_tokens) + ";kv_capacity=";
    for (std::size_t i = 0; i < log.kv_capacity.size(); ++i) {
        if (i) out += '|';
        out += std::to_string(log.kv_capacity[i]);
    }
    out += ";discipline=" + log.discipline + "\n";
    std::vector<bool> batch_written(log.batches.size(), false);
    for (const auto& r : log.records) {
        if (r.kind == LogKind::TaskStart && r.batch_id >= 0 && !batch_written[static_cast<std::size_t>(r.batch_id)]) {
            batch_written[static_cast<std::size_t>(r.batch_id)] = true;
            out += format_double(r.time_s);
            out += ",batch_def,batch=" + std::to_string(r.batch_id) +
                   ";reqs=" + detail::join_ints(log.batches[static_cast<std::size_t>(r.batch_id)]) + "\n";
        }
        out += format_double(r.time_s);
        out += ',';
        out += to_string(r.kind);
        out += ',';
        switch (r.kind) {
            case LogKind::Arrival:
                out += "req=" + std::to_string(r.request) + ";inst=" + std::to_string(r.instance) +
                       ";input=" + std::to_string(r.input_tokens) +
                       ";output=" + std::to_string(r.output_tokens);
                break;
            case LogKind::TaskStart:
                out += "task=" + std::to_string(r.task_id) + ";inst=" + std::to_string(r.instance) +
                       ";kind=" + std::string(to_string(r.task_kind)) +
                       ";batch=" + std::to_string(r.batch_id) + ";compute=" + format_double(r.compute) +
                       ";mem=" + format_double(r.mem) + ";alone=" + format_double(r.alone_s);
                break;
            case LogKind::TaskComplete:
                out += "task=" + std::to_string(r.task_id);
                break;
            case LogKind::RequestFinish:
                out += "req=" + std::to_string(r.request);
                break;
            case LogKind::Kv:
                out += "inst=" + std::to_string(r.instance) + ";blocks=" + std::to_string(r.kv_blocks);
                break;
            case LogKind::Slice:
                out += "inst=" + std::to_string(r.instance);
                break;
            case LogKind::BatchDef:
            case LogKind::RunEnd:
                break;
        }
        out += '\n';
    }
    return out;
}

inline EventLog parse_event_log(const std::string& text) {
    EventLog log;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto fail = [&](const std::string& what) {
        throw ParseError("event log line " + std::to_string(line_no) + ": " + what);
    };
    auto kv_pairs = [&](const std::string& detail) {
        std::vector<std::pair<std::string, std::string>> out;
        std::string item;
        std::istringstream ds(detail);
        while (std::getline(ds, item, ';')) {
            auto eq = item.find('=');
            if (eq == std::string::npos) fail("bad detail item '" + item + "'");
            out.emplace_back(item.substr(0, eq), item.substr(eq + 1));
        }
        return out;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1) {
            if (line != "time_s,kind,detail") fail("expected event log header");
            continue;
        }
        auto c1 = line.find(',');
        auto c2 = line.find(',', c1 == std::string::npos ? 0 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos) fail("expected 3 fields");
        const std::string time_str = line.substr(0, c1);
        const std::string kind_str = line.substr(c1 + 1, c2 - c1 - 1);
        const std::string detail = line.substr(c2 + 1);
        double t = 0.0;
        try {
            t = std::stod(time_str);
        } catch (...) {
            fail("bad time '" + time_str + "'");
        }
        if (kind_str == "meta") {
            for (auto& [k, v] : kv_pairs(detail)) {
                if (k == "compute_capacity") log.compute_capacity = std::stod(v);
                else if (k == "mem_bandwidth") log.mem_bandwidth = std::stod(v);
                else if (k == "block_tokens") log.block_tokens = std::stoi(v);
                else if (k == "kv_capacity") log.kv_capacity = detail::split_lls(v);
                else if (k == "discipline") log.discipline = v;
            }
            continue;
        }
        if (kind_str == "batch_def") {
            int id = -1;
            std::vector<int> reqs;
            for (auto& [k, v] : kv_pairs(detail)) {
                if (k == "batch") id = std::stoi(v);
                else if (k == "reqs") reqs = detail::split_ints(v);
            }
            if (id < 0) fail("batch_def without id");
            if (static_cast<int>(log.batches.size()) <= id) log.batches.resize(static_cast<std::size_t>(id) + 1);
            log.batches[static_cast<std::size_t>(id)] = std::move(reqs);
            continue;
        }
        LogRecord r;
        r.time_s = t;
        if (kind_str == "arrival") r.kind = LogKind::Arrival;
        else if (kind_str == "task_start") r.kind = LogKind::TaskStart;
        else if (kind_str == "task_complete") r.kind = LogKind::TaskComplete;
        else if (kind_str == "request_finish") r.kind = LogKind::RequestFinish;
        else if (kind_str == "kv") r.kind = LogKind::Kv;
        else if (kind_str == "slice") r.kind = LogKind::Slice;
        else if (kind_str == "run_end") r.kind = LogKind::RunEnd;
        else fail("unknown kind '" + kind_str + "'");
        try {
            for (auto& [k, v] : kv_pairs(detail)) {
                if (k == "req") r.request = std::stoi(v);
                else if (k == "inst") r.instance = std::stoi(v);
                else if (k == "task") r.task_id = std::stoi(v);
                else if (k == "batch") r.batch_id = std::stoi(v);
                else if (k == "kind") r.task_kind = v == "prompt" ? TaskKind::Prompt : TaskKind::TokenStep;
                else if (k == "compute") r.compute = std::stod(v);
                else if (k == "mem") r.mem = std::stod(v);
                else if (k == "alone") r.alone_s = std::stod(v);
                else if (k == "input") r.input_tokens = std::stoi(v);
                else if (k == "output") r.output_tokens = std::stoi(v);
                else if (k == "blocks") r.kv_blocks = std::stoll(v);
            }
        } catch (const ParseError&) {
            throw;
        } catch (...) {
            fail("bad numeric detail");
        }
        log.records.push_back(r);
    }
    return log;
}

}  // namespace splitsim
