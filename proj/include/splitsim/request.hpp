#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/prng.hpp"

namespace splitsim {

enum class RequestState { Waiting, Prompting, Generating, Finished };

// One inference job. Token counts are abstract: only counts drive cost,
// no text or tokenizer is modeled.
struct Request {
    int id = 0;
    double arrival_s = 0.0;
    int input_tokens = 1;
    int output_tokens = 1;
    RequestState state = RequestState::Waiting;

    friend bool operator==(const Request& a, const Request& b) {
        return a.id == b.id && a.arrival_s == b.arrival_s &&
               a.input_tokens == b.input_tokens && a.output_tokens == b.output_tokens;
    }
};

struct TokenRange {
    int min = 1;
    int max = 1;
};

struct ArrivalAllAtZero {};
struct ArrivalFixedInterval {
    double interval_s = 0.0;
};
struct ArrivalPoissonRate {
    double rate_per_s = 1.0;
};
using ArrivalProcess = std::variant<ArrivalAllAtZero, ArrivalFixedInterval, ArrivalPoissonRate>;

struct WorkloadSpec {
    int n_requests = 0;
    TokenRange input_tokens{1, 1};
    TokenRange output_tokens{1, 1};
    ArrivalProcess arrival = ArrivalAllAtZero{};
    std::uint64_t seed = 0;
};

inline void validate(const WorkloadSpec& spec) {
    auto check_range = [](const TokenRange& r, const char* field) {
        if (r.min < 1)
            throw ConfigError(std::string("workload.") + field + ": min must be >= 1");
        if (r.min > r.max)
            throw ConfigError(std::string("workload.") + field + ": min > max");
    };
    if (spec.n_requests < 0) throw ConfigError("workload.n_requests: must be >= 0");
    check_range(spec.input_tokens, "input_tokens");
    check_range(spec.output_tokens, "output_tokens");
    if (const auto* fi = std::get_if<ArrivalFixedInterval>(&spec.arrival)) {
        if (!(fi->interval_s >= 0.0))
            throw ConfigError("workload.arrival.fixed_interval: must be >= 0");
    }
    if (const auto* pr = std::get_if<ArrivalPoissonRate>(&spec.arrival)) {
        if (!(pr->rate_per_s > 0.0))
            throw ConfigError("workload.arrival.poisson_rate: must be > 0");
    }
}

// Deterministic workload synthesis: a pure function of the spec. Draw order
// per request is input, output, then inter-arrival, with one SplitMix64
// stream seeded by spec.seed.
inline std::vector<Request> generate(const WorkloadSpec& spec) {
    validate(spec);
    SplitMix64 rng(spec.seed);
    std::vector<Request> out;
    out.reserve(static_cast<std::size_t>(spec.n_requests));
    double clock = 0.0;
    for (int i = 0; i < spec.n_requests; ++i) {
        Request r;
        r.id = i;
        r.input_tokens = spec.input_tokens.min == spec.input_tokens.max
                             ? spec.input_tokens.min
                             : static_cast<int>(rng.next_range(spec.input_tokens.min, spec.input_tokens.max));
        r.output_tokens = spec.output_tokens.min == spec.output_tokens.max
                              ? spec.output_tokens.min
                              : static_cast<int>(rng.next_range(spec.output_tokens.min, spec.output_tokens.max));
        if (std::holds_alternative<ArrivalAllAtZero>(spec.arrival)) {
            r.arrival_s = 0.0;
        } else if (const auto* fi = std::get_if<ArrivalFixedInterval>(&spec.arrival)) {
            r.arrival_s = clock;
            clock += fi->interval_s;
        } else {
            const auto& pr = std::get<ArrivalPoissonRate>(spec.arrival);
            clock += -std::log(1.0 - rng.next_unit()) / pr.rate_per_s;
            r.arrival_s = clock;
        }
        out.push_back(r);
    }
    // Arrivals are non-decreasing by construction; ids already break ties.
    return out;
}

inline constexpr const char* kTraceHeader = "id,arrival_s,input_tokens,output_tokens";

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string serialize_trace(const std::vector<Request>& requests) {
    std::string out = kTraceHeader;
    out += '\n';
    for (const auto& r : requests) {
        out += std::to_string(r.id);
        out += ',';
        out += format_double(r.arrival_s);
        out += ',';
        out += std::to_string(r.input_tokens);
        out += ',';
        out += std::to_string(r.output_tokens);
        out += '\n';
    }
    return out;
}

// CSV trace ingestion. Output is sorted by arrival_s, ties broken by id.
inline std::vector<Request> parse_trace(const std::string& text) {
    std::vector<Request> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    bool saw_header = false;
    std::vector<bool> seen;
    auto fail = [&](const std::string& what) {
        throw ParseError("trace line " + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!saw_header) {
            if (line != kTraceHeader) fail("expected header '" + std::string(kTraceHeader) + "'");
            saw_header = true;
            continue;
        }
        Request r;
        std::istringstream ls(line);
        std::string field;
        try {
            if (!std::getline(ls, field, ',')) fail("missing id");
            r.id = std::stoi(field);
            if (!std::getline(ls, field, ',')) fail("missing arrival_s");
            r.arrival_s = std::stod(field);
            if (!std::getline(ls, field, ',')) fail("missing input_tokens");
            r.input_tokens = std::stoi(field);
            if (!std::getline(ls, field, ',')) fail("missing output_tokens");
            r.output_tokens = std::stoi(field);
        } catch (const std::invalid_argument&) {
            fail("non-numeric field '" + field + "'");
        } catch (const std::out_of_range&) {
            fail("field out of range '" + field + "'");
        }
        if (std::getline(ls, field, ',')) fail("too many fields");
        if (r.id < 0) fail("negative id");
        if (r.input_tokens < 1 || r.output_tokens < 1) fail("token counts must be >= 1");
        if (!(r.arrival_s >= 0.0) || !std::isfinite(r.arrival_s)) fail("bad arrival_s");
        if (r.id < static_cast<int>(seen.size()) && seen[static_cast<std::size_t>(r.id)])
            throw ParseError("trace: duplicate id " + std::to_string(r.id));
        if (r.id >= static_cast<int>(seen.size())) seen.resize(static_cast<std::size_t>(r.id) + 1, false);
        seen[static_cast<std::size_t>(r.id)] = true;
        out.push_back(r);
    }
    if (!saw_header && line_no > 0) throw ParseError("trace: missing header");
    std::stable_sort(out.begin(), out.end(), [](const Request& a, const Request& b) {
        if (a.arrival_s != b.arrival_s) return a.arrival_s < b.arrival_s;
        return a.id < b.id;
    });
    return out;
}

}  // namespace splitsim
