#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/event_log.hpp"

namespace splitsim {

struct RequestRecord {
    int id = -1;
    int instance = 0;
    double arrival_s = 0.0;
    int input_tokens = 0;
    int output_tokens = 0;
    double prompt_start_s = std::numeric_limits<double>::quiet_NaN();
    double first_token_s = std::numeric_limits<double>::quiet_NaN();
    double finish_s = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> token_times_s;
    double ttft_s = std::numeric_limits<double>::quiet_NaN();
    double e2e_s = std::numeric_limits<double>::quiet_NaN();
    double tbt_mean_s = std::numeric_limits<double>::quiet_NaN();  // NaN when output_tokens < 2
};

struct SeriesPoint {
    double time_s = 0.0;
    double value = 0.0;
};

struct UtilPoint {
    double time_s = 0.0;
    double compute_pct = 0.0;
    double mem_pct = 0.0;
};

struct Interval {
    double begin_s = 0.0;
    double end_s = 0.0;
};

struct PhaseAggregates {
    bool present = false;
    double elapsed_s = 0.0;       // total measure of the phase windows
    double mean_kv_pct = 0.0;     // time-weighted, global pool
    double mean_compute_pct = 0.0;
    double mean_mem_pct = 0.0;
};

struct MetricsReport {
    int n_requests = 0;
    long long total_output_tokens = 0;
    double makespan_s = 0.0;
    double mean_e2e_s = 0.0;
    double median_e2e_s = 0.0;
    double p99_e2e_s = 0.0;
    double mean_ttft_s = 0.0;
    double mean_tbt_s = std::numeric_limits<double>::quiet_NaN();
    double tokens_per_s = 0.0;
    double requests_per_s = 0.0;
    double steady_tokens_per_s = 0.0;
    std::vector<RequestRecord> requests;                 // ordered by id
    std::vector<std::vector<SeriesPoint>> kv_pct;        // per instance, piecewise-constant
    std::vector<std::vector<UtilPoint>> instance_util;   // per instance
    std::vector<UtilPoint> util;                         // global, piecewise-constant
    std::vector<Interval> prompt_windows;
    std::vector<Interval> token_windows;
    PhaseAggregates prompt_phase;
    PhaseAggregates token_phase;
    std::vector<std::vector<double>> batch_elapsed_s;    // per instance, per admitted batch
    double mean_batch_elapsed_s = 0.0;
};

// Nearest-rank percentile on a sorted ascending vector; q in (0, 1].
inline double nearest_rank(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    std::size_t idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
    if (idx < 1) idx = 1;
    if (idx > sorted.size()) idx = sorted.size();
    return sorted[idx - 1];
}

namespace detail {

struct TaskInfo {
    TaskKind kind = TaskKind::Prompt;
    int instance = 0;
    int batch_id = -1;
    double compute = 0.0;
    double mem = 0.0;
    double alone_s = 0.0;
    double start_s = 0.0;
    double end_s = std::numeric_limits<double>::quiet_NaN();
};

inline void merge_push(std::vector<UtilPoint>& out, double t, double c, double m) {
    if (!out.empty() && out.back().compute_pct == c && out.back().mem_pct == m) return;
    if (!out.empty() && out.back().time_s == t) {
        out.back().compute_pct = c;
        out.back().mem_pct = m;
        return;
    }
    out.push_back({t, c, m});
}

// Total measure of [a,b) clipped against a set of disjoint ordered intervals.
inline double clip_measure(const std::vector<Interval>& windows, double a, double b) {
    double total = 0.0;
    for (const auto& w : windows) {
        const double lo = std::max(a, w.begin_s);
        const double hi = std::min(b, w.end_s);
        if (hi > lo) total += hi - lo;
    }
    return total;
}

}  // namespace detail

// Piecewise-constant global utilization implied by the log: at each instant,
// sigma-scaled share of each capacity consumed by runnable tasks.
inline std::vector<UtilPoint> utilization_trace(const EventLog& log) {
    std::vector<UtilPoint> out;
    const bool sliced = log.discipline == "time_sliced";
    std::map<int, detail::TaskInfo> active;
    int selected = -1;
    double t_prev = 0.0;
    bool open = false;
    auto emit = [&](double upto) {
        if (open && upto > t_prev) {
            double c_rate = 0.0, m_rate = 0.0;
            for (const auto& [id, t] : active) {
                if (sliced && t.instance != selected) continue;
                if (t.alone_s > 0.0) {
                    c_rate += t.compute / t.alone_s;
                    m_rate += t.mem / t.alone_s;
                }
            }
            double sigma = 1.0;
            if (c_rate / log.compute_capacity > sigma) sigma = c_rate / log.compute_capacity;
            if (m_rate / log.mem_bandwidth > sigma) sigma = m_rate / log.mem_bandwidth;
            detail::merge_push(out, t_prev, 100.0 * c_rate / sigma / log.compute_capacity,
                               100.0 * m_rate / sigma / log.mem_bandwidth);
        }
        t_prev = upto;
        open = true;
    };
    for (const auto& r : log.records) {
        switch (r.kind) {
            case LogKind::TaskStart:
                emit(r.time_s);
                active[r.task_id] = {r.task_kind, r.instance, r.batch_id, r.compute, r.mem, r.alone_s, r.time_s, 0.0};
                break;
            case LogKind::TaskComplete:
                emit(r.time_s);
                active.erase(r.task_id);
                break;
            case LogKind::Slice:
                emit(r.time_s);
                selected = r.instance;
                break;
            case LogKind::RunEnd:
                emit(r.time_s);
                detail::merge_push(out, r.time_s, 0.0, 0.0);
                break;
            default:
                break;
        }
    }
    return out;
}

// Rebuilds the full report from the record stream. Used both for live runs
// and for `replay`, so a written log reproduces its report exactly.
inline MetricsReport build_report(const EventLog& log) {
    MetricsReport rep;
    const int n_inst = std::max<std::size_t>(log.kv_capacity.size(), 1);
    rep.kv_pct.resize(static_cast<std::size_t>(n_inst));
    rep.instance_util.resize(static_cast<std::size_t>(n_inst));
    rep.batch_elapsed_s.resize(static_cast<std::size_t>(n_inst));

    std::map<int, RequestRecord> reqs;
    std::map<int, detail::TaskInfo> tasks;
    double prev_t = -std::numeric_limits<double>::infinity();
    double end_t = 0.0;
    const bool sliced = log.discipline == "time_sliced";

    // Per-instance utilization walk state.
    std::map<int, detail::TaskInfo> active;
    int selected = -1;
    double t_prev = 0.0;
    bool open = false;
    auto emit_instance_util = [&](double upto) {
        if (open && upto > t_prev) {
            double sum_c = 0.0, sum_m = 0.0;
            std::vector<double> c_rate(static_cast<std::size_t>(n_inst), 0.0);
            std::vector<double> m_rate(static_cast<std::size_t>(n_inst), 0.0);
            for (const auto& [id, t] : active) {
                if (sliced && t.instance != selected) continue;
                if (t.alone_s > 0.0) {
                    c_rate[static_cast<std::size_t>(t.instance)] += t.compute / t.alone_s;
                    m_rate[static_cast<std::size_t>(t.instance)] += t.mem / t.alone_s;
                    sum_c += t.compute / t.alone_s;
                    sum_m += t.mem / t.alone_s;
                }
            }
            double sigma = 1.0;
            if (sum_c / log.compute_capacity > sigma) sigma = sum_c / log.compute_capacity;
            if (sum_m / log.mem_bandwidth > sigma) sigma = sum_m / log.mem_bandwidth;
            for (int i = 0; i < n_inst; ++i)
                detail::merge_push(rep.instance_util[static_cast<std::size_t>(i)], t_prev,
                                   100.0 * c_rate[static_cast<std::size_t>(i)] / sigma / log.compute_capacity,
                                   100.0 * m_rate[static_cast<std::size_t>(i)] / sigma / log.mem_bandwidth);
        }
        t_prev = upto;
        open = true;
    };

    // Global KV pct (all pools pooled) for phase aggregates.
    std::vector<long long> kv_now(static_cast<std::size_t>(n_inst), 0);
    long long kv_cap_total = 0;
    for (long long c : log.kv_capacity) kv_cap_total += c;
    if (kv_cap_total <= 0) kv_cap_total = 1;
    std::vector<SeriesPoint> kv_global{{0.0, 0.0}};

    for (const auto& r : log.records) {
        if (r.time_s < prev_t)
            throw ContractViolation("metrics: event log times are not non-decreasing");
        prev_t = r.time_s;
        end_t = std::max(end_t, r.time_s);
        switch (r.kind) {
            case LogKind::Arrival: {
                RequestRecord rr;
                rr.id = r.request;
                rr.instance = r.instance;
                rr.arrival_s = r.time_s;
                rr.input_tokens = r.input_tokens;
                rr.output_tokens = r.output_tokens;
                if (!reqs.emplace(r.request, rr).second)
                    throw ContractViolation("metrics: duplicate arrival for request " + std::to_string(r.request));
                break;
            }
            case LogKind::TaskStart: {
                emit_instance_util(r.time_s);
                detail::TaskInfo t{r.task_kind, r.instance, r.batch_id, r.compute, r.mem, r.alone_s, r.time_s, std::numeric_limits<double>::quiet_NaN()};
                tasks[r.task_id] = t;
                active[r.task_id] = t;
                if (r.task_kind == TaskKind::Prompt) {
                    for (int rid : log.batches.at(static_cast<std::size_t>(r.batch_id))) {
                        auto it = reqs.find(rid);
                        if (it == reqs.end())
                            throw ContractViolation("metrics: prompt for unknown request " + std::to_string(rid));
                        if (std::isnan(it->second.prompt_start_s)) it->second.prompt_start_s = r.time_s;
                    }
                }
                break;
            }
            case LogKind::TaskComplete: {
                emit_instance_util(r.time_s);
                auto it = tasks.find(r.task_id);
                if (it == tasks.end())
                    throw ContractViolation("metrics: completion for unknown task " + std::to_string(r.task_id));
                it->second.end_s = r.time_s;
                active.erase(r.task_id);
                if (it->second.kind == TaskKind::TokenStep) {
                    for (int rid : log.batches.at(static_cast<std::size_t>(it->second.batch_id))) {
                        auto& rr = reqs.at(rid);
                        if (!rr.token_times_s.empty() && r.time_s < rr.token_times_s.back())
                            throw ContractViolation("metrics: token completions out of order");
                        rr.token_times_s.push_back(r.time_s);
                        if (std::isnan(rr.first_token_s)) rr.first_token_s = r.time_s;
                    }
                }
                break;
            }
            case LogKind::RequestFinish:
                reqs.at(r.request).finish_s = r.time_s;
                break;
            case LogKind::Kv: {
                kv_now.at(static_cast<std::size_t>(r.instance)) = r.kv_blocks;
                const double pct = 100.0 * static_cast<double>(r.kv_blocks) /
                                   static_cast<double>(log.kv_capacity.at(static_cast<std::size_t>(r.instance)));
                auto& series = rep.kv_pct[static_cast<std::size_t>(r.instance)];
                if (!series.empty() && series.back().time_s == r.time_s) series.back().value = pct;
                else series.push_back({r.time_s, pct});
                long long total = 0;
                for (long long b : kv_now) total += b;
                const double gpct = 100.0 * static_cast<double>(total) / static_cast<double>(kv_cap_total);
                if (!kv_global.empty() && kv_global.back().time_s == r.time_s) kv_global.back().value = gpct;
                else kv_global.push_back({r.time_s, gpct});
                break;
            }
            case LogKind::Slice:
                emit_instance_util(r.time_s);
                selected = r.instance;
                break;
            case LogKind::RunEnd:
                emit_instance_util(r.time_s);
                break;
            case LogKind::BatchDef:
                break;
        }
    }

    rep.util = utilization_trace(log);

    // Per-request derived metrics.
    double min_arrival = std::numeric_limits<double>::infinity();
    double max_finish = -std::numeric_limits<double>::infinity();
    std::vector<double> e2e_sorted;
    std::vector<double> finish_sorted;
    double sum_e2e = 0.0, sum_ttft = 0.0, sum_tbt = 0.0;
    int tbt_n = 0;
    for (auto& [id, rr] : reqs) {
        if (static_cast<int>(rr.token_times_s.size()) != rr.output_tokens)
            throw ContractViolation("metrics: request " + std::to_string(id) + " has " +
                                    std::to_string(rr.token_times_s.size()) + " tokens, expected " +
                                    std::to_string(rr.output_tokens));
        if (std::isnan(rr.finish_s)) rr.finish_s = rr.token_times_s.back();
        rr.ttft_s = rr.first_token_s - rr.arrival_s;
        rr.e2e_s = rr.finish_s - rr.arrival_s;
        if (rr.output_tokens >= 2) {
            rr.tbt_mean_s = (rr.finish_s - rr.first_token_s) / static_cast<double>(rr.output_tokens - 1);
            sum_tbt += rr.tbt_mean_s;
            tbt_n += 1;
        }
        min_arrival = std::min(min_arrival, rr.arrival_s);
        max_finish = std::max(max_finish, rr.finish_s);
        rep.total_output_tokens += rr.output_tokens;
        sum_e2e += rr.e2e_s;
        sum_ttft += rr.ttft_s;
        e2e_sorted.push_back(rr.e2e_s);
        finish_sorted.push_back(rr.finish_s);
        rep.requests.push_back(rr);
    }
    rep.n_requests = static_cast<int>(rep.requests.size());
    std::sort(e2e_sorted.begin(), e2e_sorted.end());
    std::sort(finish_sorted.begin(), finish_sorted.end());
    if (rep.n_requests > 0) {
        rep.makespan_s = max_finish - min_arrival;
        rep.mean_e2e_s = sum_e2e / rep.n_requests;
        rep.median_e2e_s = nearest_rank(e2e_sorted, 0.5);
        rep.p99_e2e_s = nearest_rank(e2e_sorted, 0.99);
        rep.mean_ttft_s = sum_ttft / rep.n_requests;
        if (tbt_n > 0) rep.mean_tbt_s = sum_tbt / tbt_n;
        if (rep.makespan_s > 0.0) {
            rep.tokens_per_s = static_cast<double>(rep.total_output_tokens) / rep.makespan_s;
            rep.requests_per_s = static_cast<double>(rep.n_requests) / rep.makespan_s;
        }
        // Steady state: the window after the first 10% of requests finished.
        const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(0.1 * rep.n_requests));
        const double t0 = finish_sorted[k - 1];
        long long tokens_after = 0;
        for (const auto& rr : rep.requests)
            for (double tt : rr.token_times_s)
                if (tt > t0) tokens_after += 1;
        const double span = max_finish - t0;
        rep.steady_tokens_per_s = span > 0.0 ? static_cast<double>(tokens_after) / span : 0.0;
    }

    // Phase windows: union of intervals where a task of the kind is active.
    auto windows_for = [&](TaskKind kind) {
        std::vector<Interval> ivals;
        for (const auto& [id, t] : tasks)
            if (t.kind == kind) ivals.push_back({t.start_s, std::isnan(t.end_s) ? end_t : t.end_s});
        std::sort(ivals.begin(), ivals.end(), [](const Interval& a, const Interval& b) {
            if (a.begin_s != b.begin_s) return a.begin_s < b.begin_s;
            return a.end_s < b.end_s;
        });
        std::vector<Interval> merged;
        for (const auto& iv : ivals) {
            if (!merged.empty() && iv.begin_s <= merged.back().end_s)
                merged.back().end_s = std::max(merged.back().end_s, iv.end_s);
            else
                merged.push_back(iv);
        }
        return merged;
    };
    rep.prompt_windows = windows_for(TaskKind::Prompt);
    rep.token_windows = windows_for(TaskKind::TokenStep);

    auto aggregate_phase = [&](const std::vector<Interval>& windows) {
        PhaseAggregates agg;
        for (const auto& w : windows) agg.elapsed_s += w.end_s - w.begin_s;
        agg.present = !windows.empty();
        if (!agg.present || agg.elapsed_s <= 0.0) return agg;
        double kv_int = 0.0;
        for (std::size_t i = 0; i < kv_global.size(); ++i) {
            const double a = kv_global[i].time_s;
            const double b = i + 1 < kv_global.size() ? kv_global[i + 1].time_s : end_t;
            kv_int += kv_global[i].value * detail::clip_measure(windows, a, b);
        }
        double c_int = 0.0, m_int = 0.0;
        for (std::size_t i = 0; i < rep.util.size(); ++i) {
            const double a = rep.util[i].time_s;
            const double b = i + 1 < rep.util.size() ? rep.util[i + 1].time_s : end_t;
            const double measure = detail::clip_measure(windows, a, b);
            c_int += rep.util[i].compute_pct * measure;
            m_int += rep.util[i].mem_pct * measure;
        }
        agg.mean_kv_pct = kv_int / agg.elapsed_s;
        agg.mean_compute_pct = c_int / agg.elapsed_s;
        agg.mean_mem_pct = m_int / agg.elapsed_s;
        return agg;
    };
    rep.prompt_phase = aggregate_phase(rep.prompt_windows);
    rep.token_phase = aggregate_phase(rep.token_windows);

    // Batch elapsed: one admitted batch per prompt task, from prompt start to
    // the last finish of its members.
    double batch_sum = 0.0;
    int batch_n = 0;
    for (const auto& [id, t] : tasks) {
        if (t.kind != TaskKind::Prompt) continue;
        double last_finish = t.start_s;
        for (int rid : log.batches.at(static_cast<std::size_t>(t.batch_id)))
            last_finish = std::max(last_finish, reqs.at(rid).finish_s);
        const double elapsed = last_finish - t.start_s;
        rep.batch_elapsed_s.at(static_cast<std::size_t>(t.instance)).push_back(elapsed);
        batch_sum += elapsed;
        batch_n += 1;
    }
    if (batch_n > 0) rep.mean_batch_elapsed_s = batch_sum / batch_n;

    // Ensure every instance has a kv series anchored at zero.
    for (auto& series : rep.kv_pct)
        if (series.empty() || series.front().time_s > 0.0)
            series.insert(series.begin(), {0.0, 0.0});
    return rep;
}

// Aggregates restricted to the windows where the given phase ran.
inline PhaseAggregates phase_windowed(const MetricsReport& rep, TaskKind kind) {
    return kind == TaskKind::Prompt ? rep.prompt_phase : rep.token_phase;
}

}  // namespace splitsim
