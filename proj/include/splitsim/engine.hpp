#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <string>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/event_log.hpp"
#include "splitsim/gpu_model.hpp"
#include "splitsim/request.hpp"
#include "splitsim/schedulers.hpp"

namespace splitsim {

struct SharingDiscipline {
    enum class Mode { Exclusive, MpsConcurrent, TimeSliced };
    Mode mode = Mode::Exclusive;
    double quantum_s = 0.002;      // TimeSliced only
    double switch_cost_s = 0.0005; // TimeSliced only
};

inline const char* to_string(SharingDiscipline::Mode m) {
    switch (m) {
        case SharingDiscipline::Mode::Exclusive: return "exclusive";
        case SharingDiscipline::Mode::MpsConcurrent: return "mps_concurrent";
        case SharingDiscipline::Mode::TimeSliced: return "time_sliced";
    }
    return "?";
}

inline void validate(const SharingDiscipline& d) {
    if (d.mode == SharingDiscipline::Mode::TimeSliced) {
        if (!(d.quantum_s > 0)) throw ConfigError("discipline.quantum_s: must be > 0");
        if (!(d.switch_cost_s >= 0)) throw ConfigError("discipline.switch_cost_s: must be >= 0");
    }
}

struct SimulationInputs {
    std::vector<Request> requests;  // sorted by (arrival_s, id)
    GpuSpec gpu;                    // kv_capacity_blocks = effective total K
    CostModel cost;
    int block_tokens = 16;
    SharingDiscipline discipline;
};

// Discrete-event core. Active tasks progress at rate 1/sigma of their alone
// rate, sigma = max(1, sum c_rate/C, sum m_rate/M) over runnable tasks, so
// complementary phases overlap for free and same-resource phases serialize.
// Under TimeSliced only the selected instance's tasks are runnable and every
// switch between distinct instances inserts a switch_cost_s dead interval.
class Engine final : public EngineView {
public:
    Engine(const SimulationInputs& in, Scheduler& sched) : in_(in), sched_(sched) {
        validate(in_.gpu);
        validate(in_.cost);
        validate(in_.discipline);
        const int n_inst = sched_.n_instances();
        if (n_inst < 1) throw ConfigError("scheduler: needs at least one instance");
        if (in_.discipline.mode == SharingDiscipline::Mode::Exclusive && n_inst > 1)
            throw ConfigError("discipline.mode: exclusive requires a single-instance scheduler");
        const long long base = in_.gpu.kv_capacity_blocks / n_inst;
        const long long rem = in_.gpu.kv_capacity_blocks % n_inst;
        for (int i = 0; i < n_inst; ++i) {
            const long long cap = base + (i < rem ? 1 : 0);
            if (cap < 1) throw ConfigError("gpu.kv_capacity_blocks: too small for instance count");
            pools_.emplace_back(in_.block_tokens, cap);
            log_.kv_capacity.push_back(cap);
        }
        reserved_.assign(static_cast<std::size_t>(n_inst), 0);
        active_prompt_count_.assign(static_cast<std::size_t>(n_inst), 0);
        active_step_count_.assign(static_cast<std::size_t>(n_inst), 0);
        last_kv_logged_.assign(static_cast<std::size_t>(n_inst), 0);
        last_batch_.assign(static_cast<std::size_t>(n_inst), {-1, {}});
        log_.compute_capacity = in_.gpu.compute_capacity;
        log_.mem_bandwidth = in_.gpu.mem_bandwidth;
        log_.block_tokens = in_.block_tokens;
        log_.discipline = to_string(in_.discipline.mode);
        double prev_arrival = 0.0;
        for (const auto& r : in_.requests) {
            if (r.input_tokens < 1 || r.output_tokens < 1)
                throw ConfigError("request " + std::to_string(r.id) + ": token counts must be >= 1");
            if (!(r.arrival_s >= 0.0) || !std::isfinite(r.arrival_s))
                throw ConfigError("request " + std::to_string(r.id) + ": bad arrival");
            if (r.arrival_s < prev_arrival)
                throw ContractViolation("engine: requests not sorted by arrival");
            prev_arrival = r.arrival_s;
            ReqEntry e;
            e.req = r;
            e.req.state = RequestState::Waiting;
            e.footprint = pools_[0].blocks_for(static_cast<long long>(r.input_tokens) + r.output_tokens);
            if (index_.count(r.id)) throw ConfigError("request " + std::to_string(r.id) + ": duplicate id");
            index_[r.id] = static_cast<int>(entries_.size());
            entries_.push_back(e);
        }
    }

    EventLog run() {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            push_fixed({entries_[i].req.arrival_s, next_seq(), FixedKind::Arrival, static_cast<int>(i)});
        std::uint64_t processed = 0;
        while (true) {
            const double sigma = current_sigma();
            // Earliest pending moment: fixed events vs. predicted completions.
            double t_next = std::numeric_limits<double>::infinity();
            bool have = false;
            if (!fixed_.empty()) {
                t_next = fixed_.top().time;
                have = true;
            }
            for (const auto& a : active_) {
                if (!runnable(a)) continue;
                const double tc = clock_ + a.remaining * a.task.duration_alone_s * sigma;
                if (tc < t_next) t_next = tc;
                have = true;
            }
            if (!have) break;
            if (t_next < clock_) t_next = clock_;
            // Advance progress; tasks whose predicted completion is t_next are
            // snapped to exactly zero remaining work so fp residue cannot
            // stall the loop.
            const double dt = t_next - clock_;
            for (auto& a : active_) {
                if (!runnable(a)) continue;
                const double tc = clock_ + a.remaining * a.task.duration_alone_s * sigma;
                if (tc <= t_next) {
                    a.remaining = 0.0;
                } else if (dt > 0.0 && a.task.duration_alone_s > 0.0) {
                    a.remaining -= dt / (a.task.duration_alone_s * sigma);
                    if (a.remaining < 0.0) a.remaining = 0.0;
                }
            }
            clock_ = t_next;
            // Drain every event at exactly t_next in global seq order, then
            // run one scheduling pass for the whole timestamp.
            while (true) {
                long long best_seq = -1;
                bool is_completion = false;
                std::size_t comp_idx = 0;
                if (!fixed_.empty() && fixed_.top().time <= t_next) best_seq = fixed_.top().seq;
                for (std::size_t i = 0; i < active_.size(); ++i) {
                    const auto& a = active_[i];
                    if (!runnable(a) || a.remaining > 0.0) continue;
                    if (best_seq < 0 || a.seq < best_seq) {
                        best_seq = a.seq;
                        is_completion = true;
                        comp_idx = i;
                    }
                }
                if (best_seq < 0) break;
                if (++processed > kLivelockEvents)
                    throw ContractViolation("engine: livelock guard tripped after 1e7 events");
                if (is_completion) {
                    complete_task(comp_idx);
                } else {
                    const FixedEvent ev = fixed_.top();
                    fixed_.pop();
                    handle_fixed(ev);
                }
            }
            scheduling_pass();
        }
        for (const auto& e : entries_)
            if (e.req.state != RequestState::Finished)
                throw ContractViolation("engine: quiescent with unfinished request " +
                                        std::to_string(e.req.id));
        append({clock_, LogKind::RunEnd});
        return std::move(log_);
    }

    // EngineView
    double now() const override { return clock_; }
    const Request& request(int id) const override { return entry(id).req; }
    RequestState state(int id) const override { return entry(id).req.state; }
    int generated(int id) const override { return entry(id).generated; }
    const KvBlockPool& pool(int instance) const override { return pools_.at(static_cast<std::size_t>(instance)); }
    long long reserved_blocks(int instance) const override { return reserved_.at(static_cast<std::size_t>(instance)); }
    long long footprint_blocks(int id) const override { return entry(id).footprint; }
    int active_count(int instance, TaskKind kind) const override {
        return kind == TaskKind::Prompt ? active_prompt_count_.at(static_cast<std::size_t>(instance))
                                        : active_step_count_.at(static_cast<std::size_t>(instance));
    }

private:
    static constexpr std::uint64_t kLivelockEvents = 10'000'000;

    struct ReqEntry {
        Request req;
        int generated = 0;
        long long footprint = 0;
    };

    enum class FixedKind { Arrival, QuantumExpiry, SwitchEnd };

    struct FixedEvent {
        double time = 0.0;
        long long seq = 0;
        FixedKind kind = FixedKind::Arrival;
        int payload = 0;  // Arrival: entry index; QuantumExpiry: generation; SwitchEnd: target
    };

    struct FixedOrder {
        bool operator()(const FixedEvent& a, const FixedEvent& b) const {
            if (a.time != b.time) return a.time > b.time;
            return a.seq > b.seq;
        }
    };

    struct ActiveTask {
        PhaseTask task;
        double remaining = 1.0;  // fraction of alone duration still owed
        long long seq = 0;
        int id = 0;
    };

    ReqEntry& entry(int id) {
        auto it = index_.find(id);
        if (it == index_.end())
            throw ContractViolation("engine: unknown request " + std::to_string(id));
        return entries_[static_cast<std::size_t>(it->second)];
    }
    const ReqEntry& entry(int id) const {
        auto it = index_.find(id);
        if (it == index_.end())
            throw ContractViolation("engine: unknown request " + std::to_string(id));
        return entries_[static_cast<std::size_t>(it->second)];
    }

    long long next_seq() { return seq_counter_++; }

    void push_fixed(const FixedEvent& e) { fixed_.push(e); }

    void append(LogRecord r) { log_.records.push_back(r); }

    bool runnable(const ActiveTask& a) const {
        if (in_.discipline.mode != SharingDiscipline::Mode::TimeSliced) return true;
        return selected_ == a.task.instance_id;
    }

    double current_sigma() const {
        double c_rate = 0.0, m_rate = 0.0;
        for (const auto& a : active_) {
            if (!runnable(a)) continue;
            if (a.task.duration_alone_s > 0.0) {
                c_rate += a.task.compute_demand / a.task.duration_alone_s;
                m_rate += a.task.mem_demand / a.task.duration_alone_s;
            }
        }
        double sigma = 1.0;
        if (c_rate / in_.gpu.compute_capacity > sigma) sigma = c_rate / in_.gpu.compute_capacity;
        if (m_rate / in_.gpu.mem_bandwidth > sigma) sigma = m_rate / in_.gpu.mem_bandwidth;
        return sigma;
    }

    void handle_fixed(const FixedEvent& ev) {
        switch (ev.kind) {
            case FixedKind::Arrival: {
                auto& e = entries_[static_cast<std::size_t>(ev.payload)];
                LogRecord r{clock_, LogKind::Arrival};
                r.request = e.req.id;
                r.instance = sched_.instance_of(e.req.id);
                r.input_tokens = e.req.input_tokens;
                r.output_tokens = e.req.output_tokens;
                append(r);
                sched_.on_arrival(e.req.id);
                break;
            }
            case FixedKind::QuantumExpiry:
                if (ev.payload == arm_generation_) rotate_pending_ = true;
                break;
            case FixedKind::SwitchEnd:
                switching_ = false;
                resident_ = ev.payload;
                selected_ = ev.payload;
                arm_quantum();
                log_slice(selected_);
                break;
        }
    }

    void complete_task(std::size_t idx) {
        ActiveTask done = active_[idx];
        active_.erase(active_.begin() + static_cast<std::ptrdiff_t>(idx));
        auto& count = done.task.kind == TaskKind::Prompt ? active_prompt_count_ : active_step_count_;
        count[static_cast<std::size_t>(done.task.instance_id)] -= 1;
        LogRecord r{clock_, LogKind::TaskComplete};
        r.task_id = done.id;
        append(r);
        if (done.task.kind == TaskKind::Prompt) {
            for (int rid : done.task.batch) {
                auto& e = entry(rid);
                if (e.req.state != RequestState::Prompting)
                    throw ContractViolation("engine: prompt completion for request not prompting");
                e.req.state = RequestState::Generating;
            }
        } else {
            const int inst = done.task.instance_id;
            for (int rid : done.task.batch) {
                auto& e = entry(rid);
                if (e.req.state != RequestState::Generating)
                    throw ContractViolation("engine: token step for request not generating");
                e.generated += 1;
                if (e.generated > e.req.output_tokens)
                    throw ContractViolation("engine: generated past output budget");
                if (e.generated == e.req.output_tokens) {
                    e.req.state = RequestState::Finished;
                    pools_[static_cast<std::size_t>(inst)].free(rid);
                    reserved_[static_cast<std::size_t>(inst)] -= e.footprint;
                    LogRecord f{clock_, LogKind::RequestFinish};
                    f.request = rid;
                    append(f);
                } else {
                    // Paged growth: one more block exactly when input+generated
                    // crosses a multiple of the block size.
                    const auto res = pools_[static_cast<std::size_t>(inst)].alloc(
                        rid, static_cast<long long>(e.req.input_tokens) + e.generated);
                    if (res != KvBlockPool::AllocResult::Ok)
                        throw ContractViolation("engine: KV growth denied despite reservation");
                }
            }
            log_kv(inst);
        }
        sched_.on_task_complete(done.task, *this);
    }

    void scheduling_pass() {
        auto tasks = sched_.next_tasks(*this);
        for (auto& tr : tasks) activate(tr);
        arbiter_check();
    }

    void activate(const TaskRequest& tr) {
        if (tr.instance_id < 0 || tr.instance_id >= static_cast<int>(pools_.size()))
            throw ContractViolation("scheduler: task for unknown instance");
        const std::size_t inst = static_cast<std::size_t>(tr.instance_id);
        PhaseTask task;
        if (tr.kind == TaskKind::Prompt) {
            std::vector<Request> batch;
            long long blocks = 0;
            for (int rid : tr.batch) {
                auto& e = entry(rid);
                if (e.req.state != RequestState::Waiting)
                    throw ContractViolation("scheduler: prompt for request not waiting");
                batch.push_back(e.req);
                blocks += e.footprint;
            }
            if (reserved_[inst] + blocks > pools_[inst].capacity())
                throw ContractViolation("scheduler: prompt batch exceeds KV reservation capacity");
            for (int rid : tr.batch) {
                auto& e = entry(rid);
                e.req.state = RequestState::Prompting;
                reserved_[inst] += e.footprint;
                if (pools_[inst].alloc(rid, e.req.input_tokens) != KvBlockPool::AllocResult::Ok)
                    throw ContractViolation("engine: prompt KV allocation denied despite reservation");
            }
            task = make_prompt_task(batch, in_.gpu, in_.cost, tr.instance_id);
        } else {
            for (int rid : tr.batch) {
                const auto& e = entry(rid);
                if (e.req.state != RequestState::Generating)
                    throw ContractViolation("scheduler: token step for request not generating");
            }
            task = make_token_step_task(tr.batch, pools_[inst], in_.gpu, in_.cost, tr.instance_id,
                                        tr.extra_overhead_s);
        }
        ActiveTask a;
        a.task = std::move(task);
        a.remaining = 1.0;
        a.seq = next_seq();
        a.id = task_counter_++;
        LogRecord r{clock_, LogKind::TaskStart};
        r.task_id = a.id;
        r.instance = tr.instance_id;
        r.task_kind = a.task.kind;
        r.batch_id = intern_batch(tr.instance_id, a.task.batch);
        r.compute = a.task.compute_demand;
        r.mem = a.task.mem_demand;
        r.alone_s = a.task.duration_alone_s;
        append(r);
        auto& count = a.task.kind == TaskKind::Prompt ? active_prompt_count_ : active_step_count_;
        count[inst] += 1;
        active_.push_back(std::move(a));
        if (tr.kind == TaskKind::Prompt) log_kv(tr.instance_id);  // after the start record
    }

    int intern_batch(int instance, const std::vector<int>& batch) {
        auto& cache = last_batch_[static_cast<std::size_t>(instance)];
        if (cache.first >= 0 && cache.second == batch) return cache.first;
        log_.batches.push_back(batch);
        cache = {static_cast<int>(log_.batches.size()) - 1, batch};
        return cache.first;
    }

    void log_kv(int instance) {
        const long long total = pools_[static_cast<std::size_t>(instance)].total_allocated();
        if (total == last_kv_logged_[static_cast<std::size_t>(instance)]) return;
        last_kv_logged_[static_cast<std::size_t>(instance)] = total;
        LogRecord r{clock_, LogKind::Kv};
        r.instance = instance;
        r.kv_blocks = total;
        append(r);
    }

    void log_slice(int instance) {
        if (instance == last_slice_logged_) return;
        last_slice_logged_ = instance;
        LogRecord r{clock_, LogKind::Slice};
        r.instance = instance;
        append(r);
    }

    void arm_quantum() {
        arm_generation_ += 1;
        push_fixed({clock_ + in_.discipline.quantum_s, next_seq(), FixedKind::QuantumExpiry,
                    arm_generation_});
    }

    bool instance_has_work(int inst) const {
        return active_prompt_count_[static_cast<std::size_t>(inst)] +
                   active_step_count_[static_cast<std::size_t>(inst)] > 0;
    }

    // Round-robin over instances with runnable tasks. Resuming the resident
    // instance is free; moving to a different one costs switch_cost_s of dead
    // time during which nothing progresses.
    void arbiter_check() {
        if (in_.discipline.mode != SharingDiscipline::Mode::TimeSliced) return;
        if (switching_) return;
        const int n = static_cast<int>(pools_.size());
        if (selected_ >= 0 && instance_has_work(selected_) && !rotate_pending_) return;
        const int from = selected_ < 0 ? 0 : selected_ + 1;
        int next = -1;
        for (int k = 0; k < n; ++k) {
            const int c = (from + k) % n;
            if (instance_has_work(c)) {
                next = c;
                break;
            }
        }
        rotate_pending_ = false;
        if (next < 0) {
            if (selected_ != -1) {
                selected_ = -1;
                log_slice(-1);
            }
            return;
        }
        if (next == selected_) {
            arm_quantum();
            return;
        }
        if (resident_ >= 0 && next != resident_ && in_.discipline.switch_cost_s > 0.0) {
            switching_ = true;
            selected_ = -1;
            log_slice(-1);
            push_fixed({clock_ + in_.discipline.switch_cost_s, next_seq(), FixedKind::SwitchEnd, next});
            return;
        }
        resident_ = next;
        selected_ = next;
        arm_quantum();
        log_slice(selected_);
    }

    SimulationInputs in_;
    Scheduler& sched_;

    std::vector<ReqEntry> entries_;
    std::map<int, int> index_;
    std::vector<KvBlockPool> pools_;
    std::vector<long long> reserved_;
    std::vector<int> active_prompt_count_;
    std::vector<int> active_step_count_;

    std::vector<ActiveTask> active_;
    std::priority_queue<FixedEvent, std::vector<FixedEvent>, FixedOrder> fixed_;
    double clock_ = 0.0;
    long long seq_counter_ = 0;
    int task_counter_ = 0;

    // TimeSliced arbiter
    int selected_ = -1;   // instance whose tasks progress, -1 = none
    int resident_ = -1;   // context owner, for switch accounting
    bool switching_ = false;
    bool rotate_pending_ = false;
    int arm_generation_ = 0;

    EventLog log_;
    std::vector<long long> last_kv_logged_;
    int last_slice_logged_ = -2;
    std::vector<std::pair<int, std::vector<int>>> last_batch_;
};

inline EventLog run_simulation(const SimulationInputs& in, Scheduler& sched) {
    Engine engine(in, sched);
    return engine.run();
}

}  // namespace splitsim
