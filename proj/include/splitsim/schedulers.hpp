#pragma once

#include <deque>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/gpu_model.hpp"
#include "splitsim/request.hpp"

namespace splitsim {

enum class PolicyKind {
    Sequential,
    PipelinedSplitwiser,
    ContinuousBatching,
    MixedBatching,
    MultiInstance,
};

inline const char* to_string(PolicyKind p) {
    switch (p) {
        case PolicyKind::Sequential: return "sequential";
        case PolicyKind::PipelinedSplitwiser: return "pipelined_splitwiser";
        case PolicyKind::ContinuousBatching: return "continuous_batching";
        case PolicyKind::MixedBatching: return "mixed_batching";
        case PolicyKind::MultiInstance: return "multi_instance";
    }
    return "?";
}

struct SchedulerConfig {
    PolicyKind policy = PolicyKind::ContinuousBatching;
    int max_batch = 0;             // 0 = the whole workload
    int splitwiser_processes = 1;  // P
    int n_instances = 2;           // MultiInstance
    PolicyKind inner = PolicyKind::ContinuousBatching;
};

inline void validate(const SchedulerConfig& c) {
    if (c.max_batch < 0) throw ConfigError("scheduler.max_batch: must be >= 0 (0 = unlimited)");
    if (c.splitwiser_processes < 1) throw ConfigError("scheduler.P: must be >= 1");
    if (c.policy == PolicyKind::MultiInstance) {
        if (c.n_instances < 2) throw ConfigError("scheduler.n_instances: must be >= 2");
        if (c.inner == PolicyKind::MultiInstance || c.inner == PolicyKind::PipelinedSplitwiser)
            throw ConfigError("scheduler.inner: must be sequential, continuous_batching or mixed_batching");
    }
}

// Read-only window into the engine state, consulted by policies.
class EngineView {
public:
    virtual ~EngineView() = default;
    virtual double now() const = 0;
    virtual const Request& request(int id) const = 0;
    virtual RequestState state(int id) const = 0;
    virtual int generated(int id) const = 0;
    virtual const KvBlockPool& pool(int instance) const = 0;
    virtual long long reserved_blocks(int instance) const = 0;
    virtual long long footprint_blocks(int id) const = 0;  // worst case: ceil((in+out)/B)
    virtual int active_count(int instance, TaskKind kind) const = 0;
};

// A task the policy wants started now. The engine prices it, allocates KV
// for prompts and activates it.
struct TaskRequest {
    TaskKind kind = TaskKind::Prompt;
    std::vector<int> batch;
    int instance_id = 0;
    double extra_overhead_s = 0.0;
};

class Scheduler {
public:
    virtual ~Scheduler() = default;
    virtual int n_instances() const = 0;
    virtual int instance_of(int request_id) const = 0;
    virtual void on_arrival(int request_id) = 0;
    virtual void on_task_complete(const PhaseTask& task, const EngineView& view) = 0;
    virtual std::vector<TaskRequest> next_tasks(const EngineView& view) = 0;
};

// Round-robin split by arrival order; sizes differ by at most one.
inline std::vector<std::vector<int>> multi_instance_split(const std::vector<Request>& requests,
                                                          int n_instances) {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(n_instances));
    for (std::size_t i = 0; i < requests.size(); ++i)
        out[i % static_cast<std::size_t>(n_instances)].push_back(requests[i].id);
    return out;
}

// Contiguous shards (equal sizes +-1, remainder on the first shards).
inline std::vector<std::vector<int>> contiguous_split(const std::vector<Request>& requests, int parts) {
    std::vector<std::vector<int>> out(static_cast<std::size_t>(parts));
    const std::size_t n = requests.size();
    std::size_t pos = 0;
    for (int s = 0; s < parts; ++s) {
        std::size_t size = n / static_cast<std::size_t>(parts) +
                           (static_cast<std::size_t>(s) < n % static_cast<std::size_t>(parts) ? 1 : 0);
        for (std::size_t k = 0; k < size; ++k) out[static_cast<std::size_t>(s)].push_back(requests[pos++].id);
    }
    return out;
}

namespace detail {

// FIFO admission with worst-case block reservation. Stops at the first
// request that does not currently fit; a request whose footprint can never
// fit is a broken workload and fails loud.
inline std::vector<int> admit_fifo(const EngineView& view, int instance, std::deque<int>& waiting,
                                   int room_requests) {
    std::vector<int> batch;
    long long extra = 0;
    while (!waiting.empty() && (room_requests < 0 || static_cast<int>(batch.size()) < room_requests)) {
        const int rid = waiting.front();
        const long long need = view.footprint_blocks(rid);
        if (need > view.pool(instance).capacity())
            throw ContractViolation("request " + std::to_string(rid) +
                                    ": KV footprint exceeds instance capacity, can never be scheduled");
        if (view.reserved_blocks(instance) + extra + need > view.pool(instance).capacity()) break;
        batch.push_back(rid);
        extra += need;
        waiting.pop_front();
    }
    return batch;
}

inline void erase_finished(std::vector<int>& ids, const EngineView& view) {
    std::erase_if(ids, [&](int id) { return view.state(id) == RequestState::Finished; });
}

class LaneBase {
public:
    virtual ~LaneBase() = default;
    virtual void on_arrival(int rid) = 0;
    virtual void on_task_complete(const PhaseTask& task, const EngineView& view) = 0;
    virtual void collect(const EngineView& view, std::vector<TaskRequest>& out) = 0;
};

// At most one prompt task in flight across the lanes sharing a gate, granted
// in FIFO order. This is the splitwiser stagger: shard i+1's prompt starts
// once shard i's prompt is done, overlapping shard i's token generation.
struct PromptGate {
    std::deque<int> queue;
    bool busy = false;
};

// Request-level batching: prompt a whole batch, generate that batch to
// completion, then admit the next batch.
class SequentialLane final : public LaneBase {
public:
    SequentialLane(int instance, int max_batch, PromptGate* gate, double kv_handoff_s)
        : instance_(instance), max_batch_(max_batch), gate_(gate), kv_handoff_s_(kv_handoff_s) {}

    void on_arrival(int rid) override { waiting_.push_back(rid); }

    void on_task_complete(const PhaseTask& task, const EngineView&) override {
        if (task.kind == TaskKind::Prompt) {
            phase_ = Phase::Decoding;
            handoff_pending_ = true;
            gate_->busy = false;
        }
    }

    void collect(const EngineView& view, std::vector<TaskRequest>& out) override {
        if (view.active_count(instance_, TaskKind::Prompt) +
                view.active_count(instance_, TaskKind::TokenStep) > 0)
            return;
        if (phase_ == Phase::Decoding) {
            erase_finished(batch_, view);
            if (!batch_.empty()) {
                out.push_back({TaskKind::TokenStep, batch_, instance_,
                               handoff_pending_ ? kv_handoff_s_ : 0.0});
                handoff_pending_ = false;
                return;
            }
            phase_ = Phase::Idle;
        }
        if (phase_ == Phase::Idle && !waiting_.empty()) {
            auto batch = admit_fifo(view, instance_, waiting_, max_batch_ <= 0 ? -1 : max_batch_);
            if (!batch.empty()) {
                batch_ = std::move(batch);
                phase_ = Phase::Queued;
                gate_->queue.push_back(instance_);
            }
        }
        if (phase_ == Phase::Queued && !gate_->busy && !gate_->queue.empty() &&
            gate_->queue.front() == instance_) {
            gate_->queue.pop_front();
            gate_->busy = true;
            out.push_back({TaskKind::Prompt, batch_, instance_, 0.0});
            phase_ = Phase::Prompting;
        }
    }

private:
    enum class Phase { Idle, Queued, Prompting, Decoding };

    int instance_;
    int max_batch_;
    PromptGate* gate_;
    double kv_handoff_s_;
    std::deque<int> waiting_;
    std::vector<int> batch_;
    Phase phase_ = Phase::Idle;
    bool handoff_pending_ = false;
};

// Iteration-level batching. Binary decision per step: admit waiting prompts
// when they fit (waiting-first), otherwise run one token step for the whole
// running set. mixed=true lifts the binary restriction and lets one prompt
// and one token step co-execute.
class CbLane final : public LaneBase {
public:
    CbLane(int instance, int max_batch, bool mixed)
        : instance_(instance), max_batch_(max_batch), mixed_(mixed) {}

    void on_arrival(int rid) override { waiting_.push_back(rid); }

    void on_task_complete(const PhaseTask& task, const EngineView& view) override {
        if (task.kind == TaskKind::Prompt) {
            running_.insert(running_.end(), prompting_.begin(), prompting_.end());
            prompting_.clear();
        } else {
            erase_finished(running_, view);
        }
    }

    void collect(const EngineView& view, std::vector<TaskRequest>& out) override {
        const int act_p = view.active_count(instance_, TaskKind::Prompt);
        const int act_t = view.active_count(instance_, TaskKind::TokenStep);
        if (!mixed_ && act_p + act_t > 0) return;
        if (act_p == 0 && !waiting_.empty()) {
            int room = -1;
            if (max_batch_ > 0) {
                room = max_batch_ - static_cast<int>(prompting_.size() + running_.size());
                if (room < 0) room = 0;
            }
            if (room != 0) {
                auto batch = admit_fifo(view, instance_, waiting_, room);
                if (!batch.empty()) {
                    prompting_ = batch;
                    out.push_back({TaskKind::Prompt, std::move(batch), instance_, 0.0});
                    if (!mixed_) return;  // binary decision: prompt wins this step
                }
            }
        }
        if ((mixed_ ? act_t == 0 : true) && !running_.empty())
            out.push_back({TaskKind::TokenStep, running_, instance_, 0.0});
    }

private:
    int instance_;
    int max_batch_;
    bool mixed_;
    std::deque<int> waiting_;
    std::vector<int> prompting_;
    std::vector<int> running_;
};

}  // namespace detail

// Composes lanes according to SchedulerConfig. Request routing is fixed at
// construction: MultiInstance splits round-robin, splitwiser shards are
// contiguous; the single-lane policies route everything to instance 0.
class PolicyScheduler final : public Scheduler {
public:
    PolicyScheduler(const std::vector<Request>& requests, const SchedulerConfig& cfg,
                    double kv_handoff_s) {
        validate(cfg);
        std::vector<std::vector<int>> split;
        switch (cfg.policy) {
            case PolicyKind::Sequential:
                split = {ids_of(requests)};
                gates_.push_back(std::make_unique<detail::PromptGate>());
                lanes_.push_back(std::make_unique<detail::SequentialLane>(0, cfg.max_batch,
                                                                          gates_.back().get(), kv_handoff_s));
                break;
            case PolicyKind::PipelinedSplitwiser: {
                split = contiguous_split(requests, cfg.splitwiser_processes);
                gates_.push_back(std::make_unique<detail::PromptGate>());
                for (int i = 0; i < cfg.splitwiser_processes; ++i)
                    lanes_.push_back(std::make_unique<detail::SequentialLane>(i, cfg.max_batch,
                                                                              gates_.front().get(), kv_handoff_s));
                break;
            }
            case PolicyKind::ContinuousBatching:
            case PolicyKind::MixedBatching:
                split = {ids_of(requests)};
                lanes_.push_back(std::make_unique<detail::CbLane>(0, cfg.max_batch,
                                                                  cfg.policy == PolicyKind::MixedBatching));
                break;
            case PolicyKind::MultiInstance: {
                split = multi_instance_split(requests, cfg.n_instances);
                for (int i = 0; i < cfg.n_instances; ++i) {
                    switch (cfg.inner) {
                        case PolicyKind::Sequential:
                            gates_.push_back(std::make_unique<detail::PromptGate>());
                            lanes_.push_back(std::make_unique<detail::SequentialLane>(
                                i, cfg.max_batch, gates_.back().get(), kv_handoff_s));
                            break;
                        case PolicyKind::MixedBatching:
                            lanes_.push_back(std::make_unique<detail::CbLane>(i, cfg.max_batch, true));
                            break;
                        default:
                            lanes_.push_back(std::make_unique<detail::CbLane>(i, cfg.max_batch, false));
                            break;
                    }
                }
                break;
            }
        }
        for (std::size_t lane = 0; lane < split.size(); ++lane)
            for (int rid : split[lane]) route_[rid] = static_cast<int>(lane);
    }

    int n_instances() const override { return static_cast<int>(lanes_.size()); }

    int instance_of(int request_id) const override {
        auto it = route_.find(request_id);
        if (it == route_.end())
            throw ContractViolation("scheduler: unrouted request " + std::to_string(request_id));
        return it->second;
    }

    void on_arrival(int request_id) override { lanes_[static_cast<std::size_t>(instance_of(request_id))]->on_arrival(request_id); }

    void on_task_complete(const PhaseTask& task, const EngineView& view) override {
        lanes_[static_cast<std::size_t>(task.instance_id)]->on_task_complete(task, view);
    }

    std::vector<TaskRequest> next_tasks(const EngineView& view) override {
        std::vector<TaskRequest> out;
        for (auto& lane : lanes_) lane->collect(view, out);
        return out;
    }

private:
    static std::vector<int> ids_of(const std::vector<Request>& requests) {
        std::vector<int> ids;
        ids.reserve(requests.size());
        for (const auto& r : requests) ids.push_back(r.id);
        return ids;
    }

    std::vector<std::unique_ptr<detail::PromptGate>> gates_;
    std::vector<std::unique_ptr<detail::LaneBase>> lanes_;
    std::map<int, int> route_;
};

}  // namespace splitsim
