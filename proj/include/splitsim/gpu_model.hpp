#pragma once

#include <map>
#include <string>
#include <vector>

#include "splitsim/errors.hpp"
#include "splitsim/request.hpp"

namespace splitsim {

// GPU capacities. kv_capacity_blocks is the effective KV pool after weight
// accounting (see derive_kv_capacity in config.hpp); weight duplication
// shrinks it rather than failing.
struct GpuSpec {
    double compute_capacity = 1.0e6;   // compute-units / s
    double mem_bandwidth = 1.0e5;      // memory-units / s
    long long kv_capacity_blocks = 22000;
    double weight_mem_units = 16.0;    // per model instance
    bool shared_weights = true;
};

// Per-token demand coefficients of the two-resource roofline.
// Prompt: demand scales with total input tokens (all computed in parallel).
// Token step: compute scales with batch size, memory with weights + resident
// KV blocks, so prompts come out compute-bound and steps memory-bound.
struct CostModel {
    double prompt_compute_per_token = 1.0;    // a_p
    double prompt_mem_per_token = 0.01;       // b_p
    double token_compute_per_req = 1.0;       // a_t, per request per step
    double token_mem_weight_fraction = 1.0;   // w_t, fraction of weights read per step
    double token_mem_per_kv_block = 0.01;     // b_t, per resident block per step
    double prompt_overhead_s = 0.002;         // kernel-launch floor, prompt
    double step_overhead_s = 0.001;           // kernel-launch floor, token step
    double kv_handoff_s = 0.0;                // prompt->token process handoff (splitwiser)
};

inline void validate(const GpuSpec& g) {
    if (!(g.compute_capacity > 0)) throw ConfigError("gpu.compute_capacity: must be > 0");
    if (!(g.mem_bandwidth > 0)) throw ConfigError("gpu.mem_bandwidth: must be > 0");
    if (g.kv_capacity_blocks < 1) throw ConfigError("gpu.kv_capacity_blocks: must be >= 1");
    if (g.weight_mem_units < 0) throw ConfigError("gpu.weight_mem_units: must be >= 0");
}

inline void validate(const CostModel& c) {
    auto nonneg = [](double v, const char* f) {
        if (!(v >= 0)) throw ConfigError(std::string("cost.") + f + ": must be >= 0");
    };
    nonneg(c.prompt_compute_per_token, "prompt_compute_per_token");
    nonneg(c.prompt_mem_per_token, "prompt_mem_per_token");
    nonneg(c.token_compute_per_req, "token_compute_per_req");
    nonneg(c.token_mem_per_kv_block, "token_mem_per_kv_block");
    nonneg(c.prompt_overhead_s, "prompt_overhead_s");
    nonneg(c.step_overhead_s, "step_overhead_s");
    nonneg(c.kv_handoff_s, "kv_handoff_s");
    if (c.token_mem_weight_fraction < 0 || c.token_mem_weight_fraction > 1)
        throw ConfigError("cost.token_mem_weight_fraction: must be in [0,1]");
}

enum class TaskKind { Prompt, TokenStep };

inline const char* to_string(TaskKind k) {
    return k == TaskKind::Prompt ? "prompt" : "token_step";
}

// Schedulable unit: one prompt batch or one token-generation step for a
// batch. duration_alone_s = max(compute/C, mem/M) + per-kind overhead.
struct PhaseTask {
    TaskKind kind = TaskKind::Prompt;
    std::vector<int> batch;       // request ids, non-empty, duplicate-free
    double compute_demand = 0.0;  // compute-units
    double mem_demand = 0.0;      // memory-units
    double duration_alone_s = 0.0;
    int instance_id = 0;
};

// Block-granular KV-cache ledger for one instance. The pool only counts
// blocks; admission policy (worst-case reservation) lives in the scheduler.
class KvBlockPool {
public:
    enum class AllocResult { Ok, AdmissionDenied };

    KvBlockPool() = default;
    KvBlockPool(int block_tokens, long long capacity_blocks)
        : block_tokens_(block_tokens), capacity_(capacity_blocks) {
        if (block_tokens_ < 1) throw ConfigError("gpu.block_tokens: must be >= 1");
    }

    int block_tokens() const { return block_tokens_; }
    long long capacity() const { return capacity_; }
    long long total_allocated() const { return total_; }

    long long blocks_for(long long tokens) const {
        return (tokens + block_tokens_ - 1) / block_tokens_;
    }

    bool has(int request_id) const { return allocated_.count(request_id) > 0; }

    long long allocated(int request_id) const {
        auto it = allocated_.find(request_id);
        if (it == allocated_.end())
            throw ContractViolation("kv pool: request " + std::to_string(request_id) + " has no allocation");
        return it->second;
    }

    // (Re)size request_id to hold tokens_resident tokens. Fails atomically
    // when the pool would overflow; the caller defers the request instead.
    AllocResult alloc(int request_id, long long tokens_resident) {
        const long long want = blocks_for(tokens_resident);
        auto it = allocated_.find(request_id);
        const long long have = it == allocated_.end() ? 0 : it->second;
        if (total_ - have + want > capacity_) return AllocResult::AdmissionDenied;
        total_ += want - have;
        allocated_[request_id] = want;
        return AllocResult::Ok;
    }

    void free(int request_id) {
        auto it = allocated_.find(request_id);
        if (it == allocated_.end())
            throw ContractViolation("kv pool: free of unallocated request " + std::to_string(request_id));
        total_ -= it->second;
        allocated_.erase(it);
    }

    double usage_pct() const {
        return 100.0 * static_cast<double>(total_) / static_cast<double>(capacity_);
    }

private:
    int block_tokens_ = 16;
    long long capacity_ = 1;
    long long total_ = 0;
    std::map<int, long long> allocated_;  // ordered: deterministic iteration
};

inline double roofline_duration(double compute_demand, double mem_demand,
                                const GpuSpec& spec, double overhead_s) {
    const double ct = compute_demand / spec.compute_capacity;
    const double mt = mem_demand / spec.mem_bandwidth;
    return (ct > mt ? ct : mt) + overhead_s;
}

inline void check_batch(const std::vector<int>& batch) {
    if (batch.empty()) throw ContractViolation("phase task: empty batch");
    std::vector<int> sorted = batch;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw ContractViolation("phase task: duplicate request in batch");
}

// Prompt batch: all input tokens of the batch are processed in parallel, so
// both demands scale with the summed input tokens.
inline PhaseTask make_prompt_task(const std::vector<Request>& batch, const GpuSpec& spec,
                                  const CostModel& cm, int instance_id) {
    PhaseTask t;
    t.kind = TaskKind::Prompt;
    t.instance_id = instance_id;
    long long total_input = 0;
    for (const auto& r : batch) {
        t.batch.push_back(r.id);
        total_input += r.input_tokens;
    }
    check_batch(t.batch);
    t.compute_demand = cm.prompt_compute_per_token * static_cast<double>(total_input);
    t.mem_demand = cm.prompt_mem_per_token * static_cast<double>(total_input);
    t.duration_alone_s = roofline_duration(t.compute_demand, t.mem_demand, spec, cm.prompt_overhead_s);
    return t;
}

// One token-generation step for a running batch: reads the weights plus every
// resident KV block of the batch.
inline PhaseTask make_token_step_task(const std::vector<int>& batch, const KvBlockPool& pool,
                                      const GpuSpec& spec, const CostModel& cm, int instance_id,
                                      double extra_overhead_s = 0.0) {
    PhaseTask t;
    t.kind = TaskKind::TokenStep;
    t.instance_id = instance_id;
    t.batch = batch;
    check_batch(t.batch);
    long long total_blocks = 0;
    for (int id : t.batch) total_blocks += pool.allocated(id);  // throws if unallocated
    t.compute_demand = cm.token_compute_per_req * static_cast<double>(t.batch.size());
    t.mem_demand = cm.token_mem_weight_fraction * spec.weight_mem_units +
                   cm.token_mem_per_kv_block * static_cast<double>(total_blocks);
    t.duration_alone_s =
        roofline_duration(t.compute_demand, t.mem_demand, spec, cm.step_overhead_s + extra_overhead_s);
    return t;
}

}  // namespace splitsim
