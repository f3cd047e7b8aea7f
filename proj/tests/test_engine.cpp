#include <gtest/gtest.h>

#include <cmath>

#include "splitsim/engine.hpp"
#include "splitsim/metrics.hpp"
#include "test_util.hpp"

using namespace splitsim;
using testutil::ScriptedScheduler;
using testutil::task_spans;

namespace {

Request req(int id, double arrival, int input, int output) {
    Request r;
    r.id = id;
    r.arrival_s = arrival;
    r.input_tokens = input;
    r.output_tokens = output;
    return r;
}

// Coefficients that make prompts instant and token steps pure-compute tasks
// saturating C for exactly 1 s each.
SimulationInputs pure_compute_steps() {
    SimulationInputs in;
    in.gpu.compute_capacity = 1.0e6;
    in.gpu.mem_bandwidth = 1.0e5;
    in.gpu.kv_capacity_blocks = 1000;
    in.gpu.weight_mem_units = 0.0;
    in.cost = CostModel{};
    in.cost.prompt_compute_per_token = 0.0;
    in.cost.prompt_mem_per_token = 0.0;
    in.cost.prompt_overhead_s = 0.0;
    in.cost.token_compute_per_req = 1.0e6;  // one step alone = 1 s, c_rate = C
    in.cost.token_mem_weight_fraction = 0.0;
    in.cost.token_mem_per_kv_block = 0.0;
    in.cost.step_overhead_s = 0.0;
    return in;
}

}  // namespace

// Engine run example: prompt 1 s alone + 20 steps of 0.1 s alone, Exclusive.
TEST(Engine, SingleRequestSequentialTimeline) {
    SimulationInputs in;
    in.gpu.compute_capacity = 1.0e6;
    in.gpu.mem_bandwidth = 1.0e5;
    in.gpu.kv_capacity_blocks = 100;
    in.gpu.weight_mem_units = 0.0;
    in.cost = CostModel{};
    in.cost.prompt_compute_per_token = 1.0e6;  // input=1 -> prompt alone 1 s
    in.cost.prompt_mem_per_token = 0.0;
    in.cost.prompt_overhead_s = 0.0;
    in.cost.token_compute_per_req = 1.0e5;  // step alone 0.1 s
    in.cost.token_mem_weight_fraction = 0.0;
    in.cost.token_mem_per_kv_block = 0.0;
    in.cost.step_overhead_s = 0.0;
    in.discipline.mode = SharingDiscipline::Mode::Exclusive;
    in.requests = {req(0, 0.0, 1, 20)};
    ScriptedScheduler sched(1, {{0, {0, -1}}});
    auto log = run_simulation(in, sched);
    auto rep = build_report(log);
    EXPECT_NEAR(rep.makespan_s, 3.0, 1e-9 * 3.0);
    EXPECT_NEAR(rep.requests[0].ttft_s, 1.1, 1e-9 * 1.1);  // prompt end + first step
    EXPECT_NEAR(rep.requests[0].e2e_s, 3.0, 1e-9 * 3.0);
}

// Two identical compute-bound tasks started together: sigma = 2, both finish
// at 2.0 s.
TEST(Engine, PureComputePairSerializes) {
    auto in = pure_compute_steps();
    in.discipline.mode = SharingDiscipline::Mode::MpsConcurrent;
    in.requests = {req(0, 0.0, 1, 1), req(1, 0.0, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    for (const auto& s : task_spans(log)) {
        if (s.kind != TaskKind::TokenStep) continue;
        EXPECT_NEAR(s.start, 0.0, 1e-12);
        EXPECT_NEAR(s.end, 2.0, 1e-9 * 2.0);
    }
}

// Two identical memory-bound tasks started together: same law on M.
TEST(Engine, PureMemoryPairSerializes) {
    auto in = pure_compute_steps();
    in.cost.token_compute_per_req = 0.0;
    in.cost.token_mem_weight_fraction = 1.0;
    in.gpu.weight_mem_units = 1.0e5;  // mem = M per step -> alone 1 s, m_rate = M
    in.discipline.mode = SharingDiscipline::Mode::MpsConcurrent;
    in.requests = {req(0, 0.0, 1, 1), req(1, 0.0, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    for (const auto& s : task_spans(log)) {
        if (s.kind != TaskKind::TokenStep) continue;
        EXPECT_NEAR(s.end, 2.0, 1e-9 * 2.0);
    }
}

// A compute-saturating prompt and a memory-saturating token step started
// together: disjoint resources, sigma = 1, both span exactly 1 s.
TEST(Engine, ComplementaryPairOverlapsFreely) {
    SimulationInputs in;
    in.gpu.compute_capacity = 1.0e6;
    in.gpu.mem_bandwidth = 1.0e5;
    in.gpu.kv_capacity_blocks = 130000;  // r0's 62501-block footprint must fit its instance
    in.gpu.weight_mem_units = 1.0e5;     // step mem = M
    in.cost = CostModel{};
    in.cost.prompt_compute_per_token = 1.0;  // r0: input 1e6 -> prompt alone 1 s at c_rate C
    in.cost.prompt_mem_per_token = 0.0;
    in.cost.prompt_overhead_s = 0.0;
    in.cost.token_compute_per_req = 0.0;
    in.cost.token_mem_weight_fraction = 1.0;
    in.cost.token_mem_per_kv_block = 0.0;
    in.cost.step_overhead_s = 0.0;
    in.discipline.mode = SharingDiscipline::Mode::MpsConcurrent;
    // r1's prompt is 1e-6 s; r0's prompt is held until r1 generates so the
    // saturating pair starts together.
    in.requests = {req(0, 0.0, 1000000, 1), req(1, 0.0, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, 1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    const double t0 = 1e-6;
    for (const auto& s : task_spans(log)) {
        if (s.kind == TaskKind::Prompt && s.batch == std::vector<int>{0}) {
            EXPECT_NEAR(s.start, t0, 1e-12);
            EXPECT_NEAR(s.end, t0 + 1.0, 1e-9);
        }
        if (s.kind == TaskKind::TokenStep && s.batch == std::vector<int>{1}) {
            EXPECT_NEAR(s.start, t0, 1e-12);
            EXPECT_NEAR(s.end, t0 + 1.0, 1e-9);
        }
    }
}

// Piecewise-rate integration oracle: T2 joins at 0.5; T1 finishes at 1.5,
// T2 at 2.0.
TEST(Engine, StaggeredJoin) {
    auto in = pure_compute_steps();
    in.discipline.mode = SharingDiscipline::Mode::MpsConcurrent;
    in.requests = {req(0, 0.0, 1, 1), req(1, 0.5, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    for (const auto& s : task_spans(log)) {
        if (s.kind != TaskKind::TokenStep) continue;
        if (s.batch == std::vector<int>{0}) {
            EXPECT_NEAR(s.end, 1.5, 1e-9 * 1.5);
        }
        if (s.batch == std::vector<int>{1}) {
            EXPECT_NEAR(s.end, 2.0, 1e-9 * 2.0);
        }
    }
}

// Closed-form switch-count oracle: 1 s of work per instance, quantum 0.1,
// switch 0.01 -> 20 quanta, 19 switches, makespan 2.19.
TEST(Engine, TimeSlicedPair) {
    auto in = pure_compute_steps();
    in.discipline.mode = SharingDiscipline::Mode::TimeSliced;
    in.discipline.quantum_s = 0.1;
    in.discipline.switch_cost_s = 0.01;
    in.requests = {req(0, 0.0, 1, 1), req(1, 0.0, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    EXPECT_NEAR(testutil::makespan_of(log), 2.19, 1e-9 * 2.19);
}

// Quantum larger than all work: exactly one switch.
TEST(Engine, TimeSlicedSingleSwitchWhenQuantumCoversWork) {
    auto in = pure_compute_steps();
    in.discipline.mode = SharingDiscipline::Mode::TimeSliced;
    in.discipline.quantum_s = 3.0;
    in.discipline.switch_cost_s = 0.01;
    in.requests = {req(0, 0.0, 1, 1), req(1, 0.0, 1, 1)};
    ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}});
    auto log = run_simulation(in, sched);
    EXPECT_NEAR(testutil::makespan_of(log), 2.01, 1e-9 * 2.01);
}

// Zero switch cost, one instance: identical task timeline to Exclusive.
TEST(Engine, TimeSlicedDegeneratesToExclusive) {
    auto run_with = [](SharingDiscipline d) {
        auto in = pure_compute_steps();
        in.discipline = d;
        in.requests = {req(0, 0.0, 1, 3), req(1, 0.2, 1, 2)};
        ScriptedScheduler sched(1, {{0, {0, -1}}, {1, {0, -1}}});
        return task_spans(run_simulation(in, sched));
    };
    SharingDiscipline ts;
    ts.mode = SharingDiscipline::Mode::TimeSliced;
    ts.quantum_s = 0.05;
    ts.switch_cost_s = 0.0;
    auto a = run_with(ts);
    SharingDiscipline ex;
    ex.mode = SharingDiscipline::Mode::Exclusive;
    auto b = run_with(ex);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].kind, b[i].kind);
        EXPECT_NEAR(a[i].start, b[i].start, 1e-12);
        EXPECT_NEAR(a[i].end, b[i].end, 1e-12);
    }
}

// Arrival and task completion at the same instant: the arrival was enqueued
// first, so it is processed (and logged) first.
TEST(Engine, ArrivalBeatsCompletionOnTie) {
    auto in = pure_compute_steps();
    in.discipline.mode = SharingDiscipline::Mode::Exclusive;
    in.requests = {req(0, 0.0, 1, 1), req(1, 1.0, 1, 1)};  // r0's step ends exactly at 1.0
    ScriptedScheduler sched(1, {{0, {0, -1}}, {1, {0, -1}}});
    auto log = run_simulation(in, sched);
    int arrival_pos = -1, complete_pos = -1;
    for (std::size_t i = 0; i < log.records.size(); ++i) {
        const auto& r = log.records[i];
        if (r.time_s != 1.0) continue;
        if (r.kind == LogKind::Arrival && arrival_pos < 0) arrival_pos = static_cast<int>(i);
        if (r.kind == LogKind::TaskComplete && complete_pos < 0) complete_pos = static_cast<int>(i);
    }
    ASSERT_GE(arrival_pos, 0);
    ASSERT_GE(complete_pos, 0);
    EXPECT_LT(arrival_pos, complete_pos);
}

// Makespan never beats the aggregate roofline bound, whatever the discipline.
TEST(Engine, MakespanLowerBound) {
    for (auto mode : {SharingDiscipline::Mode::MpsConcurrent, SharingDiscipline::Mode::TimeSliced}) {
        auto in = pure_compute_steps();
        in.cost.token_mem_weight_fraction = 1.0;
        in.gpu.weight_mem_units = 4.0e4;
        in.discipline.mode = mode;
        in.requests = {req(0, 0.0, 1, 3), req(1, 0.0, 1, 4), req(2, 0.1, 1, 2)};
        ScriptedScheduler sched(2, {{0, {0, -1}}, {1, {1, -1}}, {2, {0, -1}}});
        auto log = run_simulation(in, sched);
        double compute_total = 0.0, mem_total = 0.0;
        for (const auto& r : log.records) {
            if (r.kind != LogKind::TaskStart) continue;
            compute_total += r.compute;
            mem_total += r.mem;
        }
        const double bound = std::max(compute_total / in.gpu.compute_capacity,
                                      mem_total / in.gpu.mem_bandwidth);
        EXPECT_GE(testutil::makespan_of(log) + 1e-12, bound);
    }
}

TEST(Engine, EmptyWorkload) {
    auto in = pure_compute_steps();
    in.requests = {};
    ScriptedScheduler sched(1, {});
    auto log = run_simulation(in, sched);
    auto rep = build_report(log);
    EXPECT_EQ(rep.n_requests, 0);
    EXPECT_DOUBLE_EQ(rep.makespan_s, 0.0);
}

TEST(Engine, UnknownRequestInTaskIsContractViolation) {
    class BadScheduler final : public Scheduler {
    public:
        int n_instances() const override { return 1; }
        int instance_of(int) const override { return 0; }
        void on_arrival(int) override {}
        void on_task_complete(const PhaseTask&, const EngineView&) override {}
        std::vector<TaskRequest> next_tasks(const EngineView&) override {
            if (emitted_) return {};
            emitted_ = true;
            return {{TaskKind::Prompt, {777}, 0, 0.0}};
        }

    private:
        bool emitted_ = false;
    };
    auto in = pure_compute_steps();
    in.requests = {req(0, 0.0, 1, 1)};
    BadScheduler sched;
    EXPECT_THROW(run_simulation(in, sched), ContractViolation);
}
