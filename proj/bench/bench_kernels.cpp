// Serial against OpenMP schedules for the per-question kernels.

#include <benchmark/benchmark.h>

#include "tapo/kernels.hpp"

using namespace tapo;

namespace {

PolicySnapshot bench_policy()
{
    const Vocabulary v(10);
    auto p = make_policy(v);
    Rng rng(3);
    for (double& w : p.weights())
        w = 2.0 * rng.uniform() - 1.0;
    return p;
}

const std::vector<ReasoningTask>& bench_tasks()
{
    static const auto tasks = generate_task_set(64, 3, 5, 10, 2);
    return tasks;
}

Schedule schedule_of(const benchmark::State& state)
{
    return state.range(0) == 0 ? Schedule::Serial : Schedule::Parallel;
}

void BM_TrainingStep(benchmark::State& state)
{
    const auto policy = bench_policy();
    const auto& tasks = bench_tasks();
    std::vector<RolloutJob> jobs;
    for (std::size_t i = 0; i < 16; ++i)
        jobs.push_back({&tasks[i], {Guidance{{Action::DC}, 0}, Guidance{{Action::OST}, 0}}, i});
    RolloutSettings rs;
    rs.rollouts_total = 16;
    const GrpoConfig c;
    for (auto _ : state) {
        const auto batches = sample_rollouts(jobs, policy, rs, schedule_of(state));
        const auto evals = evaluate_rollouts(jobs, batches, policy, policy, c,
                                             AdvantageScope::WithinMicroGroup, schedule_of(state));
        benchmark::DoNotOptimize(mean_gradient(evals, policy.weights().size()));
    }
}

void BM_GreedyAccuracy(benchmark::State& state)
{
    const auto policy = bench_policy();
    for (auto _ : state)
        benchmark::DoNotOptimize(greedy_accuracy(policy, bench_tasks(), 64, schedule_of(state)));
}

void BM_Search(benchmark::State& state)
{
    const auto policy = bench_policy();
    const std::span<const ReasoningTask> tasks(bench_tasks().data(), 16);
    std::vector<std::uint64_t> seeds(tasks.size());
    for (std::size_t i = 0; i < seeds.size(); ++i)
        seeds[i] = i;
    const mcts::SearchParams params;
    for (auto _ : state)
        benchmark::DoNotOptimize(search_all(tasks, seeds, policy, params, schedule_of(state)));
}

} // namespace

BENCHMARK(BM_TrainingStep)->ArgName("parallel")->Arg(0)->Arg(1)->UseRealTime();
BENCHMARK(BM_GreedyAccuracy)->ArgName("parallel")->Arg(0)->Arg(1)->UseRealTime();
BENCHMARK(BM_Search)->ArgName("parallel")->Arg(0)->Arg(1)->UseRealTime();

BENCHMARK_MAIN();
