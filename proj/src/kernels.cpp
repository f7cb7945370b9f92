#include "tapo/kernels.hpp"

#include <exception>
#include <string>

#include "tapo/error.hpp"

namespace tapo {

namespace {

// Runs body(i) for i in [0, n). Exceptions inside the parallel region are
// captured and the first one (by index) is rethrown afterwards.
template <class Body>
void for_each_index(std::size_t n, Schedule schedule, Body body)
{
    if (schedule == Schedule::Serial) {
        for (std::size_t i = 0; i < n; ++i)
            body(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 1)
    for (std::ptrdiff_t i = 0; i < count; ++i) {
        try {
            body(static_cast<std::size_t>(i));
        } catch (...) {
            errors[static_cast<std::size_t>(i)] = std::current_exception();
        }
    }
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

GuidedBatch plain_batch(const RolloutJob& job, const PolicySnapshot& policy,
                        const RolloutSettings& settings, Rng& rng)
{
    GuidedBatch b;
    b.guidances.push_back(Guidance::identity());
    AugmentedQuestion q;
    q.original_tokens = job.task->question_tokens;
    q.combined_tokens = job.task->question_tokens;
    b.micro_groups.push_back(sample_group(policy, *job.task, q.combined_tokens,
                                          settings.rollouts_total, settings.sampling, rng));
    b.prompts.push_back(std::move(q));
    return b;
}

} // namespace

Schedule parse_schedule(std::string_view s)
{
    if (s == "serial")
        return Schedule::Serial;
    if (s == "parallel")
        return Schedule::Parallel;
    throw ConfigError("schedule must be 'serial' or 'parallel', got '" + std::string(s) + "'");
}

std::vector<GuidedBatch> sample_rollouts(std::span<const RolloutJob> jobs,
                                         const PolicySnapshot& policy,
                                         const RolloutSettings& settings, Schedule schedule)
{
    std::vector<GuidedBatch> out(jobs.size());
    for_each_index(jobs.size(), schedule, [&](std::size_t i) {
        const auto& job = jobs[i];
        Rng rng(job.seed);
        out[i] = job.guided() ? sample_guided_batch(*job.task, job.guidances, policy,
                                                    settings.rollouts_total, settings.sampling,
                                                    settings.augment, rng)
                              : plain_batch(job, policy, settings, rng);
    });
    return out;
}

std::vector<GroupEvaluation> evaluate_rollouts(std::span<const RolloutJob> jobs,
                                               std::span<const GuidedBatch> batches,
                                               const PolicySnapshot& current,
                                               const PolicySnapshot& reference,
                                               const GrpoConfig& config, AdvantageScope scope,
                                               Schedule schedule)
{
    if (jobs.size() != batches.size())
        throw ParameterError("one rollout batch per job required");
    std::vector<GroupEvaluation> out(jobs.size());
    for_each_index(jobs.size(), schedule, [&](std::size_t i) {
        if (jobs[i].guided()) {
            out[i] = evaluate_guided_batch(current, reference, batches[i], config, scope);
        } else {
            const auto& group = batches[i].micro_groups.front();
            const auto adv = compute_advantages(group.rewards(), config);
            out[i] = evaluate_group(current, reference, group, adv, config);
        }
    });
    return out;
}

std::vector<double> mean_gradient(std::span<const GroupEvaluation> evals, std::size_t weight_count)
{
    std::vector<double> dense(weight_count, 0.0);
    for (const auto& e : evals)
        e.gradient.add_to(dense);
    if (!evals.empty()) {
        const double scale = 1.0 / static_cast<double>(evals.size());
        for (double& g : dense)
            g *= scale;
    }
    return dense;
}

double greedy_accuracy(const PolicySnapshot& policy, std::span<const ReasoningTask> tasks,
                       std::size_t max_len, Schedule schedule)
{
    if (tasks.empty())
        return 0.0;
    std::vector<int> solved(tasks.size(), 0);
    for_each_index(tasks.size(), schedule, [&](std::size_t i) {
        const Vocabulary vocab(tasks[i].modulus);
        const auto traj = greedy_decode(policy, vocab, tasks[i].question_tokens, max_len);
        solved[i] = verify(tasks[i], traj.output_tokens);
    });
    double total = 0.0;
    for (int s : solved)
        total += s;
    return total / static_cast<double>(tasks.size());
}

std::vector<mcts::SearchResult> search_all(std::span<const ReasoningTask> tasks,
                                           std::span<const std::uint64_t> seeds,
                                           const PolicySnapshot& policy,
                                           const mcts::SearchParams& params, Schedule schedule)
{
    if (tasks.size() != seeds.size())
        throw ParameterError("one seed per search task required");
    std::vector<std::optional<mcts::SearchResult>> slots(tasks.size());
    for_each_index(tasks.size(), schedule, [&](std::size_t i) {
        Rng rng(seeds[i]);
        slots[i].emplace(mcts::search(tasks[i], policy, params, rng));
    });
    std::vector<mcts::SearchResult> out;
    out.reserve(slots.size());
    for (auto& s : slots)
        out.push_back(std::move(*s));
    return out;
}

} // namespace tapo
