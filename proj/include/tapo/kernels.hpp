#pragma once

// Data-parallel pieces of a training step. Every kernel has a serial
// reference and an OpenMP version; both give bit-identical results because
// each job owns its generator and reductions run in job order.

#include <cstdint>
#include <span>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/grpo.hpp"
#include "tapo/mcts.hpp"
#include "tapo/policy.hpp"
#include "tapo/tapo.hpp"

namespace tapo {

enum class Schedule {
    Serial,
    Parallel,
};

Schedule parse_schedule(std::string_view s);

/// One question of a step. Without guidances the question is sampled as a
/// plain GRPO group.
struct RolloutJob {
    const ReasoningTask* task = nullptr;
    std::vector<Guidance> guidances;
    std::uint64_t seed = 0;

    bool guided() const { return !guidances.empty(); }
};

struct RolloutSettings {
    std::size_t rollouts_total = 16;
    SamplingParams sampling{};
    AugmentParams augment{};
};

/// Guided jobs give one micro-group per guidance; plain jobs give a single
/// group on the original question with an identity guidance recorded.
std::vector<GuidedBatch> sample_rollouts(std::span<const RolloutJob> jobs,
                                         const PolicySnapshot& policy,
                                         const RolloutSettings& settings, Schedule schedule);

/// Per-job objective and sparse gradient. Plain jobs use the GRPO objective,
/// guided ones the TAPO objective.
std::vector<GroupEvaluation> evaluate_rollouts(std::span<const RolloutJob> jobs,
                                               std::span<const GuidedBatch> batches,
                                               const PolicySnapshot& current,
                                               const PolicySnapshot& reference,
                                               const GrpoConfig& config, AdvantageScope scope,
                                               Schedule schedule);

/// Mean of the job gradients as a dense vector, summed in job order.
std::vector<double> mean_gradient(std::span<const GroupEvaluation> evals, std::size_t weight_count);

/// Fraction of tasks solved by greedy decoding of the plain question.
double greedy_accuracy(const PolicySnapshot& policy, std::span<const ReasoningTask> tasks,
                       std::size_t max_len, Schedule schedule);

/// One search per task, task i driven by Rng(seeds[i]).
std::vector<mcts::SearchResult> search_all(std::span<const ReasoningTask> tasks,
                                           std::span<const std::uint64_t> seeds,
                                           const PolicySnapshot& policy,
                                           const mcts::SearchParams& params, Schedule schedule);

} // namespace tapo
