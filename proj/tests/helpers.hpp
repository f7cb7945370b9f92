#pragma once

#include <cmath>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/grpo.hpp"
#include "tapo/policy.hpp"
#include "tapo/rng.hpp"
#include "tapo/tapo.hpp"

namespace testing {

inline tapo::PolicySnapshot random_policy(const tapo::Vocabulary& vocab, double scale,
                                          std::uint64_t seed, std::size_t feature_count = 256)
{
    auto p = tapo::make_policy(vocab, 4, feature_count);
    tapo::Rng rng(seed);
    for (double& w : p.weights())
        w = scale * (2.0 * rng.uniform() - 1.0);
    return p;
}

/// Group sampled from `policy` on a random task, rewards forced from `rng`
/// when `random_rewards` so that groups with mixed outcomes are common.
inline tapo::RolloutGroup random_group(const tapo::PolicySnapshot& policy,
                                       const tapo::ReasoningTask& task, std::size_t size,
                                       tapo::Rng& rng, bool random_rewards = true)
{
    tapo::SamplingParams sp{1.0, 1.0, 8};
    auto g = tapo::sample_group(policy, task, task.question_tokens, size, sp, rng);
    if (random_rewards)
        for (auto& t : g.trajectories)
            t.reward = rng.uniform() < 0.4 ? 1 : 0;
    return g;
}

inline double relative_error(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

} // namespace testing
