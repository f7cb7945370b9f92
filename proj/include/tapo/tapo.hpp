#pragma once

// Thought-augmented policy optimisation: questions are rewritten by retrieved
// thought patterns, each guidance gets its own micro-group of rollouts, and
// the objective is the size-weighted sum of per-guidance GRPO objectives.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/grpo.hpp"
#include "tapo/library.hpp"
#include "tapo/policy.hpp"
#include "tapo/rng.hpp"

namespace tapo {

struct Guidance {
    std::vector<Action> pattern;
    /// Maximum number of policy-sampled tokens appended after the hints.
    std::size_t hint_budget = 0;

    static Guidance identity() { return {}; }
    static Guidance from_template(const ThoughtTemplate& t, std::size_t hint_budget = 0)
    {
        return {t.pattern, hint_budget};
    }
    bool is_identity() const { return pattern.empty() && hint_budget == 0; }
};

struct AugmentedQuestion {
    std::vector<Token> original_tokens;
    std::vector<Token> pattern_tokens;
    std::vector<Token> hint_tokens;
    /// pattern_tokens ++ original_tokens ++ hint_tokens.
    std::vector<Token> combined_tokens;
    /// Hints were cut to respect the prompt length limit.
    bool truncated = false;
};

struct AugmentParams {
    std::size_t max_prompt_len = 128;
    /// Decoding for policy-sampled hint tokens.
    SamplingParams sampling{};
};

/// Prepends the pattern's action tokens, then appends each action's
/// environment hint in order and up to hint_budget tokens sampled from
/// `sampler` (EOS ends the sample early and is not kept).
AugmentedQuestion augment(const ReasoningTask& task, const Guidance& guidance,
                          const PolicySnapshot& sampler, const AugmentParams& params, Rng& rng);

/// G trajectories for one prompt, scored against `task`.
RolloutGroup sample_group(const PolicySnapshot& policy, const ReasoningTask& task,
                          std::span<const Token> prompt, std::size_t group_size,
                          const SamplingParams& params, Rng& rng);

struct GuidedBatch {
    std::vector<Guidance> guidances;
    std::vector<AugmentedQuestion> prompts;
    std::vector<RolloutGroup> micro_groups;

    std::size_t total_rollouts() const;
};

/// One micro-group of rollouts_total / |g| trajectories per guidance, sampled
/// from pi_old on the augmented prompt and rewarded against the original
/// answer. Throws ConfigError if the split is not exact.
GuidedBatch sample_guided_batch(const ReasoningTask& task, std::span<const Guidance> guidances,
                                const PolicySnapshot& old_policy, std::size_t rollouts_total,
                                const SamplingParams& sampling, const AugmentParams& augment_params,
                                Rng& rng);

/// Where group-normalised advantages are computed.
enum class AdvantageScope {
    WithinMicroGroup,
    Union,
};

AdvantageScope parse_advantage_scope(std::string_view s);
std::string_view to_string(AdvantageScope s);

std::vector<AdvantageSet> batch_advantages(const GuidedBatch& batch, const GrpoConfig& config,
                                           AdvantageScope scope);

struct TapoObjectiveTerms {
    double value = 0.0;
    /// Per-guidance objectives J_i.
    std::vector<double> guidance_values;
    /// Per micro-group d value / d log pi.
    std::vector<TokenValues> coefficients;
};

/// sum_i G_i J_i / sum_i G_i, where J_i is the GRPO objective of micro-group i.
TapoObjectiveTerms tapo_objective(const GuidedBatch& batch,
                                  std::span<const TokenValues> new_log_probs,
                                  std::span<const TokenValues> ref_log_probs,
                                  const GrpoConfig& config, AdvantageScope scope);

/// Objective and gradient with log-probs taken under `current` and `reference`.
GroupEvaluation evaluate_guided_batch(const PolicySnapshot& current,
                                      const PolicySnapshot& reference, const GuidedBatch& batch,
                                      const GrpoConfig& config, AdvantageScope scope);

struct PositiveSampleProbability {
    /// 1 - prod_j p_j.
    double probability = 0.0;
    /// probability >= 1 - p_j holds for every j.
    bool bound_holds = true;
};

/// Probability that a batch holds at least one positive sample, given each
/// guidance's probability p_j of yielding zero accuracy.
PositiveSampleProbability positive_sample_probability(std::span<const double> zero_accuracy_probs);

} // namespace tapo
