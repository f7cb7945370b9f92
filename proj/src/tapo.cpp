#include "tapo/tapo.hpp"

#include <string>

#include "tapo/error.hpp"

namespace tapo {

AugmentedQuestion augment(const ReasoningTask& task, const Guidance& guidance,
                          const PolicySnapshot& sampler, const AugmentParams& params, Rng& rng)
{
    const Vocabulary vocab(task.modulus);
    AugmentedQuestion aug;
    aug.original_tokens = task.question_tokens;

    HintCursor cursor;
    for (Action a : guidance.pattern) {
        aug.pattern_tokens.push_back(vocab.action(a));
        const auto h = hint_tokens(vocab, task, a, cursor);
        aug.hint_tokens.insert(aug.hint_tokens.end(), h.begin(), h.end());
    }

    if (guidance.hint_budget > 0) {
        std::vector<Token> context = aug.pattern_tokens;
        context.insert(context.end(), aug.original_tokens.begin(), aug.original_tokens.end());
        context.insert(context.end(), aug.hint_tokens.begin(), aug.hint_tokens.end());
        SamplingParams p = params.sampling;
        p.max_len = guidance.hint_budget;
        const auto partial = sample_trajectory(sampler, vocab, context, p, rng);
        for (Token t : partial.output_tokens) {
            if (t == vocab.eos())
                break;
            aug.hint_tokens.push_back(t);
        }
    }

    const std::size_t fixed = aug.pattern_tokens.size() + aug.original_tokens.size();
    const std::size_t room = params.max_prompt_len > fixed ? params.max_prompt_len - fixed : 0;
    if (aug.hint_tokens.size() > room) {
        aug.hint_tokens.resize(room);
        aug.truncated = true;
    }
    if (fixed > params.max_prompt_len)
        aug.truncated = true;

    aug.combined_tokens = aug.pattern_tokens;
    aug.combined_tokens.insert(aug.combined_tokens.end(), aug.original_tokens.begin(),
                               aug.original_tokens.end());
    aug.combined_tokens.insert(aug.combined_tokens.end(), aug.hint_tokens.begin(),
                               aug.hint_tokens.end());
    return aug;
}

RolloutGroup sample_group(const PolicySnapshot& policy, const ReasoningTask& task,
                          std::span<const Token> prompt, std::size_t group_size,
                          const SamplingParams& params, Rng& rng)
{
    const Vocabulary vocab(task.modulus);
    RolloutGroup group;
    group.question.assign(prompt.begin(), prompt.end());
    group.trajectories.reserve(group_size);
    for (std::size_t i = 0; i < group_size; ++i) {
        auto traj = sample_trajectory(policy, vocab, prompt, params, rng);
        traj.reward = verify(task, traj.output_tokens);
        group.trajectories.push_back(std::move(traj));
    }
    return group;
}

std::size_t GuidedBatch::total_rollouts() const
{
    std::size_t n = 0;
    for (const auto& g : micro_groups)
        n += g.size();
    return n;
}

GuidedBatch sample_guided_batch(const ReasoningTask& task, std::span<const Guidance> guidances,
                                const PolicySnapshot& old_policy, std::size_t rollouts_total,
                                const SamplingParams& sampling, const AugmentParams& augment_params,
                                Rng& rng)
{
    if (guidances.empty())
        throw ConfigError("a guided batch needs at least one guidance");
    if (rollouts_total % guidances.size() != 0)
        throw ConfigError("rollouts_total " + std::to_string(rollouts_total) +
                          " is not divisible by the number of guidances " +
                          std::to_string(guidances.size()));
    const std::size_t per_guidance = rollouts_total / guidances.size();

    GuidedBatch batch;
    batch.guidances.assign(guidances.begin(), guidances.end());
    for (const auto& g : guidances) {
        auto prompt = augment(task, g, old_policy, augment_params, rng);
        batch.micro_groups.push_back(
            sample_group(old_policy, task, prompt.combined_tokens, per_guidance, sampling, rng));
        batch.prompts.push_back(std::move(prompt));
    }
    return batch;
}

AdvantageScope parse_advantage_scope(std::string_view s)
{
    if (s == "micro_group")
        return AdvantageScope::WithinMicroGroup;
    if (s == "union")
        return AdvantageScope::Union;
    throw ConfigError("advantage_scope must be 'micro_group' or 'union', got '" + std::string(s) +
                      "'");
}

std::string_view to_string(AdvantageScope s)
{
    return s == AdvantageScope::WithinMicroGroup ? "micro_group" : "union";
}

std::vector<AdvantageSet> batch_advantages(const GuidedBatch& batch, const GrpoConfig& config,
                                           AdvantageScope scope)
{
    std::vector<AdvantageSet> out;
    out.reserve(batch.micro_groups.size());
    if (scope == AdvantageScope::WithinMicroGroup) {
        for (const auto& g : batch.micro_groups)
            out.push_back(compute_advantages(g.rewards(), config));
        return out;
    }
    std::vector<double> all;
    for (const auto& g : batch.micro_groups) {
        const auto r = g.rewards();
        all.insert(all.end(), r.begin(), r.end());
    }
    const auto joint = compute_advantages(all, config);
    std::size_t offset = 0;
    for (const auto& g : batch.micro_groups) {
        AdvantageSet a;
        a.values.assign(joint.values.begin() + static_cast<std::ptrdiff_t>(offset),
                        joint.values.begin() + static_cast<std::ptrdiff_t>(offset + g.size()));
        offset += g.size();
        out.push_back(std::move(a));
    }
    return out;
}

TapoObjectiveTerms tapo_objective(const GuidedBatch& batch,
                                  std::span<const TokenValues> new_log_probs,
                                  std::span<const TokenValues> ref_log_probs,
                                  const GrpoConfig& config, AdvantageScope scope)
{
    if (batch.micro_groups.empty() || batch.total_rollouts() == 0)
        throw GroupSizeError("objective of an empty guided batch");
    if (new_log_probs.size() != batch.micro_groups.size())
        throw ParameterError("need new log-probs for every micro-group");
    const bool with_kl = config.kl_coefficient > 0.0;
    if (with_kl && ref_log_probs.size() != batch.micro_groups.size())
        throw ParameterError("need reference log-probs for every micro-group");

    const auto advantages = batch_advantages(batch, config, scope);
    const double total = static_cast<double>(batch.total_rollouts());
    static const TokenValues kNone;

    TapoObjectiveTerms out;
    for (std::size_t i = 0; i < batch.micro_groups.size(); ++i) {
        const auto& group = batch.micro_groups[i];
        auto terms = grpo_objective(group, new_log_probs[i], with_kl ? ref_log_probs[i] : kNone,
                                    advantages[i], config);
        const double weight = static_cast<double>(group.size()) / total;
        for (auto& row : terms.coefficients)
            for (double& c : row)
                c *= weight;
        out.value += weight * terms.value;
        out.guidance_values.push_back(terms.value);
        out.coefficients.push_back(std::move(terms.coefficients));
    }
    return out;
}

GroupEvaluation evaluate_guided_batch(const PolicySnapshot& current,
                                      const PolicySnapshot& reference, const GuidedBatch& batch,
                                      const GrpoConfig& config, AdvantageScope scope)
{
    std::vector<TokenValues> new_lp;
    std::vector<TokenValues> ref_lp;
    for (const auto& g : batch.micro_groups) {
        new_lp.push_back(group_log_probs(current, g));
        if (config.kl_coefficient > 0.0)
            ref_lp.push_back(group_log_probs(reference, g));
    }
    const auto terms = tapo_objective(batch, new_lp, ref_lp, config, scope);

    GroupEvaluation eval;
    eval.value = terms.value;
    eval.gradient.vocab_size = current.vocab_size();
    for (std::size_t i = 0; i < batch.micro_groups.size(); ++i) {
        auto g = objective_gradient(current, batch.micro_groups[i], terms.coefficients[i]);
        eval.gradient.rows.insert(eval.gradient.rows.end(), g.rows.begin(), g.rows.end());
        eval.gradient.values.insert(eval.gradient.values.end(), g.values.begin(), g.values.end());
    }
    return eval;
}

PositiveSampleProbability positive_sample_probability(std::span<const double> zero_accuracy_probs)
{
    if (zero_accuracy_probs.empty())
        throw ParameterError("need at least one guidance probability");
    double product = 1.0;
    for (double p : zero_accuracy_probs) {
        if (!(p >= 0.0 && p <= 1.0))
            throw ParameterError("zero-accuracy probability outside [0, 1]: " + std::to_string(p));
        product *= p;
    }
    PositiveSampleProbability out;
    out.probability = 1.0 - product;
    for (double p : zero_accuracy_probs)
        out.bound_holds = out.bound_holds && out.probability >= 1.0 - p;
    return out;
}

} // namespace tapo
