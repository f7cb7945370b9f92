#include "tapo/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "tapo/error.hpp"

namespace tapo {

AdvantageMode parse_advantage_mode(std::string_view s)
{
    if (s == "standard")
        return AdvantageMode::Standard;
    if (s == "dr_grpo")
        return AdvantageMode::DrGrpo;
    throw ConfigError("advantage_mode must be 'standard' or 'dr_grpo', got '" + std::string(s) +
                      "'");
}

LengthNorm parse_length_norm(std::string_view s)
{
    if (s == "per_trajectory")
        return LengthNorm::PerTrajectory;
    if (s == "constant")
        return LengthNorm::Constant;
    throw ConfigError("length_norm must be 'per_trajectory' or 'constant', got '" +
                      std::string(s) + "'");
}

std::string_view to_string(AdvantageMode m)
{
    return m == AdvantageMode::Standard ? "standard" : "dr_grpo";
}

std::string_view to_string(LengthNorm n)
{
    return n == LengthNorm::PerTrajectory ? "per_trajectory" : "constant";
}

void GrpoConfig::validate() const
{
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0))
        throw ConfigError("clip_epsilon must lie in (0, 1)");
    if (!(kl_coefficient >= 0.0))
        throw ConfigError("kl_coefficient must be >= 0");
    if (!(std_floor > 0.0))
        throw ConfigError("std_floor must be > 0");
    if (normalizer_length == 0)
        throw ConfigError("normalizer_length must be >= 1");
}

std::vector<double> RolloutGroup::rewards() const
{
    std::vector<double> r;
    r.reserve(trajectories.size());
    for (const auto& t : trajectories)
        r.push_back(static_cast<double>(t.reward));
    return r;
}

TokenValues old_log_probs(const RolloutGroup& group)
{
    TokenValues out;
    out.reserve(group.size());
    for (const auto& t : group.trajectories)
        out.push_back(t.log_probs);
    return out;
}

TokenValues group_log_probs(const PolicySnapshot& policy, const RolloutGroup& group)
{
    TokenValues out;
    out.reserve(group.size());
    for (const auto& t : group.trajectories)
        out.push_back(sequence_log_probs(policy, group.question, t.output_tokens));
    return out;
}

AdvantageSet compute_advantages(std::span<const double> rewards, const GrpoConfig& config)
{
    if (rewards.size() < 2)
        throw GroupSizeError("advantages need a group of at least 2, got " +
                             std::to_string(rewards.size()));
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards)
        mean += r;
    mean /= n;

    AdvantageSet a;
    a.values.reserve(rewards.size());
    if (config.advantage_mode == AdvantageMode::DrGrpo) {
        for (double r : rewards)
            a.values.push_back(r - mean);
        return a;
    }

    double var = 0.0;
    for (double r : rewards)
        var += (r - mean) * (r - mean);
    const double std = std::sqrt(var / n);
    if (std < config.std_floor) {
        a.values.assign(rewards.size(), 0.0);
        return a;
    }
    for (double r : rewards)
        a.values.push_back((r - mean) / std);
    return a;
}

namespace {

void check_shapes(const TokenValues& a, const TokenValues& b, const char* what)
{
    if (a.size() != b.size())
        throw ParameterError(std::string(what) + ": trajectory count mismatch");
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].size() != b[i].size())
            throw ParameterError(std::string(what) + ": token count mismatch in trajectory " +
                                 std::to_string(i));
}

} // namespace

TokenValues probability_ratios(const TokenValues& new_log_probs, const TokenValues& old_log_probs)
{
    check_shapes(new_log_probs, old_log_probs, "probability_ratios");
    TokenValues ratios(new_log_probs.size());
    for (std::size_t i = 0; i < new_log_probs.size(); ++i) {
        ratios[i].resize(new_log_probs[i].size());
        for (std::size_t t = 0; t < new_log_probs[i].size(); ++t) {
            const double lp_new = new_log_probs[i][t];
            const double lp_old = old_log_probs[i][t];
            if (!std::isfinite(lp_new) || !std::isfinite(lp_old))
                throw NumericError("non-finite log-probability at trajectory " + std::to_string(i) +
                                   ", token " + std::to_string(t));
            ratios[i][t] = std::exp(lp_new - lp_old);
            if (!std::isfinite(ratios[i][t]))
                throw NumericError("probability ratio overflow at trajectory " +
                                   std::to_string(i));
        }
    }
    return ratios;
}

double kl_k3(double new_log_prob, double ref_log_prob)
{
    const double d = ref_log_prob - new_log_prob;
    return std::exp(d) - d - 1.0;
}

ObjectiveTerms grpo_objective(const RolloutGroup& group, const TokenValues& new_log_probs,
                              const TokenValues& ref_log_probs, const AdvantageSet& advantages,
                              const GrpoConfig& config)
{
    if (group.trajectories.empty())
        throw GroupSizeError("objective of an empty group");
    if (advantages.values.size() != group.size())
        throw ParameterError("advantage count does not match group size");
    const auto old = old_log_probs(group);
    const auto ratios = probability_ratios(new_log_probs, old);
    const bool with_kl = config.kl_coefficient > 0.0;
    if (with_kl)
        check_shapes(new_log_probs, ref_log_probs, "grpo_objective");

    const double lo = 1.0 - config.clip_epsilon;
    const double hi = 1.0 + config.clip_epsilon;
    const double inv_group = 1.0 / static_cast<double>(group.size());

    ObjectiveTerms out;
    out.coefficients.resize(group.size());
    for (std::size_t i = 0; i < group.size(); ++i) {
        const std::size_t len = ratios[i].size();
        out.coefficients[i].assign(len, 0.0);
        if (len == 0)
            continue;
        const double norm = config.length_norm == LengthNorm::PerTrajectory
                                ? 1.0 / static_cast<double>(len)
                                : 1.0 / static_cast<double>(config.normalizer_length);
        const double adv = advantages.values[i];
        double sum = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            const double rho = ratios[i][t];
            const double unclipped = rho * adv;
            const double clipped = std::clamp(rho, lo, hi) * adv;
            double term = std::min(unclipped, clipped);
            // The unclipped branch carries the gradient d(rho A)/d log pi = rho A.
            double coeff = unclipped <= clipped ? unclipped : 0.0;
            if (with_kl) {
                const double lp_new = new_log_probs[i][t];
                const double lp_ref = ref_log_probs[i][t];
                term -= config.kl_coefficient * kl_k3(lp_new, lp_ref);
                coeff -= config.kl_coefficient * (1.0 - std::exp(lp_ref - lp_new));
            }
            sum += term;
            out.coefficients[i][t] = inv_group * norm * coeff;
        }
        out.value += inv_group * norm * sum;
    }
    return out;
}

void SparseGradient::add_to(std::span<double> dense) const
{
    for (std::size_t k = 0; k < rows.size(); ++k) {
        double* dst = dense.data() + rows[k] * vocab_size;
        const double* src = values.data() + k * vocab_size;
        for (std::size_t v = 0; v < vocab_size; ++v)
            dst[v] += src[v];
    }
}

SparseGradient objective_gradient(const PolicySnapshot& policy, const RolloutGroup& group,
                                  const TokenValues& coefficients)
{
    SparseGradient g;
    g.vocab_size = policy.vocab_size();
    std::vector<Token> context;
    for (std::size_t i = 0; i < group.size(); ++i) {
        const auto& out = group.trajectories[i].output_tokens;
        context.assign(group.question.begin(), group.question.end());
        for (std::size_t t = 0; t < out.size(); ++t) {
            const double c = coefficients[i][t];
            if (c != 0.0) {
                const auto row = grad_log_prob(policy, context, out[t]);
                g.rows.push_back(row.row);
                for (double v : row.values)
                    g.values.push_back(c * v);
            }
            context.push_back(out[t]);
        }
    }
    return g;
}

GroupEvaluation evaluate_group(const PolicySnapshot& current, const PolicySnapshot& reference,
                               const RolloutGroup& group, const AdvantageSet& advantages,
                               const GrpoConfig& config)
{
    const auto new_lp = group_log_probs(current, group);
    TokenValues ref_lp;
    if (config.kl_coefficient > 0.0)
        ref_lp = group_log_probs(reference, group);
    auto terms = grpo_objective(group, new_lp, ref_lp, advantages, config);
    return {terms.value, objective_gradient(current, group, terms.coefficients)};
}

double LrSchedule::at(std::size_t step) const
{
    if (total_steps == 0)
        return 0.0;
    const auto warmup = static_cast<std::size_t>(std::llround(warmup_ratio * total_steps));
    if (step < warmup)
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total_steps)
        return 0.0;
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

void apply_update(PolicySnapshot& policy, std::span<const double> gradient,
                  const LrSchedule& schedule, std::size_t step)
{
    auto& w = policy.weights();
    if (gradient.size() != w.size())
        throw ParameterError("gradient size " + std::to_string(gradient.size()) +
                             " does not match weights " + std::to_string(w.size()));
    for (std::size_t k = 0; k < gradient.size(); ++k)
        if (!std::isfinite(gradient[k]))
            throw NumericError("non-finite gradient entry at index " + std::to_string(k) +
                               " (row " + std::to_string(k / policy.vocab_size()) + ")");
    const double lr = schedule.at(step);
    if (lr == 0.0)
        return;
    for (std::size_t k = 0; k < gradient.size(); ++k)
        w[k] += lr * gradient[k];
}

double l2_norm(std::span<const double> v)
{
    double s = 0.0;
    for (double x : v)
        s += x * x;
    return std::sqrt(s);
}

} // namespace tapo
