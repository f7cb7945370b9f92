#pragma once

// Group-normalised advantages, the clipped GRPO surrogate (optionally with a
// per-token KL penalty) and the parameter update.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/policy.hpp"

namespace tapo {

enum class AdvantageMode { Standard, DrGrpo };
enum class LengthNorm { PerTrajectory, Constant };

AdvantageMode parse_advantage_mode(std::string_view s);
LengthNorm parse_length_norm(std::string_view s);
std::string_view to_string(AdvantageMode m);
std::string_view to_string(LengthNorm n);

struct GrpoConfig {
    double clip_epsilon = 0.2;
    double kl_coefficient = 0.0;
    AdvantageMode advantage_mode = AdvantageMode::DrGrpo;
    LengthNorm length_norm = LengthNorm::Constant;
    double std_floor = 1e-6;
    /// Divisor used by LengthNorm::Constant; the generation length limit.
    std::size_t normalizer_length = 64;

    void validate() const;
};

/// One sampled group: G trajectories for the same (possibly augmented) prompt.
/// Each trajectory carries its pi_old log-probs and binary reward.
struct RolloutGroup {
    std::vector<Token> question;
    std::vector<Trajectory> trajectories;

    std::size_t size() const { return trajectories.size(); }
    std::vector<double> rewards() const;
};

/// Per-token values, indexed [trajectory][token].
using TokenValues = std::vector<std::vector<double>>;

TokenValues old_log_probs(const RolloutGroup& group);

/// log pi(o_{i,t} | prompt, o_{i,<t}) for every token of the group.
TokenValues group_log_probs(const PolicySnapshot& policy, const RolloutGroup& group);

/// One scalar per trajectory, shared by all of its tokens.
struct AdvantageSet {
    std::vector<double> values;
};

/// Standard mode: (r - mean) / std with population std; groups whose std is
/// below std_floor get all-zero advantages. DrGrpo mode: r - mean.
AdvantageSet compute_advantages(std::span<const double> rewards, const GrpoConfig& config);

/// exp(new - old) per token. Throws NumericError on non-finite input.
TokenValues probability_ratios(const TokenValues& new_log_probs, const TokenValues& old_log_probs);

/// k3 estimator of KL(pi || pi_ref) at one token: exp(ref-new) - (ref-new) - 1.
double kl_k3(double new_log_prob, double ref_log_prob);

struct ObjectiveTerms {
    double value = 0.0;
    /// d value / d log pi(o_{i,t}); the gradient is the sum of these times
    /// grad_log_prob at each token.
    TokenValues coefficients;
};

/// (1/G) sum_i n_i sum_t [min(rho A, clip(rho) A) - beta k3], with
/// n_i = 1/|o_i| or 1/normalizer_length depending on the length norm.
ObjectiveTerms grpo_objective(const RolloutGroup& group, const TokenValues& new_log_probs,
                              const TokenValues& ref_log_probs, const AdvantageSet& advantages,
                              const GrpoConfig& config);

/// Gradient restricted to the rows it touches. `values` holds rows.size()
/// consecutive blocks of vocab_size entries.
struct SparseGradient {
    std::size_t vocab_size = 0;
    std::vector<std::size_t> rows;
    std::vector<double> values;

    /// Adds into a dense F x V buffer in stored order.
    void add_to(std::span<double> dense) const;
};

/// Chains per-token coefficients through grad_log_prob.
SparseGradient objective_gradient(const PolicySnapshot& policy, const RolloutGroup& group,
                                  const TokenValues& coefficients);

struct GroupEvaluation {
    double value = 0.0;
    SparseGradient gradient;
};

/// Objective and gradient for one group with advantages already computed.
GroupEvaluation evaluate_group(const PolicySnapshot& current, const PolicySnapshot& reference,
                               const RolloutGroup& group, const AdvantageSet& advantages,
                               const GrpoConfig& config);

/// Linear warm-up over warmup_ratio * total_steps, then cosine decay to zero.
struct LrSchedule {
    double peak = 0.05;
    double warmup_ratio = 0.1;
    std::size_t total_steps = 500;

    double at(std::size_t step) const;
};

/// Gradient-ascent step in place. Throws NumericError on a non-finite gradient.
void apply_update(PolicySnapshot& policy, std::span<const double> gradient,
                  const LrSchedule& schedule, std::size_t step);

double l2_norm(std::span<const double> v);

} // namespace tapo
