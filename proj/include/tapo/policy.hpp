#pragma once

// Context-hashed linear softmax token policy with exact log-probabilities and
// analytic gradients.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/rng.hpp"

namespace tapo {

/// Parameters of the policy: one logit row per context bucket.
///
/// Copies are deep, so a snapshot taken as pi_old or pi_ref is unaffected by
/// later updates to the live policy.
class PolicySnapshot {
public:
    PolicySnapshot() = default;
    PolicySnapshot(std::size_t context_window, std::size_t feature_count, std::size_t vocab_size,
                   std::uint64_t vocab_hash = 0);

    std::size_t context_window() const { return context_window_; }
    std::size_t feature_count() const { return feature_count_; }
    std::size_t vocab_size() const { return vocab_size_; }
    std::uint64_t vocab_hash() const { return vocab_hash_; }

    std::span<double> row(std::size_t bucket);
    std::span<const double> row(std::size_t bucket) const;

    std::vector<double>& weights() { return weights_; }
    const std::vector<double>& weights() const { return weights_; }

    bool all_finite() const;

    friend bool operator==(const PolicySnapshot&, const PolicySnapshot&) = default;

private:
    std::size_t context_window_ = 4;
    std::size_t feature_count_ = 4096;
    std::size_t vocab_size_ = 0;
    std::uint64_t vocab_hash_ = 0;
    std::vector<double> weights_;
};

/// Zero-initialised policy sized for the given vocabulary.
PolicySnapshot make_policy(const Vocabulary& vocab, std::size_t context_window = 4,
                           std::size_t feature_count = 4096);

/// Bucket of the last `context_window` tokens of `context`. When the context is
/// shorter than the window every token is hashed, together with the length.
std::size_t featurize(std::span<const Token> context, std::size_t context_window,
                      std::size_t feature_count);
std::size_t featurize(const MdpState& state, std::size_t context_window,
                      std::size_t feature_count);

struct TokenDistribution {
    std::vector<double> probabilities;
    std::vector<double> log_probabilities;
};

/// Numerically stable softmax of a logit row.
TokenDistribution softmax(std::span<const double> logits);

TokenDistribution distribution(const PolicySnapshot& policy, std::span<const Token> context);
TokenDistribution distribution(const PolicySnapshot& policy, const MdpState& state);

/// log pi(token | context).
double log_prob(const PolicySnapshot& policy, std::span<const Token> context, Token token);

/// log pi(o_t | q, o_<t) for every t.
std::vector<double> sequence_log_probs(const PolicySnapshot& policy,
                                       std::span<const Token> question,
                                       std::span<const Token> output);

struct SamplingParams {
    double temperature = 0.8;
    double top_p = 0.95;
    std::size_t max_len = 64;
};

/// Autoregressive sampling until EOS or max_len. Temperature zero decodes
/// greedily. Recorded log-probs are those of the untempered policy, which is
/// what the probability ratios are taken against.
Trajectory sample_trajectory(const PolicySnapshot& policy, const Vocabulary& vocab,
                             std::span<const Token> question, const SamplingParams& params,
                             Rng& rng);

/// Argmax decoding, ties broken by lowest token id.
Trajectory greedy_decode(const PolicySnapshot& policy, const Vocabulary& vocab,
                         std::span<const Token> question, std::size_t max_len);

/// Gradient of log pi(token | state) with respect to the weights. Only one
/// row is nonzero; entry v equals 1[v == token] - p_v.
struct RowGradient {
    std::size_t row = 0;
    std::vector<double> values;
};

RowGradient grad_log_prob(const PolicySnapshot& policy, std::span<const Token> context,
                          Token token);
RowGradient grad_log_prob(const PolicySnapshot& policy, const MdpState& state, Token token);

// Checkpoint: JSON header {h, F, V, vocab_hash} plus the F x V weights.
void save_checkpoint(const PolicySnapshot& policy, const std::string& path);
PolicySnapshot load_checkpoint(const std::string& path);

} // namespace tapo
