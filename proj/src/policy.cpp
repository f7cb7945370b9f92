#include "tapo/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "tapo/error.hpp"

namespace tapo {

PolicySnapshot::PolicySnapshot(std::size_t context_window, std::size_t feature_count,
                               std::size_t vocab_size, std::uint64_t vocab_hash)
    : context_window_(context_window), feature_count_(feature_count), vocab_size_(vocab_size),
      vocab_hash_(vocab_hash), weights_(feature_count * vocab_size, 0.0)
{
    if (context_window == 0)
        throw ParameterError("context window must be >= 1");
    if (feature_count == 0 || vocab_size == 0)
        throw ParameterError("policy needs at least one feature bucket and one token");
}

std::span<double> PolicySnapshot::row(std::size_t bucket)
{
    return {weights_.data() + bucket * vocab_size_, vocab_size_};
}

std::span<const double> PolicySnapshot::row(std::size_t bucket) const
{
    return {weights_.data() + bucket * vocab_size_, vocab_size_};
}

bool PolicySnapshot::all_finite() const
{
    return std::all_of(weights_.begin(), weights_.end(), [](double w) { return std::isfinite(w); });
}

PolicySnapshot make_policy(const Vocabulary& vocab, std::size_t context_window,
                           std::size_t feature_count)
{
    return PolicySnapshot(context_window, feature_count, vocab.size(), vocab.hash());
}

std::size_t featurize(std::span<const Token> context, std::size_t context_window,
                      std::size_t feature_count)
{
    const std::size_t n = std::min(context_window, context.size());
    std::uint64_t h = 0xcbf29ce484222325ULL ^ n;
    for (Token t : context.last(n)) {
        auto u = static_cast<std::uint32_t>(t);
        for (int b = 0; b < 4; ++b) {
            h ^= (u >> (8 * b)) & 0xffU;
            h *= 0x100000001b3ULL;
        }
    }
    return static_cast<std::size_t>(mix64(h) % feature_count);
}

std::size_t featurize(const MdpState& state, std::size_t context_window, std::size_t feature_count)
{
    std::vector<Token> context = state.question_tokens;
    context.insert(context.end(), state.generated_tokens.begin(), state.generated_tokens.end());
    return featurize(context, context_window, feature_count);
}

TokenDistribution softmax(std::span<const double> logits)
{
    TokenDistribution d;
    const double top = *std::max_element(logits.begin(), logits.end());
    d.probabilities.resize(logits.size());
    d.log_probabilities.resize(logits.size());
    double sum = 0.0;
    for (std::size_t v = 0; v < logits.size(); ++v) {
        d.probabilities[v] = std::exp(logits[v] - top);
        sum += d.probabilities[v];
    }
    const double log_sum = std::log(sum);
    for (std::size_t v = 0; v < logits.size(); ++v) {
        d.probabilities[v] /= sum;
        d.log_probabilities[v] = logits[v] - top - log_sum;
    }
    return d;
}

TokenDistribution distribution(const PolicySnapshot& policy, std::span<const Token> context)
{
    return softmax(
        policy.row(featurize(context, policy.context_window(), policy.feature_count())));
}

TokenDistribution distribution(const PolicySnapshot& policy, const MdpState& state)
{
    return softmax(policy.row(featurize(state, policy.context_window(), policy.feature_count())));
}

double log_prob(const PolicySnapshot& policy, std::span<const Token> context, Token token)
{
    const auto logits =
        policy.row(featurize(context, policy.context_window(), policy.feature_count()));
    const double top = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double l : logits)
        sum += std::exp(l - top);
    return logits[static_cast<std::size_t>(token)] - top - std::log(sum);
}

std::vector<double> sequence_log_probs(const PolicySnapshot& policy,
                                       std::span<const Token> question,
                                       std::span<const Token> output)
{
    std::vector<Token> context(question.begin(), question.end());
    context.reserve(question.size() + output.size());
    std::vector<double> out;
    out.reserve(output.size());
    for (Token t : output) {
        out.push_back(log_prob(policy, context, t));
        context.push_back(t);
    }
    return out;
}

namespace {

Token argmax_lowest(std::span<const double> values)
{
    std::size_t best = 0;
    for (std::size_t v = 1; v < values.size(); ++v)
        if (values[v] > values[best])
            best = v;
    return static_cast<Token>(best);
}

Token sample_token(std::span<const double> logits, const SamplingParams& params, Rng& rng)
{
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& l : scaled)
        l /= params.temperature;
    const auto probs = softmax(scaled).probabilities;

    if (params.top_p >= 1.0) {
        const double u = rng.uniform();
        double cum = 0.0;
        for (std::size_t v = 0; v < probs.size(); ++v) {
            cum += probs[v];
            if (u < cum)
                return static_cast<Token>(v);
        }
        return static_cast<Token>(probs.size() - 1);
    }

    std::vector<std::size_t> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
    std::size_t keep = 0;
    double mass = 0.0;
    while (keep < order.size()) {
        mass += probs[order[keep++]];
        if (mass >= params.top_p)
            break;
    }
    const double u = rng.uniform() * mass;
    double cum = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        cum += probs[order[i]];
        if (u < cum)
            return static_cast<Token>(order[i]);
    }
    return static_cast<Token>(order[keep - 1]);
}

} // namespace

Trajectory sample_trajectory(const PolicySnapshot& policy, const Vocabulary& vocab,
                             std::span<const Token> question, const SamplingParams& params,
                             Rng& rng)
{
    if (params.temperature < 0.0)
        throw ParameterError("temperature must be >= 0");
    if (!(params.top_p > 0.0 && params.top_p <= 1.0))
        throw ParameterError("top_p must lie in (0, 1]");
    if (params.temperature == 0.0)
        return greedy_decode(policy, vocab, question, params.max_len);

    Trajectory traj;
    traj.question_tokens.assign(question.begin(), question.end());
    std::vector<Token> context(question.begin(), question.end());
    while (traj.output_tokens.size() < params.max_len) {
        const auto logits =
            policy.row(featurize(context, policy.context_window(), policy.feature_count()));
        const Token t = sample_token(logits, params, rng);
        traj.log_probs.push_back(softmax(logits).log_probabilities[static_cast<std::size_t>(t)]);
        traj.output_tokens.push_back(t);
        context.push_back(t);
        if (t == vocab.eos())
            break;
    }
    return traj;
}

Trajectory greedy_decode(const PolicySnapshot& policy, const Vocabulary& vocab,
                         std::span<const Token> question, std::size_t max_len)
{
    Trajectory traj;
    traj.question_tokens.assign(question.begin(), question.end());
    std::vector<Token> context(question.begin(), question.end());
    while (traj.output_tokens.size() < max_len) {
        const auto logits =
            policy.row(featurize(context, policy.context_window(), policy.feature_count()));
        const Token t = argmax_lowest(logits);
        traj.log_probs.push_back(softmax(logits).log_probabilities[static_cast<std::size_t>(t)]);
        traj.output_tokens.push_back(t);
        context.push_back(t);
        if (t == vocab.eos())
            break;
    }
    return traj;
}

RowGradient grad_log_prob(const PolicySnapshot& policy, std::span<const Token> context,
                          Token token)
{
    if (token < 0 || static_cast<std::size_t>(token) >= policy.vocab_size())
        throw ParameterError("token id " + std::to_string(token) + " outside vocabulary");
    RowGradient g;
    g.row = featurize(context, policy.context_window(), policy.feature_count());
    g.values = softmax(policy.row(g.row)).probabilities;
    for (double& v : g.values)
        v = -v;
    g.values[static_cast<std::size_t>(token)] += 1.0;
    return g;
}

RowGradient grad_log_prob(const PolicySnapshot& policy, const MdpState& state, Token token)
{
    std::vector<Token> context = state.question_tokens;
    context.insert(context.end(), state.generated_tokens.begin(), state.generated_tokens.end());
    return grad_log_prob(policy, context, token);
}

void save_checkpoint(const PolicySnapshot& policy, const std::string& path)
{
    nlohmann::json j{{"format", "tapo-policy"},
                     {"version", 1},
                     {"h", policy.context_window()},
                     {"F", policy.feature_count()},
                     {"V", policy.vocab_size()},
                     {"vocab_hash", policy.vocab_hash()},
                     {"weights", policy.weights()}};
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    out << j.dump() << '\n';
}

PolicySnapshot load_checkpoint(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError("cannot open checkpoint " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("checkpoint " + path + ": " + e.what());
    }
    for (const char* key : {"format", "version", "h", "F", "V", "vocab_hash", "weights"})
        if (!j.contains(key))
            throw ParseError("checkpoint " + path + ": missing field '" + key + "'");
    if (j["format"] != "tapo-policy" || j["version"] != 1)
        throw ParseError("checkpoint " + path + ": unsupported format or version");
    PolicySnapshot policy(j["h"].get<std::size_t>(), j["F"].get<std::size_t>(),
                          j["V"].get<std::size_t>(), j["vocab_hash"].get<std::uint64_t>());
    auto weights = j["weights"].get<std::vector<double>>();
    if (weights.size() != policy.weights().size())
        throw ParseError("checkpoint " + path + ": field 'weights' has " +
                         std::to_string(weights.size()) + " entries, expected F*V = " +
                         std::to_string(policy.weights().size()));
    policy.weights() = std::move(weights);
    if (!policy.all_finite())
        throw ParseError("checkpoint " + path + ": non-finite weight");
    return policy;
}

} // namespace tapo
