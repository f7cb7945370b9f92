#include "tapo/mcts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include <json.hpp>

#include "tapo/error.hpp"

namespace tapo::mcts {

TerminalValue parse_terminal_value(std::string_view s)
{
    if (s == "verifier")
        return TerminalValue::Verifier;
    if (s == "consistency")
        return TerminalValue::Consistency;
    throw ConfigError("terminal_value must be 'verifier' or 'consistency', got '" +
                      std::string(s) + "'");
}

void SearchParams::validate() const
{
    if (!(exploration_weight >= 0.0))
        throw ParameterError("exploration weight must be >= 0");
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw ParameterError("alpha must lie in (0, 1]");
    if (!(consistency_threshold > 0.0 && consistency_threshold <= 1.0))
        throw ParameterError("consistency threshold must lie in (0, 1]");
    if (n_children < 1 || n_children > kNumActions)
        throw ParameterError("n_children must lie in [1, 5]");
    if (max_depth < 1)
        throw ParameterError("max_depth must be >= 1");
    if (n_samples < 1)
        throw ParameterError("n_samples must be >= 1");
    if (iterations < 1)
        throw ParameterError("iterations must be >= 1");
}

SearchTree::SearchTree(ReasoningTask task) : task_(std::move(task)), vocab_(task_.modulus)
{
    nodes_.emplace_back();
}

std::size_t SearchTree::add_child(std::size_t parent, TreeNode child)
{
    child.parent = parent;
    child.depth = nodes_[parent].depth + 1;
    nodes_.push_back(std::move(child));
    const std::size_t id = nodes_.size() - 1;
    auto& siblings = nodes_[parent].children;
    auto pos = std::upper_bound(siblings.begin(), siblings.end(), id, [&](std::size_t a, std::size_t b) {
        return *nodes_[a].action_in < *nodes_[b].action_in;
    });
    siblings.insert(pos, id);
    return id;
}

std::vector<Action> SearchTree::actions_to(std::size_t id) const
{
    std::vector<Action> actions;
    for (std::optional<std::size_t> n = id; n && nodes_[*n].action_in; n = nodes_[*n].parent)
        actions.push_back(*nodes_[*n].action_in);
    std::reverse(actions.begin(), actions.end());
    return actions;
}

std::vector<Token> SearchTree::context(std::size_t id) const
{
    std::vector<std::size_t> chain;
    for (std::optional<std::size_t> n = id; n && nodes_[*n].action_in; n = nodes_[*n].parent)
        chain.push_back(*n);
    std::vector<Token> ctx = task_.question_tokens;
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
        const auto& node = nodes_[*it];
        ctx.push_back(vocab_.action(*node.action_in));
        ctx.insert(ctx.end(), node.partial_solution_tokens.begin(),
                   node.partial_solution_tokens.end());
    }
    return ctx;
}

bool SearchTree::is_terminal(std::size_t id, std::size_t max_depth) const
{
    return nodes_[id].depth >= max_depth || nodes_[id].answer_bearing;
}

double uct_score(double q_value, std::size_t visits, std::size_t parent_visits, double w)
{
    if (visits == 0)
        return std::numeric_limits<double>::infinity();
    const double n_parent = static_cast<double>(std::max<std::size_t>(parent_visits, 1));
    return q_value + w * std::sqrt(std::log(n_parent) / static_cast<double>(visits));
}

double uct_score(const TreeNode& node, std::size_t parent_visits, double w)
{
    return uct_score(node.q_value, node.visits, parent_visits, w);
}

std::vector<std::size_t> select(const SearchTree& tree, double w, std::size_t max_depth)
{
    std::vector<std::size_t> path{tree.root()};
    for (;;) {
        const auto& node = tree.node(path.back());
        if (!node.expanded || node.children.empty() || tree.is_terminal(path.back(), max_depth))
            return path;
        std::size_t best = node.children.front();
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t c : node.children) {
            const double s = uct_score(tree.node(c), node.visits, w);
            if (s > best_score) {
                best = c;
                best_score = s;
            }
        }
        path.push_back(best);
    }
}

namespace {

struct StepSample {
    std::vector<Token> tokens;
    bool answer_bearing = false;
};

/// Up to `budget` policy tokens after `context`. EOS ends the segment and is
/// dropped; an answer marker ends it after the following token.
StepSample sample_step_tokens(const PolicySnapshot& policy, const Vocabulary& vocab,
                              std::vector<Token> context, std::size_t budget,
                              const SamplingParams& sampling, Rng& rng)
{
    StepSample out;
    if (budget == 0)
        return out;
    SamplingParams p = sampling;
    p.max_len = 1;
    while (out.tokens.size() < budget) {
        const Token t = sample_trajectory(policy, vocab, context, p, rng).output_tokens.front();
        if (t == vocab.eos())
            break;
        out.tokens.push_back(t);
        context.push_back(t);
        if (t == vocab.answer_marker()) {
            const Token next = sample_trajectory(policy, vocab, context, p, rng).output_tokens.front();
            if (vocab.is_digit(next)) {
                out.tokens.push_back(next);
                out.answer_bearing = true;
            }
            break;
        }
    }
    return out;
}

} // namespace

std::vector<std::size_t> expand(SearchTree& tree, std::size_t id, const PolicySnapshot& policy,
                                const SearchParams& params, Rng& rng)
{
    if (tree.is_terminal(id, params.max_depth))
        throw ExpansionError("cannot expand a terminal node");
    if (tree.node(id).expanded)
        throw ExpansionError("node already expanded");

    std::vector<Action> actions(kAllActions.begin(), kAllActions.end());
    if (params.n_children < kNumActions) {
        for (std::size_t i = 0; i < params.n_children; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng.below(kNumActions - i));
            std::swap(actions[i], actions[j]);
        }
        actions.resize(params.n_children);
        std::sort(actions.begin(), actions.end());
    }

    const auto base_context = tree.context(id);
    const HintCursor base_cursor = tree.node(id).cursor;
    std::vector<std::size_t> created;
    for (Action a : actions) {
        TreeNode child;
        child.action_in = a;
        child.cursor = base_cursor;
        child.partial_solution_tokens = hint_tokens(tree.vocab(), tree.task(), a, child.cursor);
        auto ctx = base_context;
        ctx.push_back(tree.vocab().action(a));
        ctx.insert(ctx.end(), child.partial_solution_tokens.begin(),
                   child.partial_solution_tokens.end());
        auto step = sample_step_tokens(policy, tree.vocab(), std::move(ctx), params.step_tokens,
                                       params.sampling, rng);
        child.partial_solution_tokens.insert(child.partial_solution_tokens.end(),
                                             step.tokens.begin(), step.tokens.end());
        child.answer_bearing = step.answer_bearing;
        created.push_back(tree.add_child(id, std::move(child)));
    }
    tree.node(id).expanded = true;
    return created;
}

Consistency self_consistency(std::span<const std::optional<int>> answers)
{
    Consistency c;
    if (answers.empty())
        return c;
    std::map<int, std::size_t> counts;
    for (const auto& a : answers)
        if (a)
            ++counts[*a];
    std::size_t best = 0;
    for (const auto& [answer, n] : counts) {
        if (n > best) {
            best = n;
            c.majority = answer;
        }
    }
    c.score = static_cast<double>(best) / static_cast<double>(answers.size());
    return c;
}

SimulationResult simulate(const SearchTree& tree, std::size_t id, const PolicySnapshot& policy,
                          const SearchParams& params, Rng& rng)
{
    const auto& vocab = tree.vocab();
    const auto& task = tree.task();
    const auto& start = tree.node(id);
    SimulationResult result;

    auto finish = [&](const Consistency& c) {
        result.consistency = c;
        if (params.terminal_value == TerminalValue::Consistency)
            result.value = c.score;
        else
            result.value = c.majority && *c.majority == task.answer ? 1.0 : 0.0;
        return result;
    };

    if (start.answer_bearing) {
        const auto answer = extract_answer(vocab, start.partial_solution_tokens);
        const std::optional<int> answers[] = {answer};
        result.early_stop = true;
        return finish(self_consistency(answers));
    }

    auto ctx = tree.context(id);
    HintCursor cursor = start.cursor;
    std::size_t depth = start.depth;
    std::vector<std::optional<int>> answers(params.n_samples);
    for (;;) {
        for (auto& a : answers)
            a = extract_answer(vocab,
                               sample_trajectory(policy, vocab, ctx, params.sampling, rng).output_tokens);
        const auto c = self_consistency(answers);
        if (c.score > params.consistency_threshold) {
            result.early_stop = true;
            return finish(c);
        }
        if (depth >= params.max_depth)
            return finish(c);

        const Action a = kAllActions[rng.below(kNumActions)];
        auto content = hint_tokens(vocab, task, a, cursor);
        ctx.push_back(vocab.action(a));
        ctx.insert(ctx.end(), content.begin(), content.end());
        auto step = sample_step_tokens(policy, vocab, ctx, params.step_tokens, params.sampling, rng);
        ctx.insert(ctx.end(), step.tokens.begin(), step.tokens.end());
        content.insert(content.end(), step.tokens.begin(), step.tokens.end());
        result.actions.push_back(a);
        result.contents.push_back(std::move(content));
        ++depth;
        if (step.answer_bearing) {
            const std::optional<int> own[] = {extract_answer(vocab, step.tokens)};
            result.early_stop = true;
            return finish(self_consistency(own));
        }
    }
}

void backpropagate(SearchTree& tree, std::span<const std::size_t> path, double leaf_value,
                   double alpha)
{
    if (path.empty())
        return;
    if (!(alpha > 0.0 && alpha <= 1.0))
        throw ParameterError("alpha must lie in (0, 1]");
    auto& leaf = tree.node(path.back());
    leaf.q_value = leaf.visits == 0 ? leaf_value : (1.0 - alpha) * leaf.q_value + alpha * leaf_value;
    ++leaf.visits;
    for (std::size_t k = path.size() - 1; k > 0; --k) {
        auto& parent = tree.node(path[k - 1]);
        const auto& child = tree.node(path[k]);
        parent.q_value = (1.0 - alpha) * parent.q_value + alpha * child.q_value;
        ++parent.visits;
    }
}

SearchResult search(const ReasoningTask& task, const PolicySnapshot& policy,
                    const SearchParams& params, Rng& rng)
{
    params.validate();
    SearchResult result{SearchTree(task), {}};
    auto& tree = result.tree;
    result.traces.reserve(params.iterations);

    for (std::size_t it = 0; it < params.iterations; ++it) {
        auto path = select(tree, params.exploration_weight, params.max_depth);
        const std::size_t leaf = path.back();
        if (!tree.is_terminal(leaf, params.max_depth) &&
            (leaf == tree.root() || tree.node(leaf).visits > 0)) {
            const auto children = expand(tree, leaf, policy, params, rng);
            path.push_back(children.front());
        }
        const auto sim = simulate(tree, path.back(), policy, params, rng);
        backpropagate(tree, path, sim.value, params.alpha);

        SolutionTrace trace;
        trace.question = task.question_tokens;
        for (std::size_t k = 1; k < path.size(); ++k) {
            const auto& n = tree.node(path[k]);
            trace.action_sequence.push_back(*n.action_in);
            trace.node_contents.push_back(n.partial_solution_tokens);
        }
        trace.action_sequence.insert(trace.action_sequence.end(), sim.actions.begin(),
                                     sim.actions.end());
        trace.node_contents.insert(trace.node_contents.end(), sim.contents.begin(),
                                   sim.contents.end());
        trace.final_reward = sim.value;
        if (!trace.action_sequence.empty())
            result.traces.push_back(std::move(trace));
    }
    return result;
}

void dump_tree(const SearchTree& tree, std::ostream& out)
{
    nlohmann::json nodes = nlohmann::json::array();
    for (std::size_t id = 0; id < tree.size(); ++id) {
        const auto& n = tree.node(id);
        nodes.push_back({{"id", id},
                         {"parent", n.parent ? nlohmann::json(*n.parent) : nlohmann::json(nullptr)},
                         {"action", n.action_in ? nlohmann::json(std::string(action_name(*n.action_in)))
                                                : nlohmann::json(nullptr)},
                         {"Q", n.q_value},
                         {"N", n.visits},
                         {"depth", n.depth},
                         {"tokens", n.partial_solution_tokens}});
    }
    out << nlohmann::json{{"nodes", nodes}}.dump(2) << '\n';
}

} // namespace tapo::mcts
