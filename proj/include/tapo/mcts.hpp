#pragma once

// Monte Carlo tree search over the five abstract reasoning actions: UCT
// selection, policy-driven expansion, simulation with self-consistency early
// termination, and exponential-moving-average backpropagation.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/policy.hpp"
#include "tapo/rng.hpp"

namespace tapo::mcts {

enum class TerminalValue {
    Verifier,    // ground-truth reward of the majority answer
    Consistency, // majority fraction itself, no supervision
};

TerminalValue parse_terminal_value(std::string_view s);

struct SearchParams {
    double exploration_weight = 1.0;    // w
    double alpha = 0.5;                 // backprop mixing factor
    double consistency_threshold = 0.8; // c
    std::size_t n_children = 5;
    std::size_t max_depth = 4;
    std::size_t n_samples = 4;
    std::size_t iterations = 32;
    /// Policy tokens appended to each node after its environment hint.
    std::size_t step_tokens = 0;
    TerminalValue terminal_value = TerminalValue::Verifier;
    /// Decoding used for simulated completions and step tokens.
    SamplingParams sampling{0.8, 0.95, 16};

    void validate() const;
};

struct TreeNode {
    std::optional<Action> action_in; // empty at the root
    std::vector<Token> partial_solution_tokens;
    double q_value = 0.0;
    std::size_t visits = 0;
    std::vector<std::size_t> children; // ascending action id
    std::size_t depth = 0;
    std::optional<std::size_t> parent;
    HintCursor cursor;
    bool expanded = false;
    /// Step tokens contained an answer; the node ends its branch.
    bool answer_bearing = false;
};

class SearchTree {
public:
    explicit SearchTree(ReasoningTask task);

    const ReasoningTask& task() const { return task_; }
    const Vocabulary& vocab() const { return vocab_; }

    std::size_t root() const { return 0; }
    std::size_t size() const { return nodes_.size(); }
    TreeNode& node(std::size_t id) { return nodes_[id]; }
    const TreeNode& node(std::size_t id) const { return nodes_[id]; }
    std::span<const TreeNode> nodes() const { return nodes_; }

    std::size_t add_child(std::size_t parent, TreeNode child);

    /// Actions from the root down to `id`.
    std::vector<Action> actions_to(std::size_t id) const;
    /// [question, a_1, n_1, ..., a_l, n_l] for the path ending at `id`.
    std::vector<Token> context(std::size_t id) const;

    bool is_terminal(std::size_t id, std::size_t max_depth) const;

private:
    ReasoningTask task_;
    Vocabulary vocab_;
    std::vector<TreeNode> nodes_;
};

/// One root-to-terminal path with its terminal value R(t | s).
struct SolutionTrace {
    std::vector<Token> question;
    std::vector<Action> action_sequence;
    std::vector<std::vector<Token>> node_contents;
    double final_reward = 0.0;

    std::size_t complexity() const { return action_sequence.size(); }
};

/// Q + w * sqrt(ln N(parent) / N(node)). Requires visits >= 1.
double uct_score(double q_value, std::size_t visits, std::size_t parent_visits, double w);
double uct_score(const TreeNode& node, std::size_t parent_visits, double w);

/// Path from the root to the leaf chosen by UCT descent. Unvisited children
/// are taken first; ties go to the lowest action id.
std::vector<std::size_t> select(const SearchTree& tree, double w, std::size_t max_depth);

/// Adds up to n_children children to `id` and returns their ids.
std::vector<std::size_t> expand(SearchTree& tree, std::size_t id, const PolicySnapshot& policy,
                                const SearchParams& params, Rng& rng);

struct Consistency {
    double score = 0.0; // majority fraction over all samples
    std::optional<int> majority;
};

/// Majority fraction among the extracted answers. Samples without an answer
/// count in the denominator only; equal counts resolve to the smaller residue.
Consistency self_consistency(std::span<const std::optional<int>> answers);

struct SimulationResult {
    double value = 0.0;
    Consistency consistency;
    bool early_stop = false;
    /// Actions and contents appended below the starting node.
    std::vector<Action> actions;
    std::vector<std::vector<Token>> contents;
};

SimulationResult simulate(const SearchTree& tree, std::size_t id, const PolicySnapshot& policy,
                          const SearchParams& params, Rng& rng);

/// Leaf: N += 1 and Q moves toward `leaf_value` (set outright on the first
/// visit). Every ancestor p of a node s on the path: N(p) += 1 and
/// Q(p) <- (1 - alpha) Q(p) + alpha Q(s).
void backpropagate(SearchTree& tree, std::span<const std::size_t> path, double leaf_value,
                   double alpha);

struct SearchResult {
    SearchTree tree;
    std::vector<SolutionTrace> traces; // one per iteration
};

SearchResult search(const ReasoningTask& task, const PolicySnapshot& policy,
                    const SearchParams& params, Rng& rng);

/// JSON {"nodes": [{id, parent, action, Q, N, depth, tokens}]}.
void dump_tree(const SearchTree& tree, std::ostream& out);

} // namespace tapo::mcts
