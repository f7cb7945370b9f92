#include <doctest.h>

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "helpers.hpp"
#include <set>

#include "tapo/error.hpp"
#include "tapo/mcts.hpp"

using namespace tapo;
using namespace tapo::mcts;

TEST_CASE("uct score")
{
    CHECK(std::abs(uct_score(0.5, 2, 10, 1.0) - (0.5 + std::sqrt(std::log(10.0) / 2.0))) < 1e-12);
    CHECK(std::abs(uct_score(0.5, 2, 10, 1.0) - 1.5729) < 1e-4);
    CHECK(std::isinf(uct_score(0.0, 0, 10, 1.0)));
    CHECK(uct_score(0.3, 4, 1, 1.0) == 0.3);
    CHECK(uct_score(0.3, 4, 9, 0.0) == 0.3);
}

TEST_CASE("backpropagation rule")
{
    SearchTree tree(generate_task(3, 10, 1));
    TreeNode child;
    child.action_in = Action::DC;
    const auto c = tree.add_child(tree.root(), child);
    tree.node(tree.root()).q_value = 0.4;
    tree.node(c).q_value = 0.8;
    tree.node(c).visits = 1;
    const std::size_t path[] = {tree.root(), c};
    backpropagate(tree, path, 0.8, 0.5);
    CHECK(tree.node(c).q_value == 0.8);
    // 0.4 and 0.8 are not representable; the result is within one ulp of 0.6.
    CHECK(std::abs(tree.node(tree.root()).q_value - 0.6) <= 0x1p-52);
    CHECK(tree.node(tree.root()).visits == 1);
    CHECK(tree.node(c).visits == 2);

    SearchTree fresh(generate_task(3, 10, 1));
    const auto d = fresh.add_child(fresh.root(), child);
    const std::size_t p2[] = {fresh.root(), d};
    backpropagate(fresh, p2, 1.0, 0.5);
    CHECK(fresh.node(d).q_value == 1.0);
    CHECK(fresh.node(fresh.root()).q_value == 0.5);

    // Dyadic values are reproduced exactly.
    SearchTree dy(generate_task(3, 10, 1));
    const auto e = dy.add_child(dy.root(), child);
    dy.node(dy.root()).q_value = 0.375;
    dy.node(e).q_value = 0.875;
    dy.node(e).visits = 1;
    const std::size_t p3[] = {dy.root(), e};
    backpropagate(dy, p3, 0.875, 0.5);
    CHECK(dy.node(dy.root()).q_value == 0.625);
}

TEST_CASE("self-consistency")
{
    const std::optional<int> a[] = {3, 3, 5, std::nullopt};
    const auto c = self_consistency(a);
    CHECK(c.score == 0.5);
    CHECK(c.majority == 3);
    const std::optional<int> tie[] = {7, 2, 7, 2};
    CHECK(self_consistency(tie).majority == 2);
    const std::optional<int> none[] = {std::nullopt, std::nullopt};
    CHECK(self_consistency(none).score == 0.0);
    CHECK_FALSE(self_consistency(none).majority.has_value());
}

TEST_CASE("expansion")
{
    const Vocabulary v(10);
    const auto p = make_policy(v);
    SearchParams params;
    Rng rng(1);
    SearchTree tree(generate_task(3, 10, 2));
    const auto kids = expand(tree, tree.root(), p, params, rng);
    REQUIRE(kids.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(tree.node(kids[i]).action_in == kAllActions[i]);
        CHECK(tree.node(kids[i]).depth == 1);
        CHECK(tree.node(kids[i]).parent == tree.root());
    }
    CHECK_THROWS_AS(expand(tree, tree.root(), p, params, rng), ExpansionError);

    params.n_children = 2;
    SearchTree small(generate_task(3, 10, 2));
    const auto two = expand(small, small.root(), p, params, rng);
    REQUIRE(two.size() == 2);
    CHECK(*small.node(two[0]).action_in < *small.node(two[1]).action_in);

    params.max_depth = 1;
    CHECK_THROWS_AS(expand(tree, kids[0], p, params, rng), ExpansionError);
}

TEST_CASE("full expansion to depth two enumerates 31 nodes")
{
    const Vocabulary v(10);
    const auto p = make_policy(v);
    SearchParams params;
    params.max_depth = 2;
    Rng rng(1);
    SearchTree tree(generate_task(4, 10, 3));
    for (std::size_t id : expand(tree, tree.root(), p, params, rng))
        expand(tree, id, p, params, rng);
    CHECK(tree.size() == 31);
    std::set<std::vector<Action>> paths;
    for (std::size_t id = 0; id < tree.size(); ++id)
        if (tree.node(id).depth == 2)
            paths.insert(tree.actions_to(id));
    CHECK(paths.size() == 25);
}

TEST_CASE("selection prefers unvisited children then uct")
{
    const Vocabulary v(10);
    const auto p = make_policy(v);
    SearchParams params;
    Rng rng(1);
    SearchTree tree(generate_task(3, 10, 5));
    const auto kids = expand(tree, tree.root(), p, params, rng);
    tree.node(tree.root()).visits = 3;
    tree.node(kids[0]).visits = 1;
    auto path = select(tree, 1.0, params.max_depth);
    CHECK(path == std::vector<std::size_t>{tree.root(), kids[1]});
    for (auto k : kids)
        tree.node(k).visits = 1;
    tree.node(kids[3]).q_value = 0.9;
    path = select(tree, 1.0, params.max_depth);
    CHECK(path.back() == kids[3]);
}

TEST_CASE("search invariants")
{
    const Vocabulary v(10);
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = testing::random_policy(v, 2.0, rng.next());
        SearchParams params;
        params.iterations = 1 + rng.below(40);
        params.n_children = 1 + rng.below(5);
        params.max_depth = 1 + rng.below(4);
        params.step_tokens = rng.below(3);
        const auto task = generate_task(1 + static_cast<int>(rng.below(5)), 10, rng.next());
        Rng a(trial), b(trial);
        const auto r = search(task, p, params, a);
        CHECK(r.tree.node(r.tree.root()).visits == params.iterations);
        for (std::size_t id = 0; id < r.tree.size(); ++id) {
            const auto& n = r.tree.node(id);
            CHECK(n.q_value >= 0.0);
            CHECK(n.q_value <= 1.0);
            CHECK(n.depth <= params.max_depth);
            std::size_t child_visits = 0;
            for (auto c : n.children)
                child_visits += r.tree.node(c).visits;
            CHECK(child_visits <= n.visits);
        }
        CHECK(r.traces.size() == params.iterations);
        for (const auto& t : r.traces) {
            CHECK(t.action_sequence.size() == t.node_contents.size());
            CHECK(t.complexity() >= 1);
            CHECK((t.final_reward == 0.0 || t.final_reward == 1.0));
        }
        const auto again = search(task, p, params, b);
        CHECK(again.tree.size() == r.tree.size());
        CHECK(again.traces.size() == r.traces.size());
        for (std::size_t i = 0; i < r.traces.size(); ++i)
            CHECK(again.traces[i].action_sequence == r.traces[i].action_sequence);
    }
}

TEST_CASE("a confident policy stops simulation early")
{
    const Vocabulary v(10);
    const auto task = make_task(3, {{Operator::Add, 4}}, 10);
    auto p = make_policy(v, 4, 4096);
    auto ctx = task.question_tokens;
    p.row(featurize(ctx, 4, 4096))[v.answer_marker()] = 40.0;
    ctx.push_back(v.answer_marker());
    p.row(featurize(ctx, 4, 4096))[v.digit(7)] = 40.0;
    ctx.push_back(v.digit(7));
    p.row(featurize(ctx, 4, 4096))[v.eos()] = 40.0;

    SearchTree tree(task);
    SearchParams params;
    Rng rng(1);
    const auto sim = simulate(tree, tree.root(), p, params, rng);
    CHECK(sim.early_stop);
    CHECK(sim.actions.empty());
    CHECK(sim.value == 1.0);
    CHECK(sim.consistency.score == 1.0);

    params.terminal_value = TerminalValue::Consistency;
    CHECK(simulate(tree, tree.root(), p, params, rng).value == 1.0);
}

TEST_CASE("tree dump")
{
    const Vocabulary v(10);
    SearchParams params;
    params.iterations = 6;
    Rng rng(2);
    const auto r = search(generate_task(3, 10, 1), make_policy(v), params, rng);
    std::stringstream ss;
    dump_tree(r.tree, ss);
    const auto j = nlohmann::json::parse(ss.str());
    CHECK(j.at("nodes").size() == r.tree.size());
    CHECK(j.at("nodes")[0].at("parent").is_null());
    CHECK(j.at("nodes")[0].at("N") == 6);
}

TEST_CASE("search parameter validation")
{
    SearchParams p;
    p.alpha = 0.0;
    CHECK_THROWS_AS(p.validate(), ParameterError);
    p = {};
    p.n_children = 6;
    CHECK_THROWS_AS(p.validate(), ParameterError);
    CHECK(parse_terminal_value("consistency") == TerminalValue::Consistency);
    CHECK_THROWS_AS(parse_terminal_value("other"), ConfigError);
}
