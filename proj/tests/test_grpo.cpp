#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "tapo/error.hpp"
#include "tapo/grpo.hpp"

using namespace tapo;

namespace {

GrpoConfig standard()
{
    GrpoConfig c;
    c.advantage_mode = AdvantageMode::Standard;
    return c;
}

// Builds a group whose recorded old log-probs are chosen directly.
RolloutGroup synthetic_group(const std::vector<std::vector<double>>& old_lp,
                             const std::vector<int>& rewards)
{
    RolloutGroup g;
    g.question = {18};
    for (std::size_t i = 0; i < old_lp.size(); ++i) {
        Trajectory t;
        t.question_tokens = g.question;
        t.output_tokens.assign(old_lp[i].size(), 0);
        t.log_probs = old_lp[i];
        t.reward = rewards[i];
        g.trajectories.push_back(t);
    }
    return g;
}

} // namespace

TEST_CASE("advantages on the reference example")
{
    const double r[] = {1, 0, 0, 1};
    const auto a = compute_advantages(r, standard());
    CHECK(a.values == std::vector<double>{1, -1, -1, 1});

    const auto d = compute_advantages(r, GrpoConfig{});
    CHECK(d.values == std::vector<double>{0.5, -0.5, -0.5, 0.5});
}

TEST_CASE("degenerate and invalid groups")
{
    const double same[] = {1, 1, 1};
    for (double x : compute_advantages(same, standard()).values)
        CHECK(x == 0.0);
    for (double x : compute_advantages(same, GrpoConfig{}).values)
        CHECK(x == 0.0);
    const double one[] = {1};
    CHECK_THROWS_AS(compute_advantages(one, standard()), GroupSizeError);
    CHECK_THROWS_AS(compute_advantages({}, standard()), GroupSizeError);
}

TEST_CASE("standard advantages are standardised")
{
    Rng rng(12);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<double> r(2 + rng.below(15));
        for (double& x : r)
            x = rng.uniform() < 0.5 ? 1.0 : 0.0;
        r[0] = 1.0;
        r[1] = 0.0;
        const auto a = compute_advantages(r, standard()).values;
        const double mean = std::accumulate(a.begin(), a.end(), 0.0) / a.size();
        double var = 0.0;
        for (double x : a)
            var += (x - mean) * (x - mean);
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::abs(std::sqrt(var / a.size()) - 1.0) < 1e-9);
    }
}

TEST_CASE("clipped surrogate branches")
{
    GrpoConfig c;
    c.length_norm = LengthNorm::PerTrajectory;
    const auto g = synthetic_group({{std::log(0.5)}, {std::log(0.5)}}, {1, 0});
    const AdvantageSet adv{{1.0, -1.0}};
    auto value_at = [&](double r0, double r1) {
        const TokenValues lp{{std::log(0.5 * r0)}, {std::log(0.5 * r1)}};
        return grpo_objective(g, lp, {}, adv, c);
    };

    // Positive advantage: ratio above 1 + eps is clipped and carries no gradient.
    auto t = value_at(1.5, 1.0);
    CHECK(std::abs(t.value - 0.5 * (1.2 - 1.0)) < 1e-12);
    CHECK(t.coefficients[0][0] == 0.0);
    CHECK(std::abs(t.coefficients[1][0] - 0.5 * -1.0) < 1e-12);

    // Positive advantage below the band keeps the unclipped term.
    t = value_at(0.5, 1.0);
    CHECK(std::abs(t.value - 0.5 * (0.5 - 1.0)) < 1e-12);
    CHECK(std::abs(t.coefficients[0][0] - 0.5 * 0.5) < 1e-12);

    // Negative advantage: the pessimistic minimum is the unclipped 1.5 * -1.
    t = value_at(1.0, 1.5);
    CHECK(std::abs(t.value - 0.5 * (1.0 - 1.5)) < 1e-12);
    CHECK(std::abs(t.coefficients[1][0] - 0.5 * -1.5) < 1e-12);

    // Negative advantage below the band is clipped at 0.8.
    t = value_at(1.0, 0.5);
    CHECK(std::abs(t.value - 0.5 * (1.0 - 0.8)) < 1e-12);
    CHECK(t.coefficients[1][0] == 0.0);
}

TEST_CASE("objective at ratio one equals the length-normalised advantage sum")
{
    const Vocabulary v(10);
    const auto p = testing::random_policy(v, 1.0, 3);
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto task = generate_task(3, 10, rng.next());
        const auto g = testing::random_group(p, task, 2 + rng.below(8), rng);
        for (LengthNorm norm : {LengthNorm::PerTrajectory, LengthNorm::Constant}) {
            GrpoConfig c;
            c.length_norm = norm;
            const auto adv = compute_advantages(g.rewards(), c);
            const auto t = grpo_objective(g, group_log_probs(p, g), {}, adv, c);
            double expect = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double n = g.trajectories[i].output_tokens.size();
                const double scale = norm == LengthNorm::PerTrajectory ? 1.0 : n / 64.0;
                expect += n > 0 ? adv.values[i] * scale : 0.0;
            }
            expect /= static_cast<double>(g.size());
            CHECK(std::abs(t.value - expect) < 1e-12);
        }
    }
}

TEST_CASE("k3 estimator")
{
    CHECK(kl_k3(-1.3, -1.3) == 0.0);
    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        const double a = -5.0 * rng.uniform(), b = -5.0 * rng.uniform();
        CHECK(kl_k3(a, b) >= 0.0);
    }
    CHECK(std::abs(kl_k3(std::log(0.5), std::log(0.25)) - (0.5 + std::log(2.0) - 1.0)) < 1e-15);
}

TEST_CASE("objective gradient matches finite differences")
{
    const Vocabulary v(10);
    const auto old = testing::random_policy(v, 1.0, 21, 64);
    Rng rng(8);
    for (double beta : {0.0, 0.3}) {
        GrpoConfig c;
        c.kl_coefficient = beta;
        c.advantage_mode = AdvantageMode::Standard;
        c.length_norm = LengthNorm::PerTrajectory;
        c.clip_epsilon = 0.9; // keep ratios inside the band
        auto cur = old;
        for (double& w : cur.weights())
            w += 0.05 * (rng.uniform() - 0.5);
        const auto ref = testing::random_policy(v, 0.5, 22, 64);
        const auto task = generate_task(2, 10, 4);
        const auto g = testing::random_group(old, task, 6, rng);
        const auto adv = compute_advantages(g.rewards(), c);

        const auto eval = evaluate_group(cur, ref, g, adv, c);
        std::vector<double> dense(cur.weights().size(), 0.0);
        eval.gradient.add_to(dense);

        auto value = [&](const PolicySnapshot& p) {
            return evaluate_group(p, ref, g, adv, c).value;
        };
        const double eps = 1e-6;
        int checked = 0;
        for (std::size_t k = 0; k < dense.size() && checked < 60; ++k) {
            if (dense[k] == 0.0)
                continue;
            auto up = cur, down = cur;
            up.weights()[k] += eps;
            down.weights()[k] -= eps;
            const double fd = (value(up) - value(down)) / (2 * eps);
            CHECK(std::abs(fd - dense[k]) < 1e-7);
            ++checked;
        }
        CHECK(checked > 10);
    }
}

TEST_CASE("all-zero rewards give a zero gradient")
{
    const Vocabulary v(10);
    const auto p = testing::random_policy(v, 1.0, 2);
    Rng rng(1);
    auto g = testing::random_group(p, generate_task(3, 10, 1), 8, rng);
    for (auto& t : g.trajectories)
        t.reward = 0;
    for (auto mode : {AdvantageMode::Standard, AdvantageMode::DrGrpo}) {
        GrpoConfig c;
        c.advantage_mode = mode;
        const auto e = evaluate_group(p, p, g, compute_advantages(g.rewards(), c), c);
        CHECK(e.value == 0.0);
        for (double x : e.gradient.values)
            CHECK(x == 0.0);
    }
}

TEST_CASE("ratios")
{
    const TokenValues a{{std::log(0.2), std::log(0.9)}};
    const TokenValues b{{std::log(0.1), std::log(0.9)}};
    const auto r = probability_ratios(a, b);
    CHECK(std::abs(r[0][0] - 2.0) < 1e-12);
    CHECK(r[0][1] == 1.0);
    const TokenValues bad{{std::nan(""), 0.0}};
    CHECK_THROWS_AS(probability_ratios(bad, b), NumericError);
    CHECK_THROWS_AS(probability_ratios(TokenValues{{0.0}}, b), ParameterError);
    CHECK_THROWS_AS(probability_ratios(TokenValues{{800.0, 0.0}}, TokenValues{{-800.0, 0.0}}),
                    NumericError);
}

TEST_CASE("learning-rate schedule")
{
    const LrSchedule s{0.05, 0.1, 500};
    CHECK(s.at(0) == 0.0);
    CHECK(std::abs(s.at(25) - 0.025) < 1e-15);
    CHECK(std::abs(s.at(50) - 0.05) < 1e-15);
    CHECK(s.at(499) < 1e-5);
    CHECK(s.at(500) == 0.0);
    for (std::size_t k = 50; k < 499; ++k)
        CHECK(s.at(k + 1) <= s.at(k));
}

TEST_CASE("parameter update")
{
    const Vocabulary v(10);
    auto p = make_policy(v, 4, 8);
    std::vector<double> g(p.weights().size(), 1.0);
    apply_update(p, g, LrSchedule{0.5, 0.0, 10}, 0);
    CHECK(p.weights()[0] == 0.5);
    g[3] = std::nan("");
    CHECK_THROWS_AS(apply_update(p, g, LrSchedule{0.5, 0.0, 10}, 0), NumericError);
    CHECK_THROWS_AS(apply_update(p, std::vector<double>(3), LrSchedule{}, 0), ParameterError);
    const double v3[] = {3.0, 4.0};
    CHECK(l2_norm(v3) == 5.0);
}

TEST_CASE("config parsing")
{
    CHECK(parse_advantage_mode("standard") == AdvantageMode::Standard);
    CHECK(parse_length_norm("constant") == LengthNorm::Constant);
    CHECK_THROWS_AS(parse_advantage_mode("z"), ConfigError);
    GrpoConfig c;
    c.clip_epsilon = 0.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
}
