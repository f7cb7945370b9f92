#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "tapo/error.hpp"
#include "tapo/trainer.hpp"

using namespace tapo;
namespace fs = std::filesystem;

namespace {

RunConfig parse(const std::string& text)
{
    std::stringstream ss(text);
    return parse_config(ss);
}

std::string read_file(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig small_config(const std::string& dir)
{
    RunConfig c;
    c.mode = Mode::Grpo;
    c.total_steps = 12;
    c.eval_interval = 5;
    c.batch_size = 4;
    c.rollouts_total = 4;
    c.train_pool_size = 50;
    c.eval_set_size = 20;
    c.seed_set_size = 8;
    c.feature_count = 256;
    c.sampling.max_len = 12;
    c.lr.peak = 1000.0;
    c.lr.total_steps = c.total_steps;
    c.output_dir = (fs::temp_directory_path() / dir).string();
    return c;
}

} // namespace

TEST_CASE("config defaults and overrides")
{
    const auto c = parse(R"({"run": {"mode": "grpo", "total_steps": 20},
                             "grpo": {"lr_peak": 3.0, "advantage_mode": "standard"},
                             "env": {"max_len": 10}})");
    CHECK(c.mode == Mode::Grpo);
    CHECK(c.total_steps == 20);
    CHECK(c.lr.total_steps == 20);
    CHECK(c.lr.peak == 3.0);
    CHECK(c.grpo.advantage_mode == AdvantageMode::Standard);
    CHECK(c.sampling.max_len == 10);
    CHECK(c.batch_size == 16);
    CHECK(c.rollouts_total == 16);
    CHECK(c.effective_guidances() == 1);
}

TEST_CASE("config errors")
{
    CHECK_THROWS_AS(parse(R"({"run": {"mode": "grpo", "colour": 1}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"extra": {}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"run": {"mode": "tapo"}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"run": {"mode": "grpo", "total_steps": "many"}})"), ConfigError);
    CHECK_THROWS_AS(parse(R"({"run": {"mode": "tapo"}, "tapo": {"num_guidances": 3},
                              "library": {"build_phase": true}})"),
                    ConfigError);
    CHECK_THROWS_AS(parse("[1, 2"), ConfigError);
    CHECK_NOTHROW(parse(R"({"run": {"mode": "tapo"}, "library": {"path": "lib.json"}})"));
    CHECK_NOTHROW(parse(R"({"run": {"mode": "tapo"}, "tapo": {"identity_guidance": true}})"));
}

TEST_CASE("metrics row format")
{
    MetricsRow r;
    r.step = 3;
    r.mean_training_reward = 0.25;
    r.grad_norm = 1.5;
    CHECK(format_metrics_row(r) == "3,0.25,0,0,0,1.5,,0");
    r.eval_accuracy = 0.5;
    CHECK(format_metrics_row(r) == "3,0.25,0,0,0,1.5,0.5,0");
    CHECK(std::string(kMetricsHeader) ==
          "step,mean_training_reward,fraction_groups_all_zero,fraction_groups_all_one,"
          "objective_value,grad_norm,eval_accuracy,wall_ms");
}

TEST_CASE("task sets are disjoint")
{
    auto c = small_config("unused");
    c.train_pool_size = 300;
    const auto sets = make_task_sets(c);
    CHECK(sets.train.size() == 300);
    std::set<std::vector<Token>> held;
    for (const auto& t : sets.seeds)
        held.insert(t.question_tokens);
    for (const auto& t : sets.eval) {
        CHECK_FALSE(held.count(t.question_tokens));
    }
    for (const auto& t : sets.eval)
        held.insert(t.question_tokens);
    for (const auto& t : sets.train)
        CHECK_FALSE(held.count(t.question_tokens));
}

TEST_CASE("all-zero batch leaves the policy unchanged")
{
    const Vocabulary v(10);
    auto c = small_config("unused");
    TrainState s;
    s.policy = make_policy(v, 4, 256);
    for (std::size_t b = 0; b < 256; ++b)
        s.policy.row(b)[v.eos()] = 60.0;
    s.reference = s.policy;
    s.step = 7;
    const auto before = s.policy;
    const auto tasks = generate_task_set(4, 3, 3, 10, 1);
    std::vector<const ReasoningTask*> qs;
    for (const auto& t : tasks)
        qs.push_back(&t);
    const auto out = train_step(s, qs, c, nullptr);
    CHECK(out.row.mean_training_reward == 0.0);
    CHECK(out.row.fraction_groups_all_zero == 1.0);
    CHECK(out.row.grad_norm == 0.0);
    CHECK(s.policy == before);
    CHECK(s.step == 8);
    CHECK(out.row.step == 8);
}

TEST_CASE("logged reward is the mean over all rollouts")
{
    const Vocabulary v(10);
    auto c = small_config("unused");
    TrainState s;
    s.policy = testing::random_policy(v, 2.0, 3, 256);
    s.reference = s.policy;
    const auto tasks = generate_task_set(4, 1, 1, 10, 5);
    std::vector<const ReasoningTask*> qs;
    for (const auto& t : tasks)
        qs.push_back(&t);
    const auto out = train_step(s, qs, c, nullptr);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& b : out.batches)
        for (const auto& g : b.micro_groups)
            for (const auto& t : g.trajectories) {
                sum += t.reward;
                ++n;
            }
    CHECK(n == 16);
    CHECK(out.row.mean_training_reward == sum / n);
    CHECK(out.row.mean_training_reward >= 0.0);
    CHECK(out.row.mean_training_reward <= 1.0);
}

TEST_CASE("greedy evaluation")
{
    const Vocabulary v(10);
    const auto tasks = generate_task_set(5, 1, 1, 10, 3);
    auto p = make_policy(v, 4, 4096);
    for (const auto& t : tasks) {
        auto ctx = t.question_tokens;
        p.row(featurize(ctx, 4, 4096))[v.answer_marker()] = 20.0;
        ctx.push_back(v.answer_marker());
        p.row(featurize(ctx, 4, 4096))[v.digit(t.answer)] = 20.0;
        ctx.push_back(v.digit(t.answer));
        p.row(featurize(ctx, 4, 4096))[v.eos()] = 20.0;
    }
    auto c = small_config("unused");
    CHECK(evaluate(p, tasks, c) == 1.0);
    CHECK(evaluate(p, tasks, c) == evaluate(p, tasks, c));

    const auto many = generate_task_set(200, 3, 5, 10, 4);
    CHECK(evaluate(make_policy(v), many, c) <= 0.05);
}

TEST_CASE("build phase")
{
    const Vocabulary v(10);
    const auto seeds = generate_task_set(10, 1, 2, 10, 8);
    const auto p = testing::random_policy(v, 1.0, 1);
    mcts::SearchParams params;
    params.iterations = 16;
    const auto a = build_phase(seeds, p, params, 0.95, 3, Schedule::Serial);
    const auto b = build_phase(seeds, p, params, 0.95, 3, Schedule::Parallel);
    CHECK(a.library == b.library);
    CHECK(a.library.templates.size() + a.skipped_seeds <= 10);
    CHECK(a.library.seed_count == 10);
    std::size_t support = 0;
    for (const auto& t : a.library.templates) {
        CHECK(t.support_count >= 1);
        support += t.support_count;
    }
    CHECK(support + a.skipped_seeds == 10);
}

TEST_CASE("run writes one row per step and is reproducible")
{
    auto c = small_config("tapo_run_a");
    const auto r1 = run(c);
    const auto csv = read_file(fs::path(c.output_dir) / "metrics.csv");
    CHECK(r1.rows.size() == c.total_steps);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(c.total_steps + 1));
    CHECK(fs::exists(fs::path(c.output_dir) / "checkpoint_final.json"));
    CHECK(r1.rows[4].eval_accuracy.has_value());
    CHECK_FALSE(r1.rows[3].eval_accuracy.has_value());
    CHECK(r1.rows.back().eval_accuracy.has_value());

    run(c);
    CHECK(read_file(fs::path(c.output_dir) / "metrics.csv") == csv);

    auto serial = c;
    serial.schedule = Schedule::Serial;
    serial.output_dir = (fs::temp_directory_path() / "tapo_run_serial").string();
    run(serial);
    CHECK(read_file(fs::path(serial.output_dir) / "metrics.csv") == csv);

    auto identity = c;
    identity.mode = Mode::Tapo;
    identity.identity_guidance = true;
    identity.output_dir = (fs::temp_directory_path() / "tapo_run_identity").string();
    run(identity);
    CHECK(read_file(fs::path(identity.output_dir) / "metrics.csv") == csv);
}

TEST_CASE("tapo run with a built library")
{
    auto c = small_config("tapo_run_lib");
    c.mode = Mode::Tapo;
    c.build_phase = true;
    c.num_guidances = 2;
    c.mcts.iterations = 8;
    c.dump_rollouts = true;
    const auto r = run(c);
    REQUIRE(r.library.has_value());
    CHECK(fs::exists(fs::path(c.output_dir) / "library.json"));
    CHECK(load_library((fs::path(c.output_dir) / "library.json").string()) == *r.library);
    const auto dump = read_file(fs::path(c.output_dir) / "rollouts.jsonl");
    CHECK(std::count(dump.begin(), dump.end(), '\n') ==
          static_cast<long>(c.total_steps * c.batch_size * c.rollouts_total));
}

TEST_CASE("run startup errors")
{
    auto c = small_config("tapo_run_err");
    c.mode = Mode::Tapo;
    CHECK_THROWS_AS(run(c), ConfigError);
    c.mode = Mode::Grpo;
    c.output_dir = "/proc/forbidden/run";
    CHECK_THROWS_AS(run(c), ConfigError);
}

TEST_CASE("final window")
{
    std::vector<MetricsRow> rows(5);
    for (std::size_t i = 0; i < 5; ++i)
        rows[i].mean_training_reward = static_cast<double>(i);
    CHECK(final_window_reward(rows, 2) == 3.5);
    CHECK(final_window_reward(rows, 100) == 2.0);
    CHECK_THROWS_AS(final_window_reward({}, 3), ParameterError);
}
