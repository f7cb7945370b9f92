#include "tapo/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <json.hpp>

#include "tapo/error.hpp"

namespace tapo {

namespace fs = std::filesystem;
using nlohmann::json;

Mode parse_mode(std::string_view s)
{
    if (s == "grpo")
        return Mode::Grpo;
    if (s == "tapo")
        return Mode::Tapo;
    throw ConfigError("mode must be 'grpo' or 'tapo', got '" + std::string(s) + "'");
}

std::string_view to_string(Mode m) { return m == Mode::Grpo ? "grpo" : "tapo"; }

void RunConfig::validate() const
{
    if (modulus < 2)
        throw ConfigError("env.modulus must be >= 2");
    if (min_chain < 1 || max_chain < min_chain)
        throw ConfigError("env chain lengths need 1 <= min_chain <= max_chain");
    if (train_pool_size == 0)
        throw ConfigError("env.train_pool_size must be >= 1");
    if (pcc_noise < 0)
        throw ConfigError("env.pcc_noise must be >= 0");
    if (context_window == 0 || feature_count == 0)
        throw ConfigError("policy context_window and feature_count must be positive");
    grpo.validate();
    if (!(lr.peak >= 0.0) || !(lr.warmup_ratio >= 0.0 && lr.warmup_ratio <= 1.0))
        throw ConfigError("lr_peak must be >= 0 and warmup_ratio in [0, 1]");
    if (!(sampling.temperature >= 0.0) || !(sampling.top_p > 0.0 && sampling.top_p <= 1.0) ||
        sampling.max_len == 0)
        throw ConfigError("sampling needs temperature >= 0, top_p in (0, 1], max_len >= 1");
    if (batch_size == 0 || rollouts_total == 0 || total_steps == 0 || inner_epochs == 0)
        throw ConfigError("batch_size, rollouts_total, total_steps and inner_epochs must be >= 1");
    if (eval_interval == 0)
        throw ConfigError("eval_interval must be >= 1");
    if (mode == Mode::Tapo) {
        if (num_guidances == 0)
            throw ConfigError("tapo.num_guidances must be >= 1");
        if (rollouts_total % effective_guidances() != 0)
            throw ConfigError("rollouts_total " + std::to_string(rollouts_total) +
                              " is not divisible by num_guidances " +
                              std::to_string(effective_guidances()));
        if (!identity_guidance && !build_phase && library_path.empty())
            throw ConfigError("tapo mode needs library_path or build_phase = true");
    }
    try {
        mcts.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("mcts: ") + e.what());
    }
    if (!(score_weight >= 0.0 && score_weight <= 1.0))
        throw ConfigError("score_weight must lie in [0, 1]");
    if (output_dir.empty())
        throw ConfigError("output_dir must not be empty");
}

std::size_t RunConfig::effective_guidances() const
{
    if (mode == Mode::Grpo || identity_guidance)
        return 1;
    return num_guidances;
}

namespace {

// Copies known keys of one config section into typed fields.
class Section {
public:
    Section(const json& root, std::string name) : name_(std::move(name))
    {
        if (!root.contains(name_))
            return;
        node_ = &root.at(name_);
        if (!node_->is_object())
            throw ConfigError("config section '" + name_ + "' must be an object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        if (!node_ || !node_->contains(key))
            return;
        try {
            out = node_->at(key).get<T>();
        } catch (const json::exception&) {
            throw ConfigError("config " + name_ + "." + key + " has the wrong type");
        }
    }

    template <class T, class Parse>
    void get_enum(const char* key, T& out, Parse parse)
    {
        std::string s;
        const bool present = node_ && node_->contains(key);
        get(key, s);
        if (present)
            out = parse(s);
    }

    void finish() const
    {
        if (!node_)
            return;
        for (const auto& [k, v] : node_->items())
            if (!seen_.count(k))
                throw ConfigError("unknown config key " + name_ + "." + k);
    }

private:
    std::string name_;
    const json* node_ = nullptr;
    std::set<std::string> seen_;
};

std::string number(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void write_rollouts(std::ostream& out, std::size_t step, std::span<const GuidedBatch> batches,
                    const Vocabulary& vocab)
{
    for (std::size_t q = 0; q < batches.size(); ++q) {
        const auto& b = batches[q];
        for (std::size_t g = 0; g < b.micro_groups.size(); ++g) {
            for (const auto& t : b.micro_groups[g].trajectories) {
                json j{{"step", step},
                       {"question", q},
                       {"guidance", pattern_to_string(b.guidances[g].pattern)},
                       {"prompt", vocab.decode(b.prompts[g].combined_tokens)},
                       {"output", vocab.decode(t.output_tokens)},
                       {"reward", t.reward}};
                out << j.dump() << '\n';
            }
        }
    }
}

} // namespace

RunConfig parse_config(std::istream& in)
{
    json root;
    try {
        in >> root;
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!root.is_object())
        throw ConfigError("config must be a JSON object");

    RunConfig c;
    const std::set<std::string> sections{"run", "env", "policy", "grpo", "tapo", "mcts", "library"};
    for (const auto& [k, v] : root.items())
        if (!sections.count(k))
            throw ConfigError("unknown config section '" + k + "'");

    Section run(root, "run");
    run.get_enum("mode", c.mode, parse_mode);
    run.get("seed", c.seed);
    run.get("seeds", c.seeds);
    run.get("batch_size", c.batch_size);
    run.get("total_steps", c.total_steps);
    run.get("eval_interval", c.eval_interval);
    run.get("inner_epochs", c.inner_epochs);
    run.get("checkpoint_interval", c.checkpoint_interval);
    run.get("output_dir", c.output_dir);
    run.get("dump_rollouts", c.dump_rollouts);
    run.get("record_wall_time", c.record_wall_time);
    run.get_enum("schedule", c.schedule, parse_schedule);
    run.get("verbose", c.verbose);
    run.finish();

    Section env(root, "env");
    env.get("modulus", c.modulus);
    env.get("min_chain", c.min_chain);
    env.get("max_chain", c.max_chain);
    env.get("task_seed", c.task_seed);
    env.get("train_pool_size", c.train_pool_size);
    env.get("eval_set_size", c.eval_set_size);
    env.get("seed_set_size", c.seed_set_size);
    env.get("pcc_noise", c.pcc_noise);
    env.get("max_len", c.sampling.max_len);
    env.finish();

    Section policy(root, "policy");
    policy.get("context_window", c.context_window);
    policy.get("feature_count", c.feature_count);
    policy.get("init_checkpoint", c.init_checkpoint);
    policy.get("temperature", c.sampling.temperature);
    policy.get("top_p", c.sampling.top_p);
    policy.finish();

    Section grpo(root, "grpo");
    grpo.get("clip_epsilon", c.grpo.clip_epsilon);
    grpo.get("kl_coefficient", c.grpo.kl_coefficient);
    grpo.get_enum("advantage_mode", c.grpo.advantage_mode, parse_advantage_mode);
    grpo.get_enum("length_norm", c.grpo.length_norm, parse_length_norm);
    grpo.get("std_floor", c.grpo.std_floor);
    grpo.get("normalizer_length", c.grpo.normalizer_length);
    grpo.get("lr_peak", c.lr.peak);
    grpo.get("warmup_ratio", c.lr.warmup_ratio);
    grpo.get("rollouts_total", c.rollouts_total);
    grpo.finish();

    Section tapo(root, "tapo");
    tapo.get("num_guidances", c.num_guidances);
    tapo.get("hint_budget", c.hint_budget);
    tapo.get("max_prompt_len", c.max_prompt_len);
    tapo.get_enum("advantage_scope", c.advantage_scope, parse_advantage_scope);
    tapo.get("identity_guidance", c.identity_guidance);
    tapo.finish();

    Section mcts(root, "mcts");
    mcts.get("exploration_weight", c.mcts.exploration_weight);
    mcts.get("alpha", c.mcts.alpha);
    mcts.get("consistency_threshold", c.mcts.consistency_threshold);
    mcts.get("n_children", c.mcts.n_children);
    mcts.get("max_depth", c.mcts.max_depth);
    mcts.get("n_samples", c.mcts.n_samples);
    mcts.get("iterations", c.mcts.iterations);
    mcts.get("step_tokens", c.mcts.step_tokens);
    mcts.get_enum("terminal_value", c.mcts.terminal_value, mcts::parse_terminal_value);
    mcts.finish();

    Section lib(root, "library");
    lib.get("build_phase", c.build_phase);
    lib.get("path", c.library_path);
    lib.get("build_checkpoint", c.build_checkpoint);
    lib.get("build_seed", c.build_seed);
    lib.get("score_weight", c.score_weight);
    lib.finish();

    c.lr.total_steps = c.total_steps;
    c.validate();
    return c;
}

RunConfig load_config(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config " + path);
    return parse_config(in);
}

std::string format_metrics_row(const MetricsRow& r)
{
    std::string s = std::to_string(r.step);
    for (double v : {r.mean_training_reward, r.fraction_groups_all_zero, r.fraction_groups_all_one,
                     r.objective_value, r.grad_norm})
        s += ',' + number(v);
    s += ',';
    if (r.eval_accuracy)
        s += number(*r.eval_accuracy);
    s += ',' + number(r.wall_ms);
    return s;
}

TaskSets make_task_sets(const RunConfig& config)
{
    TaskSets sets;
    sets.seeds = generate_task_set(config.seed_set_size, config.min_chain, config.max_chain,
                                   config.modulus, derive_seed(config.task_seed, 1));
    sets.eval = generate_task_set(config.eval_set_size, config.min_chain, config.max_chain,
                                  config.modulus, derive_seed(config.task_seed, 2));
    std::set<std::vector<Token>> held_out;
    for (const auto& t : sets.seeds)
        held_out.insert(t.question_tokens);
    std::erase_if(sets.eval,
                  [&](const ReasoningTask& t) { return held_out.count(t.question_tokens) > 0; });
    for (const auto& t : sets.eval)
        held_out.insert(t.question_tokens);

    // Draw in chunks until the pool is full of questions absent from the other sets.
    std::uint64_t chunk = 0;
    while (sets.train.size() < config.train_pool_size) {
        const auto candidates = generate_task_set(config.train_pool_size, config.min_chain,
                                                  config.max_chain, config.modulus,
                                                  derive_seed(derive_seed(config.task_seed, 3), chunk++));
        for (const auto& t : candidates) {
            if (sets.train.size() == config.train_pool_size)
                break;
            if (!held_out.count(t.question_tokens))
                sets.train.push_back(t);
        }
        if (chunk > 64)
            throw ConfigError("cannot draw a training pool disjoint from the held-out sets");
    }
    return sets;
}

BuildReport build_phase(std::span<const ReasoningTask> seed_tasks, const PolicySnapshot& policy,
                        const mcts::SearchParams& params, double b, std::uint64_t seed,
                        Schedule schedule)
{
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < seed_tasks.size(); ++i)
        seeds.push_back(derive_seed(seed, i));
    const auto results = search_all(seed_tasks, seeds, policy, params, schedule);

    BuildReport report;
    std::vector<SeedPattern> patterns;
    for (std::size_t i = 0; i < results.size(); ++i) {
        std::vector<mcts::SolutionTrace> solved;
        for (const auto& t : results[i].traces)
            if (t.final_reward > 0.0 && !t.action_sequence.empty())
                solved.push_back(t);
        if (solved.empty()) {
            ++report.skipped_seeds;
            continue;
        }
        const auto& best = select_best(solved, b);
        patterns.push_back({abstract_pattern(best), seed_tasks[i].pcc});
    }
    report.library = build_library(patterns, seed_tasks.size());
    return report;
}

std::vector<Guidance> guidances_for(const ReasoningTask& task, const RunConfig& config,
                                    const ThoughtLibrary* library, Rng& rng)
{
    if (config.mode == Mode::Grpo)
        return {};
    if (config.identity_guidance)
        return {Guidance::identity()};
    if (!library)
        throw ConfigError("tapo mode needs a thought library");
    const double pcc =
        config.pcc_noise > 0 ? noisy_pcc(task, config.pcc_noise, rng) : static_cast<double>(task.pcc);
    const auto found = retrieve(*library, pcc, config.num_guidances);
    // A library smaller than |g| is cycled so every micro-group gets a guidance.
    std::vector<Guidance> out;
    for (std::size_t i = 0; i < config.num_guidances; ++i)
        out.push_back(Guidance::from_template(found[i % found.size()], config.hint_budget));
    return out;
}

StepOutput train_step(TrainState& state, std::span<const ReasoningTask* const> questions,
                      const RunConfig& config, const ThoughtLibrary* library)
{
    if (questions.empty())
        throw ParameterError("train_step needs at least one question");
    const std::uint64_t step_seed = derive_seed(config.seed, state.step);

    std::vector<RolloutJob> jobs;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        RolloutJob job;
        job.task = questions[i];
        Rng rng(derive_seed(step_seed, i));
        job.guidances = guidances_for(*questions[i], config, library, rng);
        job.seed = rng.next();
        jobs.push_back(std::move(job));
    }

    RolloutSettings settings;
    settings.rollouts_total = config.rollouts_total;
    settings.sampling = config.sampling;
    settings.augment.max_prompt_len = config.max_prompt_len;
    settings.augment.sampling = config.sampling;

    StepOutput out;
    out.batches = sample_rollouts(jobs, state.policy, settings, config.schedule);

    std::size_t rollouts = 0, all_zero = 0, all_one = 0;
    double reward_sum = 0.0;
    for (const auto& b : out.batches) {
        std::size_t n = 0, positive = 0;
        for (const auto& g : b.micro_groups)
            for (const auto& t : g.trajectories) {
                ++n;
                positive += t.reward > 0 ? 1 : 0;
            }
        rollouts += n;
        reward_sum += static_cast<double>(positive);
        all_zero += positive == 0 ? 1 : 0;
        all_one += positive == n ? 1 : 0;
    }
    const double nq = static_cast<double>(questions.size());
    out.row.step = state.step + 1;
    out.row.mean_training_reward = reward_sum / static_cast<double>(rollouts);
    out.row.fraction_groups_all_zero = static_cast<double>(all_zero) / nq;
    out.row.fraction_groups_all_one = static_cast<double>(all_one) / nq;

    for (std::size_t epoch = 0; epoch < config.inner_epochs; ++epoch) {
        const auto evals = evaluate_rollouts(jobs, out.batches, state.policy, state.reference,
                                             config.grpo, config.advantage_scope, config.schedule);
        double value = 0.0;
        for (const auto& e : evals)
            value += e.value;
        value /= nq;
        if (!std::isfinite(value))
            throw NumericError("non-finite objective at step " + std::to_string(out.row.step));
        const auto grad = mean_gradient(evals, state.policy.weights().size());
        if (epoch == 0) {
            out.row.objective_value = value;
            out.row.grad_norm = l2_norm(grad);
        }
        apply_update(state.policy, grad, config.lr, state.step);
    }
    ++state.step;
    return out;
}

double evaluate(const PolicySnapshot& policy, std::span<const ReasoningTask> tasks,
                const RunConfig& config)
{
    return greedy_accuracy(policy, tasks, config.sampling.max_len, config.schedule);
}

double final_window_reward(std::span<const MetricsRow> rows, std::size_t window)
{
    if (rows.empty() || window == 0)
        throw ParameterError("final window needs rows and a positive width");
    const std::size_t n = std::min(window, rows.size());
    double s = 0.0;
    for (std::size_t i = rows.size() - n; i < rows.size(); ++i)
        s += rows[i].mean_training_reward;
    return s / static_cast<double>(n);
}

RunResult run(const RunConfig& config, const ThoughtLibrary* library)
{
    config.validate();
    std::error_code ec;
    fs::create_directories(config.output_dir, ec);
    const fs::path dir(config.output_dir);
    std::ofstream csv(dir / "metrics.csv");
    if (ec || !csv)
        throw ConfigError("cannot write to output directory " + config.output_dir);

    const Vocabulary vocab(config.modulus);
    const auto sets = make_task_sets(config);

    TrainState state;
    state.policy = config.init_checkpoint.empty()
                       ? make_policy(vocab, config.context_window, config.feature_count)
                       : load_checkpoint(config.init_checkpoint);
    if (state.policy.vocab_hash() != vocab.hash())
        throw ConfigError("initial checkpoint was trained on a different vocabulary");
    state.reference = state.policy;

    RunResult result;
    const bool needs_library = config.mode == Mode::Tapo && !config.identity_guidance;
    if (library) {
        result.library = *library;
    } else if (needs_library && config.build_phase) {
        const PolicySnapshot builder = config.build_checkpoint.empty()
                                           ? state.policy
                                           : load_checkpoint(config.build_checkpoint);
        auto report = build_phase(sets.seeds, builder, config.mcts, config.score_weight,
                                  config.build_seed, config.schedule);
        if (config.verbose)
            std::cerr << "build: " << report.library.templates.size() << " templates, "
                      << report.skipped_seeds << " seeds skipped\n";
        save_library(report.library, (dir / "library.json").string());
        result.library = std::move(report.library);
    } else if (needs_library) {
        result.library = load_library(config.library_path);
    }
    if (needs_library && result.library->empty())
        throw RetrievalError("thought library is empty");
    const ThoughtLibrary* lib = result.library ? &*result.library : nullptr;

    std::ofstream dump;
    if (config.dump_rollouts)
        dump.open(dir / "rollouts.jsonl");

    csv << kMetricsHeader << '\n';
    Rng order(derive_seed(config.seed, 0x6f72646572));
    std::vector<const ReasoningTask*> questions(config.batch_size);
    for (std::size_t k = 0; k < config.total_steps; ++k) {
        const auto start = std::chrono::steady_clock::now();
        for (auto& q : questions)
            q = &sets.train[order.below(sets.train.size())];

        StepOutput out;
        try {
            out = train_step(state, questions, config, lib);
        } catch (const NumericError&) {
            save_checkpoint(state.policy, (dir / "checkpoint_abort.json").string());
            throw;
        }
        if (!sets.eval.empty() &&
            (out.row.step % config.eval_interval == 0 || out.row.step == config.total_steps))
            out.row.eval_accuracy = evaluate(state.policy, sets.eval, config);
        if (config.record_wall_time)
            out.row.wall_ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - start)
                                  .count();
        csv << format_metrics_row(out.row) << '\n' << std::flush;
        if (dump.is_open())
            write_rollouts(dump, out.row.step, out.batches, vocab);
        if (config.checkpoint_interval > 0 && out.row.step % config.checkpoint_interval == 0)
            save_checkpoint(state.policy,
                            (dir / ("checkpoint_step" + std::to_string(out.row.step) + ".json"))
                                .string());
        if (config.verbose && out.row.eval_accuracy)
            std::cerr << to_string(config.mode) << " step " << out.row.step
                      << " reward " << out.row.mean_training_reward << " eval "
                      << *out.row.eval_accuracy << '\n';
        result.rows.push_back(out.row);
    }
    save_checkpoint(state.policy, (dir / "checkpoint_final.json").string());
    result.policy = std::move(state.policy);
    return result;
}

} // namespace tapo
