// tapo-lab: build thought libraries, train GRPO/TAPO policies, evaluate
// checkpoints and sweep the number of guidances.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "tapo/error.hpp"
#include "tapo/trainer.hpp"

namespace fs = std::filesystem;
using namespace tapo;

namespace {

std::vector<std::size_t> parse_values(const std::string& text)
{
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            const long v = std::stol(item, &used);
            if (used != item.size() || v < 1)
                throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError("--values expects positive integers, got '" + item + "'");
        }
    }
    if (out.empty())
        throw ConfigError("--values is empty");
    return out;
}

int cmd_build(const std::string& config_path)
{
    auto config = load_config(config_path);
    const Vocabulary vocab(config.modulus);
    const auto sets = make_task_sets(config);
    const std::string source =
        !config.build_checkpoint.empty() ? config.build_checkpoint : config.init_checkpoint;
    const PolicySnapshot policy = source.empty()
                                      ? make_policy(vocab, config.context_window, config.feature_count)
                                      : load_checkpoint(source);
    const auto report = build_phase(sets.seeds, policy, config.mcts, config.score_weight,
                                    config.build_seed, config.schedule);
    std::string path = config.library_path;
    if (path.empty()) {
        fs::create_directories(config.output_dir);
        path = (fs::path(config.output_dir) / "library.json").string();
    }
    save_library(report.library, path);
    std::cout << "library " << path << ": " << report.library.templates.size() << " templates from "
              << sets.seeds.size() << " seeds (" << report.skipped_seeds << " skipped)\n";
    for (const auto& t : report.library.templates)
        std::printf("  %-24s avg_pcc %.3f support %zu\n", pattern_to_string(t.pattern).c_str(),
                    t.avg_pcc, t.support_count);
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& mode,
              std::optional<std::uint64_t> seed, const std::string& output)
{
    auto config = load_config(config_path);
    if (!mode.empty())
        config.mode = parse_mode(mode);
    if (seed)
        config.seed = *seed;
    if (!output.empty())
        config.output_dir = output;
    config.validate();
    const auto result = run(config);
    std::printf("%s seed %llu: final-100 reward %.4f, eval accuracy %.4f -> %s\n",
                std::string(to_string(config.mode)).c_str(),
                static_cast<unsigned long long>(config.seed),
                final_window_reward(result.rows, 100), result.rows.back().eval_accuracy.value_or(0.0),
                config.output_dir.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& tasks_path, std::size_t max_len)
{
    const auto policy = load_checkpoint(checkpoint);
    const auto tasks = load_tasks(tasks_path);
    if (tasks.empty())
        throw ConfigError("task file " + tasks_path + " is empty");
    if (Vocabulary(tasks.front().modulus).hash() != policy.vocab_hash())
        throw ConfigError("checkpoint vocabulary does not match the tasks");
    const double acc = greedy_accuracy(policy, tasks, max_len, Schedule::Parallel);
    std::printf("accuracy %.4f on %zu tasks\n", acc, tasks.size());
    return 0;
}

int cmd_tasks(std::size_t count, int min_chain, int max_chain, int modulus, std::uint64_t seed,
              const std::string& out)
{
    const auto tasks = generate_task_set(count, min_chain, max_chain, modulus, seed);
    save_tasks(out, tasks);
    std::printf("wrote %zu tasks to %s\n", tasks.size(), out.c_str());
    return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& values_text)
{
    auto base = load_config(config_path);
    base.mode = Mode::Tapo;
    base.identity_guidance = false;
    const auto values = parse_values(values_text);
    for (std::size_t g : values)
        if (base.rollouts_total % g != 0)
            throw ConfigError("rollouts_total " + std::to_string(base.rollouts_total) +
                              " is not divisible by |g| = " + std::to_string(g));

    std::map<std::size_t, std::vector<double>> finals;
    std::optional<ThoughtLibrary> library;
    for (std::uint64_t seed : base.seeds) {
        for (std::size_t g : values) {
            auto config = base;
            config.seed = seed;
            config.num_guidances = g;
            config.output_dir = (fs::path(base.output_dir) / ("g" + std::to_string(g)) /
                                 ("seed" + std::to_string(seed)))
                                    .string();
            const auto result = run(config, library ? &*library : nullptr);
            if (!library)
                library = result.library;
            finals[g].push_back(final_window_reward(result.rows, 100));
        }
    }

    std::printf("%-6s", "|g|");
    for (std::uint64_t s : base.seeds)
        std::printf(" seed%-5llu", static_cast<unsigned long long>(s));
    std::printf(" %8s %s\n", "mean", ">=|g|1");
    const auto& reference = finals[values.front()];
    for (std::size_t g : values) {
        double mean = 0.0;
        std::size_t wins = 0;
        std::printf("%-6zu", g);
        for (std::size_t i = 0; i < finals[g].size(); ++i) {
            std::printf(" %9.4f", finals[g][i]);
            mean += finals[g][i];
            wins += finals[g][i] >= reference[i] ? 1 : 0;
        }
        std::printf(" %8.4f %zu/%zu\n", mean / static_cast<double>(finals[g].size()), wins,
                    finals[g].size());
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Thought-augmented policy optimisation lab"};
    app.require_subcommand(1);

    std::string config_path, mode, output, checkpoint, tasks_path, values = "1,2,4,8", out_path;
    std::uint64_t seed = 0, task_seed = 0;
    std::size_t max_len = 64, count = 200;
    int min_chain = 3, max_chain = 5, modulus = 10;

    auto* build = app.add_subcommand("build", "Run MCTS on the seed tasks and write the library");
    build->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);

    auto* train = app.add_subcommand("train", "Train a policy and write metrics.csv");
    train->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
    train->add_option("--mode", mode, "grpo or tapo")->check(CLI::IsMember({"grpo", "tapo"}));
    auto* seed_opt = train->add_option("--seed", seed, "run seed");
    train->add_option("--output", output, "output directory");

    auto* eval = app.add_subcommand("eval", "Greedy accuracy of a checkpoint on a task file");
    eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--tasks", tasks_path, "JSONL task file")->required()->check(CLI::ExistingFile);
    eval->add_option("--max-len", max_len, "decoding length limit");

    auto* ablate = app.add_subcommand("ablate-g", "TAPO runs for several numbers of guidances");
    ablate->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
    ablate->add_option("--values", values, "comma-separated |g| values");

    auto* tasks = app.add_subcommand("tasks", "Write a JSONL task file");
    tasks->add_option("--count", count);
    tasks->add_option("--min-chain", min_chain);
    tasks->add_option("--max-chain", max_chain);
    tasks->add_option("--modulus", modulus);
    tasks->add_option("--seed", task_seed);
    tasks->add_option("--out", out_path)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*build)
            return cmd_build(config_path);
        if (*train)
            return cmd_train(config_path, mode,
                             *seed_opt ? std::optional<std::uint64_t>(seed) : std::nullopt, output);
        if (*eval)
            return cmd_eval(checkpoint, tasks_path, max_len);
        if (*ablate)
            return cmd_ablate(config_path, values);
        if (*tasks)
            return cmd_tasks(count, min_chain, max_chain, modulus, task_seed, out_path);
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
