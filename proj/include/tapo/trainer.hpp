#pragma once

// End-to-end runs: library construction, GRPO/TAPO training loop, greedy
// evaluation, checkpoints and the metrics CSV.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/grpo.hpp"
#include "tapo/kernels.hpp"
#include "tapo/library.hpp"
#include "tapo/mcts.hpp"
#include "tapo/policy.hpp"
#include "tapo/tapo.hpp"

namespace tapo {

enum class Mode {
    Grpo,
    Tapo,
};

Mode parse_mode(std::string_view s);
std::string_view to_string(Mode m);

struct RunConfig {
    Mode mode = Mode::Tapo;
    std::uint64_t seed = 0;
    /// Seeds used by ablate-g; `seed` is used by a single run.
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

    // Environment and task sets.
    int modulus = 10;
    int min_chain = 3;
    int max_chain = 5;
    std::uint64_t task_seed = 1;
    std::size_t train_pool_size = 2000;
    /// 0 disables evaluation.
    std::size_t eval_set_size = 200;
    std::size_t seed_set_size = 64;
    int pcc_noise = 0;

    // Policy.
    std::size_t context_window = 4;
    std::size_t feature_count = 4096;
    std::string init_checkpoint;

    // Optimisation.
    GrpoConfig grpo{};
    LrSchedule lr{};
    SamplingParams sampling{};
    std::size_t batch_size = 16;
    std::size_t rollouts_total = 16;
    std::size_t total_steps = 500;
    std::size_t eval_interval = 50;
    std::size_t inner_epochs = 1;
    std::size_t checkpoint_interval = 0;

    // Guidance.
    std::size_t num_guidances = 2;
    std::size_t hint_budget = 0;
    std::size_t max_prompt_len = 128;
    AdvantageScope advantage_scope = AdvantageScope::WithinMicroGroup;
    /// tapo mode with one identity guidance instead of retrieved templates.
    bool identity_guidance = false;

    // Library construction.
    bool build_phase = false;
    std::string library_path;
    /// Policy used by the search; empty means the initial training policy.
    std::string build_checkpoint;
    /// Drives the search; independent of the run seed so runs share one library.
    std::uint64_t build_seed = 0;
    mcts::SearchParams mcts{};
    double score_weight = 0.95;

    // Output.
    std::string output_dir = "runs/default";
    bool dump_rollouts = false;
    /// Off keeps metrics.csv byte-identical across runs (wall_ms is 0).
    bool record_wall_time = false;
    Schedule schedule = Schedule::Parallel;
    bool verbose = false;

    /// Throws ConfigError on inconsistent settings.
    void validate() const;
    /// |g| after mode rules are applied.
    std::size_t effective_guidances() const;
};

/// Reads a JSON config. Unknown keys are rejected; missing keys keep defaults.
RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);

struct MetricsRow {
    std::size_t step = 0;
    double mean_training_reward = 0.0;
    double fraction_groups_all_zero = 0.0;
    double fraction_groups_all_one = 0.0;
    double objective_value = 0.0;
    double grad_norm = 0.0;
    std::optional<double> eval_accuracy;
    double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,mean_training_reward,fraction_groups_all_zero,fraction_groups_all_one,"
    "objective_value,grad_norm,eval_accuracy,wall_ms";

std::string format_metrics_row(const MetricsRow& row);

struct TaskSets {
    std::vector<ReasoningTask> seeds;
    std::vector<ReasoningTask> train;
    std::vector<ReasoningTask> eval;
};

/// Seed, training and evaluation tasks with no question shared between sets.
TaskSets make_task_sets(const RunConfig& config);

struct BuildReport {
    ThoughtLibrary library;
    std::size_t skipped_seeds = 0;
};

/// MCTS per seed task, best trace selection, abstraction and aggregation.
/// Seeds without traces are skipped and counted.
BuildReport build_phase(std::span<const ReasoningTask> seed_tasks, const PolicySnapshot& policy,
                        const mcts::SearchParams& params, double b, std::uint64_t seed,
                        Schedule schedule);

struct TrainState {
    PolicySnapshot policy;
    PolicySnapshot reference;
    std::size_t step = 0;
};

struct StepOutput {
    MetricsRow row;
    std::vector<GuidedBatch> batches;
};

/// One optimisation step on `questions`; question i draws from
/// Rng(derive_seed(derive_seed(seed, step), i)).
StepOutput train_step(TrainState& state, std::span<const ReasoningTask* const> questions,
                      const RunConfig& config, const ThoughtLibrary* library);

/// Guidances for one question under the config's mode.
std::vector<Guidance> guidances_for(const ReasoningTask& task, const RunConfig& config,
                                    const ThoughtLibrary* library, Rng& rng);

double evaluate(const PolicySnapshot& policy, std::span<const ReasoningTask> tasks,
                const RunConfig& config);

struct RunResult {
    std::vector<MetricsRow> rows;
    PolicySnapshot policy;
    std::optional<ThoughtLibrary> library;
};

/// Full run into config.output_dir. `library` overrides the config's library source.
RunResult run(const RunConfig& config, const ThoughtLibrary* library = nullptr);

/// Mean training reward over the last `window` rows.
double final_window_reward(std::span<const MetricsRow> rows, std::size_t window);

} // namespace tapo
