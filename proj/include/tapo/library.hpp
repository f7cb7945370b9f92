#pragma once

// Thought library: best-trace selection, pattern abstraction, aggregation by
// problem condition complexity (PCC) and nearest-PCC retrieval.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "tapo/env.hpp"
#include "tapo/mcts.hpp"

namespace tapo {

inline constexpr int kLibraryVersion = 1;

struct ThoughtTemplate {
    std::vector<Action> pattern;
    double avg_pcc = 0.0;
    std::size_t support_count = 0;

    friend bool operator==(const ThoughtTemplate&, const ThoughtTemplate&) = default;
};

struct ThoughtLibrary {
    std::vector<ThoughtTemplate> templates;
    std::size_t seed_count = 0;

    bool empty() const { return templates.empty(); }
    /// Throws ParameterError if a template is malformed or two share a pattern.
    void validate() const;

    friend bool operator==(const ThoughtLibrary&, const ThoughtLibrary&) = default;
};

/// b * R - (1 - b) * C, where C is the number of actions in the trace.
double score_trace(double reward, std::size_t complexity, double b);
double score_trace(const mcts::SolutionTrace& trace, double b);

/// Highest score; ties go to fewer actions, then the lexicographically
/// smaller action sequence. Throws ParameterError on an empty list.
const mcts::SolutionTrace& select_best(std::span<const mcts::SolutionTrace> traces, double b);

std::vector<Action> abstract_pattern(const mcts::SolutionTrace& trace);
std::vector<Action> abstract_pattern(std::span<const Action> pattern);

/// Best pattern of one seed question together with that question's PCC.
struct SeedPattern {
    std::vector<Action> pattern;
    int pcc = 1;
};

/// Groups seeds by identical pattern. Each template's avg_pcc is the mean PCC
/// of its group and support_count the group size. Templates are ordered by
/// pattern.
ThoughtLibrary build_library(std::span<const SeedPattern> seeds, std::size_t seed_count);

/// Templates sorted by |query_pcc - avg_pcc|, then higher support, then
/// pattern; the first min(k, size) are returned.
std::vector<ThoughtTemplate> retrieve(const ThoughtLibrary& library, double query_pcc,
                                      std::size_t k);

/// "DC>SA>OST" style rendering.
std::string pattern_to_string(std::span<const Action> pattern);

// Library file: {version, seed_count, templates: [{pattern: [ids], avg_pcc, support_count}]}.
void write_library(const ThoughtLibrary& library, std::ostream& out);
ThoughtLibrary read_library(std::istream& in);
void save_library(const ThoughtLibrary& library, const std::string& path);
ThoughtLibrary load_library(const std::string& path);

} // namespace tapo
