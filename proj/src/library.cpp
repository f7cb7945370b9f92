#include "tapo/library.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <json.hpp>

#include "tapo/error.hpp"

namespace tapo {

void ThoughtLibrary::validate() const
{
    std::set<std::vector<Action>> seen;
    for (std::size_t i = 0; i < templates.size(); ++i) {
        const auto& t = templates[i];
        const std::string where = "template " + std::to_string(i);
        if (t.pattern.empty())
            throw ParameterError(where + ": empty pattern");
        if (t.support_count < 1)
            throw ParameterError(where + ": support_count must be >= 1");
        if (!(t.avg_pcc > 0.0) || !std::isfinite(t.avg_pcc))
            throw ParameterError(where + ": avg_pcc must be positive and finite");
        if (!seen.insert(t.pattern).second)
            throw ParameterError(where + ": duplicate pattern " + pattern_to_string(t.pattern));
    }
}

double score_trace(double reward, std::size_t complexity, double b)
{
    if (!(b >= 0.0 && b <= 1.0))
        throw ParameterError("score weight b must lie in [0, 1]");
    return b * reward - (1.0 - b) * static_cast<double>(complexity);
}

double score_trace(const mcts::SolutionTrace& trace, double b)
{
    return score_trace(trace.final_reward, trace.complexity(), b);
}

const mcts::SolutionTrace& select_best(std::span<const mcts::SolutionTrace> traces, double b)
{
    if (traces.empty())
        throw ParameterError("select_best needs at least one trace");
    const mcts::SolutionTrace* best = &traces.front();
    double best_score = score_trace(*best, b);
    for (const auto& t : traces.subspan(1)) {
        const double s = score_trace(t, b);
        bool better = s > best_score;
        if (s == best_score) {
            if (t.complexity() != best->complexity())
                better = t.complexity() < best->complexity();
            else
                better = t.action_sequence < best->action_sequence;
        }
        if (better) {
            best = &t;
            best_score = s;
        }
    }
    return *best;
}

std::vector<Action> abstract_pattern(const mcts::SolutionTrace& trace)
{
    return trace.action_sequence;
}

std::vector<Action> abstract_pattern(std::span<const Action> pattern)
{
    return {pattern.begin(), pattern.end()};
}

ThoughtLibrary build_library(std::span<const SeedPattern> seeds, std::size_t seed_count)
{
    struct Group {
        long long pcc_sum = 0;
        std::size_t count = 0;
    };
    std::map<std::vector<Action>, Group> groups;
    for (const auto& s : seeds) {
        if (s.pattern.empty())
            throw ParameterError("seed pattern must not be empty");
        if (s.pcc < 1)
            throw ParameterError("seed PCC must be >= 1");
        auto& g = groups[s.pattern];
        g.pcc_sum += s.pcc;
        ++g.count;
    }
    ThoughtLibrary lib;
    lib.seed_count = seed_count;
    for (const auto& [pattern, g] : groups)
        lib.templates.push_back(
            {pattern, static_cast<double>(g.pcc_sum) / static_cast<double>(g.count), g.count});
    return lib;
}

std::vector<ThoughtTemplate> retrieve(const ThoughtLibrary& library, double query_pcc,
                                      std::size_t k)
{
    if (k < 1)
        throw ParameterError("retrieve needs k >= 1");
    if (library.empty())
        throw RetrievalError("cannot retrieve from an empty thought library");

    std::vector<std::pair<double, const ThoughtTemplate*>> ranked;
    ranked.reserve(library.templates.size());
    for (const auto& t : library.templates)
        ranked.emplace_back(std::abs(query_pcc - t.avg_pcc), &t);
    auto before = [](const auto& a, const auto& b) {
        if (a.first != b.first)
            return a.first < b.first;
        if (a.second->support_count != b.second->support_count)
            return a.second->support_count > b.second->support_count;
        return a.second->pattern < b.second->pattern;
    };
    const std::size_t n = std::min(k, ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n), ranked.end(),
                      before);
    std::vector<ThoughtTemplate> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(*ranked[i].second);
    return out;
}

std::string pattern_to_string(std::span<const Action> pattern)
{
    std::string s;
    for (std::size_t i = 0; i < pattern.size(); ++i) {
        if (i)
            s += '>';
        s += action_name(pattern[i]);
    }
    return s;
}

void write_library(const ThoughtLibrary& library, std::ostream& out)
{
    nlohmann::json templates = nlohmann::json::array();
    for (const auto& t : library.templates) {
        std::vector<int> ids;
        for (Action a : t.pattern)
            ids.push_back(static_cast<int>(a));
        templates.push_back(
            {{"pattern", ids}, {"avg_pcc", t.avg_pcc}, {"support_count", t.support_count}});
    }
    nlohmann::json j{{"version", kLibraryVersion},
                     {"seed_count", library.seed_count},
                     {"templates", templates}};
    out << j.dump(2) << '\n';
}

ThoughtLibrary read_library(std::istream& in)
{
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("library: ") + e.what());
    }
    auto require = [](const nlohmann::json& obj, const char* key, const std::string& where) {
        if (!obj.is_object() || !obj.contains(key))
            throw ParseError(where + ": missing field '" + key + "'");
        return obj.at(key);
    };
    const auto version = require(j, "version", "library");
    if (!version.is_number_integer() || version.get<int>() != kLibraryVersion)
        throw ParseError("library: unsupported version " + version.dump());
    const auto seed_count = require(j, "seed_count", "library");
    if (!seed_count.is_number_unsigned())
        throw ParseError("library: field 'seed_count' must be a non-negative integer");
    const auto templates = require(j, "templates", "library");
    if (!templates.is_array())
        throw ParseError("library: field 'templates' must be an array");

    ThoughtLibrary lib;
    lib.seed_count = seed_count.get<std::size_t>();
    for (std::size_t i = 0; i < templates.size(); ++i) {
        const std::string where = "library: templates[" + std::to_string(i) + "]";
        const auto pattern = require(templates[i], "pattern", where);
        const auto avg_pcc = require(templates[i], "avg_pcc", where);
        const auto support = require(templates[i], "support_count", where);
        if (!pattern.is_array())
            throw ParseError(where + ": field 'pattern' must be an array");
        ThoughtTemplate t;
        for (const auto& id : pattern) {
            if (!id.is_number_integer() || id.get<int>() < 0 ||
                id.get<int>() >= static_cast<int>(kNumActions))
                throw ParseError(where + ": field 'pattern' holds an invalid action id " + id.dump());
            t.pattern.push_back(static_cast<Action>(id.get<int>()));
        }
        if (!avg_pcc.is_number())
            throw ParseError(where + ": field 'avg_pcc' must be a number");
        if (!support.is_number_unsigned())
            throw ParseError(where + ": field 'support_count' must be a non-negative integer");
        t.avg_pcc = avg_pcc.get<double>();
        t.support_count = support.get<std::size_t>();
        lib.templates.push_back(std::move(t));
    }
    try {
        lib.validate();
    } catch (const ParameterError& e) {
        throw ParseError(std::string("library: ") + e.what());
    }
    return lib;
}

void save_library(const ThoughtLibrary& library, const std::string& path)
{
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    write_library(library, out);
}

ThoughtLibrary load_library(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError("cannot open library " + path);
    return read_library(in);
}

} // namespace tapo
