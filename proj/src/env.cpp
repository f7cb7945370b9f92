#include "tapo/env.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "tapo/error.hpp"

namespace tapo {

namespace {

constexpr std::array<std::string_view, kNumActions> kActionNames{"DC", "SR", "SA", "OST", "CoT"};
constexpr std::array<std::string_view, 3> kOperatorSymbols{"+", "-", "*"};

std::optional<Operator> operator_from_symbol(std::string_view s)
{
    for (std::size_t i = 0; i < kOperatorSymbols.size(); ++i)
        if (kOperatorSymbols[i] == s)
            return static_cast<Operator>(i);
    return std::nullopt;
}

void check_modulus(int modulus)
{
    if (modulus < 2)
        throw ParameterError("modulus must be >= 2, got " + std::to_string(modulus));
}

} // namespace

std::string_view action_name(Action a) { return kActionNames[static_cast<std::size_t>(a)]; }

std::optional<Action> action_from_name(std::string_view name)
{
    for (std::size_t i = 0; i < kActionNames.size(); ++i)
        if (kActionNames[i] == name)
            return static_cast<Action>(i);
    return std::nullopt;
}

std::string_view operator_symbol(Operator op) { return kOperatorSymbols[static_cast<std::size_t>(op)]; }

Vocabulary::Vocabulary(int modulus) : modulus_(modulus) { check_modulus(modulus); }

Token Vocabulary::digit(int residue) const
{
    if (residue < 0 || residue >= modulus_)
        throw ParameterError("residue " + std::to_string(residue) + " outside [0, " +
                             std::to_string(modulus_) + ")");
    return residue;
}

std::optional<Operator> Vocabulary::operator_of(Token t) const
{
    if (t >= modulus_ && t < modulus_ + 3)
        return static_cast<Operator>(t - modulus_);
    return std::nullopt;
}

std::optional<Action> Vocabulary::action_of(Token t) const
{
    if (t >= modulus_ + 3 && t < modulus_ + 8)
        return static_cast<Action>(t - modulus_ - 3);
    return std::nullopt;
}

std::string Vocabulary::name(Token t) const
{
    if (!contains(t))
        throw ParameterError("token id " + std::to_string(t) + " outside vocabulary");
    if (is_digit(t))
        return std::to_string(t);
    if (auto o = operator_of(t))
        return std::string(operator_symbol(*o));
    if (auto a = action_of(t))
        return std::string(action_name(*a));
    if (t == separator())
        return "|";
    if (t == answer_marker())
        return "=";
    return "<eos>";
}

std::optional<Token> Vocabulary::find(std::string_view name) const
{
    for (std::size_t t = 0; t < size(); ++t)
        if (this->name(static_cast<Token>(t)) == name)
            return static_cast<Token>(t);
    return std::nullopt;
}

std::string Vocabulary::decode(std::span<const Token> tokens) const
{
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i)
            out += ' ';
        out += name(tokens[i]);
    }
    return out;
}

std::vector<Token> Vocabulary::encode(std::string_view text) const
{
    std::vector<Token> out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
        auto t = find(word);
        if (!t)
            throw ParseError("unknown token '" + word + "'");
        out.push_back(*t);
    }
    return out;
}

std::uint64_t Vocabulary::hash() const
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t t = 0; t < size(); ++t) {
        for (char c : name(static_cast<Token>(t)) + '\x1f') {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

int apply_condition(int value, Condition c, int modulus)
{
    switch (c.op) {
    case Operator::Add:
        return (value + c.operand) % modulus;
    case Operator::Sub:
        return ((value - c.operand) % modulus + modulus) % modulus;
    case Operator::Mul:
        return static_cast<int>((static_cast<long long>(value) * c.operand) % modulus);
    }
    return value;
}

std::vector<Token> encode_question(const Vocabulary& vocab, int initial_value,
                                   std::span<const Condition> ops)
{
    std::vector<Token> tokens;
    tokens.reserve(2 + 2 * ops.size());
    tokens.push_back(vocab.separator());
    tokens.push_back(vocab.digit(initial_value));
    for (const auto& c : ops) {
        tokens.push_back(vocab.op(c.op));
        tokens.push_back(vocab.digit(c.operand));
    }
    return tokens;
}

DecodedQuestion decode_question(const Vocabulary& vocab, std::span<const Token> tokens)
{
    if (tokens.size() < 2 || tokens.size() % 2 != 0 || tokens[0] != vocab.separator() ||
        !vocab.is_digit(tokens[1]))
        throw ParseError("malformed question token sequence");
    DecodedQuestion q;
    q.initial_value = tokens[1];
    for (std::size_t i = 2; i < tokens.size(); i += 2) {
        auto op = vocab.operator_of(tokens[i]);
        if (!op || !vocab.is_digit(tokens[i + 1]))
            throw ParseError("malformed condition at token " + std::to_string(i));
        q.ops.push_back({*op, tokens[i + 1]});
    }
    return q;
}

ReasoningTask make_task(int initial_value, std::vector<Condition> ops, int modulus,
                        std::uint64_t seed)
{
    check_modulus(modulus);
    if (ops.empty())
        throw ParameterError("a task needs at least one condition");
    if (initial_value < 0 || initial_value >= modulus)
        throw ParameterError("initial value outside [0, modulus)");
    const Vocabulary vocab(modulus);
    ReasoningTask task;
    task.initial_value = initial_value;
    task.modulus = modulus;
    task.seed = seed;
    task.question_tokens = encode_question(vocab, initial_value, ops);
    int value = initial_value;
    for (const auto& c : ops) {
        if (c.operand < 0 || c.operand >= modulus)
            throw ParameterError("operand outside [0, modulus)");
        value = apply_condition(value, c, modulus);
    }
    task.answer = value;
    task.ops = std::move(ops);
    task.pcc = static_cast<int>(task.ops.size()) + 1;
    return task;
}

ReasoningTask generate_task(int chain_length, int modulus, std::uint64_t seed)
{
    if (chain_length < 1)
        throw ParameterError("chain length must be >= 1, got " + std::to_string(chain_length));
    check_modulus(modulus);
    Rng rng(seed);
    const auto m = static_cast<std::uint64_t>(modulus);
    const int x0 = static_cast<int>(rng.below(m));
    std::vector<Condition> ops(static_cast<std::size_t>(chain_length));
    for (auto& c : ops) {
        c.op = static_cast<Operator>(rng.below(3));
        c.operand = static_cast<int>(rng.below(m));
    }
    return make_task(x0, std::move(ops), modulus, seed);
}

std::vector<ReasoningTask> generate_task_set(std::size_t count, int min_chain, int max_chain,
                                             int modulus, std::uint64_t seed)
{
    if (min_chain < 1 || max_chain < min_chain)
        throw ParameterError("invalid chain length range");
    std::vector<ReasoningTask> tasks;
    tasks.reserve(count);
    const auto span = static_cast<std::uint64_t>(max_chain - min_chain + 1);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint64_t s = derive_seed(seed, i);
        Rng pick(s ^ 0x5bd1e995ULL);
        const int m = min_chain + static_cast<int>(pick.below(span));
        tasks.push_back(generate_task(m, modulus, s));
    }
    return tasks;
}

std::vector<int> intermediate_values(const ReasoningTask& task)
{
    std::vector<int> values{task.initial_value};
    values.reserve(task.ops.size() + 1);
    for (const auto& c : task.ops)
        values.push_back(apply_condition(values.back(), c, task.modulus));
    return values;
}

int pcc_of(const ReasoningTask& task) { return static_cast<int>(task.ops.size()) + 1; }

int noisy_pcc(const ReasoningTask& task, int amplitude, Rng& rng)
{
    if (amplitude < 0)
        throw ParameterError("noise amplitude must be >= 0");
    if (amplitude == 0)
        return pcc_of(task);
    const auto width = static_cast<std::uint64_t>(2 * amplitude + 1);
    const int noise = static_cast<int>(rng.below(width)) - amplitude;
    return std::max(1, pcc_of(task) + noise);
}

std::optional<int> extract_answer(const Vocabulary& vocab, std::span<const Token> output)
{
    for (std::size_t i = 0; i < output.size(); ++i) {
        if (output[i] != vocab.answer_marker())
            continue;
        if (i + 1 < output.size() && vocab.is_digit(output[i + 1]))
            return output[i + 1];
        return std::nullopt;
    }
    return std::nullopt;
}

int verify(const ReasoningTask& task, std::span<const Token> output)
{
    const Vocabulary vocab(task.modulus);
    auto answer = extract_answer(vocab, output);
    return answer && *answer == task.answer ? 1 : 0;
}

bool MdpState::terminal(const Vocabulary& vocab) const
{
    return generated_tokens.size() >= max_len ||
           (!generated_tokens.empty() && generated_tokens.back() == vocab.eos());
}

MdpState step(const MdpState& state, Token token, const Vocabulary& vocab)
{
    if (!vocab.contains(token))
        throw ParameterError("token id " + std::to_string(token) + " outside vocabulary");
    if (state.generated_tokens.size() >= state.max_len)
        throw LengthError("cannot extend a state already at max_len " +
                          std::to_string(state.max_len));
    if (!state.generated_tokens.empty() && state.generated_tokens.back() == vocab.eos())
        throw ParameterError("cannot extend a state that ended with EOS");
    MdpState next = state;
    next.generated_tokens.push_back(token);
    return next;
}

std::vector<Token> hint_tokens(const Vocabulary& vocab, const ReasoningTask& task, Action action,
                               HintCursor& cursor)
{
    const int m = static_cast<int>(task.ops.size());
    const int last = m - 1;
    const auto values = intermediate_values(task);
    auto reveal = [&](int k) {
        const auto& c = task.ops[static_cast<std::size_t>(k)];
        return std::vector<Token>{vocab.separator(), vocab.digit(values[static_cast<std::size_t>(k)]),
                                  vocab.op(c.op), vocab.digit(c.operand)};
    };
    cursor.progress = std::clamp(cursor.progress, 0, last);

    switch (action) {
    case Action::SA: {
        std::vector<Token> out{vocab.separator(),
                               vocab.digit(values[static_cast<std::size_t>(cursor.progress)])};
        for (int k = cursor.progress; k < m; ++k) {
            const auto& c = task.ops[static_cast<std::size_t>(k)];
            out.push_back(vocab.op(c.op));
            out.push_back(vocab.digit(c.operand));
        }
        return out;
    }
    case Action::DC: {
        const int remaining = m - cursor.progress;
        cursor.progress = std::min(last, cursor.progress + (remaining + 1) / 2);
        return reveal(cursor.progress);
    }
    case Action::OST:
        cursor.progress = std::min(last, cursor.progress + 1);
        return reveal(cursor.progress);
    case Action::SR:
        return reveal(cursor.progress);
    case Action::CoT:
        return {};
    }
    return {};
}

namespace {

nlohmann::json task_to_json(const ReasoningTask& t)
{
    nlohmann::json ops = nlohmann::json::array();
    for (const auto& c : t.ops)
        ops.push_back({std::string(operator_symbol(c.op)), c.operand});
    return {{"initial_value", t.initial_value}, {"ops", ops},       {"modulus", t.modulus},
            {"answer", t.answer},               {"pcc", t.pcc},     {"seed", t.seed}};
}

template <typename T>
T field(const nlohmann::json& j, const char* key, std::size_t line)
{
    if (!j.contains(key))
        throw ParseError("line " + std::to_string(line) + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError("line " + std::to_string(line) + ": field '" + key + "' has wrong type");
    }
}

} // namespace

void write_tasks(std::ostream& out, std::span<const ReasoningTask> tasks)
{
    for (const auto& t : tasks)
        out << task_to_json(t).dump() << '\n';
}

std::vector<ReasoningTask> read_tasks(std::istream& in)
{
    std::vector<ReasoningTask> tasks;
    std::string text;
    std::size_t line = 0;
    while (std::getline(in, text)) {
        ++line;
        if (text.find_first_not_of(" \t\r") == std::string::npos)
            continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("line " + std::to_string(line) + ": " + e.what());
        }
        const auto ops_json = field<nlohmann::json>(j, "ops", line);
        if (!ops_json.is_array())
            throw ParseError("line " + std::to_string(line) + ": field 'ops' must be an array");
        std::vector<Condition> ops;
        for (const auto& o : ops_json) {
            if (!o.is_array() || o.size() != 2 || !o[0].is_string() || !o[1].is_number_integer())
                throw ParseError("line " + std::to_string(line) +
                                 ": field 'ops' entries must be [symbol, operand]");
            auto op = operator_from_symbol(o[0].get<std::string>());
            if (!op)
                throw ParseError("line " + std::to_string(line) + ": unknown operator in 'ops'");
            ops.push_back({*op, o[1].get<int>()});
        }
        ReasoningTask task;
        try {
            task = make_task(field<int>(j, "initial_value", line), std::move(ops),
                             field<int>(j, "modulus", line), field<std::uint64_t>(j, "seed", line));
        } catch (const ParameterError& e) {
            throw ParseError("line " + std::to_string(line) + ": " + e.what());
        }
        if (field<int>(j, "answer", line) != task.answer)
            throw ParseError("line " + std::to_string(line) + ": field 'answer' disagrees with ops");
        if (field<int>(j, "pcc", line) != task.pcc)
            throw ParseError("line " + std::to_string(line) + ": field 'pcc' disagrees with ops");
        tasks.push_back(std::move(task));
    }
    return tasks;
}

void save_tasks(const std::string& path, std::span<const ReasoningTask> tasks)
{
    std::ofstream out(path);
    if (!out)
        throw Error("cannot open " + path + " for writing");
    write_tasks(out, tasks);
}

std::vector<ReasoningTask> load_tasks(const std::string& path)
{
    std::ifstream in(path);
    if (!in)
        throw ParseError("cannot open task file " + path);
    return read_tasks(in);
}

} // namespace tapo
