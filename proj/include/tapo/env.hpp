#pragma once

// Synthetic verifiable reasoning tasks: modular arithmetic chains encoded as
// token sequences, a token-level MDP over them, and a binary verifier.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tapo/rng.hpp"

namespace tapo {

using Token = std::int32_t;

enum class Operator : std::uint8_t { Add = 0, Sub = 1, Mul = 2 };

/// The five abstract reasoning actions. The integer ids are stable and are
/// what library files store.
enum class Action : std::uint8_t {
    DC = 0,  // divide and conquer
    SR = 1,  // self-reflection
    SA = 2,  // system analysis
    OST = 3, // one-step thought
    CoT = 4, // chain of thought
};

inline constexpr std::size_t kNumActions = 5;
inline constexpr std::array<Action, kNumActions> kAllActions{Action::DC, Action::SR, Action::SA,
                                                             Action::OST, Action::CoT};

std::string_view action_name(Action a);
std::optional<Action> action_from_name(std::string_view name);
std::string_view operator_symbol(Operator op);

/// Token inventory for a given modulus.
///
/// Layout: residue digits [0, M), then the three operators, the five action
/// tokens, the step separator, the answer marker and EOS.
class Vocabulary {
public:
    explicit Vocabulary(int modulus);

    int modulus() const { return modulus_; }
    std::size_t size() const { return static_cast<std::size_t>(modulus_) + 11; }

    Token digit(int residue) const;
    Token op(Operator o) const { return modulus_ + static_cast<Token>(o); }
    Token action(Action a) const { return modulus_ + 3 + static_cast<Token>(a); }
    Token separator() const { return modulus_ + 8; }
    Token answer_marker() const { return modulus_ + 9; }
    Token eos() const { return modulus_ + 10; }

    bool contains(Token t) const { return t >= 0 && static_cast<std::size_t>(t) < size(); }
    bool is_digit(Token t) const { return t >= 0 && t < modulus_; }
    std::optional<Operator> operator_of(Token t) const;
    std::optional<Action> action_of(Token t) const;

    std::string name(Token t) const;
    std::optional<Token> find(std::string_view name) const;

    /// Space-separated token names.
    std::string decode(std::span<const Token> tokens) const;
    /// Inverse of decode. Throws ParseError on unknown names.
    std::vector<Token> encode(std::string_view text) const;

    /// FNV-1a over the token names, used to tag checkpoints.
    std::uint64_t hash() const;

    friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

private:
    int modulus_;
};

struct Condition {
    Operator op = Operator::Add;
    int operand = 0;

    friend bool operator==(const Condition&, const Condition&) = default;
};

int apply_condition(int value, Condition c, int modulus);

struct ReasoningTask {
    int initial_value = 0;
    std::vector<Condition> ops;
    int modulus = 10;
    int answer = 0;
    std::vector<Token> question_tokens;
    int pcc = 1;
    std::uint64_t seed = 0;

    std::size_t chain_length() const { return ops.size(); }

    friend bool operator==(const ReasoningTask&, const ReasoningTask&) = default;
};

/// Question encoding: separator, initial value, then (operator, operand) pairs.
std::vector<Token> encode_question(const Vocabulary& vocab, int initial_value,
                                   std::span<const Condition> ops);

struct DecodedQuestion {
    int initial_value = 0;
    std::vector<Condition> ops;
};
DecodedQuestion decode_question(const Vocabulary& vocab, std::span<const Token> tokens);

/// Builds a task from explicit conditions.
ReasoningTask make_task(int initial_value, std::vector<Condition> ops, int modulus,
                        std::uint64_t seed = 0);

/// Random chain of `chain_length` conditions modulo `modulus`; deterministic in seed.
ReasoningTask generate_task(int chain_length, int modulus, std::uint64_t seed);

/// Generates `count` tasks with chain lengths drawn uniformly from
/// [min_chain, max_chain]; task i uses seed derive_seed(seed, i).
std::vector<ReasoningTask> generate_task_set(std::size_t count, int min_chain, int max_chain,
                                             int modulus, std::uint64_t seed);

/// s_0 .. s_m: the running value after each condition.
std::vector<int> intermediate_values(const ReasoningTask& task);

int pcc_of(const ReasoningTask& task);

/// PCC with additive integer noise uniform in [-amplitude, amplitude], clamped at 1.
int noisy_pcc(const ReasoningTask& task, int amplitude, Rng& rng);

/// Residue following the first answer marker, if any.
std::optional<int> extract_answer(const Vocabulary& vocab, std::span<const Token> output);

/// 1 iff the first answer marker is immediately followed by the correct residue.
int verify(const ReasoningTask& task, std::span<const Token> output);

struct MdpState {
    std::vector<Token> question_tokens;
    std::vector<Token> generated_tokens;
    std::size_t max_len = 64;

    bool terminal(const Vocabulary& vocab) const;
    std::size_t length() const { return question_tokens.size() + generated_tokens.size(); }
};

/// Appends one token. Throws LengthError past max_len and ParameterError for
/// tokens outside the vocabulary or after EOS.
MdpState step(const MdpState& state, Token token, const Vocabulary& vocab);

struct Trajectory {
    std::vector<Token> question_tokens;
    std::vector<Token> output_tokens;
    /// log pi_old(o_t | q, o_<t), recorded at sampling time.
    std::vector<double> log_probs;
    int reward = 0;
};

/// Tracks how far a chain of hints has advanced through a task.
struct HintCursor {
    int progress = 0;
};

/// Environment effect of one reasoning action on a task.
///
///   SA  restates the remaining conditions from the cursor onwards.
///   DC  reveals the residue halfway through the remaining chain.
///   OST reveals the next single step.
///   SR  restates the current step as a verification sequence.
///   CoT contributes no hint.
///
/// A revealed step k is written "| s_k op_{k+1} a_{k+1}". The cursor never
/// passes m-1, so hints never contain the final answer.
std::vector<Token> hint_tokens(const Vocabulary& vocab, const ReasoningTask& task, Action action,
                               HintCursor& cursor);

// Task-set files: one JSON object per line with
// {initial_value, ops, modulus, answer, pcc, seed}.
void write_tasks(std::ostream& out, std::span<const ReasoningTask> tasks);
std::vector<ReasoningTask> read_tasks(std::istream& in);
void save_tasks(const std::string& path, std::span<const ReasoningTask> tasks);
std::vector<ReasoningTask> load_tasks(const std::string& path);

} // namespace tapo
