// Synthetic reasoning tasks with exact gold chains, dependency maps and
// explanation targets. Three kinds: modular arithmetic chains, boolean
// logic chains, and max/min comparison chains. All share the grammar
//   prompt:    <bos> v0 op1 v1 ... opR vR =
//   generated: r1 ; r2 ; ... rR ; ANS rR <eos>
// where r_k = op_k(r_{k-1}, v_k) and ';' closes each intermediate step.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sage/errors.hpp"
#include "sage/tokens.hpp"

namespace sage {

enum class TaskKind { ArithmeticChain, BooleanLogic, ComparisonChain };

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "arithmetic_chain") return TaskKind::ArithmeticChain;
    if (s == "boolean_logic") return TaskKind::BooleanLogic;
    if (s == "comparison_chain") return TaskKind::ComparisonChain;
    throw UsageError("unknown task kind '" + s + "'");
}

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::ArithmeticChain: return "arithmetic_chain";
        case TaskKind::BooleanLogic: return "boolean_logic";
        case TaskKind::ComparisonChain: return "comparison_chain";
    }
    return "?";
}

struct SyntheticTask {
    TaskKind kind = TaskKind::ArithmeticChain;
    std::vector<int> prompt;
    std::vector<int> gold_chain;
    int gold_answer = 0; // token id
    // Per step: absolute positions (over prompt + generated) it depends on.
    std::vector<std::vector<std::size_t>> gold_deps;
    std::vector<std::size_t> gold_primary_dep; // explanation target, per step
    std::vector<tok::OpKind> gold_op_kind;     // explanation target, per step
    std::vector<std::vector<int>> allowed_first_tokens; // grammar, per step
    std::vector<int> gold_runner_up; // most-confusable first token, -1 if none
    std::vector<std::size_t> step_begin, step_end; // spans within gold_chain

    std::size_t num_steps() const { return step_begin.size(); }
    std::size_t total_len() const { return prompt.size() + gold_chain.size(); }

    // A step is a gold decision point when its dependency set is a strict
    // subset of the context visible at its decision row.
    bool gold_decision_label(std::size_t i) const {
        const std::size_t visible = prompt.size() + step_begin[i]; // positions 0..q
        return gold_deps[i].size() < visible;
    }
};

namespace detail {

inline int apply_op(TaskKind kind, int op, int a, int b) {
    switch (kind) {
        case TaskKind::ArithmeticChain:
            if (op == tok::kPlus) return (a + b) % 10;
            if (op == tok::kMinus) return (a - b + 10) % 10;
            if (op == tok::kTimes) return (a * b) % 10;
            break;
        case TaskKind::BooleanLogic: {
            const bool x = a == tok::kTrue, y = b == tok::kTrue;
            if (op == tok::kAnd) return (x && y) ? tok::kTrue : tok::kFalse;
            if (op == tok::kOr) return (x || y) ? tok::kTrue : tok::kFalse;
            if (op == tok::kXor) return (x != y) ? tok::kTrue : tok::kFalse;
            break;
        }
        case TaskKind::ComparisonChain:
            if (op == tok::kMax) return a > b ? a : b;
            if (op == tok::kMin) return a < b ? a : b;
            break;
    }
    throw UsageError("apply_op: operator does not belong to task kind");
}

inline int confusable_op(int op) {
    switch (op) {
        case tok::kPlus: return tok::kMinus;
        case tok::kMinus: return tok::kPlus;
        case tok::kTimes: return tok::kPlus;
        case tok::kAnd: return tok::kOr;
        case tok::kOr: return tok::kAnd;
        case tok::kXor: return tok::kOr;
        case tok::kMax: return tok::kMin;
        case tok::kMin: return tok::kMax;
        default: throw UsageError("confusable_op: not an operator");
    }
}

inline int fallback_runner_up(TaskKind kind, int value_token) {
    if (kind == TaskKind::BooleanLogic)
        return value_token == tok::kTrue ? tok::kFalse : tok::kTrue;
    return (value_token + 1) % 10;
}

} // namespace detail

// Deterministic task construction from explicit operands and operators.
inline SyntheticTask build_task(TaskKind kind, const std::vector<int>& operands,
                                const std::vector<int>& ops) {
    if (operands.size() != ops.size() + 1 || ops.empty())
        throw UsageError("build_task: need R ops and R+1 operands");
    SyntheticTask t;
    t.kind = kind;
    const std::size_t r = ops.size();

    t.prompt.push_back(tok::kBos);
    t.prompt.push_back(operands[0]);
    for (std::size_t k = 0; k < r; ++k) {
        t.prompt.push_back(ops[k]);
        t.prompt.push_back(operands[k + 1]);
    }
    t.prompt.push_back(tok::kEquals);
    const std::size_t prompt_len = t.prompt.size(); // 2R + 3

    int value = operands[0];
    for (std::size_t k = 1; k <= r; ++k) {
        value = detail::apply_op(kind, ops[k - 1], value, operands[k]);
        t.step_begin.push_back(t.gold_chain.size());
        t.gold_chain.push_back(value);
        t.gold_chain.push_back(tok::kDelimiter);
        t.step_end.push_back(t.gold_chain.size());

        std::vector<std::size_t> deps;
        if (k == 1)
            deps = {1, 2, 3}; // v0, op1, v1
        else
            deps = {prompt_len + (k - 2) * 2, // r_{k-1} inside the chain
                    2 * k, 2 * k + 1};        // op_k, v_k in the prompt
        t.gold_deps.push_back(deps);
        t.gold_primary_dep.push_back(k == 1 ? std::size_t(1) : prompt_len + (k - 2) * 2);
        t.gold_op_kind.push_back(tok::op_kind_of(ops[k - 1]));

        std::vector<int> allowed;
        if (kind == TaskKind::BooleanLogic)
            allowed = {tok::kTrue, tok::kFalse};
        else
            for (int d = 0; d < 10; ++d) allowed.push_back(d);
        t.allowed_first_tokens.push_back(allowed);
        t.gold_runner_up.push_back(-1); // filled after the loop
    }
    t.gold_answer = value;

    // answer step: ANS r_R <eos>
    t.step_begin.push_back(t.gold_chain.size());
    t.gold_chain.push_back(tok::kAnswer);
    t.gold_chain.push_back(value);
    t.gold_chain.push_back(tok::kEos);
    t.step_end.push_back(t.gold_chain.size());
    t.gold_deps.push_back({prompt_len + (r - 1) * 2});
    t.gold_primary_dep.push_back(prompt_len + (r - 1) * 2);
    t.gold_op_kind.push_back(tok::OpKind::Answer);
    t.allowed_first_tokens.push_back({tok::kAnswer});
    t.gold_runner_up.push_back(-1);

    // Runner-up targets: the result under the most-confusable operator.
    int running = operands[0];
    for (std::size_t k = 1; k <= r; ++k) {
        const int correct = detail::apply_op(kind, ops[k - 1], running, operands[k]);
        const int confused =
            detail::apply_op(kind, detail::confusable_op(ops[k - 1]), running, operands[k]);
        t.gold_runner_up[k - 1] =
            confused != correct ? confused : detail::fallback_runner_up(kind, correct);
        running = correct;
    }
    return t;
}

// Re-executes the task semantics over the prompt and checks every recorded
// step value and the final answer. The generator calls this before handing
// tasks out.
inline bool verify_task(const SyntheticTask& t) {
    const std::size_t r = (t.prompt.size() - 3) / 2;
    if (t.prompt.size() != 2 * r + 3 || t.num_steps() != r + 1) return false;
    if (t.prompt.front() != tok::kBos || t.prompt.back() != tok::kEquals) return false;
    int value = t.prompt[1];
    for (std::size_t k = 1; k <= r; ++k) {
        value = detail::apply_op(t.kind, t.prompt[2 * k], value, t.prompt[2 * k + 1]);
        if (t.gold_chain[t.step_begin[k - 1]] != value) return false;
        if (t.gold_chain[t.step_begin[k - 1] + 1] != tok::kDelimiter) return false;
        if (t.gold_deps[k - 1].empty()) return false;
    }
    const std::size_t a = t.step_begin[r];
    if (t.gold_chain[a] != tok::kAnswer || t.gold_chain[a + 1] != value ||
        t.gold_chain[a + 2] != tok::kEos)
        return false;
    return value == t.gold_answer;
}

// Deterministic batch: same (kind, size, seed) give identical tasks.
inline std::vector<SyntheticTask> make_synthetic_batch(TaskKind kind, std::size_t size,
                                                       std::uint64_t seed) {
    if (size == 0) throw UsageError("make_synthetic_batch: size must be positive");
    std::mt19937_64 rng(seed ^ 0x5a675e11ull);
    std::vector<SyntheticTask> out;
    out.reserve(size);
    for (std::size_t n = 0; n < size; ++n) {
        const std::size_t r = 2 + rng() % 2; // 2 or 3 operators
        std::vector<int> operands, ops;
        for (std::size_t i = 0; i <= r; ++i) {
            if (kind == TaskKind::BooleanLogic)
                operands.push_back(rng() % 2 == 0 ? tok::kTrue : tok::kFalse);
            else
                operands.push_back(int(rng() % 10));
        }
        for (std::size_t i = 0; i < r; ++i) {
            switch (kind) {
                case TaskKind::ArithmeticChain: {
                    const int choices[3] = {tok::kPlus, tok::kMinus, tok::kTimes};
                    ops.push_back(choices[rng() % 3]);
                    break;
                }
                case TaskKind::BooleanLogic: {
                    const int choices[3] = {tok::kAnd, tok::kOr, tok::kXor};
                    ops.push_back(choices[rng() % 3]);
                    break;
                }
                case TaskKind::ComparisonChain: {
                    const int choices[2] = {tok::kMax, tok::kMin};
                    ops.push_back(choices[rng() % 2]);
                    break;
                }
            }
        }
        SyntheticTask t = build_task(kind, operands, ops);
        if (!verify_task(t))
            throw IntegrityError("make_synthetic_batch: gold chain failed re-execution");
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace sage
