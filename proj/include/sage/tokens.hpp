// Shared token alphabet for the synthetic reasoning tasks.
#pragma once

#include <array>
#include <string>

#include "sage/errors.hpp"

namespace sage::tok {

// Digits occupy ids 0..9.
inline constexpr int kTrue = 10;
inline constexpr int kFalse = 11;
inline constexpr int kPlus = 12;
inline constexpr int kMinus = 13;
inline constexpr int kTimes = 14;
inline constexpr int kAnd = 15;
inline constexpr int kOr = 16;
inline constexpr int kXor = 17;
inline constexpr int kMax = 18;
inline constexpr int kMin = 19;
inline constexpr int kEquals = 20;
inline constexpr int kDelimiter = 21;
inline constexpr int kAnswer = 22;
inline constexpr int kBos = 23;
inline constexpr int kEos = 24;
inline constexpr int kAlphabetSize = 25;

inline bool is_digit(int t) { return t >= 0 && t <= 9; }
inline bool is_bool(int t) { return t == kTrue || t == kFalse; }
inline bool is_arith_op(int t) { return t == kPlus || t == kMinus || t == kTimes; }
inline bool is_bool_op(int t) { return t == kAnd || t == kOr || t == kXor; }
inline bool is_cmp_op(int t) { return t == kMax || t == kMin; }

inline std::string name(int t) {
    if (is_digit(t)) return std::string(1, char('0' + t));
    switch (t) {
        case kTrue: return "T";
        case kFalse: return "F";
        case kPlus: return "+";
        case kMinus: return "-";
        case kTimes: return "*";
        case kAnd: return "AND";
        case kOr: return "OR";
        case kXor: return "XOR";
        case kMax: return "MAX";
        case kMin: return "MIN";
        case kEquals: return "=";
        case kDelimiter: return ";";
        case kAnswer: return "ANS";
        case kBos: return "<bos>";
        case kEos: return "<eos>";
        default: return "<" + std::to_string(t) + ">";
    }
}

// Operation-kind classes predicted by the explanation read-out head.
enum class OpKind : int {
    Add = 0, Sub = 1, Mul = 2,
    And = 3, Or = 4, Xor = 5,
    Max = 6, Min = 7,
    Answer = 8,
};
inline constexpr int kNumOpKinds = 9;

inline OpKind op_kind_of(int op_token) {
    switch (op_token) {
        case kPlus: return OpKind::Add;
        case kMinus: return OpKind::Sub;
        case kTimes: return OpKind::Mul;
        case kAnd: return OpKind::And;
        case kOr: return OpKind::Or;
        case kXor: return OpKind::Xor;
        case kMax: return OpKind::Max;
        case kMin: return OpKind::Min;
        default: throw UsageError("op_kind_of: not an operator token");
    }
}

} // namespace sage::tok
