// Scalar utilities over probability vectors: entropy, KL divergence and
// small helpers used by the analysis layer.
#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "sage/errors.hpp"

namespace sage {

inline constexpr double kProbSumTolerance = 1e-6;
inline constexpr double kProbFloor = 1e-12;

inline void check_probability_vector(std::span<const double> p, const char* who) {
    double sum = 0.0;
    for (double x : p) {
        if (x < 0.0) throw UsageError(std::string(who) + ": negative probability entry");
        sum += x;
    }
    if (std::abs(sum - 1.0) > kProbSumTolerance)
        throw UsageError(std::string(who) + ": probabilities do not sum to 1");
}

// Shannon entropy in nats with the 0*ln(0) = 0 convention.
inline double entropy(std::span<const double> p) {
    check_probability_vector(p, "entropy");
    double h = 0.0;
    for (double x : p)
        if (x > 0.0) h -= x * std::log(x);
    return h;
}

// KL(p || q). q is floored at kProbFloor and renormalized so that masked
// hard zeros do not produce infinities; p-side zeros contribute nothing.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) throw UsageError("kl_divergence: length mismatch");
    check_probability_vector(p, "kl_divergence");
    check_probability_vector(q, "kl_divergence");
    double qz = 0.0;
    for (double x : q) qz += std::max(x, kProbFloor);
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        const double qi = std::max(q[i], kProbFloor) / qz;
        kl += p[i] * std::log(p[i] / qi);
    }
    return kl;
}

// Softmax of a plain vector; mirrors the tape kernel's accumulation order.
inline std::vector<double> softmax_vec(std::span<const double> logits) {
    std::vector<double> out(logits.size());
    double m = -std::numeric_limits<double>::infinity();
    for (double x : logits) m = std::max(m, x);
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        z += out[i];
    }
    for (double& x : out) x /= z;
    return out;
}

} // namespace sage
