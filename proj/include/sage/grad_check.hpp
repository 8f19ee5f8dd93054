// Central-difference verification of reverse-mode gradients.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sage/errors.hpp"
#include "sage/tensor.hpp"

namespace sage {

struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t entries_checked = 0;
    std::vector<GradCheckEntry> failures; // entries above tolerance
    bool passed(double) const { return failures.empty(); }
};

namespace detail {

// Relative error with an absolute floor: gradients below the floor are
// compared absolutely, since central differences cannot resolve entries
// smaller than the evaluation roundoff divided by 2*epsilon.
inline double rel_error(double a, double b) {
    const double denom = std::max({1e-5, std::abs(a), std::abs(b)});
    return std::abs(a - b) / denom;
}

// Deterministic entry subsample: a fixed-stride sweep seeded per parameter.
inline std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit, std::uint64_t seed) {
    std::vector<std::size_t> idx;
    if (limit == 0 || limit >= n) {
        idx.resize(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        return idx;
    }
    idx.reserve(limit);
    const std::size_t stride = n / limit;
    std::size_t pos = seed % n;
    for (std::size_t i = 0; i < limit; ++i) {
        idx.push_back(pos % n);
        pos += stride == 0 ? 1 : stride;
    }
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    return idx;
}

} // namespace detail

// Compares reverse-mode gradients of the scalar produced by `loss_builder`
// against central finite differences. The builder must be deterministic:
// two evaluations at the same point are required to agree bit-exactly.
// `entries_per_param` = 0 checks every entry; a positive value checks a
// deterministic subsample of that size per parameter tensor.
inline GradCheckReport grad_check(const std::function<Tensor()>& loss_builder,
                                  const std::vector<Parameter*>& params,
                                  double epsilon, double tolerance,
                                  std::size_t entries_per_param = 0) {
    if (!(epsilon >= 1e-6 && epsilon <= 1e-3))
        throw UsageError("grad_check: epsilon must lie in [1e-6, 1e-3]");

    const double f0 = loss_builder().at(0);
    const double f1 = loss_builder().at(0);
    if (f0 != f1)
        throw IntegrityError("grad_check: loss function is not deterministic");

    for (Parameter* p : params) p->tensor.node()->grad.clear(); // drop stale grads
    Tensor loss = loss_builder();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->tensor.grad_or_zeros());

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        auto& w = p->tensor.values_mut();
        const auto entries = detail::pick_entries(w.size(), entries_per_param,
                                                  0x9E3779B97F4A7C15ull * (pi + 1));
        for (std::size_t i : entries) {
            const double saved = w[i];
            w[i] = saved + epsilon;
            const double fp = loss_builder().at(0);
            w[i] = saved - epsilon;
            const double fm = loss_builder().at(0);
            w[i] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double err = detail::rel_error(analytic[pi][i], numeric);
            report.entries_checked++;
            report.max_rel_error = std::max(report.max_rel_error, err);
            if (err > tolerance)
                report.failures.push_back({p->name, i, analytic[pi][i], numeric, err});
        }
    }
    return report;
}

} // namespace sage
