// Structured explanations rendered from decision points, with consistency
// validation against the trace and a refinement pass for failed claims.
#pragma once

#include <cmath>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "sage/inverse.hpp"
#include "sage/tokens.hpp"
#include "sage/trace.hpp"

namespace sage {

struct DecisionJustification {
    std::size_t step_index = 0;
    std::vector<std::size_t> top_contributors; // up to 3 positions, significance desc
    std::string rationale;
};

struct AlternativeAnalysisEntry {
    std::size_t step_index = 0;
    std::vector<Alternative> rejected;
};

struct ConfidenceAssessmentEntry {
    std::size_t step_index = 0;
    double confidence = 0.0;
};

struct CriticalDependencyEntry {
    std::size_t step_index = 0;
    std::vector<std::size_t> positions; // ascending
};

struct Explanation {
    std::vector<DecisionJustification> decision_justifications;
    std::vector<AlternativeAnalysisEntry> alternative_analysis;
    std::vector<ConfidenceAssessmentEntry> confidence_assessment;
    double overall_min_confidence = 1.0;
    bool low_confidence_flag = false;
    std::vector<CriticalDependencyEntry> critical_dependencies; // one per step
    double consistency_score = 0.0;
    bool refined = false;
    std::uint64_t trace_id = 0;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline std::vector<std::size_t> top_contributors_of(const std::vector<PathwayComponent>& sorted) {
    std::vector<std::size_t> out;
    for (const auto& c : sorted) {
        if (c.significance <= 0.0 || out.size() == 3) break;
        out.push_back(c.token_index);
    }
    return out;
}

// Positions whose significance reaches half the step's maximum.
inline std::vector<std::size_t> dependency_set(const std::vector<double>& sig_row) {
    double best = 0.0;
    for (double s : sig_row) best = std::max(best, s);
    std::vector<std::size_t> out;
    if (best <= 0.0) return out;
    for (std::size_t j = 0; j < sig_row.size(); ++j)
        if (sig_row[j] >= 0.5 * best) out.push_back(j);
    return out;
}

inline std::string render_rationale(const ForwardTrace& tr, const DecisionPoint& d) {
    const std::size_t i = d.step_index - 1;
    std::string text = "step " + std::to_string(d.step_index) + " chose '" +
                       tok::name(tr.first_token(i)) + "' (p=" +
                       format_double(tr.step_first_dist[i][std::size_t(tr.first_token(i))]) + ")";
    const auto tops = top_contributors_of(d.components);
    if (!tops.empty()) {
        text += "; strongest context:";
        for (std::size_t j : tops)
            text += " pos " + std::to_string(j) + " '" + tok::name(tr.token_at(j)) + "'";
    }
    text += "; rationale=" + d.selection_rationale_code;
    return text;
}

} // namespace detail

// Renders the four explanation sections from decision points. Deterministic:
// identical trace and decision points give a byte-identical explanation.
inline Explanation generate_explanation(const std::vector<DecisionPoint>& decision_points,
                                        const ForwardTrace& tr) {
    for (const auto& d : decision_points)
        if (d.trace_id != tr.trace_id)
            throw IntegrityError("generate_explanation: decision point from a different trace");
    if (!tr.analysis_ready)
        throw StateError("generate_explanation: run analyze_trace first");

    Explanation e;
    e.trace_id = tr.trace_id;
    for (const auto& d : decision_points) {
        DecisionJustification j;
        j.step_index = d.step_index;
        j.top_contributors = detail::top_contributors_of(d.components);
        j.rationale = detail::render_rationale(tr, d);
        e.decision_justifications.push_back(std::move(j));
        e.alternative_analysis.push_back({d.step_index, d.alternatives});
        e.confidence_assessment.push_back({d.step_index, d.confidence});
        e.overall_min_confidence = std::min(e.overall_min_confidence, d.confidence);
    }
    e.low_confidence_flag = !decision_points.empty() && e.overall_min_confidence < 0.5;
    for (std::size_t i = 0; i < tr.num_steps(); ++i)
        e.critical_dependencies.push_back({i + 1, detail::dependency_set(tr.significance[i])});
    e.consistency_score = 1.0; // freshly generated; caller may re-validate
    return e;
}

// Fraction of checkable claims that survive recomputation. Four claims per
// cited decision point: the step is a decision point, the top contributors,
// the confidence value, and the alternative ordering.
inline double validate_consistency(const Explanation& e, const ForwardTrace& tr) {
    if (!tr.analysis_ready) throw StateError("validate_consistency: run analyze_trace first");
    const auto dps = extract_decision_points(tr, tr.config.decision_threshold);
    std::size_t total = 0, matched = 0;

    for (std::size_t k = 0; k < e.decision_justifications.size(); ++k) {
        const auto& j = e.decision_justifications[k];
        total += 4;
        const bool in_range = j.step_index >= 1 && j.step_index <= tr.num_steps();

        bool is_dp = false;
        for (const auto& d : dps) is_dp = is_dp || d.step_index == j.step_index;
        if (is_dp) ++matched;

        if (in_range) {
            auto components = compute_pathway(tr, j.step_index);
            std::stable_sort(components.begin(), components.end(),
                             [](const PathwayComponent& a, const PathwayComponent& b) {
                                 if (a.significance != b.significance)
                                     return a.significance > b.significance;
                                 return a.token_index < b.token_index;
                             });
            if (j.top_contributors == detail::top_contributors_of(components)) ++matched;

            const std::size_t i = j.step_index - 1;
            const auto alts = generate_alternatives(tr, j.step_index, tr.config.top_k_alternatives);
            if (k < e.confidence_assessment.size() &&
                e.confidence_assessment[k].step_index == j.step_index) {
                const double ref = compute_confidence(
                    tr.step_first_dist[i][std::size_t(tr.first_token(i))], alts);
                if (std::abs(e.confidence_assessment[k].confidence - ref) <= 1e-9) ++matched;
            }
            if (k < e.alternative_analysis.size() &&
                e.alternative_analysis[k].step_index == j.step_index) {
                const auto& got = e.alternative_analysis[k].rejected;
                bool ok = got.size() == alts.size();
                for (std::size_t a = 0; ok && a < alts.size(); ++a)
                    ok = got[a].token == alts[a].token &&
                         std::abs(got[a].probability - alts[a].probability) <= 1e-12 &&
                         got[a].rejection_code == alts[a].rejection_code;
                if (ok) ++matched;
            }
        }
    }
    if (total == 0) return 1.0;
    return double(matched) / double(total);
}

// Regenerates failed claims from the trace. Claims that already matched
// regenerate to identical content, so only failures change. Idempotent;
// calling it on an already-consistent explanation warns and returns it
// unchanged.
inline Explanation refine_explanation(const Explanation& e, const ForwardTrace& tr) {
    const double score = validate_consistency(e, tr);
    if (score >= tr.config.consistency_threshold) {
        std::cerr << "refine_explanation: consistency " << score
                  << " already meets the threshold; nothing to refine\n";
        return e;
    }
    const auto dps = extract_decision_points(tr, tr.config.decision_threshold);
    Explanation fresh = generate_explanation(dps, tr);
    fresh.refined = true;
    fresh.consistency_score = validate_consistency(fresh, tr);
    return fresh;
}

// Pipeline tail of the explanation stage: validate, refine when below the
// threshold, and stamp the final score.
inline Explanation finalize_explanation(Explanation e, const ForwardTrace& tr) {
    e.consistency_score = validate_consistency(e, tr);
    if (e.consistency_score < tr.config.consistency_threshold) {
        e = refine_explanation(e, tr);
    }
    return e;
}

inline std::string render_text(const Explanation& e, const ForwardTrace& tr) {
    std::string out;
    out += "== reasoning chain ==\n";
    for (std::size_t i = 0; i < tr.num_steps(); ++i) {
        out += "step " + std::to_string(i + 1) + ":";
        for (std::size_t p = tr.abs_begin(i); p < tr.abs_end(i); ++p)
            out += " " + tok::name(tr.token_at(p));
        out += "  (logprob " + detail::format_double(tr.steps[i].step_logprob) + ")\n";
    }
    out += "== decision justifications ==\n";
    for (const auto& j : e.decision_justifications) out += j.rationale + "\n";
    out += "== alternative analysis ==\n";
    for (const auto& a : e.alternative_analysis) {
        out += "step " + std::to_string(a.step_index) + " rejected:";
        for (const auto& alt : a.rejected)
            out += " '" + tok::name(alt.token) + "' (p=" + detail::format_double(alt.probability) +
                   ", " + alt.rejection_code + ")";
        out += "\n";
    }
    out += "== confidence assessment ==\n";
    for (const auto& c : e.confidence_assessment)
        out += "step " + std::to_string(c.step_index) +
               " confidence " + detail::format_double(c.confidence) + "\n";
    out += "overall min confidence " + detail::format_double(e.overall_min_confidence) +
           (e.low_confidence_flag ? " [low]" : "") + "\n";
    out += "== critical dependencies ==\n";
    for (const auto& d : e.critical_dependencies) {
        out += "step " + std::to_string(d.step_index) + " depends on:";
        for (std::size_t p : d.positions)
            out += " pos " + std::to_string(p) + " '" + tok::name(tr.token_at(p)) + "'";
        out += "\n";
    }
    out += "consistency score " + detail::format_double(e.consistency_score) +
           (e.refined ? " (refined)" : "") + "\n";
    return out;
}

} // namespace sage
