// Inverse analysis: reconstructs attention pathways from the sealed record,
// scores decision significance, and extracts decision points with
// alternatives and confidence.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sage/errors.hpp"
#include "sage/prob.hpp"
#include "sage/trace.hpp"

namespace sage {

struct PathwayComponent {
    std::size_t token_index = 0;
    int token_id = 0;
    double attention_weight = 0.0; // sealed final-layer head-averaged entry
    double contribution = 0.0;     // L2 norm of the final-layer value contribution
    double significance = 0.0;
};

struct Alternative {
    int token = 0;
    double probability = 0.0;
    std::string rejection_code; // "lower_probability" | "violates_constraint"
};

struct DecisionPoint {
    std::size_t step_index = 0; // 1-based
    std::vector<PathwayComponent> components; // sorted by significance desc
    double confidence = 0.0;
    std::vector<Alternative> alternatives; // probability desc
    std::string selection_rationale_code;  // "dominant_dependency" | "selective_attention"
    std::uint64_t trace_id = 0;
};

// significance = attention weight * gradient norm * conditional entropy
inline double significance_product(double w, double grad_norm, double entropy_term) {
    return w * grad_norm * entropy_term;
}

// Token-isolation re-runs and the significance matrix. For step i and
// context token j strictly before the step's decision row, the entropy term
// is the entropy of the step's first-token distribution when final-layer
// token attention at the decision row sees only prior-step spans plus token
// j. The decision row itself and the step's own span score zero: the row's
// hidden state reaches its own logits through the residual path regardless
// of attention, so including it would swamp the context attribution.
inline void analyze_trace(const SageModel& model, ForwardTrace& tr) {
    if (tr.analysis_ready) return;
    if (!tr.live) throw StateError("analyze_trace: trace has no live forward state");
    if (!tr.record.gradient_flows_ready) compute_gradient_flows(tr);

    const std::size_t t = tr.total_len();
    tr.isolation_entropy.assign(tr.num_steps(), std::vector<double>(t, 0.0));
    tr.significance.assign(tr.num_steps(), std::vector<double>(t, 0.0));

    for (std::size_t i = 0; i < tr.num_steps(); ++i) {
        const std::size_t q = tr.query_pos(i);
        const auto prior = tr.prior_step_positions(i);
        for (std::size_t j = 0; j < q; ++j) {
            std::vector<std::size_t> allowed = prior;
            if (std::find(allowed.begin(), allowed.end(), j) == allowed.end())
                allowed.push_back(j);
            std::sort(allowed.begin(), allowed.end());
            const auto dist = model.isolated_distribution(tr.live->cache, q, allowed);
            tr.isolation_entropy[i][j] = entropy(dist);
            tr.significance[i][j] = significance_product(
                tr.pathway_weight(i, j), tr.grad_norms[i][j], tr.isolation_entropy[i][j]);
        }
    }
    tr.analysis_ready = true;
}

// One component per context token visible from the step's last-token row.
inline std::vector<PathwayComponent> compute_pathway(const ForwardTrace& tr, std::size_t step_index) {
    if (step_index < 1 || step_index > tr.num_steps())
        throw UsageError("compute_pathway: step index out of range");
    const std::size_t i = step_index - 1;
    const std::size_t last = tr.last_pos(i);
    std::vector<PathwayComponent> out;
    out.reserve(last + 1);
    for (std::size_t j = 0; j <= last; ++j) {
        PathwayComponent c;
        c.token_index = j;
        c.token_id = tr.token_at(j);
        c.attention_weight = tr.pathway_weight(i, j);
        c.contribution = tr.contribution_norm(j);
        c.significance = tr.analysis_ready ? tr.significance[i][j] : 0.0;
        out.push_back(c);
    }
    return out;
}

inline double significance(const ForwardTrace& tr, std::size_t step_index, std::size_t j) {
    if (step_index < 1 || step_index > tr.num_steps())
        throw UsageError("significance: step index out of range");
    if (!tr.analysis_ready)
        throw StateError("significance: gradients/entropies not computed (run analyze_trace)");
    const std::size_t i = step_index - 1;
    if (j > tr.last_pos(i)) return 0.0;
    return tr.significance[i][j];
}

// Steps whose max-normalized significance profile reaches the threshold.
inline std::vector<std::size_t> select_decision_steps(
    const std::vector<std::vector<double>>& significance_matrix, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw UsageError("select_decision_steps: threshold must lie in (0,1)");
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < significance_matrix.size(); ++i) {
        double total = 0.0, best = 0.0;
        for (double s : significance_matrix[i]) {
            total += s;
            best = std::max(best, s);
        }
        if (total > 0.0 && best / total >= threshold) out.push_back(i);
    }
    return out;
}

inline std::vector<Alternative> generate_alternatives(const ForwardTrace& tr,
                                                      std::size_t step_index, std::size_t k) {
    if (step_index < 1 || step_index > tr.num_steps())
        throw UsageError("generate_alternatives: step index out of range");
    const std::size_t i = step_index - 1;
    const auto ranked = detail::ranked_alternatives(tr.step_first_dist[i], tr.first_token(i), k);
    std::vector<Alternative> out;
    out.reserve(ranked.size());
    const bool has_grammar = i < tr.allowed_first_tokens.size() && !tr.allowed_first_tokens[i].empty();
    for (const auto& [token, prob] : ranked) {
        Alternative alt;
        alt.token = token;
        alt.probability = prob;
        if (has_grammar) {
            const auto& allowed = tr.allowed_first_tokens[i];
            alt.rejection_code = std::find(allowed.begin(), allowed.end(), token) == allowed.end()
                                     ? "violates_constraint"
                                     : "lower_probability";
        } else {
            alt.rejection_code = "lower_probability";
        }
        out.push_back(std::move(alt));
    }
    return out;
}

// chosen / (chosen + strongest alternative); 1 when nothing competes.
inline double compute_confidence(double p_chosen, const std::vector<Alternative>& alts) {
    double best = 0.0;
    for (const auto& a : alts) best = std::max(best, a.probability);
    if (best <= 0.0) return 1.0;
    return p_chosen / (p_chosen + best);
}

inline std::vector<DecisionPoint> extract_decision_points(const ForwardTrace& tr, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw UsageError("extract_decision_points: threshold must lie in (0,1)");
    if (!tr.analysis_ready)
        throw StateError("extract_decision_points: run analyze_trace first");
    std::vector<DecisionPoint> out;
    for (std::size_t i : select_decision_steps(tr.significance, threshold)) {
        DecisionPoint d;
        d.step_index = i + 1;
        d.trace_id = tr.trace_id;
        d.components = compute_pathway(tr, i + 1);
        std::stable_sort(d.components.begin(), d.components.end(),
                         [](const PathwayComponent& a, const PathwayComponent& b) {
                             if (a.significance != b.significance) return a.significance > b.significance;
                             return a.token_index < b.token_index;
                         });
        d.alternatives = generate_alternatives(tr, i + 1, tr.config.top_k_alternatives);
        d.confidence =
            compute_confidence(tr.step_first_dist[i][std::size_t(tr.first_token(i))], d.alternatives);
        double total = 0.0, best = 0.0;
        for (double s : tr.significance[i]) {
            total += s;
            best = std::max(best, s);
        }
        d.selection_rationale_code =
            (total > 0.0 && best / total >= 0.6) ? "dominant_dependency" : "selective_attention";
        out.push_back(std::move(d));
    }
    return out;
}

} // namespace sage
