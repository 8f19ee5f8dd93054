// Introspection scoring against synthetic ground truth, and the ablation
// table over inference-time subsystem toggles.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "sage/explain.hpp"
#include "sage/inverse.hpp"
#include "sage/tasks.hpp"
#include "sage/trace.hpp"
#include "sage/training.hpp"

namespace sage {

// Per-task raw introspection outcomes, one entry per step. Kept separate
// from the scoring so oracle inputs can be fed in directly.
struct TaskIntrospection {
    std::vector<bool> extracted_dp;
    std::vector<bool> gold_dp;
    std::vector<std::vector<int>> alternatives; // tokens, probability order
    std::vector<int> gold_runner_up;            // -1 when the step has none
    std::vector<double> confidence;
    std::vector<bool> step_correct; // first-token argmax vs gold
    std::vector<std::vector<std::size_t>> predicted_deps;
    std::vector<std::vector<std::size_t>> gold_deps;
};

struct IntrospectionReport {
    double decision_point_accuracy = 0.0;
    double alternative_path_accuracy = 0.0;
    double expected_calibration_error = 0.0;
    double dependency_tracking_score = 0.0;
    std::size_t num_tasks = 0;
    std::uint64_t config_fingerprint = 0;
};

inline constexpr std::size_t kMinTasksForExport = 30;

// Ten equal-width bins; gap between mean confidence and empirical accuracy,
// weighted by bin occupancy.
inline double compute_ece(const std::vector<double>& confidence, const std::vector<bool>& correct,
                          std::size_t bins = 10) {
    if (confidence.size() != correct.size()) throw UsageError("compute_ece: length mismatch");
    if (confidence.empty()) return 0.0;
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        if (confidence[i] < 0.0 || confidence[i] > 1.0)
            throw UsageError("compute_ece: confidence outside [0,1]");
        std::size_t b = std::min(bins - 1, std::size_t(confidence[i] * double(bins)));
        conf_sum[b] += confidence[i];
        acc_sum[b] += correct[i] ? 1.0 : 0.0;
        count[b] += 1;
    }
    double ece = 0.0;
    const double n = double(confidence.size());
    for (std::size_t b = 0; b < bins; ++b) {
        if (count[b] == 0) continue;
        const double c = double(count[b]);
        ece += (c / n) * std::abs(conf_sum[b] / c - acc_sum[b] / c);
    }
    return ece;
}

inline double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    if (a.empty() && b.empty()) return 1.0;
    std::size_t inter = 0;
    for (std::size_t x : a)
        for (std::size_t y : b)
            if (x == y) {
                ++inter;
                break;
            }
    return double(inter) / double(a.size() + b.size() - inter);
}

inline IntrospectionReport score_introspection(const std::vector<TaskIntrospection>& inputs,
                                               std::uint64_t fingerprint) {
    IntrospectionReport rep;
    rep.num_tasks = inputs.size();
    rep.config_fingerprint = fingerprint;
    std::size_t steps = 0, dp_match = 0, alt_total = 0, alt_hit = 0;
    double dep_sum = 0.0;
    std::vector<double> confs;
    std::vector<bool> corrects;
    for (const auto& t : inputs) {
        for (std::size_t i = 0; i < t.gold_dp.size(); ++i) {
            ++steps;
            dp_match += (t.extracted_dp[i] == t.gold_dp[i]) ? 1 : 0;
            if (t.gold_runner_up[i] >= 0) {
                ++alt_total;
                for (int tok_id : t.alternatives[i])
                    if (tok_id == t.gold_runner_up[i]) {
                        ++alt_hit;
                        break;
                    }
            }
            dep_sum += jaccard(t.predicted_deps[i], t.gold_deps[i]);
            confs.push_back(t.confidence[i]);
            corrects.push_back(t.step_correct[i]);
        }
    }
    if (steps == 0) throw UsageError("score_introspection: no steps to score");
    rep.decision_point_accuracy = double(dp_match) / double(steps);
    rep.alternative_path_accuracy = alt_total == 0 ? 1.0 : double(alt_hit) / double(alt_total);
    rep.expected_calibration_error = compute_ece(confs, corrects);
    rep.dependency_tracking_score = dep_sum / double(steps);
    return rep;
}

// The full pipeline on one task: teacher-forced trace, analysis, decision
// points, explanation, scored against the task's gold labels.
inline TaskIntrospection introspect_task(SageModel& model, const SyntheticTask& task,
                                         bool disable_concepts = false,
                                         bool with_explanation = true) {
    ForwardTrace tr = trace_forced(model, task.prompt, task.gold_chain, 0, disable_concepts);
    tr.allowed_first_tokens = task.allowed_first_tokens;
    analyze_trace(model, tr);
    track_alternatives(model, tr, model.cfg.top_k_alternatives);
    const auto dps = extract_decision_points(tr, model.cfg.decision_threshold);
    Explanation expl;
    if (with_explanation) expl = generate_explanation(dps, tr);

    TaskIntrospection out;
    const std::size_t s = tr.num_steps();
    out.extracted_dp.assign(s, false);
    for (const auto& d : dps) out.extracted_dp[d.step_index - 1] = true;
    for (std::size_t i = 0; i < s; ++i) {
        out.gold_dp.push_back(task.gold_decision_label(i));
        const auto alts = generate_alternatives(tr, i + 1, model.cfg.top_k_alternatives);
        std::vector<int> alt_tokens;
        for (const auto& a : alts) alt_tokens.push_back(a.token);
        out.alternatives.push_back(std::move(alt_tokens));
        out.gold_runner_up.push_back(task.gold_runner_up[i]);
        out.confidence.push_back(
            compute_confidence(tr.step_first_dist[i][std::size_t(tr.first_token(i))], alts));
        int arg = 0;
        for (std::size_t v = 1; v < tr.step_first_dist[i].size(); ++v)
            if (tr.step_first_dist[i][v] > tr.step_first_dist[i][std::size_t(arg)]) arg = int(v);
        out.step_correct.push_back(arg == task.gold_chain[task.step_begin[i]]);
        out.predicted_deps.push_back(with_explanation ? expl.critical_dependencies[i].positions
                                                      : std::vector<std::size_t>{});
        out.gold_deps.push_back(task.gold_deps[i]);
    }
    return out;
}

inline IntrospectionReport introspection_report(SageModel& model,
                                                const std::vector<SyntheticTask>& tasks) {
    if (tasks.empty()) throw UsageError("introspection_report: no tasks");
    for (const auto& t : tasks)
        if (t.gold_deps.empty()) throw UsageError("introspection_report: task lacks gold labels");
    std::vector<TaskIntrospection> inputs;
    inputs.reserve(tasks.size());
    for (const auto& t : tasks) inputs.push_back(introspect_task(model, t));
    return score_introspection(inputs, model.fingerprint());
}

// ---- ablation ----

struct AblationRow {
    std::string name;
    double step_accuracy = 0.0;
    // Introspection metrics; NaN when the disabled subsystem makes them
    // undefined.
    double decision_point_accuracy = std::numeric_limits<double>::quiet_NaN();
    double alternative_path_accuracy = std::numeric_limits<double>::quiet_NaN();
    double expected_calibration_error = std::numeric_limits<double>::quiet_NaN();
    double dependency_tracking_score = std::numeric_limits<double>::quiet_NaN();
    double wallclock_ratio = 1.0;
};

namespace detail {

inline double teacher_forced_step_accuracy(SageModel& model,
                                           const std::vector<SyntheticTask>& tasks,
                                           bool disable_concepts) {
    std::size_t total = 0, correct = 0;
    PlainOptions popt;
    popt.disable_concepts = disable_concepts;
    for (const auto& task : tasks) {
        std::vector<int> tokens = task.prompt;
        tokens.insert(tokens.end(), task.gold_chain.begin(), task.gold_chain.end());
        const auto sp = model.step_positions(task.prompt.size(), tokens);
        const auto cache = model.plain_forward(tokens, sp, popt);
        for (std::size_t i = 0; i < task.num_steps(); ++i) {
            bool ok = true;
            for (std::size_t p = task.step_begin[i]; p < task.step_end[i]; ++p) {
                const std::size_t abs = task.prompt.size() + p;
                const auto& lg = cache.logits[abs - 1];
                std::size_t arg = 0;
                for (std::size_t v = 1; v < lg.size(); ++v)
                    if (lg[v] > lg[arg]) arg = v;
                ok = ok && int(arg) == task.gold_chain[p];
            }
            ++total;
            correct += ok ? 1 : 0;
        }
    }
    return total == 0 ? 0.0 : double(correct) / double(total);
}

} // namespace detail

// One row per requested toggle ("w/o <subsystem>") plus the Forward Only
// baseline, whose wall-clock ratio is 1 by definition. Toggles act at
// inference time on the same frozen model.
inline std::vector<AblationRow> run_ablation(SageModel& model,
                                             const std::vector<SyntheticTask>& tasks,
                                             const std::vector<std::string>& toggles) {
    using Clock = std::chrono::steady_clock;
    for (const auto& t : toggles)
        if (t != "inverse_analysis" && t != "attention_tracking" && t != "explanation_gen" &&
            t != "concept_heads")
            throw UsageError("run_ablation: unknown toggle '" + t + "'");

    std::vector<AblationRow> rows;

    const auto t0 = Clock::now();
    AblationRow base;
    base.name = "forward_only";
    base.step_accuracy = detail::teacher_forced_step_accuracy(model, tasks, false);
    const double base_time =
        std::chrono::duration<double>(Clock::now() - t0).count();
    base.wallclock_ratio = 1.0;
    rows.push_back(base);

    for (const auto& toggle : toggles) {
        AblationRow row;
        row.name = "w/o " + toggle;
        const bool no_concepts = toggle == "concept_heads";
        const auto t1 = Clock::now();
        if (toggle == "attention_tracking") {
            // No record: only the forward accuracy is measurable.
            row.step_accuracy = detail::teacher_forced_step_accuracy(model, tasks, false);
        } else if (toggle == "inverse_analysis") {
            // Traces are built but never analyzed; decision sets stay empty
            // and the introspection axes are undefined.
            row.step_accuracy = detail::teacher_forced_step_accuracy(model, tasks, false);
            for (const auto& task : tasks)
                (void)trace_forced(model, task.prompt, task.gold_chain);
        } else {
            const bool with_explanation = toggle != "explanation_gen";
            std::vector<TaskIntrospection> inputs;
            for (const auto& task : tasks)
                inputs.push_back(introspect_task(model, task, no_concepts, with_explanation));
            const auto rep = score_introspection(inputs, model.fingerprint());
            row.step_accuracy = detail::teacher_forced_step_accuracy(model, tasks, no_concepts);
            row.decision_point_accuracy = rep.decision_point_accuracy;
            row.alternative_path_accuracy = rep.alternative_path_accuracy;
            row.expected_calibration_error = rep.expected_calibration_error;
            if (toggle != "explanation_gen")
                row.dependency_tracking_score = rep.dependency_tracking_score;
        }
        const double t_row = std::chrono::duration<double>(Clock::now() - t1).count();
        row.wallclock_ratio = base_time > 0.0 ? t_row / base_time : 1.0;
        rows.push_back(row);
    }
    return rows;
}

} // namespace sage
