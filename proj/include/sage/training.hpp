// The three-term training objective, the warmup/decay learning-rate
// schedule, the optimizer, and the gradient-accumulated epoch loop.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/model.hpp"
#include "sage/tasks.hpp"
#include "sage/tokens.hpp"
#include "sage/trace.hpp"

namespace sage {

struct LossBreakdown {
    double reasoning = 0.0;
    double explanation = 0.0;
    double consistency = 0.0;
    double total = 0.0;
    double lambda1 = 0.0;
    double lambda2 = 0.0;
};

// How the reconstructed step distribution of the consistency term is
// produced. CopyForward substitutes the forward distribution itself and
// exists to verify that the KL plumbing vanishes on identical inputs.
enum class ReconstructionMode { PathwayReadout, CopyForward };

struct TaskLosses {
    LossBreakdown breakdown;
    Tensor total; // scalar, on tape
    std::vector<bool> step_correct;       // whole-span argmax correctness
    std::vector<bool> first_token_correct;
};

// Teacher-forced pass over the gold chain plus the read-out heads.
//  reasoning    = -sum_i log P(step_i | ...)
//  explanation  = -sum_i [log P(primary dep_i) + log P(op kind_i)] from a
//                 linear head over [step state ; pathway vector]
//  consistency  = sum_i KL(P_forward(step_i) || P_reconstructed(step_i)),
//                 P_reconstructed = softmax(W_r * pathway vector + b_r)
inline TaskLosses compute_losses(SageModel& model, const SyntheticTask& task,
                                 ReconstructionMode mode = ReconstructionMode::PathwayReadout,
                                 bool disable_concepts = false) {
    const ModelConfig& cfg = model.cfg;
    if (task.num_steps() == 0 || task.gold_chain.empty())
        throw UsageError("compute_losses: task has no gold chain");
    if (task.total_len() > cfg.max_seq_len)
        throw UsageError("compute_losses: task exceeds sequence budget");
    const auto spans = segment_steps(task.gold_chain, cfg.step_delimiter);
    if (spans.size() != task.num_steps())
        throw UsageError("compute_losses: gold chain and step spans disagree");

    std::vector<int> tokens = task.prompt;
    tokens.insert(tokens.end(), task.gold_chain.begin(), task.gold_chain.end());
    const auto step_pos = model.step_positions(task.prompt.size(), tokens);
    TapedOptions topt;
    topt.disable_concepts = disable_concepts;
    TapedForward fwd = model.taped_forward(tokens, step_pos, topt);

    const std::size_t prompt_len = task.prompt.size();
    TaskLosses out;
    out.breakdown.lambda1 = cfg.lambda1;
    out.breakdown.lambda2 = cfg.lambda2;

    Tensor reasoning = Tensor::scalar(0.0);
    Tensor explanation = Tensor::scalar(0.0);
    Tensor consistency = Tensor::scalar(0.0);

    for (std::size_t i = 0; i < task.num_steps(); ++i) {
        const std::size_t begin = task.step_begin[i], end = task.step_end[i];
        Tensor lp_sum = Tensor::scalar(0.0);
        bool all_correct = true;
        for (std::size_t p = begin; p < end; ++p) {
            const std::size_t abs = prompt_len + p;
            const int target = task.gold_chain[p];
            lp_sum = add(lp_sum, pick(fwd.log_probs, abs - 1, std::size_t(target)));
            int arg = 0;
            for (std::size_t v = 1; v < cfg.vocab_size; ++v)
                if (fwd.logits.at2(abs - 1, v) > fwd.logits.at2(abs - 1, std::size_t(arg)))
                    arg = int(v);
            all_correct = all_correct && arg == target;
            if (p == begin) out.first_token_correct.push_back(arg == target);
        }
        out.step_correct.push_back(all_correct);
        reasoning = add(reasoning, scale(lp_sum, -1.0));

        const std::size_t q = prompt_len + begin - 1;
        const std::size_t last = prompt_len + end - 1;

        Tensor pathvec = matmul(row(fwd.final_avg_token_attn, last), fwd.final_contrib); // 1 x D
        Tensor feat = concat_cols({row(fwd.head_input, last), pathvec});                 // 1 x 2D

        Tensor dep_logits =
            add_rowvec(matmul(feat, model.dep_w().tensor), model.dep_b().tensor);
        Tensor dep_lp = log_softmax_rows(dep_logits);
        explanation = add(explanation, scale(pick(dep_lp, 0, task.gold_primary_dep[i]), -1.0));
        Tensor op_logits =
            add_rowvec(matmul(feat, model.opkind_w().tensor), model.opkind_b().tensor);
        Tensor op_lp = log_softmax_rows(op_logits);
        explanation = add(explanation,
                          scale(pick(op_lp, 0, std::size_t(int(task.gold_op_kind[i]))), -1.0));

        Tensor lp_fwd = row(fwd.log_probs, q);
        Tensor p_fwd = exp_op(lp_fwd);
        Tensor lp_rec;
        if (mode == ReconstructionMode::CopyForward) {
            lp_rec = lp_fwd;
        } else {
            Tensor rec_logits = add_rowvec(matmul(pathvec, model.consistency_w().tensor),
                                           model.consistency_b().tensor);
            lp_rec = log_softmax_rows(rec_logits);
        }
        consistency = add(consistency, sum_all(mul(p_fwd, sub(lp_fwd, lp_rec))));
    }

    out.total = add(add(reasoning, scale(explanation, cfg.lambda1)),
                    scale(consistency, cfg.lambda2));
    out.breakdown.reasoning = reasoning.at(0);
    out.breakdown.explanation = explanation.at(0);
    out.breakdown.consistency = consistency.at(0);
    out.breakdown.total = out.total.at(0);
    return out;
}

// lr_max * min(t/warmup, sqrt(warmup/t)) * cos(pi*t / (2*total)).
// lr(0) is defined as 0; lr(total) is 0 because the cosine reaches pi/2.
inline double lr_schedule(std::size_t t, const ScheduleConfig& cfg) {
    if (t > cfg.total_steps) throw UsageError("lr_schedule: step beyond total_steps");
    if (t == 0 || t == cfg.total_steps) return 0.0;
    const double td = double(t);
    const double w = double(cfg.warmup_steps);
    const double ramp = std::min(td / w, std::sqrt(w / td));
    return cfg.lr_max * ramp * std::cos(M_PI * td / (2.0 * double(cfg.total_steps)));
}

// Adaptive-moment optimizer with decoupled weight decay. Consumes the
// parameters' gradient accumulators and clears them.
class AdamW {
public:
    AdamW(std::size_t num_params, double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), m_(num_params),
          v_(num_params) {}

    static AdamW for_model(SageModel& model, const TrainConfig& tc) {
        AdamW opt(model.parameters().size(), tc.adam_beta1, tc.adam_beta2, tc.adam_eps,
                  tc.weight_decay);
        return opt;
    }

    void step(const std::vector<Parameter*>& params, double lr, double grad_scale) {
        if (params.size() != m_.size()) throw UsageError("AdamW: parameter count mismatch");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, double(t_));
        const double bc2 = 1.0 - std::pow(beta2_, double(t_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Parameter* p = params[pi];
            auto& m = m_[pi];
            auto& v = v_[pi];
            if (m.size() != p->tensor.size()) {
                m.assign(p->tensor.size(), 0.0);
                v.assign(p->tensor.size(), 0.0);
            }
            auto& w = p->tensor.values_mut();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double g = p->grad_accum[i] * grad_scale;
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[i]);
            }
            p->zero_accum();
        }
    }

    std::size_t step_count() const { return t_; }
    std::vector<std::vector<double>>& moments1() { return m_; }
    std::vector<std::vector<double>>& moments2() { return v_; }
    void restore(std::size_t t, std::vector<std::vector<double>> m,
                 std::vector<std::vector<double>> v) {
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }
    double weight_decay() const { return weight_decay_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

struct EpochMetrics {
    LossBreakdown mean;
    double step_accuracy = 0.0;
    std::size_t optimizer_steps = 0;
};

// One pass over the tasks with gradient accumulation: gradients of a global
// batch are summed over its micro-batches in a fixed order, averaged, and
// applied once at the scheduled rate. Updating from k micro-batches of size
// b is exactly the single-batch update of size k*b.
inline EpochMetrics train_epoch(SageModel& model, const std::vector<const SyntheticTask*>& tasks,
                                AdamW& opt, const ScheduleConfig& schedule, const TrainConfig& tc,
                                std::size_t& global_step,
                                ReconstructionMode mode = ReconstructionMode::PathwayReadout) {
    if (tc.micro_batches_per_step == 0) throw UsageError("train_epoch: micro_batches_per_step >= 1");
    auto params = model.parameters();
    EpochMetrics metrics;
    std::size_t steps_total = 0, steps_correct = 0;

    for (std::size_t start = 0; start < tasks.size(); start += tc.global_batch) {
        const std::size_t batch_end = std::min(tasks.size(), start + tc.global_batch);
        const std::size_t batch_count = batch_end - start;
        const std::size_t micro_size =
            (batch_count + tc.micro_batches_per_step - 1) / tc.micro_batches_per_step;

        for (std::size_t micro = start; micro < batch_end; micro += micro_size) {
            const std::size_t micro_end = std::min(batch_end, micro + micro_size);
            for (std::size_t ti = micro; ti < micro_end; ++ti) {
                TaskLosses losses = compute_losses(model, *tasks[ti], mode);
                if (!std::isfinite(losses.breakdown.total)) {
                    std::ostringstream msg;
                    msg << "non-finite loss on task " << ti << " (";
                    for (int tkn : tasks[ti]->prompt) msg << tok::name(tkn) << " ";
                    msg << ")";
                    throw IntegrityError(msg.str());
                }
                backward(losses.total);
                for (Parameter* p : params) p->accumulate_grad();
                metrics.mean.reasoning += losses.breakdown.reasoning;
                metrics.mean.explanation += losses.breakdown.explanation;
                metrics.mean.consistency += losses.breakdown.consistency;
                metrics.mean.total += losses.breakdown.total;
                for (bool ok : losses.step_correct) {
                    ++steps_total;
                    steps_correct += ok ? 1 : 0;
                }
            }
        }
        opt.step(params, lr_schedule(std::min(global_step + 1, schedule.total_steps), schedule),
                 1.0 / double(batch_count));
        ++global_step;
        ++metrics.optimizer_steps;
    }

    const double n = double(tasks.size());
    metrics.mean.reasoning /= n;
    metrics.mean.explanation /= n;
    metrics.mean.consistency /= n;
    metrics.mean.total /= n;
    metrics.mean.lambda1 = model.cfg.lambda1;
    metrics.mean.lambda2 = model.cfg.lambda2;
    metrics.step_accuracy = steps_total == 0 ? 0.0 : double(steps_correct) / double(steps_total);
    return metrics;
}

struct TrainRunResult {
    std::size_t epochs_run = 0;
    double final_step_accuracy = 0.0;
    std::vector<EpochMetrics> history;
};

// Full training run: deterministic per-epoch shuffling, metric log lines
// through `log`, optional early stop at a target teacher-forced accuracy.
inline TrainRunResult train_model(SageModel& model, const Config& cfg,
                                  const std::vector<SyntheticTask>& tasks, std::uint64_t seed,
                                  const std::function<void(const std::string&)>& log = {},
                                  const std::function<void(std::size_t)>& on_epoch_end = {}) {
    AdamW opt = AdamW::for_model(model, cfg.train);
    std::mt19937_64 shuffle_rng(seed ^ 0xc0ffee11ull);
    std::size_t global_step = 0;
    TrainRunResult result;

    std::vector<const SyntheticTask*> order(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) order[i] = &tasks[i];

    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        EpochMetrics m = train_epoch(model, order, opt, cfg.schedule, cfg.train, global_step);
        result.history.push_back(m);
        result.epochs_run = epoch + 1;
        result.final_step_accuracy = m.step_accuracy;
        if (log) {
            char line[256];
            std::snprintf(line, sizeof line,
                          "epoch=%zu total=%.10g reasoning=%.10g explanation=%.10g "
                          "consistency=%.10g step_acc=%.6f",
                          epoch + 1, m.mean.total, m.mean.reasoning, m.mean.explanation,
                          m.mean.consistency, m.step_accuracy);
            log(line);
        }
        if (on_epoch_end) on_epoch_end(epoch + 1);
        if (cfg.train.target_step_accuracy > 0.0 &&
            m.step_accuracy >= cfg.train.target_step_accuracy)
            break;
    }
    return result;
}

} // namespace sage
