// Forward traces and attention tracking: the per-pass record of attention
// maps, gradient flows, value contributions, decision scores and
// alternative paths, plus the step segmentation of a reasoning chain.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/model.hpp"
#include "sage/prob.hpp"

namespace sage {

struct ReasoningStep {
    std::size_t index = 0; // 1-based
    std::size_t begin = 0; // [begin, end) within the generated sequence
    std::size_t end = 0;
    double step_logprob = 0.0;
    std::vector<double> hidden_state; // head input at the span's last token
};

// The five tracked tensors. Dimensions: L layers, H = token + concept heads,
// N sequence length, D hidden size, S steps, K alternatives. Concept-head
// attention rows range over the concept slots and are stored left-aligned in
// the N columns; the padding entries are exactly zero, like masked positions.
struct AttentionRecord {
    std::size_t L = 0, H = 0, N = 0, D = 0, S = 0, K = 0;
    std::vector<double> attention_maps;      // L*H*N*N
    std::vector<double> gradient_flows;      // L*H*N*N
    std::vector<double> value_contributions; // L*N*D
    std::vector<double> decision_scores;     // S
    std::vector<double> alternative_paths;   // S*K*N
    bool gradient_flows_ready = false;

    void allocate() {
        attention_maps.assign(L * H * N * N, 0.0);
        gradient_flows.assign(L * H * N * N, 0.0);
        value_contributions.assign(L * N * D, 0.0);
        decision_scores.assign(S, 0.0);
        alternative_paths.assign(S * K * N, 0.0);
    }

    std::size_t map_index(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
        return ((l * H + h) * N + q) * N + k;
    }
    double attention(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
        return attention_maps[map_index(l, h, q, k)];
    }
    double grad_flow(std::size_t l, std::size_t h, std::size_t q, std::size_t k) const {
        return gradient_flows[map_index(l, h, q, k)];
    }
    double contribution(std::size_t l, std::size_t p, std::size_t d) const {
        return value_contributions[(l * N + p) * D + d];
    }
    double alternative(std::size_t s, std::size_t k, std::size_t n) const {
        return alternative_paths[(s * K + k) * N + n];
    }

    // Closed-form size of the five tensors; the memory-overhead invariant.
    std::size_t payload_doubles() const { return 2 * L * H * N * N + L * N * D + S + S * K * N; }
    std::size_t actual_doubles() const {
        return attention_maps.size() + gradient_flows.size() + value_contributions.size() +
               decision_scores.size() + alternative_paths.size();
    }
};

// Builds an AttentionRecord layer by layer from the taped forward tensors.
class AttentionRecorder {
public:
    AttentionRecorder(std::size_t L, std::size_t H, std::size_t N, std::size_t D, std::size_t S,
                      std::size_t K)
        : recorded_(L, false) {
        rec_.L = L;
        rec_.H = H;
        rec_.N = N;
        rec_.D = D;
        rec_.S = S;
        rec_.K = K;
        rec_.allocate();
    }

    void record_layer(std::size_t l, const std::vector<Tensor>& token_probs,
                      const std::vector<Tensor>& concept_probs, const Tensor& contrib) {
        if (l >= recorded_.size()) throw UsageError("record_layer: layer out of range");
        if (recorded_[l]) throw IntegrityError("record_layer: layer recorded twice");
        recorded_[l] = true;
        std::size_t h = 0;
        for (const auto& probs : token_probs) {
            for (std::size_t q = 0; q < rec_.N; ++q)
                for (std::size_t k = 0; k < rec_.N; ++k)
                    rec_.attention_maps[rec_.map_index(l, h, q, k)] = probs.at2(q, k);
            ++h;
        }
        for (const auto& probs : concept_probs) {
            const std::size_t m = probs.dim(1);
            for (std::size_t q = 0; q < rec_.N; ++q)
                for (std::size_t k = 0; k < m; ++k)
                    rec_.attention_maps[rec_.map_index(l, h, q, k)] = probs.at2(q, k);
            ++h;
        }
        if (h != rec_.H) throw IntegrityError("record_layer: head count mismatch");
        for (std::size_t p = 0; p < rec_.N; ++p)
            for (std::size_t d = 0; d < rec_.D; ++d)
                rec_.value_contributions[(l * rec_.N + p) * rec_.D + d] = contrib.at2(p, d);
    }

    AttentionRecord finish() {
        for (std::size_t l = 0; l < recorded_.size(); ++l)
            if (!recorded_[l]) throw IntegrityError("record: layer " + std::to_string(l) + " missing");
        return std::move(rec_);
    }

private:
    AttentionRecord rec_;
    std::vector<bool> recorded_;
};

struct ForwardTrace {
    ModelConfig config;
    std::uint64_t config_fp = 0;
    std::uint64_t seed = 0;
    std::uint64_t trace_id = 0;
    std::vector<int> input_tokens;
    std::vector<int> generated_tokens;
    std::vector<int> step_pos; // whole sequence
    std::vector<ReasoningStep> steps;
    std::vector<std::vector<double>> step_first_dist; // S x V
    std::vector<std::vector<std::vector<double>>> hidden_states; // (L+1) x T x D
    AttentionRecord record;
    double chain_logprob = 0.0;
    bool incomplete_reasoning = false;
    std::vector<std::vector<int>> allowed_first_tokens; // grammar; empty when unknown

    // Analysis caches filled by analyze_trace. grad_norms[i][j] is the L2
    // norm of d(step-i loss)/d(hidden state entering the final layer at j).
    std::vector<std::vector<double>> grad_norms;
    std::vector<std::vector<double>> isolation_entropy;
    std::vector<std::vector<double>> significance;
    bool analysis_ready = false;

    struct Live {
        TapedForward fwd;
        std::vector<Tensor> step_losses; // scalars; L_i >= 0
        ForwardCache cache;
    };
    std::shared_ptr<Live> live;

    std::size_t prompt_len() const { return input_tokens.size(); }
    std::size_t total_len() const { return input_tokens.size() + generated_tokens.size(); }
    std::size_t num_steps() const { return steps.size(); }
    std::size_t abs_begin(std::size_t i) const { return prompt_len() + steps[i].begin; }
    std::size_t abs_end(std::size_t i) const { return prompt_len() + steps[i].end; }
    // Row whose logits produced the step's first token.
    std::size_t query_pos(std::size_t i) const { return abs_begin(i) - 1; }
    std::size_t last_pos(std::size_t i) const { return abs_end(i) - 1; }
    int first_token(std::size_t i) const { return generated_tokens[steps[i].begin]; }
    int token_at(std::size_t p) const {
        return p < prompt_len() ? input_tokens[p] : generated_tokens[p - prompt_len()];
    }

    // Head-averaged final-layer attention weight from the step's last token
    // row to position j (token heads only; concept rows index concept slots,
    // not tokens).
    double pathway_weight(std::size_t i, std::size_t j) const {
        const std::size_t l = record.L - 1;
        const std::size_t q = last_pos(i);
        double acc = 0.0;
        for (std::size_t h = 0; h < config.token_heads; ++h) acc += record.attention(l, h, q, j);
        return acc * (1.0 / double(config.token_heads));
    }

    // L2 norm over D of the final-layer value contribution of position j.
    double contribution_norm(std::size_t j) const {
        const std::size_t l = record.L - 1;
        double acc = 0.0;
        for (std::size_t d = 0; d < record.D; ++d) {
            const double v = record.contribution(l, j, d);
            acc += v * v;
        }
        return std::sqrt(acc);
    }

    // Absolute positions of steps 1..i (0-based end-exclusive): the context
    // the isolation re-runs always keep visible.
    std::vector<std::size_t> prior_step_positions(std::size_t i) const {
        std::vector<std::size_t> out;
        for (std::size_t s = 0; s < i; ++s)
            for (std::size_t p = abs_begin(s); p < abs_end(s); ++p) out.push_back(p);
        return out;
    }
};

namespace detail {

inline std::uint64_t fnv64(std::uint64_t h, std::uint64_t x) {
    for (int b = 0; b < 8; ++b) {
        h ^= (x >> (b * 8)) & 0xff;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t trace_identity(std::uint64_t config_fp, std::uint64_t seed,
                                    const std::vector<int>& input,
                                    const std::vector<int>& generated) {
    std::uint64_t h = fnv64(fnv64(1469598103934665603ull, config_fp), seed);
    for (int t : input) h = fnv64(h, std::uint64_t(t) + 1);
    h = fnv64(h, 0xfeedULL);
    for (int t : generated) h = fnv64(h, std::uint64_t(t) + 1);
    return h;
}

// Non-chosen continuations ranked by probability (descending, token id
// ascending on ties). Shared by the tracker and the inverse analyzer.
inline std::vector<std::pair<int, double>> ranked_alternatives(const std::vector<double>& dist,
                                                               int chosen, std::size_t k) {
    std::vector<std::pair<int, double>> all;
    all.reserve(dist.size());
    for (std::size_t t = 0; t < dist.size(); ++t)
        if (int(t) != chosen) all.emplace_back(int(t), dist[t]);
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (all.size() > k) all.resize(k);
    return all;
}

} // namespace detail

// Splits generated tokens into delimiter-terminated spans; a trailing span
// without a terminator is kept (the caller flags it incomplete).
inline std::vector<std::pair<std::size_t, std::size_t>> segment_steps(
    const std::vector<int>& generated, int delimiter) {
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    std::size_t begin = 0;
    for (std::size_t p = 0; p < generated.size(); ++p) {
        if (generated[p] == delimiter) {
            spans.emplace_back(begin, p + 1);
            begin = p + 1;
        }
    }
    if (begin < generated.size()) spans.emplace_back(begin, generated.size());
    return spans;
}

// Builds the sealed trace for a prompt + generated sequence: taped forward,
// attention record, step segmentation and decision scores. `cache` is the
// plain-path state from decoding (rebuilt when absent).
inline ForwardTrace build_trace(const SageModel& model, const std::vector<int>& prompt,
                                const std::vector<int>& generated, std::uint64_t seed,
                                bool incomplete, ForwardCache cache = {},
                                bool disable_concepts = false) {
    if (generated.empty()) throw UsageError("build_trace: empty generation");
    const ModelConfig& cfg = model.cfg;
    ForwardTrace tr;
    tr.config = cfg;
    tr.config_fp = model.fingerprint();
    tr.seed = seed;
    tr.input_tokens = prompt;
    tr.generated_tokens = generated;
    tr.incomplete_reasoning = incomplete;

    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), generated.begin(), generated.end());
    tr.step_pos = model.step_positions(prompt.size(), tokens);
    tr.trace_id = detail::trace_identity(tr.config_fp, seed, prompt, generated);

    TapedOptions topt;
    topt.full_record = true;
    topt.disable_concepts = disable_concepts;
    TapedForward fwd = model.taped_forward(tokens, tr.step_pos, topt);

    if (cache.size() != tokens.size()) {
        PlainOptions popt;
        popt.disable_concepts = disable_concepts;
        cache = model.plain_forward(tokens, tr.step_pos, popt);
    }

    const std::size_t t = tokens.size();
    const auto spans = segment_steps(generated, cfg.step_delimiter);
    auto live = std::make_shared<ForwardTrace::Live>();
    live->fwd = fwd;

    for (std::size_t i = 0; i < spans.size(); ++i) {
        ReasoningStep step;
        step.index = i + 1;
        step.begin = spans[i].first;
        step.end = spans[i].second;
        Tensor lp_sum = Tensor::scalar(0.0);
        for (std::size_t p = step.begin; p < step.end; ++p) {
            const std::size_t abs = prompt.size() + p;
            lp_sum = add(lp_sum, pick(fwd.log_probs, abs - 1, std::size_t(generated[p])));
        }
        step.step_logprob = lp_sum.at(0);
        const std::size_t last = prompt.size() + step.end - 1;
        step.hidden_state.assign(fwd.head_input.values().begin() + last * cfg.hidden_dim,
                                 fwd.head_input.values().begin() + (last + 1) * cfg.hidden_dim);
        live->step_losses.push_back(scale(lp_sum, -1.0));
        tr.steps.push_back(std::move(step));
    }
    // Whole-chain log probability summed in sequence order (the step sums
    // above group the same terms; the factorization invariant compares both).
    double chain = 0.0;
    for (std::size_t p = 0; p < generated.size(); ++p) {
        const std::size_t abs = prompt.size() + p;
        chain += fwd.log_probs.at2(abs - 1, std::size_t(generated[p]));
    }
    tr.chain_logprob = chain;

    AttentionRecorder recorder(cfg.num_layers, cfg.total_heads(), t, cfg.hidden_dim,
                               tr.steps.size(), cfg.top_k_alternatives);
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
        recorder.record_layer(l, fwd.token_probs[l], fwd.concept_probs[l], fwd.contribs[l]);
    tr.record = recorder.finish();

    tr.hidden_states.resize(fwd.layer_outputs.size());
    for (std::size_t l = 0; l < fwd.layer_outputs.size(); ++l) {
        tr.hidden_states[l].resize(t);
        for (std::size_t p = 0; p < t; ++p)
            tr.hidden_states[l][p].assign(
                fwd.layer_outputs[l].values().begin() + p * cfg.hidden_dim,
                fwd.layer_outputs[l].values().begin() + (p + 1) * cfg.hidden_dim);
    }

    for (std::size_t i = 0; i < tr.steps.size(); ++i)
        tr.step_first_dist.push_back(model.softmax_row(cache.logits[tr.query_pos(i)]));

    live->cache = std::move(cache);
    tr.live = live;
    return tr;
}

// Fills alternative_paths and decision_scores: for each step, the K most
// probable non-chosen first tokens; each alternative's fingerprint is the
// final-layer head-averaged attention row produced by substituting that
// token at the step's first position.
inline void track_alternatives(const SageModel& model, ForwardTrace& tr, std::size_t k) {
    if (k >= model.cfg.vocab_size) throw UsageError("track_alternatives: K must be below vocab size");
    if (!tr.live) throw StateError("track_alternatives: trace has no live forward state");
    AttentionRecord& rec = tr.record;
    if (rec.K != k) {
        rec.K = k;
        rec.alternative_paths.assign(rec.S * rec.K * rec.N, 0.0);
    }
    for (std::size_t i = 0; i < tr.num_steps(); ++i) {
        const auto& dist = tr.step_first_dist[i];
        rec.decision_scores[i] = dist[std::size_t(tr.first_token(i))];
        const auto alts = detail::ranked_alternatives(dist, tr.first_token(i), k);
        for (std::size_t a = 0; a < alts.size(); ++a) {
            const auto row =
                model.substituted_final_attention_row(tr.live->cache, tr.abs_begin(i), alts[a].first);
            for (std::size_t n = 0; n < row.size(); ++n)
                rec.alternative_paths[(i * rec.K + a) * rec.N + n] = row[n];
        }
    }
}

struct DecodePolicy {
    enum class Kind { Greedy, Sampled } kind = Kind::Greedy;
    std::uint64_t seed = 0;
    static DecodePolicy greedy() { return {Kind::Greedy, 0}; }
    static DecodePolicy sampled(std::uint64_t seed) { return {Kind::Sampled, seed}; }
};

// Autoregressive generation with step tracking. Stops at the end token, at
// the max_steps-th delimiter, or when the sequence budget runs out; a chain
// whose last span has no terminator is flagged incomplete.
inline ForwardTrace forward_reason(const SageModel& model, const std::vector<int>& prompt,
                                   const DecodePolicy& policy, std::size_t max_steps,
                                   bool disable_concepts = false) {
    const ModelConfig& cfg = model.cfg;
    if (prompt.empty()) throw UsageError("forward_reason: empty prompt");
    if (prompt.size() + 1 > cfg.max_seq_len)
        throw UsageError("forward_reason: prompt leaves no generation budget");
    if (max_steps == 0) throw UsageError("forward_reason: max_steps must be positive");

    PlainOptions popt;
    popt.disable_concepts = disable_concepts;
    ForwardCache cache = model.start_cache();
    for (int t : prompt) model.append_position(cache, t, 0, popt);

    std::mt19937_64 rng(policy.seed);
    std::vector<int> generated;
    std::size_t delims = 0;
    int step_index = 1;
    bool terminated = false;
    while (cache.size() < cfg.max_seq_len) {
        const auto dist = model.softmax_row(cache.logits.back());
        int token = 0;
        if (policy.kind == DecodePolicy::Kind::Greedy) {
            for (std::size_t v = 1; v < dist.size(); ++v)
                if (dist[v] > dist[std::size_t(token)]) token = int(v);
        } else {
            const double r = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
            double cum = 0.0;
            token = int(dist.size()) - 1;
            for (std::size_t v = 0; v < dist.size(); ++v) {
                cum += dist[v];
                if (r < cum) {
                    token = int(v);
                    break;
                }
            }
        }
        model.append_position(cache, token, step_index, popt);
        generated.push_back(token);
        if (token == cfg.end_token) {
            terminated = true;
            break;
        }
        if (token == cfg.step_delimiter) {
            ++delims;
            ++step_index;
            if (delims >= max_steps) {
                terminated = true;
                break;
            }
        }
    }
    const bool incomplete =
        !terminated && !generated.empty() && generated.back() != cfg.step_delimiter;
    return build_trace(model, prompt, generated, policy.seed, incomplete, std::move(cache),
                       disable_concepts);
}

// Trace of a forced (teacher-style) continuation: identical bookkeeping to
// forward_reason with the token choices fixed by the caller.
inline ForwardTrace trace_forced(const SageModel& model, const std::vector<int>& prompt,
                                 const std::vector<int>& forced, std::uint64_t seed = 0,
                                 bool disable_concepts = false) {
    if (forced.empty()) throw UsageError("trace_forced: empty continuation");
    if (prompt.size() + forced.size() > model.cfg.max_seq_len)
        throw UsageError("trace_forced: sequence exceeds budget");
    const bool incomplete =
        forced.back() != model.cfg.step_delimiter && forced.back() != model.cfg.end_token;
    return build_trace(model, prompt, forced, seed, incomplete, {}, disable_concepts);
}

// Per-step backward passes: accumulates d(sum_i L_i)/d(attention weights)
// into gradient_flows and caches the per-step hidden-state gradient norms
// needed by the significance measure.
inline void compute_gradient_flows(ForwardTrace& tr) {
    if (!tr.live) throw StateError("compute_gradient_flows: trace has no live forward state");
    AttentionRecord& rec = tr.record;
    std::fill(rec.gradient_flows.begin(), rec.gradient_flows.end(), 0.0);
    const std::size_t t = tr.total_len();
    const std::size_t d = tr.config.hidden_dim;
    tr.grad_norms.assign(tr.num_steps(), std::vector<double>(t, 0.0));

    for (std::size_t i = 0; i < tr.num_steps(); ++i) {
        backward(tr.live->step_losses[i]);
        for (std::size_t l = 0; l < rec.L; ++l) {
            std::size_t h = 0;
            for (const auto& probs : tr.live->fwd.token_probs[l]) {
                const auto g = probs.grad_or_zeros();
                for (std::size_t q = 0; q < t; ++q)
                    for (std::size_t kk = 0; kk < t; ++kk)
                        rec.gradient_flows[rec.map_index(l, h, q, kk)] += g[q * t + kk];
                ++h;
            }
            for (const auto& probs : tr.live->fwd.concept_probs[l]) {
                const auto g = probs.grad_or_zeros();
                const std::size_t m = probs.dim(1);
                for (std::size_t q = 0; q < t; ++q)
                    for (std::size_t kk = 0; kk < m; ++kk)
                        rec.gradient_flows[rec.map_index(l, h, q, kk)] += g[q * m + kk];
                ++h;
            }
        }
        const auto hg = tr.live->fwd.final_layer_input.grad_or_zeros();
        for (std::size_t j = 0; j < t; ++j) {
            double acc = 0.0;
            for (std::size_t dd = 0; dd < d; ++dd) {
                const double v = hg[j * d + dd];
                acc += v * v;
            }
            tr.grad_norms[i][j] = std::sqrt(acc);
        }
    }
    rec.gradient_flows_ready = true;
}

} // namespace sage
