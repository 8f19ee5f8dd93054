// The forward reasoning stack: multiscale attention over token and concept
// heads, reasoning-gated feed-forward blocks and position-adaptive layer
// normalization.
//
// Two forward implementations live here and must stay bit-identical:
//   - taped_forward: tensor ops on the autodiff tape (training, tracking)
//   - plain_forward / append_position: per-position kernels on raw buffers
//     (decoding, isolation re-runs, alternative-path re-runs)
// Every kernel accumulates in ascending index order in both paths; change
// one side only together with the other.
#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/tensor.hpp"

namespace sage {

// ---- building blocks (taped) ----

struct AlnParamRefs {
    Tensor gain;  // {D}
    Tensor bias;  // {D}
    Tensor w_pos; // {1, D}
    Tensor b_pos; // {D}
};

// LayerNorm(x) * (1 + alpha * tanh(w_pos * pos + b_pos)), with pos the
// reasoning-step index of each row (0 for prompt tokens).
inline Tensor adaptive_layer_norm(const Tensor& x, const std::vector<int>& step_pos,
                                  const AlnParamRefs& p, double alpha) {
    if (x.rank() != 2 || step_pos.size() != x.dim(0))
        throw UsageError("adaptive_layer_norm: position vector must match rows");
    Tensor ln = layer_norm_rows(x, p.gain, p.bias);
    std::vector<double> pos_vals(step_pos.size());
    for (std::size_t i = 0; i < step_pos.size(); ++i) {
        if (step_pos[i] < 0) throw UsageError("adaptive_layer_norm: negative position");
        pos_vals[i] = double(step_pos[i]);
    }
    Tensor pos_col = Tensor::from_values({step_pos.size(), 1}, std::move(pos_vals));
    Tensor mod = tanh_op(add_rowvec(matmul(pos_col, p.w_pos), p.b_pos));
    return mul(ln, add_scalar(scale(mod, alpha), 1.0));
}

struct AttentionParamRefs {
    Tensor wq, wk, wv; // {D, h*hd}
    Tensor cq, ck, cv; // {D, c*hd}; undefined when concept_heads == 0
    Tensor wo;         // {D, D}
    Tensor concepts;   // {M, D}
    std::size_t token_heads = 0;
    std::size_t concept_heads = 0;
    std::size_t head_dim = 0;
};

struct MultiscaleAttentionOut {
    Tensor output;                     // N x D
    std::vector<Tensor> token_probs;   // h tensors, N x N (causal rows)
    std::vector<Tensor> concept_probs; // c tensors, N x M
    Tensor token_value_proj;           // N x D; token values (concept block zero) * wo
};

inline std::shared_ptr<const std::vector<std::uint8_t>> causal_mask(std::size_t n) {
    auto m = std::make_shared<std::vector<std::uint8_t>>(n * n, 0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c <= r; ++c) (*m)[r * n + c] = 1;
    return m;
}

inline double attention_scale(std::size_t head_dim) {
    return 1.0 / std::sqrt(double(head_dim));
}

// Concat(Head_1..Head_h, ConceptHead_1..ConceptHead_c) * W^O. Token heads
// attend causally over positions; concept heads attend from every position
// over the learnable concept table.
inline MultiscaleAttentionOut multiscale_attention(const Tensor& x, const AttentionParamRefs& p,
                                                   bool disable_concepts = false,
                                                   bool want_contrib = false) {
    const std::size_t n = x.dim(0), d = x.dim(1);
    const std::size_t h = p.token_heads, c = p.concept_heads, hd = p.head_dim;
    if (d != (h + c) * hd || p.wq.dim(1) != h * hd || p.wo.dim(0) != d)
        throw UsageError("multiscale_attention: config dim mismatch");
    const double inv_sqrt = attention_scale(hd);
    auto mask = causal_mask(n);

    Tensor q_all = matmul(x, p.wq);
    Tensor k_all = matmul(x, p.wk);
    Tensor v_all = matmul(x, p.wv);

    MultiscaleAttentionOut out;
    std::vector<Tensor> parts;
    parts.reserve(h + c);
    for (std::size_t head = 0; head < h; ++head) {
        Tensor qh = slice_cols(q_all, head * hd, hd);
        Tensor kh = slice_cols(k_all, head * hd, hd);
        Tensor vh = slice_cols(v_all, head * hd, hd);
        Tensor probs = masked_softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), mask);
        out.token_probs.push_back(probs);
        parts.push_back(matmul(probs, vh));
    }
    if (c > 0 && !disable_concepts) {
        Tensor cq_all = matmul(x, p.cq);
        Tensor ck_all = matmul(p.concepts, p.ck); // M x c*hd
        Tensor cv_all = matmul(p.concepts, p.cv);
        for (std::size_t head = 0; head < c; ++head) {
            Tensor qh = slice_cols(cq_all, head * hd, hd);
            Tensor kh = slice_cols(ck_all, head * hd, hd);
            Tensor vh = slice_cols(cv_all, head * hd, hd);
            Tensor probs = softmax(scale(matmul_nt(qh, kh), inv_sqrt), 1);
            out.concept_probs.push_back(probs);
            parts.push_back(matmul(probs, vh));
        }
    } else if (c > 0) {
        for (std::size_t head = 0; head < c; ++head) {
            out.concept_probs.push_back(Tensor::zeros({n, p.concepts.dim(0)}));
            parts.push_back(Tensor::zeros({n, hd}));
        }
    }
    out.output = matmul(concat_cols(parts), p.wo);
    if (want_contrib) {
        // What each token would contribute through its value vectors alone:
        // token-head values concatenated, concept block zeroed, then W^O.
        std::vector<Tensor> vparts;
        vparts.push_back(v_all);
        if (c > 0) vparts.push_back(Tensor::zeros({n, c * hd}));
        out.token_value_proj = matmul(c > 0 ? concat_cols(vparts) : v_all, p.wo);
    }
    return out;
}

struct FfnParamRefs {
    Tensor wg_logic, bg_logic, w1_logic, b1_logic, w2_logic, b2_logic;
    Tensor wg_memory, bg_memory, w1_memory, b1_memory, w2_memory, b2_memory;
};

// Gate_logic(x) .* FFN_logic(x) + Gate_memory(x) .* FFN_memory(x)
inline Tensor reasoning_ffn(const Tensor& x, const FfnParamRefs& p) {
    auto branch = [&](const Tensor& wg, const Tensor& bg, const Tensor& w1, const Tensor& b1,
                      const Tensor& w2, const Tensor& b2) {
        Tensor gate = sigmoid_op(add_rowvec(matmul(x, wg), bg));
        Tensor ffn = add_rowvec(matmul(gelu_op(add_rowvec(matmul(x, w1), b1)), w2), b2);
        return mul(gate, ffn);
    };
    Tensor logic = branch(p.wg_logic, p.bg_logic, p.w1_logic, p.b1_logic, p.w2_logic, p.b2_logic);
    Tensor memory = branch(p.wg_memory, p.bg_memory, p.w1_memory, p.b1_memory, p.w2_memory, p.b2_memory);
    return add(logic, memory);
}

// ---- the model ----

struct TapedOptions {
    bool full_record = false;     // contributions for every layer, not just the last
    bool disable_concepts = false;
};

struct TapedForward {
    Tensor logits;          // T x V
    Tensor log_probs;       // T x V
    Tensor head_input;      // T x D, post final norm
    Tensor final_layer_input; // T x D, residual stream entering the last layer
    std::vector<Tensor> layer_outputs;              // [L+1], x after embedding / each layer
    std::vector<std::vector<Tensor>> token_probs;   // [L][h]
    std::vector<std::vector<Tensor>> concept_probs; // [L][c]
    Tensor final_avg_token_attn; // T x T, last layer, token heads averaged
    Tensor final_contrib;        // T x D, last layer token-value contributions
    std::vector<Tensor> contribs; // [L] when full_record
};

struct PlainOptions {
    // Restrict token-head attention of the LAST layer at row isolate_row to
    // the listed positions (used by the token-isolation entropy re-runs).
    long isolate_row = -1;
    const std::vector<std::size_t>* isolate_allowed = nullptr;
    bool disable_concepts = false;
    // Finite-difference hook: add inject_delta to one pre-softmax token-head
    // attention score.
    long inject_layer = -1, inject_head = -1, inject_q = -1, inject_k = -1;
    double inject_delta = 0.0;
};

// Raw-buffer forward state; grows one position at a time.
struct ForwardCache {
    std::vector<int> tokens;
    std::vector<int> step_pos;
    // x_in[l][p]: residual stream entering layer l (l in [0, L]; x_in[L] is
    // the stream after the last layer). K/V[l][p]: token-head keys/values.
    std::vector<std::vector<std::vector<double>>> x_in;
    std::vector<std::vector<std::vector<double>>> K, V;
    std::vector<std::vector<double>> concept_K, concept_V; // [L], M * c*hd each
    std::vector<std::vector<double>> logits;               // [T], V each
    std::vector<std::vector<double>> final_token_attn_avg; // [T], row over positions <= p

    std::size_t size() const { return tokens.size(); }
};

class SageModel {
public:
    ModelConfig cfg;

    explicit SageModel(ModelConfig config, std::uint64_t seed = 1, double init_std = 0.08)
        : cfg(std::move(config)) {
        cfg.validate();
        build_params(seed, init_std);
        build_positional_encoding();
    }

    // -- parameters --

    Parameter& param(const std::string& name) {
        for (auto& p : params_)
            if (p->name == name) return *p;
        throw UsageError("unknown parameter '" + name + "'");
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::size_t num_scalars() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->tensor.size();
        return n;
    }

    std::uint64_t fingerprint() const { return config_fingerprint(cfg); }

    // Reasoning-step index per position: 0 for prompt tokens, otherwise the
    // 1-based index of the step the token belongs to (a delimiter closes its
    // own step).
    std::vector<int> step_positions(std::size_t prompt_len, const std::vector<int>& tokens) const {
        std::vector<int> pos(tokens.size(), 0);
        int step = 1;
        for (std::size_t p = prompt_len; p < tokens.size(); ++p) {
            pos[p] = step;
            if (tokens[p] == cfg.step_delimiter) ++step;
        }
        return pos;
    }

    // -- taped forward --

    TapedForward taped_forward(const std::vector<int>& tokens, const std::vector<int>& step_pos,
                               const TapedOptions& opt = {}) const {
        const std::size_t t = tokens.size();
        if (t == 0 || t > cfg.max_seq_len) throw UsageError("taped_forward: bad sequence length");
        if (step_pos.size() != t) throw UsageError("taped_forward: step positions mismatch");
        for (int id : tokens)
            if (id < 0 || std::size_t(id) >= cfg.vocab_size)
                throw UsageError("taped_forward: token id out of range");

        TapedForward out;
        Tensor pe = Tensor::from_values({t, cfg.hidden_dim}, pe_slice(t));
        Tensor x = add(gather_rows(tok_emb_->tensor, tokens), pe);
        out.layer_outputs.push_back(x);

        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const auto& lp = layers_[l];
            if (l + 1 == cfg.num_layers) out.final_layer_input = x;

            Tensor a_in = adaptive_layer_norm(x, step_pos, lp.aln1, cfg.alpha);
            const bool want_contrib = opt.full_record || l + 1 == cfg.num_layers;
            MultiscaleAttentionOut att =
                multiscale_attention(a_in, lp.attn, opt.disable_concepts, want_contrib);
            out.token_probs.push_back(att.token_probs);
            out.concept_probs.push_back(att.concept_probs);
            if (want_contrib) {
                if (opt.full_record) out.contribs.push_back(att.token_value_proj);
                if (l + 1 == cfg.num_layers) out.final_contrib = att.token_value_proj;
            }
            x = add(x, att.output);

            Tensor f_in = adaptive_layer_norm(x, step_pos, lp.aln2, cfg.alpha);
            x = add(x, reasoning_ffn(f_in, lp.ffn));
            out.layer_outputs.push_back(x);
        }

        // Head-averaged token attention of the last layer (pathway rows).
        {
            const auto& probs = out.token_probs.back();
            Tensor acc = probs[0];
            for (std::size_t h = 1; h < probs.size(); ++h) acc = add(acc, probs[h]);
            out.final_avg_token_attn = scale(acc, 1.0 / double(cfg.token_heads));
        }

        out.head_input = adaptive_layer_norm(x, step_pos, final_norm_, cfg.alpha);
        out.logits = add_rowvec(matmul(out.head_input, head_w_->tensor), head_b_->tensor);
        out.log_probs = log_softmax_rows(out.logits);
        return out;
    }

    // -- plain forward (raw buffers, position-incremental) --

    ForwardCache start_cache() const {
        ForwardCache c;
        c.x_in.resize(cfg.num_layers + 1);
        c.K.resize(cfg.num_layers);
        c.V.resize(cfg.num_layers);
        c.concept_K.resize(cfg.num_layers);
        c.concept_V.resize(cfg.num_layers);
        if (cfg.concept_heads > 0) {
            for (std::size_t l = 0; l < cfg.num_layers; ++l) {
                c.concept_K[l] = project_concepts(layers_[l].attn.ck);
                c.concept_V[l] = project_concepts(layers_[l].attn.cv);
            }
        }
        return c;
    }

    // Runs one position through the stack, extending the cache.
    void append_position(ForwardCache& c, int token, int step_index,
                         const PlainOptions& opt = {}) const {
        const std::size_t p = c.tokens.size();
        if (p >= cfg.max_seq_len) throw UsageError("append_position: sequence budget exhausted");
        if (token < 0 || std::size_t(token) >= cfg.vocab_size)
            throw UsageError("append_position: token id out of range");
        c.tokens.push_back(token);
        c.step_pos.push_back(step_index);

        const std::size_t d = cfg.hidden_dim;
        std::vector<double> x(d);
        const double* emb = tok_emb_->tensor.values().data() + std::size_t(token) * d;
        const double* pe = pe_.data() + p * d;
        for (std::size_t i = 0; i < d; ++i) x[i] = emb[i] + pe[i];
        c.x_in[0].push_back(x);

        std::vector<double> avg_row;
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const bool last = l + 1 == cfg.num_layers;
            x = layer_forward_at(c, l, p, x, step_index, opt, last ? &avg_row : nullptr);
            c.x_in[l + 1].push_back(x);
        }
        c.final_token_attn_avg.push_back(std::move(avg_row));
        c.logits.push_back(head_logits_row(x, step_index));
    }

    ForwardCache plain_forward(const std::vector<int>& tokens, const std::vector<int>& step_pos,
                               const PlainOptions& opt = {}) const {
        if (tokens.size() != step_pos.size()) throw UsageError("plain_forward: step positions mismatch");
        ForwardCache c = start_cache();
        for (std::size_t p = 0; p < tokens.size(); ++p) append_position(c, tokens[p], step_pos[p], opt);
        return c;
    }

    // Next-token distribution at row q when the last layer's token-head
    // attention at that row is restricted to `allowed` (sorted positions
    // <= q). Only the final layer at one position is recomputed; the result
    // is bit-identical to a full plain_forward with the same restriction.
    std::vector<double> isolated_distribution(const ForwardCache& c, std::size_t q,
                                              const std::vector<std::size_t>& allowed) const {
        if (q >= c.size()) throw UsageError("isolated_distribution: row out of range");
        if (allowed.empty()) throw UsageError("isolated_distribution: empty allowed set");
        for (std::size_t a : allowed)
            if (a > q) throw UsageError("isolated_distribution: allowed position beyond row");
        const std::size_t last = cfg.num_layers - 1;
        PlainOptions opt;
        opt.isolate_row = long(q);
        opt.isolate_allowed = &allowed;
        std::vector<double> x =
            layer_forward_at(c, last, q, c.x_in[last][q], c.step_pos[q], opt, nullptr, true);
        return softmax_row(head_logits_row(x, c.step_pos[q]));
    }

    // Final-layer head-averaged token attention row at position p when the
    // token at p is replaced. Recomputes position p through every layer
    // against the cached keys/values of earlier positions.
    std::vector<double> substituted_final_attention_row(const ForwardCache& c, std::size_t p,
                                                        int token) const {
        if (p >= c.size()) throw UsageError("substituted_final_attention_row: out of range");
        if (token < 0 || std::size_t(token) >= cfg.vocab_size)
            throw UsageError("substituted_final_attention_row: bad token");
        const std::size_t d = cfg.hidden_dim;
        std::vector<double> x(d);
        const double* emb = tok_emb_->tensor.values().data() + std::size_t(token) * d;
        const double* pe = pe_.data() + p * d;
        for (std::size_t i = 0; i < d; ++i) x[i] = emb[i] + pe[i];

        std::vector<double> avg_row;
        PlainOptions opt;
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const bool last = l + 1 == cfg.num_layers;
            x = layer_forward_at(c, l, p, x, c.step_pos[p], opt, last ? &avg_row : nullptr, true);
        }
        return avg_row;
    }

    std::vector<double> softmax_row(const std::vector<double>& logits) const {
        std::vector<double> out(logits.size());
        double m = -std::numeric_limits<double>::infinity();
        for (double v : logits) m = std::max(m, v);
        double z = 0.0;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            out[i] = std::exp(logits[i] - m);
            z += out[i];
        }
        for (double& v : out) v /= z;
        return out;
    }

    const std::vector<double>& positional_encoding() const { return pe_; }

    struct LayerParams {
        AlnParamRefs aln1, aln2;
        AttentionParamRefs attn;
        FfnParamRefs ffn;
    };
    const std::vector<LayerParams>& layers() const { return layers_; }
    const AlnParamRefs& final_norm() const { return final_norm_; }
    Parameter& tok_emb() { return *tok_emb_; }
    Parameter& head_w() { return *head_w_; }
    Parameter& head_b() { return *head_b_; }
    Parameter& consistency_w() { return *consistency_w_; }
    Parameter& consistency_b() { return *consistency_b_; }
    Parameter& dep_w() { return *dep_w_; }
    Parameter& dep_b() { return *dep_b_; }
    Parameter& opkind_w() { return *opkind_w_; }
    Parameter& opkind_b() { return *opkind_b_; }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::vector<LayerParams> layers_;
    AlnParamRefs final_norm_;
    Parameter* tok_emb_ = nullptr;
    Parameter* concepts_ = nullptr;
    Parameter* head_w_ = nullptr;
    Parameter* head_b_ = nullptr;
    Parameter* consistency_w_ = nullptr;
    Parameter* consistency_b_ = nullptr;
    Parameter* dep_w_ = nullptr;
    Parameter* dep_b_ = nullptr;
    Parameter* opkind_w_ = nullptr;
    Parameter* opkind_b_ = nullptr;
    std::vector<double> pe_; // max_seq_len x D

    Parameter* add_param(const std::string& name, Shape shape, std::mt19937_64& rng,
                         double std_dev, bool zero = false, double fill = 0.0) {
        std::vector<double> vals(numel(shape), fill);
        if (!zero && fill == 0.0) {
            std::normal_distribution<double> nd(0.0, std_dev);
            for (double& v : vals) v = nd(rng);
        }
        params_.push_back(std::make_unique<Parameter>(
            name, Tensor::from_values(std::move(shape), std::move(vals), true)));
        return params_.back().get();
    }

    void build_params(std::uint64_t seed, double init_std) {
        std::mt19937_64 rng(seed);
        const std::size_t d = cfg.hidden_dim;
        const std::size_t hhd = cfg.token_heads * cfg.head_dim;
        const std::size_t chd = cfg.concept_heads * cfg.head_dim;
        const std::size_t f = ffn_hidden();

        tok_emb_ = add_param("embed.tok", {cfg.vocab_size, d}, rng, init_std);
        concepts_ = add_param("embed.concepts", {cfg.num_concepts, d}, rng, init_std);

        layers_.resize(cfg.num_layers);
        for (std::size_t l = 0; l < cfg.num_layers; ++l) {
            const std::string base = "layer." + std::to_string(l) + ".";
            auto aln = [&](const std::string& tag) {
                AlnParamRefs a;
                a.gain = add_param(base + tag + ".gain", {d}, rng, 0.0, true, 1.0)->tensor;
                a.bias = add_param(base + tag + ".bias", {d}, rng, 0.0, true)->tensor;
                a.w_pos = add_param(base + tag + ".w_pos", {1, d}, rng, init_std)->tensor;
                a.b_pos = add_param(base + tag + ".b_pos", {d}, rng, 0.0, true)->tensor;
                return a;
            };
            layers_[l].aln1 = aln("aln1");
            AttentionParamRefs& at = layers_[l].attn;
            at.wq = add_param(base + "attn.wq", {d, hhd}, rng, init_std)->tensor;
            at.wk = add_param(base + "attn.wk", {d, hhd}, rng, init_std)->tensor;
            at.wv = add_param(base + "attn.wv", {d, hhd}, rng, init_std)->tensor;
            if (cfg.concept_heads > 0) {
                at.cq = add_param(base + "attn.cq", {d, chd}, rng, init_std)->tensor;
                at.ck = add_param(base + "attn.ck", {d, chd}, rng, init_std)->tensor;
                at.cv = add_param(base + "attn.cv", {d, chd}, rng, init_std)->tensor;
            }
            at.wo = add_param(base + "attn.wo", {d, d}, rng, init_std)->tensor;
            at.concepts = concepts_->tensor;
            at.token_heads = cfg.token_heads;
            at.concept_heads = cfg.concept_heads;
            at.head_dim = cfg.head_dim;

            layers_[l].aln2 = aln("aln2");
            FfnParamRefs& fp = layers_[l].ffn;
            auto branch = [&](const std::string& tag, Tensor& wg, Tensor& bg, Tensor& w1,
                              Tensor& b1, Tensor& w2, Tensor& b2) {
                wg = add_param(base + "ffn." + tag + ".wg", {d, d}, rng, init_std)->tensor;
                bg = add_param(base + "ffn." + tag + ".bg", {d}, rng, 0.0, true)->tensor;
                w1 = add_param(base + "ffn." + tag + ".w1", {d, f}, rng, init_std)->tensor;
                b1 = add_param(base + "ffn." + tag + ".b1", {f}, rng, 0.0, true)->tensor;
                w2 = add_param(base + "ffn." + tag + ".w2", {f, d}, rng, init_std)->tensor;
                b2 = add_param(base + "ffn." + tag + ".b2", {d}, rng, 0.0, true)->tensor;
            };
            branch("logic", fp.wg_logic, fp.bg_logic, fp.w1_logic, fp.b1_logic, fp.w2_logic,
                   fp.b2_logic);
            branch("memory", fp.wg_memory, fp.bg_memory, fp.w1_memory, fp.b1_memory, fp.w2_memory,
                   fp.b2_memory);
        }

        final_norm_.gain = add_param("final_norm.gain", {d}, rng, 0.0, true, 1.0)->tensor;
        final_norm_.bias = add_param("final_norm.bias", {d}, rng, 0.0, true)->tensor;
        final_norm_.w_pos = add_param("final_norm.w_pos", {1, d}, rng, init_std)->tensor;
        final_norm_.b_pos = add_param("final_norm.b_pos", {d}, rng, 0.0, true)->tensor;

        head_w_ = add_param("head.w", {d, cfg.vocab_size}, rng, init_std);
        head_b_ = add_param("head.b", {cfg.vocab_size}, rng, 0.0, true);
        consistency_w_ = add_param("readout.consistency.w", {d, cfg.vocab_size}, rng, init_std);
        consistency_b_ = add_param("readout.consistency.b", {cfg.vocab_size}, rng, 0.0, true);
        dep_w_ = add_param("readout.dep.w", {2 * d, cfg.max_seq_len}, rng, init_std);
        dep_b_ = add_param("readout.dep.b", {cfg.max_seq_len}, rng, 0.0, true);
        opkind_w_ = add_param("readout.op.w", {2 * d, std::size_t(tok::kNumOpKinds)}, rng, init_std);
        opkind_b_ = add_param("readout.op.b", {std::size_t(tok::kNumOpKinds)}, rng, 0.0, true);
    }

    // Fixed sinusoidal table, scaled to sit at the same magnitude as the
    // token embeddings so position does not drown out token identity.
    static constexpr double kPeScale = 0.1;

    void build_positional_encoding() {
        const std::size_t n = cfg.max_seq_len, d = cfg.hidden_dim;
        pe_.assign(n * d, 0.0);
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t i = 0; i < d; ++i) {
                const double freq = std::exp(-std::log(10000.0) * double(2 * (i / 2)) / double(d));
                const double angle = double(p) * freq;
                pe_[p * d + i] = kPeScale * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
            }
    }

    std::vector<double> pe_slice(std::size_t t) const {
        return std::vector<double>(pe_.begin(), pe_.begin() + t * cfg.hidden_dim);
    }

public:
    std::size_t ffn_hidden() const { return 2 * cfg.hidden_dim; }

private:
    // ---- plain kernels (mirror the taped ops exactly) ----

    static void aln_row(const double* x, std::size_t d, int pos, const AlnParamRefs& p,
                        double alpha, double* out) {
        const double* gain = p.gain.values().data();
        const double* bias = p.bias.values().data();
        const double* w_pos = p.w_pos.values().data();
        const double* b_pos = p.b_pos.values().data();
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += x[i];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            const double dv = x[i] - mean;
            var += dv * dv;
        }
        var /= double(d);
        const double inv_std = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t i = 0; i < d; ++i) {
            const double ln = (x[i] - mean) * inv_std * gain[i] + bias[i];
            const double mod = std::tanh(double(pos) * w_pos[i] + b_pos[i]);
            out[i] = ln * (mod * alpha + 1.0);
        }
    }

    // y[j] = sum_d x[d] * W[d, j] for columns [col0, col0+cols)
    static void project_row(const double* x, std::size_t d, const Tensor& w, std::size_t col0,
                            std::size_t cols, double* y) {
        const double* wv = w.values().data();
        const std::size_t stride = w.dim(1);
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += x[k] * wv[k * stride + col0 + j];
            y[j] = acc;
        }
    }

    std::vector<double> project_concepts(const Tensor& w) const {
        const std::size_t m = cfg.num_concepts, d = cfg.hidden_dim;
        const std::size_t cols = w.dim(1);
        std::vector<double> out(m * cols);
        const double* cv = concepts_->tensor.values().data();
        for (std::size_t r = 0; r < m; ++r)
            project_row(cv + r * d, d, w, 0, cols, out.data() + r * cols);
        return out;
    }

    std::vector<double> head_logits_row(const std::vector<double>& x, int pos) const {
        const std::size_t d = cfg.hidden_dim, v = cfg.vocab_size;
        std::vector<double> norm(d);
        aln_row(x.data(), d, pos, final_norm_, cfg.alpha, norm.data());
        std::vector<double> logits(v);
        project_row(norm.data(), d, head_w_->tensor, 0, v, logits.data());
        const double* b = head_b_->tensor.values().data();
        for (std::size_t i = 0; i < v; ++i) logits[i] += b[i];
        return logits;
    }

    // One position through one layer. K/V rows for earlier positions come
    // from the cache; this position's own K/V are appended unless read_only.
    std::vector<double> layer_forward_at(const ForwardCache& c, std::size_t l, std::size_t p,
                                         const std::vector<double>& x_in, int step_index,
                                         const PlainOptions& opt,
                                         std::vector<double>* avg_row_out,
                                         bool read_only = false) const {
        const std::size_t d = cfg.hidden_dim;
        const std::size_t h = cfg.token_heads, hd = cfg.head_dim;
        const std::size_t hhd = h * hd;
        const auto& lp = layers_[l];
        const double inv_sqrt = attention_scale(hd);
        const bool last_layer = l + 1 == cfg.num_layers;

        std::vector<double> a(d);
        aln_row(x_in.data(), d, step_index, lp.aln1, cfg.alpha, a.data());

        std::vector<double> k_row(hhd), v_row(hhd), q_row(hhd);
        project_row(a.data(), d, lp.attn.wq, 0, hhd, q_row.data());
        project_row(a.data(), d, lp.attn.wk, 0, hhd, k_row.data());
        project_row(a.data(), d, lp.attn.wv, 0, hhd, v_row.data());

        if (!read_only) {
            auto& cache = const_cast<ForwardCache&>(c);
            cache.K[l].push_back(k_row);
            cache.V[l].push_back(v_row);
        }
        // In read-only mode (isolation / substitution re-runs) this position's
        // own key/value come from the freshly computed rows, earlier positions
        // from the cache.
        auto key_at = [&](std::size_t kpos) -> const double* {
            return (read_only && kpos == p) ? k_row.data() : c.K[l][kpos].data();
        };
        auto val_at = [&](std::size_t kpos) -> const double* {
            return (read_only && kpos == p) ? v_row.data() : c.V[l][kpos].data();
        };

        const bool isolate = last_layer && opt.isolate_row == long(p) && opt.isolate_allowed;
        std::vector<double> concat(d, 0.0);
        if (avg_row_out) avg_row_out->assign(p + 1, 0.0);

        std::vector<double> scores(p + 1), probs(p + 1);
        for (std::size_t head = 0; head < h; ++head) {
            const std::size_t off = head * hd;
            auto score_of = [&](std::size_t k) {
                const double* kr = key_at(k);
                double acc = 0.0;
                for (std::size_t j = 0; j < hd; ++j) acc += q_row[off + j] * kr[off + j];
                double s = acc * inv_sqrt;
                if (long(l) == opt.inject_layer && long(head) == opt.inject_head &&
                    long(p) == opt.inject_q && long(k) == opt.inject_k)
                    s += opt.inject_delta;
                return s;
            };
            // max / exp / sum / divide in ascending order over the allowed set
            double m = -std::numeric_limits<double>::infinity();
            if (isolate) {
                for (std::size_t k : *opt.isolate_allowed) m = std::max(m, score_of(k));
            } else {
                for (std::size_t k = 0; k <= p; ++k) {
                    scores[k] = score_of(k);
                    m = std::max(m, scores[k]);
                }
            }
            double z = 0.0;
            std::fill(probs.begin(), probs.end(), 0.0);
            if (isolate) {
                for (std::size_t k : *opt.isolate_allowed) {
                    probs[k] = std::exp(score_of(k) - m);
                    z += probs[k];
                }
                for (std::size_t k : *opt.isolate_allowed) probs[k] /= z;
            } else {
                for (std::size_t k = 0; k <= p; ++k) {
                    probs[k] = std::exp(scores[k] - m);
                    z += probs[k];
                }
                for (std::size_t k = 0; k <= p; ++k) probs[k] /= z;
            }
            for (std::size_t j = 0; j < hd; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k <= p; ++k) acc += probs[k] * val_at(k)[off + j];
                concat[off + j] = acc;
            }
            if (avg_row_out)
                for (std::size_t k = 0; k <= p; ++k) (*avg_row_out)[k] += probs[k];
        }
        if (avg_row_out)
            for (double& w : *avg_row_out) w *= 1.0 / double(h);

        if (cfg.concept_heads > 0 && !opt.disable_concepts) {
            const std::size_t m = cfg.num_concepts;
            const std::size_t chd = cfg.concept_heads * hd;
            std::vector<double> cq(chd);
            project_row(a.data(), d, lp.attn.cq, 0, chd, cq.data());
            std::vector<double> cprobs(m);
            for (std::size_t head = 0; head < cfg.concept_heads; ++head) {
                const std::size_t off = head * hd;
                double mx = -std::numeric_limits<double>::infinity();
                std::vector<double> cs(m);
                for (std::size_t cm = 0; cm < m; ++cm) {
                    double acc = 0.0;
                    const double* kr = c.concept_K[l].data() + cm * chd;
                    for (std::size_t j = 0; j < hd; ++j) acc += cq[off + j] * kr[off + j];
                    cs[cm] = acc * inv_sqrt;
                    mx = std::max(mx, cs[cm]);
                }
                double z = 0.0;
                for (std::size_t cm = 0; cm < m; ++cm) {
                    cprobs[cm] = std::exp(cs[cm] - mx);
                    z += cprobs[cm];
                }
                for (std::size_t cm = 0; cm < m; ++cm) cprobs[cm] /= z;
                for (std::size_t j = 0; j < hd; ++j) {
                    double acc = 0.0;
                    for (std::size_t cm = 0; cm < m; ++cm)
                        acc += cprobs[cm] * c.concept_V[l][cm * chd + off + j];
                    concat[hhd + off + j] = acc;
                }
            }
        }

        std::vector<double> attn_out(d);
        project_row(concat.data(), d, lp.attn.wo, 0, d, attn_out.data());
        std::vector<double> x2(d);
        for (std::size_t i = 0; i < d; ++i) x2[i] = x_in[i] + attn_out[i];

        std::vector<double> fin(d);
        aln_row(x2.data(), d, step_index, lp.aln2, cfg.alpha, fin.data());

        const std::size_t f = ffn_hidden();
        std::vector<double> out(d);
        auto branch = [&](const Tensor& wg, const Tensor& bg, const Tensor& w1, const Tensor& b1,
                          const Tensor& w2, const Tensor& b2, std::vector<double>& res) {
            std::vector<double> gate(d), hsz(f);
            project_row(fin.data(), d, wg, 0, d, gate.data());
            const double* bgv = bg.values().data();
            for (std::size_t i = 0; i < d; ++i) gate[i] = 1.0 / (1.0 + std::exp(-(gate[i] + bgv[i])));
            project_row(fin.data(), d, w1, 0, f, hsz.data());
            const double* b1v = b1.values().data();
            for (std::size_t i = 0; i < f; ++i) hsz[i] = detail::gelu_fwd(hsz[i] + b1v[i]);
            res.resize(d);
            const double* b2v = b2.values().data();
            const double* w2v = w2.values().data();
            for (std::size_t i = 0; i < d; ++i) {
                double acc = 0.0;
                for (std::size_t k = 0; k < f; ++k) acc += hsz[k] * w2v[k * d + i];
                res[i] = acc + b2v[i];
            }
            for (std::size_t i = 0; i < d; ++i) res[i] *= gate[i];
        };
        std::vector<double> logic, memory;
        branch(lp.ffn.wg_logic, lp.ffn.bg_logic, lp.ffn.w1_logic, lp.ffn.b1_logic, lp.ffn.w2_logic,
               lp.ffn.b2_logic, logic);
        branch(lp.ffn.wg_memory, lp.ffn.bg_memory, lp.ffn.w1_memory, lp.ffn.b1_memory,
               lp.ffn.w2_memory, lp.ffn.b2_memory, memory);
        for (std::size_t i = 0; i < d; ++i) out[i] = x2[i] + (logic[i] + memory[i]);
        return out;
    }
};

} // namespace sage
