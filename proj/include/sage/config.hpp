// Model, schedule and training configuration plus the flat key=value
// config-file format used by the CLI.
#pragma once

#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sage/errors.hpp"
#include "sage/tokens.hpp"

namespace sage {

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t token_heads = 2;
    std::size_t concept_heads = 1;
    std::size_t head_dim = 8;
    std::size_t hidden_dim = 24; // must equal (token_heads + concept_heads) * head_dim
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 32;
    std::size_t num_concepts = 4;
    double alpha = 0.1;
    double lambda1 = 1.0;
    double lambda2 = 0.5;
    double decision_threshold = 0.3;
    std::size_t top_k_alternatives = 5;
    double consistency_threshold = 0.8;
    int step_delimiter = tok::kDelimiter;
    int end_token = tok::kEos;

    void validate() const {
        if (num_layers == 0 || token_heads == 0 || head_dim == 0 || hidden_dim == 0 ||
            vocab_size == 0 || max_seq_len == 0 || num_concepts == 0)
            throw UsageError("config: sizes must be positive");
        if (hidden_dim != (token_heads + concept_heads) * head_dim)
            throw UsageError("config: hidden_dim must equal (token_heads + concept_heads) * head_dim");
        if (num_concepts > max_seq_len)
            throw UsageError("config: num_concepts must not exceed max_seq_len "
                             "(concept attention rows are stored padded to sequence length)");
        if (!(decision_threshold > 0.0 && decision_threshold < 1.0))
            throw UsageError("config: decision_threshold must lie in (0,1)");
        if (!(consistency_threshold > 0.0 && consistency_threshold < 1.0))
            throw UsageError("config: consistency_threshold must lie in (0,1)");
        if (top_k_alternatives == 0) throw UsageError("config: top_k_alternatives must be positive");
        if (step_delimiter < 0 || std::size_t(step_delimiter) >= vocab_size ||
            end_token < 0 || std::size_t(end_token) >= vocab_size)
            throw UsageError("config: delimiter/end tokens must be valid token ids");
        if (alpha < 0.0) throw UsageError("config: alpha must be non-negative");
        if (lambda1 < 0.0 || lambda2 < 0.0) throw UsageError("config: loss weights must be non-negative");
    }

    std::size_t total_heads() const { return token_heads + concept_heads; }

    // Full-scale reference layout: 32 heads of dim 128, grouped 16/8/8
    // (reasoning/memory token heads plus meta-cognitive concept heads).
    // Not a runnable default at desk scale; used for shape reasoning only.
    static ModelConfig paper_reference() {
        ModelConfig c;
        c.num_layers = 24;
        c.token_heads = 24;
        c.concept_heads = 8;
        c.head_dim = 128;
        c.hidden_dim = 32 * 128;
        c.vocab_size = 50000;
        c.max_seq_len = 2048;
        c.num_concepts = 128;
        return c;
    }
};

// Head-group labels: the first 2/4 of the token heads are tagged as
// reasoning heads, the rest as memory heads; concept heads are the
// meta-cognitive group. Labels only; no computation differs by group.
inline std::string head_group_label(const ModelConfig& cfg, std::size_t head_index) {
    if (head_index >= cfg.total_heads()) throw UsageError("head_group_label: index out of range");
    if (head_index >= cfg.token_heads) return "meta_cognitive";
    const std::size_t reasoning = (cfg.token_heads * 2 + 2) / 3; // 16 of 24 at reference scale
    return head_index < reasoning ? "reasoning" : "memory";
}

struct ScheduleConfig {
    double lr_max = 3e-4;
    std::size_t warmup_steps = 100;
    std::size_t total_steps = 1000;

    void validate() const {
        if (lr_max <= 0.0) throw UsageError("config: lr_max must be positive");
        if (warmup_steps == 0 || total_steps == 0) throw UsageError("config: schedule steps must be positive");
        if (warmup_steps >= total_steps)
            throw UsageError("config: warmup_steps must be less than total_steps");
    }
};

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t global_batch = 32;
    std::size_t micro_batches_per_step = 1;
    std::size_t num_tasks = 200;
    std::string task_kind = "arithmetic_chain";
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    double init_std = 0.08;
    std::size_t checkpoint_every = 0; // 0 = final checkpoint only
    double target_step_accuracy = 0.0; // early stop when reached; 0 disables

    void validate() const {
        if (epochs == 0 || global_batch == 0 || micro_batches_per_step == 0 || num_tasks == 0)
            throw UsageError("config: training sizes must be positive");
        if (task_kind != "arithmetic_chain" && task_kind != "boolean_logic" &&
            task_kind != "comparison_chain")
            throw UsageError("config: unknown task_kind '" + task_kind + "'");
    }
};

struct Config {
    ModelConfig model;
    ScheduleConfig schedule;
    TrainConfig train;

    void validate() const {
        model.validate();
        schedule.validate();
        train.validate();
    }
};

namespace detail {

template <class T>
T parse_number(const std::string& value, const std::string& key, std::size_t line) {
    std::istringstream in(value);
    T out{};
    in >> out;
    if (in.fail() || !(in >> std::ws).eof())
        throw IntegrityError("config line " + std::to_string(line) + ": invalid value for '" + key + "'");
    return out;
}

} // namespace detail

// Flat `key = value` text; '#' starts a comment. Unknown keys are rejected
// with a line diagnostic.
inline Config parse_config_text(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw.substr(0, raw.find('#'));
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IntegrityError("config line " + std::to_string(line_no) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw IntegrityError("config line " + std::to_string(line_no) + ": empty key or value");

        auto num = [&](auto& field) { field = detail::parse_number<std::decay_t<decltype(field)>>(value, key, line_no); };
        if (key == "num_layers") num(cfg.model.num_layers);
        else if (key == "token_heads") num(cfg.model.token_heads);
        else if (key == "concept_heads") num(cfg.model.concept_heads);
        else if (key == "head_dim") num(cfg.model.head_dim);
        else if (key == "hidden_dim") num(cfg.model.hidden_dim);
        else if (key == "vocab_size") num(cfg.model.vocab_size);
        else if (key == "max_seq_len") num(cfg.model.max_seq_len);
        else if (key == "num_concepts") num(cfg.model.num_concepts);
        else if (key == "alpha") num(cfg.model.alpha);
        else if (key == "lambda1") num(cfg.model.lambda1);
        else if (key == "lambda2") num(cfg.model.lambda2);
        else if (key == "decision_threshold") num(cfg.model.decision_threshold);
        else if (key == "top_k_alternatives") num(cfg.model.top_k_alternatives);
        else if (key == "consistency_threshold") num(cfg.model.consistency_threshold);
        else if (key == "step_delimiter") num(cfg.model.step_delimiter);
        else if (key == "end_token") num(cfg.model.end_token);
        else if (key == "lr_max") num(cfg.schedule.lr_max);
        else if (key == "warmup_steps") num(cfg.schedule.warmup_steps);
        else if (key == "total_steps") num(cfg.schedule.total_steps);
        else if (key == "epochs") num(cfg.train.epochs);
        else if (key == "global_batch") num(cfg.train.global_batch);
        else if (key == "micro_batches_per_step") num(cfg.train.micro_batches_per_step);
        else if (key == "num_tasks") num(cfg.train.num_tasks);
        else if (key == "task_kind") cfg.train.task_kind = value;
        else if (key == "adam_beta1") num(cfg.train.adam_beta1);
        else if (key == "adam_beta2") num(cfg.train.adam_beta2);
        else if (key == "adam_eps") num(cfg.train.adam_eps);
        else if (key == "weight_decay") num(cfg.train.weight_decay);
        else if (key == "init_std") num(cfg.train.init_std);
        else if (key == "checkpoint_every") num(cfg.train.checkpoint_every);
        else if (key == "target_step_accuracy") num(cfg.train.target_step_accuracy);
        else throw IntegrityError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline std::string serialize_model_config(const ModelConfig& m) {
    std::ostringstream out;
    out << "num_layers = " << m.num_layers << "\n"
        << "token_heads = " << m.token_heads << "\n"
        << "concept_heads = " << m.concept_heads << "\n"
        << "head_dim = " << m.head_dim << "\n"
        << "hidden_dim = " << m.hidden_dim << "\n"
        << "vocab_size = " << m.vocab_size << "\n"
        << "max_seq_len = " << m.max_seq_len << "\n"
        << "num_concepts = " << m.num_concepts << "\n";
    char buf[64];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s = %.17g\n", key, v);
        out << buf;
    };
    put("alpha", m.alpha);
    put("lambda1", m.lambda1);
    put("lambda2", m.lambda2);
    put("decision_threshold", m.decision_threshold);
    out << "top_k_alternatives = " << m.top_k_alternatives << "\n";
    put("consistency_threshold", m.consistency_threshold);
    out << "step_delimiter = " << m.step_delimiter << "\n"
        << "end_token = " << m.end_token << "\n";
    return out.str();
}

inline std::string serialize_config(const Config& cfg) {
    std::ostringstream out;
    out << serialize_model_config(cfg.model);
    char buf[64];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%s = %.17g\n", key, v);
        out << buf;
    };
    put("lr_max", cfg.schedule.lr_max);
    out << "warmup_steps = " << cfg.schedule.warmup_steps << "\n"
        << "total_steps = " << cfg.schedule.total_steps << "\n"
        << "epochs = " << cfg.train.epochs << "\n"
        << "global_batch = " << cfg.train.global_batch << "\n"
        << "micro_batches_per_step = " << cfg.train.micro_batches_per_step << "\n"
        << "num_tasks = " << cfg.train.num_tasks << "\n"
        << "task_kind = " << cfg.train.task_kind << "\n";
    put("adam_beta1", cfg.train.adam_beta1);
    put("adam_beta2", cfg.train.adam_beta2);
    put("adam_eps", cfg.train.adam_eps);
    put("weight_decay", cfg.train.weight_decay);
    put("init_std", cfg.train.init_std);
    out << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    put("target_step_accuracy", cfg.train.target_step_accuracy);
    return out.str();
}

// FNV-1a over the canonical model-config text; identifies compatible
// checkpoints and traces.
inline std::uint64_t config_fingerprint(const ModelConfig& m) {
    const std::string text = serialize_model_config(m);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace sage
