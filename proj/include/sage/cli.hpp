// Command-line entry point: train, explain, eval, ablate and inspect-trace
// over the versioned config, checkpoint and trace formats.
// Exit codes: 0 success, 1 usage error, 2 integrity/validation failure.
#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/eval.hpp"
#include "sage/explain.hpp"
#include "sage/inverse.hpp"
#include "sage/model.hpp"
#include "sage/serialize.hpp"
#include "sage/tasks.hpp"
#include "sage/tokens.hpp"
#include "sage/trace.hpp"
#include "sage/training.hpp"

namespace sage::cli {

namespace detail {

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline SageModel model_from_checkpoint(const std::string& path, AdamW* opt = nullptr) {
    const CheckpointData ck = load_checkpoint_file(path);
    SageModel model(ck.model_config, /*seed=*/1);
    restore_into(model, ck, opt);
    return model;
}

inline std::string format_metric(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

} // namespace detail

inline int cmd_train(const std::string& config_path, std::uint64_t seed, const std::string& out_dir) {
    const Config cfg = parse_config_text(detail::read_file(config_path));
    std::filesystem::create_directories(out_dir);

    SageModel model(cfg.model, seed, cfg.train.init_std);
    const TaskKind kind = task_kind_from_string(cfg.train.task_kind);
    const auto tasks = make_synthetic_batch(kind, cfg.train.num_tasks, seed);
    std::cout << "training on " << tasks.size() << " " << cfg.train.task_kind << " tasks, "
              << model.num_scalars() << " parameters\n";

    std::ofstream metrics(out_dir + "/metrics.log");
    if (!metrics) throw IntegrityError("cannot open metrics log in '" + out_dir + "'");

    AdamW opt = AdamW::for_model(model, cfg.train);
    std::mt19937_64 shuffle_rng(seed ^ 0xc0ffee11ull);
    std::size_t global_step = 0;
    std::vector<const SyntheticTask*> order(tasks.size());
    for (std::size_t i = 0; i < tasks.size(); ++i) order[i] = &tasks[i];

    double final_acc = 0.0;
    std::size_t epochs_run = 0;
    for (std::size_t epoch = 0; epoch < cfg.train.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        const EpochMetrics m =
            train_epoch(model, order, opt, cfg.schedule, cfg.train, global_step);
        char line[256];
        std::snprintf(line, sizeof line,
                      "epoch=%zu total=%.10g reasoning=%.10g explanation=%.10g "
                      "consistency=%.10g step_acc=%.6f",
                      epoch + 1, m.mean.total, m.mean.reasoning, m.mean.explanation,
                      m.mean.consistency, m.step_accuracy);
        metrics << line << "\n";
        std::cout << line << "\n";
        final_acc = m.step_accuracy;
        epochs_run = epoch + 1;
        if (cfg.train.checkpoint_every > 0 && (epoch + 1) % cfg.train.checkpoint_every == 0) {
            std::ostringstream rng_text;
            rng_text << shuffle_rng;
            save_checkpoint_file(out_dir + "/checkpoint_epoch" + std::to_string(epoch + 1) + ".sageck",
                                 snapshot_checkpoint(model, &opt, rng_text.str(), global_step));
        }
        if (cfg.train.target_step_accuracy > 0.0 && m.step_accuracy >= cfg.train.target_step_accuracy)
            break;
    }

    std::ostringstream rng_text;
    rng_text << shuffle_rng;
    save_checkpoint_file(out_dir + "/checkpoint_final.sageck",
                         snapshot_checkpoint(model, &opt, rng_text.str(), global_step));
    std::cout << "done: " << epochs_run << " epochs, step accuracy "
              << detail::format_metric(final_acc) << "\n";
    return 0;
}

inline int cmd_explain(const std::string& checkpoint_path, std::uint64_t seed,
                       const std::string& out_dir, double threshold, std::size_t top_k) {
    SageModel model = detail::model_from_checkpoint(checkpoint_path);
    if (threshold > 0.0) model.cfg.decision_threshold = threshold;
    if (top_k > 0) model.cfg.top_k_alternatives = top_k;
    std::filesystem::create_directories(out_dir);

    const auto tasks = make_synthetic_batch(TaskKind::ArithmeticChain, 1, seed);
    const SyntheticTask& task = tasks[0];
    ForwardTrace tr = forward_reason(model, task.prompt, DecodePolicy::greedy(),
                                     /*max_steps=*/task.num_steps() + 2);
    tr.seed = seed;
    tr.allowed_first_tokens = task.allowed_first_tokens;
    analyze_trace(model, tr);
    track_alternatives(model, tr, model.cfg.top_k_alternatives);
    const auto dps = extract_decision_points(tr, model.cfg.decision_threshold);
    Explanation expl = finalize_explanation(generate_explanation(dps, tr), tr);

    const TraceFileData tf = make_trace_file(tr, dps, expl);
    save_trace_file(out_dir + "/trace.sagetrace", tf);
    const std::string rendering = render_text(expl, tr);
    std::ofstream txt(out_dir + "/explanation.txt");
    txt << rendering;
    std::cout << rendering;
    std::cout << "trace written to " << out_dir << "/trace.sagetrace (consistency "
              << detail::format_metric(expl.consistency_score) << ", " << dps.size()
              << " decision points)\n";
    return 0;
}

inline int cmd_eval(const std::string& checkpoint_path, std::uint64_t seed,
                    const std::string& out_dir, std::size_t num_tasks) {
    SageModel model = detail::model_from_checkpoint(checkpoint_path);
    std::filesystem::create_directories(out_dir);
    if (num_tasks < kMinTasksForExport)
        throw UsageError("eval: reports require at least " + std::to_string(kMinTasksForExport) +
                         " tasks");
    const auto tasks = make_synthetic_batch(TaskKind::ArithmeticChain, num_tasks, seed);
    const IntrospectionReport rep = introspection_report(model, tasks);

    std::ofstream out(out_dir + "/introspection.txt");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)rep.config_fingerprint);
    out << "num_tasks = " << rep.num_tasks << "\n"
        << "config_fingerprint = " << buf << "\n"
        << "decision_point_accuracy = " << detail::format_metric(rep.decision_point_accuracy) << "\n"
        << "alternative_path_accuracy = " << detail::format_metric(rep.alternative_path_accuracy)
        << "\n"
        << "expected_calibration_error = "
        << detail::format_metric(rep.expected_calibration_error) << "\n"
        << "dependency_tracking_score = "
        << detail::format_metric(rep.dependency_tracking_score) << "\n";

    std::ofstream bars(out_dir + "/introspection_bars.tsv");
    bars << "axis\tscore\n"
         << "decision_points\t" << detail::format_metric(rep.decision_point_accuracy) << "\n"
         << "alternative_paths\t" << detail::format_metric(rep.alternative_path_accuracy) << "\n"
         << "confidence_calibration\t"
         << detail::format_metric(1.0 - rep.expected_calibration_error) << "\n"
         << "dependency_tracking\t" << detail::format_metric(rep.dependency_tracking_score) << "\n";

    std::cout << "introspection over " << rep.num_tasks << " tasks:\n"
              << "  decision_point_accuracy    " << detail::format_metric(rep.decision_point_accuracy)
              << "\n  alternative_path_accuracy  "
              << detail::format_metric(rep.alternative_path_accuracy) << "\n  expected_calibration_error "
              << detail::format_metric(rep.expected_calibration_error) << "\n  dependency_tracking_score  "
              << detail::format_metric(rep.dependency_tracking_score) << "\n";
    return 0;
}

inline int cmd_ablate(const std::string& checkpoint_path, std::uint64_t seed,
                      const std::string& out_dir, std::vector<std::string> toggles,
                      std::size_t num_tasks) {
    SageModel model = detail::model_from_checkpoint(checkpoint_path);
    std::filesystem::create_directories(out_dir);
    if (toggles.empty())
        toggles = {"inverse_analysis", "attention_tracking", "explanation_gen", "concept_heads"};
    const auto tasks = make_synthetic_batch(TaskKind::ArithmeticChain, num_tasks, seed);
    const auto rows = run_ablation(model, tasks, toggles);

    std::ofstream out(out_dir + "/ablation.tsv");
    const char* header =
        "configuration\tstep_accuracy\tdecision_points\talternative_paths\tcalibration_error\t"
        "dependency_tracking\twallclock_ratio";
    out << header << "\n";
    std::cout << header << "\n";
    for (const auto& r : rows) {
        std::ostringstream line;
        line << r.name << '\t' << detail::format_metric(r.step_accuracy) << '\t'
             << detail::format_metric(r.decision_point_accuracy) << '\t'
             << detail::format_metric(r.alternative_path_accuracy) << '\t'
             << detail::format_metric(r.expected_calibration_error) << '\t'
             << detail::format_metric(r.dependency_tracking_score) << '\t'
             << detail::format_metric(r.wallclock_ratio);
        out << line.str() << "\n";
        std::cout << line.str() << "\n";
    }
    return 0;
}

inline int cmd_inspect(const std::string& trace_path) {
    const TraceFileData t = load_trace_file(trace_path);
    validate_trace(t);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)t.fingerprint);
    std::cout << "trace version " << t.format_version << ", fingerprint " << buf << ", seed "
              << t.seed << (t.incomplete ? " [incomplete reasoning]" : "") << "\n";
    std::cout << "dims: L=" << t.record.L << " H=" << t.record.H << " N=" << t.record.N
              << " D=" << t.record.D << " S=" << t.record.S << " K=" << t.record.K << "\n";
    std::cout << "prompt:";
    for (int tk : t.input_tokens) std::cout << " " << tok::name(tk);
    std::cout << "\n";
    for (const auto& s : t.steps) {
        std::cout << "step " << s.index << ":";
        for (std::size_t p = s.begin; p < s.end; ++p)
            std::cout << " " << tok::name(t.generated_tokens[p]);
        char lp[32];
        std::snprintf(lp, sizeof lp, "%.6f", s.step_logprob);
        std::cout << "  (logprob " << lp << ", decision score "
                  << detail::format_metric(t.record.decision_scores[s.index - 1]) << ")\n";
    }
    std::cout << t.decision_points.size() << " decision points";
    for (const auto& d : t.decision_points)
        std::cout << " [step " << d.step_index << ", confidence "
                  << detail::format_metric(d.confidence) << "]";
    std::cout << "\nconsistency score " << detail::format_metric(t.consistency_score) << "\n";
    std::cout << "validation passed\n";
    return 0;
}

inline int run(const std::vector<std::string>& args) {
    CLI::App app{"inverse-reasoning transformer workbench"};
    app.require_subcommand(1);

    std::string config_path, checkpoint_path, out_dir = "out", trace_path;
    std::uint64_t seed = 0;
    double threshold = 0.0;
    std::size_t top_k = 0, num_tasks = 0;
    std::vector<std::string> toggles;

    auto* train = app.add_subcommand("train", "train on synthetic tasks");
    train->add_option("--config", config_path, "config file")->required();
    train->add_option("--seed", seed, "random seed");
    train->add_option("--out", out_dir, "output directory");

    auto* explain = app.add_subcommand("explain", "trace and explain one reasoning run");
    explain->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    explain->add_option("--seed", seed, "random seed (selects the task)");
    explain->add_option("--out", out_dir, "output directory");
    explain->add_option("--threshold", threshold, "decision threshold override");
    explain->add_option("--top-k", top_k, "alternatives per decision point");

    auto* eval = app.add_subcommand("eval", "introspection report on a held-out suite");
    eval->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    eval->add_option("--seed", seed, "suite seed");
    eval->add_option("--out", out_dir, "output directory");
    eval->add_option("--num-tasks", num_tasks, "suite size (default 100)");

    auto* ablate = app.add_subcommand("ablate", "per-subsystem ablation table");
    ablate->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    ablate->add_option("--seed", seed, "suite seed");
    ablate->add_option("--out", out_dir, "output directory");
    ablate->add_option("--toggle", toggles, "subsystem to disable (repeatable)");
    ablate->add_option("--num-tasks", num_tasks, "suite size (default 30)");

    auto* inspect = app.add_subcommand("inspect-trace", "validate and pretty-print a trace file");
    inspect->add_option("trace", trace_path, "trace file")->required();

    // CLI11 wants argv-style reversed input when parsing a vector.
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return 1;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed, out_dir);
        if (explain->parsed()) return cmd_explain(checkpoint_path, seed, out_dir, threshold, top_k);
        if (eval->parsed())
            return cmd_eval(checkpoint_path, seed, out_dir, num_tasks ? num_tasks : 100);
        if (ablate->parsed())
            return cmd_ablate(checkpoint_path, seed, out_dir, toggles, num_tasks ? num_tasks : 30);
        if (inspect->parsed()) return cmd_inspect(trace_path);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const IntegrityError& e) {
        std::cerr << "integrity error: " << e.what() << "\n";
        return 2;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

inline int run(int argc, char** argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

} // namespace sage::cli
