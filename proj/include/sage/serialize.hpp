// File formats: the self-describing text trace format (hex-float payloads,
// explicit shape headers, bit-exact round trips) and the binary checkpoint.
#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sage/config.hpp"
#include "sage/errors.hpp"
#include "sage/explain.hpp"
#include "sage/inverse.hpp"
#include "sage/trace.hpp"

namespace sage {

// ---- trace files ----

struct TraceFileData {
    std::uint32_t format_version = 1;
    std::uint64_t fingerprint = 0;
    std::uint64_t seed = 0;
    std::uint64_t trace_id = 0;
    bool incomplete = false;
    std::vector<int> input_tokens;
    std::vector<int> generated_tokens;
    std::vector<ReasoningStep> steps; // spans + log-probs (hidden states stay in memory)
    AttentionRecord record;
    std::vector<DecisionPoint> decision_points;
    Explanation explanation;
    double consistency_score = 0.0;
};

namespace detail {

inline std::string hex_double(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%a", v);
    return buf;
}

inline double parse_hex_double(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw IntegrityError("trace line " + std::to_string(line) + ": bad float '" + s + "'");
    return v;
}

class LineReader {
public:
    explicit LineReader(std::istream& in) : in_(in) {}

    std::string next(const char* what) {
        std::string line;
        while (std::getline(in_, line)) {
            ++line_;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            return line;
        }
        throw IntegrityError("trace: unexpected end of file while reading " + std::string(what));
    }

    std::vector<std::string> fields(const char* what) {
        std::istringstream ss(next(what));
        std::vector<std::string> out;
        std::string f;
        while (ss >> f) out.push_back(f);
        return out;
    }

    std::size_t line() const { return line_; }

private:
    std::istream& in_;
    std::size_t line_ = 0;
};

inline void expect(bool cond, const LineReader& r, const std::string& what) {
    if (!cond)
        throw IntegrityError("trace line " + std::to_string(r.line()) + ": " + what);
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        out << hex_double(v[i]);
        out << ((i % 8 == 7 || i + 1 == v.size()) ? '\n' : ' ');
    }
}

inline std::vector<double> read_doubles(LineReader& r, std::size_t count, const char* what) {
    std::vector<double> out;
    out.reserve(count);
    while (out.size() < count) {
        for (const auto& f : r.fields(what)) out.push_back(parse_hex_double(f, r.line()));
    }
    if (out.size() != count)
        throw IntegrityError("trace line " + std::to_string(r.line()) + ": payload length mismatch for " +
                             std::string(what));
    return out;
}

inline void write_tensor(std::ostream& out, const char* name,
                         const std::vector<std::size_t>& dims, const std::vector<double>& v) {
    std::size_t expected = 1;
    out << "tensor " << name;
    for (std::size_t d : dims) {
        out << ' ' << d;
        expected *= d;
    }
    out << '\n';
    if (expected != v.size()) throw IntegrityError(std::string("trace: shape header mismatch for ") + name);
    write_doubles(out, v);
}

inline std::vector<double> read_tensor(LineReader& r, const char* name,
                                       const std::vector<std::size_t>& dims) {
    auto f = r.fields(name);
    expect(f.size() == dims.size() + 2 && f[0] == "tensor" && f[1] == name, r,
           std::string("expected tensor header '") + name + "'");
    std::size_t count = 1;
    for (std::size_t i = 0; i < dims.size(); ++i) {
        expect(std::stoull(f[i + 2]) == dims[i], r,
               std::string("shape header mismatch in '") + name + "'");
        count *= dims[i];
    }
    return read_doubles(r, count, name);
}

inline void write_ints(std::ostream& out, const std::vector<int>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out << v[i] << (i + 1 == v.size() ? '\n' : ' ');
    if (v.empty()) out << '\n';
}

} // namespace detail

inline void write_trace(std::ostream& out, const TraceFileData& t) {
    out << "SAGETRACE " << t.format_version << '\n';
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)t.fingerprint);
    out << "fingerprint " << buf << '\n';
    out << "seed " << t.seed << '\n';
    std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)t.trace_id);
    out << "trace_id " << buf << '\n';
    out << "incomplete " << (t.incomplete ? 1 : 0) << '\n';
    out << "tokens input " << t.input_tokens.size() << '\n';
    detail::write_ints(out, t.input_tokens);
    out << "tokens generated " << t.generated_tokens.size() << '\n';
    detail::write_ints(out, t.generated_tokens);

    out << "steps " << t.steps.size() << '\n';
    for (const auto& s : t.steps)
        out << s.index << ' ' << s.begin << ' ' << s.end << ' '
            << detail::hex_double(s.step_logprob) << '\n';

    const AttentionRecord& r = t.record;
    out << "dims " << r.L << ' ' << r.H << ' ' << r.N << ' ' << r.D << ' ' << r.S << ' ' << r.K
        << '\n';
    out << "gradient_flows_ready " << (r.gradient_flows_ready ? 1 : 0) << '\n';
    detail::write_tensor(out, "attention_maps", {r.L, r.H, r.N, r.N}, r.attention_maps);
    detail::write_tensor(out, "gradient_flows", {r.L, r.H, r.N, r.N}, r.gradient_flows);
    detail::write_tensor(out, "value_contributions", {r.L, r.N, r.D}, r.value_contributions);
    detail::write_tensor(out, "decision_scores", {r.S, 1}, r.decision_scores);
    detail::write_tensor(out, "alternative_paths", {r.S, r.K, r.N}, r.alternative_paths);

    out << "decision_points " << t.decision_points.size() << '\n';
    for (const auto& d : t.decision_points) {
        out << "dp " << d.step_index << ' ' << detail::hex_double(d.confidence) << ' '
            << d.selection_rationale_code << ' ' << d.components.size() << ' '
            << d.alternatives.size() << '\n';
        for (const auto& c : d.components)
            out << "comp " << c.token_index << ' ' << c.token_id << ' '
                << detail::hex_double(c.attention_weight) << ' '
                << detail::hex_double(c.contribution) << ' '
                << detail::hex_double(c.significance) << '\n';
        for (const auto& a : d.alternatives)
            out << "alt " << a.token << ' ' << detail::hex_double(a.probability) << ' '
                << a.rejection_code << '\n';
    }

    const Explanation& e = t.explanation;
    out << "explanation " << e.decision_justifications.size() << ' '
        << e.critical_dependencies.size() << ' ' << (e.refined ? 1 : 0) << ' '
        << (e.low_confidence_flag ? 1 : 0) << ' '
        << detail::hex_double(e.overall_min_confidence) << '\n';
    for (std::size_t k = 0; k < e.decision_justifications.size(); ++k) {
        const auto& j = e.decision_justifications[k];
        out << "just " << j.step_index << ' ' << j.top_contributors.size();
        for (std::size_t p : j.top_contributors) out << ' ' << p;
        out << '\n' << j.rationale << '\n';
        const auto& aa = e.alternative_analysis[k];
        out << "ealt " << aa.step_index << ' ' << aa.rejected.size() << '\n';
        for (const auto& a : aa.rejected)
            out << a.token << ' ' << detail::hex_double(a.probability) << ' ' << a.rejection_code
                << '\n';
        const auto& ca = e.confidence_assessment[k];
        out << "econf " << ca.step_index << ' ' << detail::hex_double(ca.confidence) << '\n';
    }
    for (const auto& d : e.critical_dependencies) {
        out << "edep " << d.step_index << ' ' << d.positions.size();
        for (std::size_t p : d.positions) out << ' ' << p;
        out << '\n';
    }
    out << "consistency " << detail::hex_double(t.consistency_score) << '\n';
    out << "end\n";
}

inline TraceFileData read_trace(std::istream& in) {
    detail::LineReader r(in);
    TraceFileData t;

    auto f = r.fields("header");
    detail::expect(f.size() == 2 && f[0] == "SAGETRACE", r, "missing SAGETRACE header");
    t.format_version = std::uint32_t(std::stoul(f[1]));
    detail::expect(t.format_version == 1, r, "unsupported format version");

    f = r.fields("fingerprint");
    detail::expect(f.size() == 2 && f[0] == "fingerprint", r, "expected fingerprint");
    t.fingerprint = std::stoull(f[1], nullptr, 16);
    f = r.fields("seed");
    detail::expect(f.size() == 2 && f[0] == "seed", r, "expected seed");
    t.seed = std::stoull(f[1]);
    f = r.fields("trace_id");
    detail::expect(f.size() == 2 && f[0] == "trace_id", r, "expected trace_id");
    t.trace_id = std::stoull(f[1], nullptr, 16);
    f = r.fields("incomplete");
    detail::expect(f.size() == 2 && f[0] == "incomplete", r, "expected incomplete flag");
    t.incomplete = f[1] == "1";

    auto read_tokens = [&](const char* which, std::vector<int>& dst) {
        auto hf = r.fields(which);
        detail::expect(hf.size() == 3 && hf[0] == "tokens" && hf[1] == which, r,
                       std::string("expected tokens ") + which);
        const std::size_t n = std::stoull(hf[2]);
        auto vals = r.fields(which);
        detail::expect(vals.size() == n || (n == 0 && vals.empty()), r, "token count mismatch");
        for (const auto& v : vals) dst.push_back(std::stoi(v));
    };
    read_tokens("input", t.input_tokens);
    read_tokens("generated", t.generated_tokens);

    f = r.fields("steps");
    detail::expect(f.size() == 2 && f[0] == "steps", r, "expected steps");
    const std::size_t s_count = std::stoull(f[1]);
    for (std::size_t i = 0; i < s_count; ++i) {
        auto sf = r.fields("step");
        detail::expect(sf.size() == 4, r, "expected step line: index begin end logprob");
        ReasoningStep st;
        st.index = std::stoull(sf[0]);
        st.begin = std::stoull(sf[1]);
        st.end = std::stoull(sf[2]);
        st.step_logprob = detail::parse_hex_double(sf[3], r.line());
        t.steps.push_back(std::move(st));
    }

    f = r.fields("dims");
    detail::expect(f.size() == 7 && f[0] == "dims", r, "expected dims L H N D S K");
    AttentionRecord& rec = t.record;
    rec.L = std::stoull(f[1]);
    rec.H = std::stoull(f[2]);
    rec.N = std::stoull(f[3]);
    rec.D = std::stoull(f[4]);
    rec.S = std::stoull(f[5]);
    rec.K = std::stoull(f[6]);
    f = r.fields("gradient_flows_ready");
    detail::expect(f.size() == 2 && f[0] == "gradient_flows_ready", r,
                   "expected gradient_flows_ready");
    rec.gradient_flows_ready = f[1] == "1";
    rec.attention_maps = detail::read_tensor(r, "attention_maps", {rec.L, rec.H, rec.N, rec.N});
    rec.gradient_flows = detail::read_tensor(r, "gradient_flows", {rec.L, rec.H, rec.N, rec.N});
    rec.value_contributions = detail::read_tensor(r, "value_contributions", {rec.L, rec.N, rec.D});
    rec.decision_scores = detail::read_tensor(r, "decision_scores", {rec.S, 1});
    rec.alternative_paths = detail::read_tensor(r, "alternative_paths", {rec.S, rec.K, rec.N});

    f = r.fields("decision_points");
    detail::expect(f.size() == 2 && f[0] == "decision_points", r, "expected decision_points");
    const std::size_t dp_count = std::stoull(f[1]);
    for (std::size_t i = 0; i < dp_count; ++i) {
        f = r.fields("dp");
        detail::expect(f.size() == 6 && f[0] == "dp", r, "expected dp line");
        DecisionPoint d;
        d.step_index = std::stoull(f[1]);
        d.confidence = detail::parse_hex_double(f[2], r.line());
        d.selection_rationale_code = f[3];
        d.trace_id = t.trace_id;
        const std::size_t ncomp = std::stoull(f[4]);
        const std::size_t nalts = std::stoull(f[5]);
        for (std::size_t cidx = 0; cidx < ncomp; ++cidx) {
            f = r.fields("comp");
            detail::expect(f.size() == 6 && f[0] == "comp", r, "expected comp line");
            PathwayComponent c;
            c.token_index = std::stoull(f[1]);
            c.token_id = std::stoi(f[2]);
            c.attention_weight = detail::parse_hex_double(f[3], r.line());
            c.contribution = detail::parse_hex_double(f[4], r.line());
            c.significance = detail::parse_hex_double(f[5], r.line());
            d.components.push_back(c);
        }
        for (std::size_t aidx = 0; aidx < nalts; ++aidx) {
            f = r.fields("alt");
            detail::expect(f.size() == 4 && f[0] == "alt", r, "expected alt line");
            Alternative a;
            a.token = std::stoi(f[1]);
            a.probability = detail::parse_hex_double(f[2], r.line());
            a.rejection_code = f[3];
            d.alternatives.push_back(std::move(a));
        }
        t.decision_points.push_back(std::move(d));
    }

    f = r.fields("explanation");
    detail::expect(f.size() == 6 && f[0] == "explanation", r, "expected explanation header");
    const std::size_t n_just = std::stoull(f[1]);
    const std::size_t n_dep = std::stoull(f[2]);
    Explanation& e = t.explanation;
    e.refined = f[3] == "1";
    e.low_confidence_flag = f[4] == "1";
    e.overall_min_confidence = detail::parse_hex_double(f[5], r.line());
    e.trace_id = t.trace_id;
    for (std::size_t k = 0; k < n_just; ++k) {
        f = r.fields("just");
        detail::expect(f.size() >= 3 && f[0] == "just", r, "expected just line");
        DecisionJustification j;
        j.step_index = std::stoull(f[1]);
        const std::size_t ntop = std::stoull(f[2]);
        detail::expect(f.size() == 3 + ntop, r, "contributor count mismatch");
        for (std::size_t i = 0; i < ntop; ++i) j.top_contributors.push_back(std::stoull(f[3 + i]));
        j.rationale = r.next("rationale");
        e.decision_justifications.push_back(std::move(j));

        f = r.fields("ealt");
        detail::expect(f.size() == 3 && f[0] == "ealt", r, "expected ealt line");
        AlternativeAnalysisEntry aa;
        aa.step_index = std::stoull(f[1]);
        const std::size_t nrej = std::stoull(f[2]);
        for (std::size_t i = 0; i < nrej; ++i) {
            f = r.fields("ealt entry");
            detail::expect(f.size() == 3, r, "expected alternative entry");
            Alternative a;
            a.token = std::stoi(f[0]);
            a.probability = detail::parse_hex_double(f[1], r.line());
            a.rejection_code = f[2];
            aa.rejected.push_back(std::move(a));
        }
        e.alternative_analysis.push_back(std::move(aa));

        f = r.fields("econf");
        detail::expect(f.size() == 3 && f[0] == "econf", r, "expected econf line");
        e.confidence_assessment.push_back(
            {std::stoull(f[1]), detail::parse_hex_double(f[2], r.line())});
    }
    for (std::size_t k = 0; k < n_dep; ++k) {
        f = r.fields("edep");
        detail::expect(f.size() >= 3 && f[0] == "edep", r, "expected edep line");
        CriticalDependencyEntry d;
        d.step_index = std::stoull(f[1]);
        const std::size_t np = std::stoull(f[2]);
        detail::expect(f.size() == 3 + np, r, "dependency count mismatch");
        for (std::size_t i = 0; i < np; ++i) d.positions.push_back(std::stoull(f[3 + i]));
        e.critical_dependencies.push_back(std::move(d));
    }

    f = r.fields("consistency");
    detail::expect(f.size() == 2 && f[0] == "consistency", r, "expected consistency");
    t.consistency_score = detail::parse_hex_double(f[1], r.line());
    e.consistency_score = t.consistency_score;
    f = r.fields("end");
    detail::expect(f.size() == 1 && f[0] == "end", r, "expected end marker");
    return t;
}

inline std::string trace_to_string(const TraceFileData& t) {
    std::ostringstream out;
    write_trace(out, t);
    return out.str();
}

inline TraceFileData trace_from_string(const std::string& s) {
    std::istringstream in(s);
    return read_trace(in);
}

// Structural validation of a parsed trace file; failures are integrity
// errors with the offending field named.
inline void validate_trace(const TraceFileData& t) {
    const AttentionRecord& r = t.record;
    if (r.attention_maps.size() != r.L * r.H * r.N * r.N)
        throw IntegrityError("trace: attention_maps payload does not match its shape header");
    if (r.N != t.input_tokens.size() + t.generated_tokens.size())
        throw IntegrityError("trace: N does not match token count");
    if (t.steps.size() != r.S) throw IntegrityError("trace: step count does not match S");
    std::size_t cursor = 0;
    for (const auto& s : t.steps) {
        if (s.begin != cursor || s.end <= s.begin)
            throw IntegrityError("trace: step spans do not partition the generated tokens");
        if (s.step_logprob > 0.0) throw IntegrityError("trace: positive step log-probability");
        cursor = s.end;
    }
    if (cursor != t.generated_tokens.size())
        throw IntegrityError("trace: step spans leave unexplained tokens");
    for (std::size_t l = 0; l < r.L; ++l)
        for (std::size_t h = 0; h < r.H; ++h)
            for (std::size_t q = 0; q < r.N; ++q) {
                double sum = 0.0;
                for (std::size_t k = 0; k < r.N; ++k) sum += r.attention(l, h, q, k);
                if (sum > 0.0 && std::abs(sum - 1.0) > 1e-6)
                    throw IntegrityError("trace: attention row " + std::to_string(q) +
                                         " does not sum to 1");
            }
    for (double d : r.decision_scores)
        if (d < 0.0 || d > 1.0) throw IntegrityError("trace: decision score outside [0,1]");
    if (t.consistency_score < 0.0 || t.consistency_score > 1.0)
        throw IntegrityError("trace: consistency score outside [0,1]");
}

inline TraceFileData make_trace_file(const ForwardTrace& tr,
                                     const std::vector<DecisionPoint>& dps, const Explanation& e) {
    TraceFileData t;
    t.fingerprint = tr.config_fp;
    t.seed = tr.seed;
    t.trace_id = tr.trace_id;
    t.incomplete = tr.incomplete_reasoning;
    t.input_tokens = tr.input_tokens;
    t.generated_tokens = tr.generated_tokens;
    t.steps = tr.steps;
    for (auto& s : t.steps) s.hidden_state.clear(); // in-memory only
    t.record = tr.record;
    t.decision_points = dps;
    t.explanation = e;
    t.consistency_score = e.consistency_score;
    return t;
}

// ---- checkpoints ----

struct CheckpointData {
    std::uint32_t format_version = 1;
    ModelConfig model_config;
    std::vector<std::string> param_names;
    std::vector<Shape> param_shapes;
    std::vector<std::vector<double>> param_values;
    std::uint64_t optimizer_t = 0;
    std::vector<std::vector<double>> opt_m, opt_v;
    std::string rng_state;
    std::uint64_t step_counter = 0;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.write(b, 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
    char b[8];
    std::memcpy(b, &v, 8);
    out.write(b, 8);
}
inline void put_bytes(std::ostream& out, const std::string& s) {
    put_u64(out, s.size());
    out.write(s.data(), std::streamsize(s.size()));
}
inline void put_doubles(std::ostream& out, const std::vector<double>& v) {
    put_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * 8));
}

struct ByteReader {
    std::istream& in;
    std::uint32_t u32(const char* what) {
        char b[4];
        if (!in.read(b, 4)) throw IntegrityError(std::string("checkpoint: truncated at ") + what);
        std::uint32_t v;
        std::memcpy(&v, b, 4);
        return v;
    }
    std::uint64_t u64(const char* what) {
        char b[8];
        if (!in.read(b, 8)) throw IntegrityError(std::string("checkpoint: truncated at ") + what);
        std::uint64_t v;
        std::memcpy(&v, b, 8);
        return v;
    }
    std::string bytes(const char* what) {
        const std::uint64_t n = u64(what);
        std::string s(n, '\0');
        if (n && !in.read(s.data(), std::streamsize(n)))
            throw IntegrityError(std::string("checkpoint: truncated at ") + what);
        return s;
    }
    std::vector<double> doubles(const char* what) {
        const std::uint64_t n = u64(what);
        std::vector<double> v(n);
        if (n && !in.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * 8)))
            throw IntegrityError(std::string("checkpoint: truncated at ") + what);
        return v;
    }
};

} // namespace detail

inline constexpr char kCheckpointMagic[6] = "SAGE1"; // 5 chars + NUL

// Little-endian binary layout; loading then saving is byte-identical.
inline void write_checkpoint(std::ostream& out, const CheckpointData& ck) {
    out.write(kCheckpointMagic, 5);
    detail::put_u32(out, ck.format_version);
    detail::put_bytes(out, serialize_model_config(ck.model_config));
    detail::put_u64(out, config_fingerprint(ck.model_config));
    detail::put_u32(out, std::uint32_t(ck.param_names.size()));
    for (std::size_t i = 0; i < ck.param_names.size(); ++i) {
        detail::put_bytes(out, ck.param_names[i]);
        detail::put_u32(out, std::uint32_t(ck.param_shapes[i].size()));
        for (std::size_t d : ck.param_shapes[i]) detail::put_u64(out, d);
        detail::put_doubles(out, ck.param_values[i]);
    }
    detail::put_u64(out, ck.optimizer_t);
    for (std::size_t i = 0; i < ck.param_names.size(); ++i) {
        detail::put_doubles(out, ck.opt_m.empty() ? std::vector<double>{} : ck.opt_m[i]);
        detail::put_doubles(out, ck.opt_v.empty() ? std::vector<double>{} : ck.opt_v[i]);
    }
    detail::put_bytes(out, ck.rng_state);
    detail::put_u64(out, ck.step_counter);
}

inline CheckpointData read_checkpoint(std::istream& in) {
    char magic[5];
    if (!in.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0)
        throw IntegrityError("checkpoint: bad magic header");
    detail::ByteReader r{in};
    CheckpointData ck;
    ck.format_version = r.u32("version");
    if (ck.format_version != 1) throw IntegrityError("checkpoint: unsupported format version");
    const std::string cfg_text = r.bytes("model config");
    ck.model_config = parse_config_text(cfg_text).model;
    const std::uint64_t fp = r.u64("fingerprint");
    if (fp != config_fingerprint(ck.model_config))
        throw IntegrityError("checkpoint: config fingerprint mismatch");
    const std::uint32_t n = r.u32("param count");
    for (std::uint32_t i = 0; i < n; ++i) {
        ck.param_names.push_back(r.bytes("param name"));
        const std::uint32_t nd = r.u32("param rank");
        Shape shape;
        for (std::uint32_t d = 0; d < nd; ++d) shape.push_back(r.u64("param dim"));
        ck.param_shapes.push_back(shape);
        ck.param_values.push_back(r.doubles("param payload"));
        if (numel(shape) != ck.param_values.back().size())
            throw IntegrityError("checkpoint: payload does not match shape for " +
                                 ck.param_names.back());
    }
    ck.optimizer_t = r.u64("optimizer step");
    for (std::uint32_t i = 0; i < n; ++i) {
        ck.opt_m.push_back(r.doubles("optimizer m"));
        ck.opt_v.push_back(r.doubles("optimizer v"));
    }
    ck.rng_state = r.bytes("rng state");
    ck.step_counter = r.u64("step counter");
    return ck;
}

inline CheckpointData snapshot_checkpoint(SageModel& model, AdamW* opt,
                                          const std::string& rng_state,
                                          std::uint64_t step_counter) {
    CheckpointData ck;
    ck.model_config = model.cfg;
    for (Parameter* p : model.parameters()) {
        ck.param_names.push_back(p->name);
        ck.param_shapes.push_back(p->tensor.shape());
        ck.param_values.push_back(p->tensor.values());
    }
    if (opt) {
        ck.optimizer_t = opt->step_count();
        ck.opt_m = opt->moments1();
        ck.opt_v = opt->moments2();
    } else {
        ck.opt_m.assign(ck.param_names.size(), {});
        ck.opt_v.assign(ck.param_names.size(), {});
    }
    ck.rng_state = rng_state;
    ck.step_counter = step_counter;
    return ck;
}

// Restores parameters into a model built from the checkpoint's own config.
// Resuming against a different configuration is rejected.
inline void restore_into(SageModel& model, const CheckpointData& ck, AdamW* opt = nullptr) {
    if (config_fingerprint(model.cfg) != config_fingerprint(ck.model_config))
        throw IntegrityError("checkpoint: config fingerprint mismatch on resume");
    auto params = model.parameters();
    if (params.size() != ck.param_names.size())
        throw IntegrityError("checkpoint: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->name != ck.param_names[i] ||
            params[i]->tensor.shape() != ck.param_shapes[i])
            throw IntegrityError("checkpoint: parameter layout mismatch at " + ck.param_names[i]);
        params[i]->tensor.values_mut() = ck.param_values[i];
    }
    if (opt && ck.optimizer_t > 0) opt->restore(ck.optimizer_t, ck.opt_m, ck.opt_v);
}

inline void save_checkpoint_file(const std::string& path, const CheckpointData& ck) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IntegrityError("checkpoint: cannot open '" + path + "' for writing");
    write_checkpoint(out, ck);
    if (!out) throw IntegrityError("checkpoint: write failed for '" + path + "'");
}

inline CheckpointData load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("checkpoint: cannot open '" + path + "'");
    return read_checkpoint(in);
}

inline void save_trace_file(const std::string& path, const TraceFileData& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IntegrityError("trace: cannot open '" + path + "' for writing");
    write_trace(out, t);
    if (!out) throw IntegrityError("trace: write failed for '" + path + "'");
}

inline TraceFileData load_trace_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("trace: cannot open '" + path + "'");
    return read_trace(in);
}

} // namespace sage
