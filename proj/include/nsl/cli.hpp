#pragma once
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>
#include <CLI11.hpp>
#include <json.hpp>
#include <nsl/errors.hpp>
#include <nsl/nsl_pipeline.hpp>
#include <nsl/simulation.hpp>
#include <nsl/types.hpp>

namespace nsl {
namespace cli {

using json = nlohmann::ordered_json;

inline constexpr const char* version = "1.0.0";
inline constexpr std::uint64_t default_seed = 12345;

enum exit_code : int { ok = 0, usage = 1, input_data = 2, numeric = 3 };

class usage_error : public error
{
public:
    using error::error;
};

// ---------------------------------------------------------------- CSV / files

struct CsvTable
{
    std::vector<std::string> headers;
    Matrix values;
};

namespace detail {

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_fields(const std::string& line)
{
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::string unquote(std::string s)
{
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

} // namespace detail

inline CsvTable parse_csv(std::istream& in, const std::string& label)
{
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    while (!lines.empty() && detail::trim(lines.back()).empty()) lines.pop_back();
    if (lines.empty()) throw input_error(label + ": empty file (a header row is required)");

    CsvTable t;
    for (auto& h : detail::split_fields(lines[0])) {
        h = detail::unquote(h);
        if (h.empty()) throw input_error(label + ": blank header field");
        t.headers.push_back(h);
    }
    const auto cols = static_cast<Index>(t.headers.size());
    // A first row that is entirely numeric is data, not a header.
    bool header_numeric = true;
    for (const auto& h : t.headers) {
        double v;
        const auto res = std::from_chars(h.data(), h.data() + h.size(), v);
        if (res.ec != std::errc() || res.ptr != h.data() + h.size()) header_numeric = false;
    }
    if (header_numeric) throw input_error(label + ": first row must be a header row");

    t.values.resize(static_cast<Index>(lines.size()) - 1, cols);
    for (std::size_t r = 1; r < lines.size(); ++r) {
        const auto fields = detail::split_fields(lines[r]);
        if (static_cast<Index>(fields.size()) != cols) {
            throw input_error(label + ": row " + std::to_string(r + 1) + " has " + std::to_string(fields.size()) +
                              " fields, expected " + std::to_string(cols));
        }
        for (Index c = 0; c < cols; ++c) {
            const auto& f = fields[c];
            if (f.empty()) throw input_error(label + ": blank field at row " + std::to_string(r + 1));
            double v = 0.0;
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (res.ec != std::errc() || res.ptr != f.data() + f.size() || !std::isfinite(v)) {
                throw input_error(label + ": cannot parse '" + f + "' at row " + std::to_string(r + 1));
            }
            t.values(static_cast<Index>(r) - 1, c) = v;
        }
    }
    return t;
}

inline CsvTable read_csv(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw input_error("cannot open " + path);
    return parse_csv(in, path);
}

/// Write to a sibling temporary file, then rename over the target.
inline void write_atomic(const std::string& path, const std::string& content)
{
    namespace fs = std::filesystem;
    const fs::path target(path);
    fs::path tmp = target;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw input_error("cannot write " + tmp.string());
        out << content;
        out.flush();
        if (!out) throw input_error("write failed for " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw input_error("cannot move output into place: " + path);
    }
}

inline void emit(const std::optional<std::string>& path, const std::string& content)
{
    if (path) write_atomic(*path, content);
    else std::cout << content;
}

inline std::string format_double(double v)
{
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// ---------------------------------------------------------------- report JSON

namespace detail {

inline json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline double number_from(const json& j) { return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>(); }

} // namespace detail

inline json spec_to_json(const sim::ExampleSpec& s)
{
    return json{{"example_id", s.example_id}, {"n", s.n}, {"p", s.p}, {"q", s.q}, {"K", s.K},
                {"k_repeats", s.k_repeats}, {"sigma", s.sigma}, {"error_family", sim::to_string(s.error_family)},
                {"df", s.df}, {"reps", s.reps}, {"test_size", s.test_size}, {"validation_size", s.validation_size},
                {"seed", s.seed}};
}

inline json summary_to_json(const sim::MeasureSummary& summary)
{
    json out = json::array();
    for (const auto& row : summary) {
        json measures = json::object();
        for (const auto& [name, st] : row.measures) {
            measures[name] = {{"mean", detail::number_or_null(st.mean)}, {"sd", detail::number_or_null(st.sd)},
                              {"count", st.count}};
        }
        out.push_back({{"method", row.method}, {"model", row.model}, {"measures", measures}});
    }
    return out;
}

inline sim::MeasureSummary summary_from_json(const json& j)
{
    sim::MeasureSummary out;
    for (const auto& row : j) {
        sim::SummaryRow r;
        r.method = row.at("method").get<std::string>();
        r.model = row.at("model").get<std::string>();
        for (const auto& [name, st] : row.at("measures").items()) {
            r.measures[name] = {detail::number_from(st.at("mean")), detail::number_from(st.at("sd")),
                                st.at("count").get<Index>()};
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline json records_to_json(const std::vector<sim::MeasureRecord>& records)
{
    json out = json::array();
    for (const auto& r : records) {
        json values = json::object();
        for (const auto& [name, v] : r.values) values[name] = detail::number_or_null(v);
        out.push_back({{"rep", r.rep}, {"method", r.method}, {"model", r.model}, {"values", values}});
    }
    return out;
}

inline std::vector<sim::MeasureRecord> records_from_json(const json& j)
{
    std::vector<sim::MeasureRecord> out;
    for (const auto& r : j) {
        sim::MeasureRecord rec;
        rec.rep = r.at("rep").get<int>();
        rec.method = r.at("method").get<std::string>();
        rec.model = r.at("model").get<std::string>();
        for (const auto& [name, v] : r.at("values").items()) rec.values[name] = detail::number_from(v);
        out.push_back(std::move(rec));
    }
    return out;
}

/// Structural check mirroring docs/report.schema.json. Returns the problems found.
inline std::vector<std::string> validate_report(const json& j)
{
    std::vector<std::string> problems;
    auto need = [&](const json& obj, const char* key, auto pred, const char* what) {
        if (!obj.is_object() || !obj.contains(key) || !pred(obj.at(key))) {
            problems.push_back(std::string("field '") + key + "' missing or not " + what);
            return false;
        }
        return true;
    };
    auto is_obj = [](const json& v) { return v.is_object(); };
    auto is_arr = [](const json& v) { return v.is_array(); };
    auto is_str = [](const json& v) { return v.is_string(); };
    auto is_int = [](const json& v) { return v.is_number_integer(); };
    auto is_num_or_null = [](const json& v) { return v.is_number() || v.is_null(); };

    if (!j.is_object()) return {"report is not a JSON object"};
    need(j, "format", [](const json& v) { return v == "nsl-report"; }, "\"nsl-report\"");
    need(j, "version", is_str, "a string");
    need(j, "command", is_str, "a string");
    if (need(j, "metadata", is_obj, "an object")) {
        const auto& m = j.at("metadata");
        need(m, "seed", is_int, "an integer");
        need(m, "spec", is_obj, "an object");
        need(m, "config", is_obj, "an object");
    }
    if (need(j, "summary", is_arr, "an array")) {
        for (const auto& row : j.at("summary")) {
            need(row, "method", is_str, "a string");
            need(row, "model", is_str, "a string");
            if (need(row, "measures", is_obj, "an object")) {
                for (const auto& [name, st] : row.at("measures").items()) {
                    need(st, "mean", is_num_or_null, "a number");
                    need(st, "sd", is_num_or_null, "a number");
                    need(st, "count", is_int, "an integer");
                }
            }
        }
    }
    if (j.contains("records")) {
        if (!j.at("records").is_array()) problems.push_back("field 'records' is not an array");
        else {
            for (const auto& r : j.at("records")) {
                need(r, "rep", is_int, "an integer");
                need(r, "method", is_str, "a string");
                need(r, "model", is_str, "a string");
                if (need(r, "values", is_obj, "an object")) {
                    for (const auto& [name, v] : r.at("values").items()) {
                        if (!is_num_or_null(v)) problems.push_back("record value '" + name + "' is not a number");
                    }
                }
            }
        }
    }
    if (need(j, "failures", is_obj, "an object")) {
        need(j.at("failures"), "count", is_int, "an integer");
        need(j.at("failures"), "messages", is_arr, "an array");
    }
    need(j, "diagnostics", is_obj, "an object");
    return problems;
}

/// Field-by-field equality; NaN equals NaN so missing values compare equal.
inline bool same_summary(const sim::MeasureSummary& a, const sim::MeasureSummary& b)
{
    auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].method != b[i].method || a[i].model != b[i].model) return false;
        if (a[i].measures.size() != b[i].measures.size()) return false;
        for (const auto& [name, st] : a[i].measures) {
            const auto it = b[i].measures.find(name);
            if (it == b[i].measures.end()) return false;
            if (!eq(st.mean, it->second.mean) || !eq(st.sd, it->second.sd) || st.count != it->second.count) return false;
        }
    }
    return true;
}

// ---------------------------------------------------------------- configuration

struct CommandConfig
{
    std::string subcommand;
    std::uint64_t seed = default_seed;
    std::optional<std::string> output;
    int threads = 0;

    // simulate
    int example = 1;
    int reps = 50;
    std::optional<Index> n, p, q, K;
    std::vector<std::string> penalties;
    int grid_size = 100;
    int starts = 5;
    Index test_size = 10000;
    double c_tilde = 1.5;
    bool include_records = true;
    std::optional<std::string> records_csv;

    // fit / pca
    std::string response, predictors, covariates;
    Index factors = 10;
    double validation_fraction = 0.4;
    bool clr = false;
    bool center = false;
    double pseudocount = 0.5;
    std::optional<std::string> coefficients_csv;
    std::optional<std::string> diagnostics_json;
    double cond_c = 0.5, cond_c2 = 1.2, cond_T = 50.0, cond_L = 1.0;

    // spark
    std::string design;
    double bound = 0.5;
    Index cap = 8;

    // report
    std::string input;
};

namespace detail {

inline void add_common(CLI::App* sub, CommandConfig& cfg)
{
    sub->add_option("--seed", cfg.seed, "Random seed")->capture_default_str();
    sub->add_option("-o,--output", cfg.output, "Output path (stdout when absent)");
}

inline void build_app(CLI::App& app, CommandConfig& cfg)
{
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI config file; command-line flags take precedence");
    app.allow_config_extras(false);

    auto* simulate = app.add_subcommand("simulate", "Replicated simulation study");
    add_common(simulate, cfg);
    simulate->add_option("--example", cfg.example, "Example id (1 or 2)")->check(CLI::IsMember({1, 2}))->capture_default_str();
    simulate->add_option("--reps", cfg.reps, "Replications")->check(CLI::Range(2, 100000))->capture_default_str();
    simulate->add_option("--n", cfg.n, "Training rows")->check(CLI::PositiveNumber);
    simulate->add_option("--p", cfg.p, "Observable predictors")->check(CLI::PositiveNumber);
    simulate->add_option("--q", cfg.q, "Confounding covariates (example 2)")->check(CLI::PositiveNumber);
    simulate->add_option("--K", cfg.K, "Number of factors")->check(CLI::PositiveNumber);
    simulate->add_option("--penalty", cfg.penalties, "Methods to run (lasso, scad, hard, l0, elastic_net)")->delimiter(',');
    simulate->add_option("--grid-size", cfg.grid_size, "Lambda grid size")->check(CLI::Range(1, 100000))->capture_default_str();
    simulate->add_option("--starts", cfg.starts, "Starts per lambda for nonconvex penalties")->check(CLI::Range(1, 1000))->capture_default_str();
    simulate->add_option("--test-size", cfg.test_size, "Test rows")->check(CLI::PositiveNumber)->capture_default_str();
    simulate->add_option("--c-tilde", cfg.c_tilde, "Support-cap constant")->check(CLI::PositiveNumber)->capture_default_str();
    simulate->add_option("--threads", cfg.threads, "Worker threads (capped by NSL_THREADS)")->check(CLI::NonNegativeNumber);
    simulate->add_option("--records", cfg.records_csv, "Per-replication CSV output");
    simulate->add_flag("!--no-records", cfg.include_records, "Omit per-replication records from the JSON report");

    auto* fit = app.add_subcommand("fit", "Fit on CSV data");
    add_common(fit, cfg);
    fit->add_option("--response", cfg.response, "y CSV (one column)")->required()->check(CLI::ExistingFile);
    fit->add_option("--predictors", cfg.predictors, "X CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--covariates", cfg.covariates, "W CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--factors", cfg.factors, "Number of factors K")->check(CLI::PositiveNumber)->capture_default_str();
    fit->add_option("--penalty", cfg.penalties, "Penalty family")->expected(1);
    fit->add_option("--validation-fraction", cfg.validation_fraction, "Held-out fraction for tuning")
        ->check(CLI::Range(0.0, 1.0))->capture_default_str();
    fit->add_option("--grid-size", cfg.grid_size, "Lambda grid size")->check(CLI::Range(1, 100000))->capture_default_str();
    fit->add_option("--starts", cfg.starts, "Starts per lambda for nonconvex penalties")->check(CLI::Range(1, 1000))->capture_default_str();
    fit->add_option("--c-tilde", cfg.c_tilde, "Support-cap constant")->check(CLI::PositiveNumber)->capture_default_str();
    fit->add_flag("--clr", cfg.clr, "Centered log-ratio transform of W (zeros replaced by the pseudocount)");
    fit->add_flag("--center", cfg.center, "Center the columns of W");
    fit->add_option("--pseudocount", cfg.pseudocount, "Replacement for zero counts")->check(CLI::PositiveNumber)->capture_default_str();
    fit->add_option("--coefficients", cfg.coefficients_csv, "Coefficient CSV output");

    auto* pca = app.add_subcommand("pca", "Sample principal components and angle diagnostics");
    add_common(pca, cfg);
    auto* cov = pca->add_option("--covariates", cfg.covariates, "W CSV")->check(CLI::ExistingFile);
    auto* ex = pca->add_option("--example", cfg.example, "Draw W from a synthetic example")->check(CLI::IsMember({1, 2}));
    cov->excludes(ex);
    pca->add_option("--factors", cfg.factors, "Number of components")->check(CLI::PositiveNumber)->capture_default_str();
    pca->add_option("--n", cfg.n, "Rows for the synthetic draw")->check(CLI::PositiveNumber);
    pca->add_flag("--clr", cfg.clr, "Centered log-ratio transform of W");
    pca->add_flag("--center", cfg.center, "Center the columns of W");
    pca->add_option("--pseudocount", cfg.pseudocount, "Replacement for zero counts")->check(CLI::PositiveNumber)->capture_default_str();
    pca->add_option("--diagnostics", cfg.diagnostics_json, "Condition diagnostics JSON (synthetic only)");
    pca->add_option("--c", cfg.cond_c, "Robust-spark bound c")->capture_default_str();
    pca->add_option("--c2", cfg.cond_c2, "Constant c2")->capture_default_str();
    pca->add_option("--T", cfg.cond_T, "Gamma box bound T")->capture_default_str();
    pca->add_option("--L", cfg.cond_L, "Constant L")->capture_default_str();

    auto* spark = app.add_subcommand("spark", "Robust spark of a design");
    add_common(spark, cfg);
    spark->add_option("--design", cfg.design, "Design CSV")->required()->check(CLI::ExistingFile);
    spark->add_option("--bound", cfg.bound, "Singular-value bound c in (0,1)")->capture_default_str();
    spark->add_option("--cap", cfg.cap, "Largest subset size searched (<= 14)")->check(CLI::PositiveNumber)->capture_default_str();

    auto* report = app.add_subcommand("report", "Validate a report and re-aggregate its records");
    add_common(report, cfg);
    report->add_option("--input", cfg.input, "Report JSON")->required()->check(CLI::ExistingFile);
}

} // namespace detail

/// Parses argv (and an optional --config file). Throws CLI::ParseError on bad usage.
inline CommandConfig parse_config(int argc, const char* const* argv)
{
    CommandConfig cfg;
    CLI::App app{"Latent-factor-adjusted sparse regression", "nsl"};
    detail::build_app(app, cfg);
    app.parse(argc, argv);
    for (const auto* sub : app.get_subcommands()) cfg.subcommand = sub->get_name();
    return cfg;
}

// ---------------------------------------------------------------- commands

namespace detail {

inline std::vector<PenaltyFamily> parse_methods(const std::vector<std::string>& names)
{
    std::vector<PenaltyFamily> out;
    for (const auto& name : names) {
        try {
            out.push_back(parse_penalty_family(name));
        } catch (const input_error& e) {
            throw usage_error(e.what());
        }
    }
    return out;
}

inline Matrix covariates_for_fit(Matrix W, const CommandConfig& cfg)
{
    if (cfg.clr) W = replace_zeros(std::move(W), cfg.pseudocount);
    return W;
}

inline std::string records_csv(const std::vector<sim::MeasureRecord>& records)
{
    std::ostringstream os;
    os << "rep,method,model,measure,value\n";
    for (const auto& r : records)
        for (const auto& [name, v] : r.values)
            os << r.rep << ',' << r.method << ',' << r.model << ',' << name << ',' << format_double(v) << '\n';
    return os.str();
}

inline int run_simulate(const CommandConfig& cfg)
{
    auto spec = sim::ExampleSpec::example(cfg.example);
    spec.reps = cfg.reps;
    spec.seed = cfg.seed;
    if (cfg.n) spec.n = spec.validation_size = *cfg.n;
    if (cfg.p) spec.p = *cfg.p;
    if (cfg.q) spec.q = *cfg.q;
    if (spec.example_id == 1) spec.q = spec.p;
    if (cfg.K) spec.K = *cfg.K;
    spec.test_size = cfg.test_size;
    spec.validate();

    sim::StudyOptions opts;
    if (!cfg.penalties.empty()) opts.methods = parse_methods(cfg.penalties);
    opts.grid_size = cfg.grid_size;
    opts.starts = cfg.starts;
    opts.c_tilde = cfg.c_tilde;
    opts.threads = cfg.threads;
    const auto result = sim::run_study(spec, opts);
    const sim::PopulationModel model(spec);

    json methods = json::array();
    for (auto m : opts.methods) methods.push_back(std::string(to_string(m)));
    json report{
        {"format", "nsl-report"},
        {"version", version},
        {"command", "simulate"},
        {"metadata",
         {{"seed", cfg.seed},
          {"spec", spec_to_json(spec)},
          {"config",
           {{"methods", methods}, {"models", json::array({"M1", "M2", "oracle"})}, {"grid_size", opts.grid_size},
            {"grid_ratio", opts.grid_ratio}, {"starts", opts.starts}, {"c_tilde", opts.c_tilde},
            {"support_cap_M", default_support_cap(spec.n, spec.p, opts.c_tilde)}, {"test_chunk", opts.test_chunk}}}}},
        {"summary", summary_to_json(result.summary)},
    };
    if (cfg.include_records) report["records"] = records_to_json(result.records);
    report["failures"] = {{"count", result.failures}, {"messages", result.failure_messages}};
    json eig = json::array();
    for (Index i = 0; i < model.eigenvalues.size(); ++i) eig.push_back(model.eigenvalues(i));
    report["diagnostics"] = {{"population_eigenvalues", eig}, {"error_sd", spec.error_sd()}};

    emit(cfg.output, report.dump(2) + "\n");
    if (cfg.records_csv) write_atomic(*cfg.records_csv, records_csv(result.records));
    if (result.failures > 0) {
        std::cerr << "nsl: " << result.failures << " replication(s) failed\n";
        for (const auto& m : result.failure_messages) std::cerr << "  " << m << "\n";
        return exit_code::numeric;
    }
    return exit_code::ok;
}

inline int run_fit(const CommandConfig& cfg)
{
    const auto y_tab = read_csv(cfg.response);
    const auto x_tab = read_csv(cfg.predictors);
    const auto w_tab = read_csv(cfg.covariates);
    if (y_tab.values.cols() != 1) throw input_error(cfg.response + ": response must have exactly one column");
    const Index n = y_tab.values.rows();
    if (x_tab.values.rows() != n || w_tab.values.rows() != n) {
        throw input_error("row counts differ: y has " + std::to_string(n) + ", X has " +
                          std::to_string(x_tab.values.rows()) + ", W has " + std::to_string(w_tab.values.rows()));
    }
    if (cfg.penalties.size() > 1) throw usage_error("fit takes a single --penalty");

    NslConfig config;
    config.num_factors = cfg.factors;
    config.penalty.family = cfg.penalties.empty() ? PenaltyFamily::hard : parse_methods(cfg.penalties).front();
    config.support_c_tilde = cfg.c_tilde;
    config.center_W = cfg.center;
    config.clr_W = cfg.clr;
    config.validation_fraction = cfg.validation_fraction;
    config.seed = cfg.seed;
    config.grid_size = cfg.grid_size;
    config.fit.starts = cfg.starts;

    const Vector y = y_tab.values.col(0);
    const auto result = fit(y, x_tab.values, detail::covariates_for_fit(w_tab.values, cfg), config);

    const Index p = x_tab.values.cols();
    const Index K = result.estimate.gamma.size();
    std::vector<char> in_support(static_cast<std::size_t>(p + K), 0);
    for (auto j : result.estimate.support) in_support[j] = 1;

    if (cfg.coefficients_csv) {
        std::ostringstream os;
        os << "name,value,standardized_value,in_support\n";
        for (Index j = 0; j < p; ++j) {
            os << x_tab.headers[j] << ',' << format_double(result.estimate.beta(j)) << ','
               << format_double(result.estimate.beta(j) * result.col_norms(j)) << ',' << int(in_support[j]) << '\n';
        }
        const Vector original = result.gamma_original_scale();
        for (Index k = 0; k < K; ++k) {
            os << "factor_" << (k + 1) << ',' << format_double(original(k)) << ','
               << format_double(result.estimate.gamma(k)) << ',' << int(in_support[p + k]) << '\n';
        }
        write_atomic(*cfg.coefficients_csv, os.str());
    }

    json support = json::array();
    for (auto j : result.estimate.support) support.push_back(j < p ? x_tab.headers[j] : "factor_" + std::to_string(j - p + 1));
    json eig = json::array(), back = json::array(), gamma = json::array();
    for (Index k = 0; k < K; ++k) {
        eig.push_back(result.eigenvalues(k));
        back.push_back(result.scores.back_scalars(k));
        gamma.push_back(result.estimate.gamma(k));
    }
    json diagnostics = json::object();
    for (const auto& [k, v] : result.diagnostics) diagnostics[k] = v;
    json out{
        {"format", "nsl-fit"},
        {"version", version},
        {"command", "fit"},
        {"seed", cfg.seed},
        {"config",
         {{"response", cfg.response}, {"predictors", cfg.predictors}, {"covariates", cfg.covariates},
          {"factors", cfg.factors}, {"penalty", std::string(to_string(config.penalty.family))},
          {"validation_fraction", cfg.validation_fraction}, {"grid_size", cfg.grid_size}, {"starts", cfg.starts},
          {"c_tilde", cfg.c_tilde}, {"clr", cfg.clr}, {"center", cfg.center}, {"pseudocount", cfg.pseudocount}}},
        {"n", n},
        {"p", p},
        {"q", w_tab.values.cols()},
        {"train_rows", result.train_rows.size()},
        {"validation_rows", result.validation_rows.size()},
        {"lambda_selected", result.lambda_selected},
        {"sigma_hat", detail::number_or_null(result.sigma_hat)},
        {"objective", result.estimate.objective_value},
        {"converged", result.estimate.converged},
        {"support", support},
        {"gamma_rescaled", gamma},
        {"eigenvalues", eig},
        {"back_scalars", back},
        {"diagnostics", diagnostics},
    };
    emit(cfg.output, out.dump(2) + "\n");
    return exit_code::ok;
}

inline int run_pca(const CommandConfig& cfg)
{
    Matrix W;
    std::optional<sim::PopulationModel> model;
    if (!cfg.covariates.empty()) {
        W = detail::covariates_for_fit(read_csv(cfg.covariates).values, cfg);
        if (cfg.diagnostics_json) throw usage_error("--diagnostics needs population truth; use --example");
    } else {
        auto spec = sim::ExampleSpec::example(cfg.example);
        if (cfg.n) spec.n = *cfg.n;
        spec.seed = cfg.seed;
        spec.K = std::max<Index>(cfg.factors, 1);
        if (spec.K >= spec.n) throw usage_error("--factors must be below the row count");
        model.emplace(spec);
        auto rng = sim::substream(spec.seed, 0, 0);
        W = sim::generate_sample(*model, spec.n, rng).W();
    }
    if (cfg.clr) W = clr_transform(W);
    if (cfg.center) W.rowwise() -= W.colwise().mean();

    const Index K = cfg.factors;
    if (K >= W.rows()) throw input_error("--factors must be below the row count");
    const auto eig = pca::leading_components(W, std::min<Index>(K + 1, std::min(W.rows() - 1, W.cols())));
    const auto scores = pca::principal_scores(W, eig, std::min<Index>(K, eig.size()));
    const Index shown = scores.count();

    // Spiked population directions: the top eigenvalue groups of the synthetic examples.
    const Index spikes = model ? (model->spec.example_id == 2 ? 2 : 1) : 0;
    std::ostringstream os;
    os << "index,eigenvalue,ratio_to_next,raw_norm,back_scalar";
    if (model) os << ",theta,omega,cos_omega";
    os << '\n';
    for (Index i = 0; i < shown; ++i) {
        const double next = i + 1 < eig.size() ? eig.values(i + 1) : std::numeric_limits<double>::quiet_NaN();
        os << (i + 1) << ',' << format_double(eig.values(i)) << ',' << format_double(eig.values(i) / next) << ','
           << format_double(scores.raw_norms(i)) << ',' << format_double(scores.back_scalars(i));
        if (model) {
            if (i < spikes) {
                const double theta = pca::subspace_angle(eig.vectors.col(i), model->directions.col(i));
                const double omega = pca::score_angle(W, eig.vectors.col(i), model->directions.col(i));
                os << ',' << format_double(theta) << ',' << format_double(omega) << ',' << format_double(std::cos(omega));
            } else {
                os << ",,,";
            }
        }
        os << '\n';
    }
    emit(cfg.output, os.str());

    if (cfg.diagnostics_json) {
        ConditionContext ctx;
        ctx.W = W;
        ctx.sample_directions = eig.vectors.leftCols(shown);
        ctx.population_directions = model->directions.leftCols(shown);
        ctx.p = model->spec.p;
        ctx.c = cfg.cond_c;
        ctx.c2 = cfg.cond_c2;
        ctx.T = cfg.cond_T;
        ctx.L = cfg.cond_L;
        Index s = 0;
        double b0 = std::numeric_limits<double>::infinity();
        for (Index j = 0; j < model->beta0.size(); ++j) {
            if (model->beta0(j) == 0.0) continue;
            ++s;
            b0 = std::min(b0, std::abs(model->beta0(j)));
        }
        for (Index k = 0; k < model->gamma0.size(); ++k) {
            if (model->gamma0(k) == 0.0) continue;
            ++s;
            b0 = std::min(b0, std::abs(model->gamma0(k)));
        }
        ctx.s = s;
        ctx.b0 = b0;
        json diag = json::object();
        for (const auto& [k, v] : condition_diagnostics(ctx)) diag[k] = number_or_null(v);
        json out{{"format", "nsl-conditions"}, {"version", version}, {"seed", cfg.seed},
                 {"example", model->spec.example_id}, {"s", s}, {"b0", b0}, {"diagnostics", diag}};
        write_atomic(*cfg.diagnostics_json, out.dump(2) + "\n");
    }
    return exit_code::ok;
}

inline int run_spark(const CommandConfig& cfg)
{
    const auto tab = read_csv(cfg.design);
    const auto res = robust_spark(tab.values, cfg.bound, cfg.cap);
    json out{{"format", "nsl-spark"}, {"version", version}, {"design", cfg.design}, {"bound", cfg.bound},
             {"cap", cfg.cap}, {"tau", res.tau}, {"lower_bound_only", res.lower_bound_only},
             {"display", (res.lower_bound_only ? ">= " : "") + std::to_string(res.tau)}};
    emit(cfg.output, out.dump(2) + "\n");
    return exit_code::ok;
}

inline int run_report(const CommandConfig& cfg)
{
    std::ifstream in(cfg.input);
    if (!in) throw input_error("cannot open " + cfg.input);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw input_error(cfg.input + ": invalid JSON: " + e.what());
    }
    const auto problems = validate_report(j);
    if (!problems.empty()) {
        std::string msg = cfg.input + ": report does not match the schema";
        for (const auto& p : problems) msg += "\n  " + p;
        throw input_error(msg);
    }
    const auto stored = summary_from_json(j.at("summary"));
    bool consistent = true;
    if (j.contains("records")) {
        consistent = same_summary(sim::summarize(records_from_json(j.at("records"))), stored);
    }

    std::ostringstream os;
    os << "method,model,measure,mean,sd,count\n";
    for (const auto& row : stored)
        for (const auto& [name, st] : row.measures)
            os << row.method << ',' << row.model << ',' << name << ',' << format_double(st.mean) << ','
               << format_double(st.sd) << ',' << st.count << '\n';
    emit(cfg.output, os.str());
    if (!consistent) throw input_error(cfg.input + ": summary does not match its per-replication records");
    return exit_code::ok;
}

} // namespace detail

inline int run_command(const CommandConfig& cfg)
{
    if (cfg.subcommand == "simulate") return detail::run_simulate(cfg);
    if (cfg.subcommand == "fit") return detail::run_fit(cfg);
    if (cfg.subcommand == "pca") return detail::run_pca(cfg);
    if (cfg.subcommand == "spark") return detail::run_spark(cfg);
    if (cfg.subcommand == "report") return detail::run_report(cfg);
    throw usage_error("unknown subcommand: " + cfg.subcommand);
}

/// Full entry point with exit-code mapping: 1 usage, 2 input data, 3 numeric.
inline int main(int argc, const char* const* argv)
{
    CommandConfig cfg;
    CLI::App app{"Latent-factor-adjusted sparse regression", "nsl"};
    detail::build_app(app, cfg);
    try {
        app.parse(argc, argv);
        for (const auto* sub : app.get_subcommands()) cfg.subcommand = sub->get_name();
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "nsl: " << e.what() << "\n";
        return exit_code::usage;
    }
    try {
        return run_command(cfg);
    } catch (const usage_error& e) {
        std::cerr << "nsl: " << e.what() << "\n";
        return exit_code::usage;
    } catch (const numeric_error& e) {
        std::cerr << "nsl: numeric failure: " << e.what() << "\n";
        return exit_code::numeric;
    } catch (const input_error& e) {
        std::cerr << "nsl: " << e.what() << "\n";
        return exit_code::input_data;
    } catch (const refusal_error& e) {
        std::cerr << "nsl: refused: " << e.what() << "\n";
        return exit_code::input_data;
    } catch (const std::exception& e) {
        std::cerr << "nsl: " << e.what() << "\n";
        return exit_code::numeric;
    }
}

} // namespace cli
} // namespace nsl
