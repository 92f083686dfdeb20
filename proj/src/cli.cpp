#include "trc/cli.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "trc/variance.hpp"
#include "trc/version.hpp"

namespace trc {

using nlohmann::json;

int exit_code_for(Errc c) noexcept {
    switch (c) {
    case Errc::InvalidSpec:
    case Errc::InvalidLevel: return 2;
    case Errc::FileNotFound: return 3;
    case Errc::ParseError: return 4;
    case Errc::MissingColumn: return 5;
    default: return 6;
    }
}

namespace {

OutputFormat parse_format(const std::string& s) {
    if (s == "table") return OutputFormat::table;
    if (s == "json") return OutputFormat::json;
    throw Error(Errc::InvalidSpec, "format", "expected table or json, got '" + s + "'");
}

std::string resolve(const std::string& base_file, const std::string& path) {
    namespace fs = std::filesystem;
    if (path.empty() || fs::path(path).is_absolute()) return path;
    return (fs::path(base_file).parent_path() / path).lexically_normal().string();
}

class KeyReader {
public:
    explicit KeyReader(const ConfigMap& m) : map_(m) {}

    const std::string* get(const std::string& key) {
        seen_.insert(key);
        auto it = map_.find(key);
        return it == map_.end() ? nullptr : &it->second.value;
    }

    void reject_unknown() const {
        for (const auto& [k, v] : map_)
            if (!seen_.count(k))
                throw Error(Errc::InvalidSpec, k, "unknown key (line " + std::to_string(v.line) + ")");
    }

private:
    const ConfigMap& map_;
    std::set<std::string> seen_;
};

Transport parse_transport(const std::string& s) {
    if (s == "S1" || s == "1") return Transport::S1;
    if (s == "S2" || s == "2") return Transport::S2;
    if (s == "S3" || s == "3") return Transport::S3;
    throw Error(Errc::InvalidSpec, "transport", "expected S1, S2 or S3, got '" + s + "'");
}

MeLevel parse_me_level(const std::string& s) {
    if (s == "small") return MeLevel::small;
    if (s == "large") return MeLevel::large;
    throw Error(Errc::InvalidSpec, "me_level", "expected small or large, got '" + s + "'");
}

ErrorDist parse_dist(const std::string& s) {
    if (s == "normal") return ErrorDist::normal;
    if (s == "gamma") return ErrorDist::gamma;
    throw Error(Errc::InvalidSpec, "exposure_error_dist", "expected normal or gamma, got '" + s + "'");
}

json to_json(const Mat& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json r = json::array();
        for (Index j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
        rows.push_back(r);
    }
    return rows;
}

json to_json(const Vec& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v(i));
    return a;
}

json opt_json(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

json finite_or_null(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

std::string fixed(double v, int prec) {
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, v);
    return buf;
}

std::string pad(const std::string& s, std::size_t w, bool left = false) {
    if (s.size() >= w) return s;
    return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::FileNotFound, path, "cannot open for writing");
    out << j.dump(2) << '\n';
}

}  // namespace

SimulationConfig simulation_config_from_map(const ConfigMap& map, const CliOverrides& o) {
    KeyReader r(map);
    SimulationConfig cfg;

    Index p = 1;
    if (auto v = r.get("p")) p = parse_integer("p", *v);
    Transport t = Transport::S1;
    if (auto v = r.get("transport")) t = parse_transport(*v);
    MeLevel m = MeLevel::small;
    if (auto v = r.get("me_level")) m = parse_me_level(*v);
    ErrorDist d = ErrorDist::normal;
    if (auto v = r.get("exposure_error_dist")) d = parse_dist(*v);

    ScenarioSpec& s = cfg.spec;
    if (p == 1 || p == 4) {
        s = default_scenario(p, t, m, d);
    } else {
        if (p < 1) throw Error(Errc::InvalidSpec, "p", "must be at least 1");
        // no defaults: every model field must come from the file
        s.p = p;
        s.transport = t;
        s.me_level = m;
        s.exposure_error_dist = d;
    }

    if (auto v = r.get("q")) s.q = parse_integer("q", *v);
    if (auto v = r.get("n_M")) s.n_M = parse_integer("n_M", *v);
    if (auto v = r.get("n_V")) s.n_V = parse_integer("n_V", *v);
    if (auto v = r.get("beta0")) s.beta0 = parse_real("beta0", *v);
    if (auto v = r.get("beta1")) s.beta1 = parse_vector("beta1", *v);
    if (auto v = r.get("beta2")) s.beta2 = parse_vector("beta2", *v);
    if (auto v = r.get("a0")) s.a0 = parse_vector("a0", *v);
    if (auto v = r.get("A2")) s.A2 = parse_matrix("A2", *v);
    if (auto v = r.get("sigma_M")) s.sigma_M = parse_matrix("sigma_M", *v);
    if (auto v = r.get("c0")) s.c0 = parse_vector("c0", *v);
    if (auto v = r.get("C1")) s.C1 = parse_matrix("C1", *v);
    if (auto v = r.get("C2")) s.C2 = parse_matrix("C2", *v);
    if (auto v = r.get("sigma_e")) s.sigma_e = parse_matrix("sigma_e", *v);
    if (auto v = r.get("sigma_e_target")) {
        const double target = parse_real("sigma_e_target", *v);
        if (s.sigma_M.rows() != s.p || s.C1.rows() != s.p || s.beta1.size() != s.p)
            throw Error(Errc::InvalidSpec, "sigma_e_target", "needs sigma_M, C1 and beta1 of size p");
        s.sigma_e = calibrate_error_variances(s.sigma_M, s.C1, s.beta1, target);
    }
    if (auto v = r.get("sigma_y")) s.sigma_y = parse_real("sigma_y", *v);
    if (auto v = r.get("w_mean")) s.w_mean = parse_real("w_mean", *v);
    if (auto v = r.get("w_var")) s.w_var = parse_real("w_var", *v);

    if (auto v = r.get("replications")) cfg.replications = parse_integer("replications", *v);
    if (auto v = r.get("seed")) cfg.seed = parse_u64("seed", *v);
    if (auto v = r.get("threads")) cfg.parallelism = static_cast<int>(parse_integer("threads", *v));
    if (auto v = r.get("ci_level")) cfg.ci_level = parse_real("ci_level", *v);
    if (auto v = r.get("format")) cfg.format = parse_format(*v);
    if (auto v = r.get("output")) cfg.output = *v;
    if (auto v = r.get("rng")) {
        if (*v != kRngName) throw Error(Errc::InvalidSpec, "rng", "only '" + std::string(kRngName) + "' is available");
    }
    r.reject_unknown();

    if (o.reps) cfg.replications = *o.reps;
    if (o.seed) cfg.seed = *o.seed;
    if (o.threads) cfg.parallelism = *o.threads;
    if (o.ci_level) cfg.ci_level = *o.ci_level;
    if (o.format) cfg.format = parse_format(*o.format);
    if (o.output) cfg.output = *o.output;

    if (cfg.replications < 1) throw Error(Errc::InvalidSpec, "replications", "must be at least 1");
    if (cfg.parallelism < 1) throw Error(Errc::InvalidSpec, "threads", "must be at least 1");
    if (!(cfg.ci_level > 0.0 && cfg.ci_level < 1.0))
        throw Error(Errc::InvalidLevel, "ci_level", "must lie strictly between 0 and 1");
    s.validate();
    return cfg;
}

SimulationConfig load_simulation_config(const std::string& path, const CliOverrides& o) {
    SimulationConfig cfg = simulation_config_from_map(read_config(path), o);
    if (!o.output && !cfg.output.empty()) cfg.output = resolve(path, cfg.output);
    return cfg;
}

void AnalysisConfig::validate() const {
    if (main_csv.empty()) throw Error(Errc::InvalidSpec, "main_csv", "required");
    if (validation_csv.empty()) throw Error(Errc::InvalidSpec, "validation_csv", "required");
    if (outcome.empty()) throw Error(Errc::InvalidSpec, "outcome", "required");
    if (surrogates.empty()) throw Error(Errc::InvalidSpec, "surrogates", "need at least one surrogate");
    if (exposures.size() != surrogates.size())
        throw Error(Errc::InvalidSpec, "exposures", "must list as many names as surrogates");
    if (method != "all" && method != "naive" && method != "original-rc" && method != "transportable-rc")
        throw Error(Errc::InvalidSpec, "method", "expected naive, original-rc, transportable-rc or all");
    if (!(ci_level > 0.0 && ci_level < 1.0))
        throw Error(Errc::InvalidLevel, "ci_level", "must lie strictly between 0 and 1");
    if (units.size() != 0 && units.size() != static_cast<Index>(surrogates.size()))
        throw Error(Errc::InvalidSpec, "units", "one multiplier per exposure");
    std::set<std::string> main_names{outcome};
    for (const auto& n : surrogates)
        if (!main_names.insert(n).second) throw Error(Errc::InvalidSpec, "surrogates", "duplicate name '" + n + "'");
    for (const auto& n : confounders)
        if (!main_names.insert(n).second) throw Error(Errc::InvalidSpec, "confounders", "duplicate name '" + n + "'");
    std::set<std::string> val_names(surrogates.begin(), surrogates.end());
    val_names.insert(confounders.begin(), confounders.end());
    for (const auto& n : exposures)
        if (!val_names.insert(n).second || n == outcome)
            throw Error(Errc::InvalidSpec, "exposures", "name '" + n + "' reused across roles");
}

AnalysisConfig load_analysis_config(const std::string& path, const CliOverrides& o) {
    const ConfigMap map = read_config(path);
    KeyReader r(map);
    AnalysisConfig cfg;
    if (auto v = r.get("main_csv")) cfg.main_csv = resolve(path, *v);
    if (auto v = r.get("validation_csv")) cfg.validation_csv = resolve(path, *v);
    if (auto v = r.get("outcome")) cfg.outcome = *v;
    if (auto v = r.get("surrogates")) cfg.surrogates = parse_name_list("surrogates", *v);
    if (auto v = r.get("exposures")) cfg.exposures = parse_name_list("exposures", *v);
    if (auto v = r.get("confounders"); v && !v->empty()) cfg.confounders = parse_name_list("confounders", *v);
    if (auto v = r.get("method")) cfg.method = *v;
    if (auto v = r.get("ci_level")) cfg.ci_level = parse_real("ci_level", *v);
    if (auto v = r.get("format")) cfg.format = parse_format(*v);
    if (auto v = r.get("output")) cfg.output = resolve(path, *v);
    if (auto v = r.get("units")) cfg.units = parse_vector("units", *v);
    r.reject_unknown();
    if (o.ci_level) cfg.ci_level = *o.ci_level;
    if (o.format) cfg.format = parse_format(*o.format);
    if (o.output) cfg.output = *o.output;
    if (o.seed || o.reps || o.threads)
        throw Error(Errc::InvalidSpec, "analyze", "--seed, --reps and --threads apply to simulate only");
    cfg.validate();
    return cfg;
}

json summary_to_json(const ReplicationSummary& s) {
    const ScenarioSpec& sp = s.spec;
    json j;
    j["kind"] = "simulation";
    j["version"] = kVersion;
    j["rng"] = kRngName;
    j["seed"] = s.seed;
    j["replications"] = s.replications;
    j["ci_level"] = s.ci_level;
    j["scenario"] = {
        {"p", sp.p},
        {"q", sp.q},
        {"n_M", sp.n_M},
        {"n_V", sp.n_V},
        {"transport", transport_name(sp.transport)},
        {"transport_factor", transport_factor(sp.transport)},
        {"me_level", me_level_name(sp.me_level)},
        {"exposure_error_dist", error_dist_name(sp.exposure_error_dist)},
        {"beta0", sp.beta0},
        {"beta1", to_json(sp.beta1)},
        {"beta2", to_json(sp.beta2)},
        {"a0", to_json(sp.a0)},
        {"A2", to_json(sp.A2)},
        {"sigma_M", to_json(sp.sigma_M)},
        {"c0", to_json(sp.c0)},
        {"C1", to_json(sp.C1)},
        {"C2", to_json(sp.C2)},
        {"sigma_e", to_json(sp.sigma_e)},
        {"sigma_y", sp.sigma_y},
        {"w_mean", sp.w_mean},
        {"w_var", sp.w_var},
    };
    const ExpectedAttenuation ea = expected_attenuation(sp);
    j["expected"] = {
        {"gamma1_main", to_json(ea.gamma1_main)},
        {"gamma1_validation", to_json(ea.gamma1_validation)},
        {"naive_beta1", to_json(ea.naive_beta1)},
        {"original_rc_beta1", to_json(ea.original_rc_beta1)},
    };
    j["failed_replications"] = s.failed_replications;
    j["failure_rate_exceeded"] = s.failure_rate_exceeded();
    json methods = json::array();
    for (const auto& m : s.methods) {
        json coefs = json::array();
        for (const auto& c : m.coefficients) {
            coefs.push_back({
                {"name", c.name},
                {"truth", c.truth},
                {"mean", c.mean},
                {"bias_pct", opt_json(c.bias_pct)},
                {"mean_se", c.mean_se},
                {"sd", opt_json(c.sd)},
                {"coverage_pct", c.coverage_pct},
            });
        }
        methods.push_back({{"method", method_name(m.method)},
                           {"successes", m.successes},
                           {"failures", m.failures},
                           {"coefficients", coefs}});
    }
    j["methods"] = methods;
    return j;
}

std::string summary_table(const ReplicationSummary& s) {
    const ScenarioSpec& sp = s.spec;
    std::ostringstream os;
    os << "Scenario " << transport_name(sp.transport) << ", " << me_level_name(sp.me_level) << " ME, "
       << error_dist_name(sp.exposure_error_dist) << " errors, p = " << sp.p << ", q = " << sp.q
       << ", n_M = " << sp.n_M << ", n_V = " << sp.n_V << "\n";
    os << "Replications " << s.replications << " (" << s.failed_replications << " failed), seed " << s.seed
       << ", CI level " << s.ci_level << "\n\n";
    os << pad("Coefficient", 12, true) << pad("Truth", 8) << "  " << pad("Method", 17, true) << pad("Estimate", 10)
       << pad("Bias(%)", 10) << pad("SE", 9) << pad("SD", 9) << pad("CP(%)", 9) << "\n";
    const std::size_t k = s.methods.empty() ? 0 : s.methods.front().coefficients.size();
    for (std::size_t i = 0; i < k; ++i) {
        for (const auto& m : s.methods) {
            const auto& c = m.coefficients[i];
            os << pad(c.name, 12, true) << pad(fixed(c.truth, 2), 8) << "  " << pad(method_name(m.method), 17, true)
               << pad(fixed(c.mean, 3), 10) << pad(c.bias_pct ? fixed(*c.bias_pct, 2) : "NA", 10)
               << pad(fixed(c.mean_se, 3), 9) << pad(c.sd ? fixed(*c.sd, 3) : "NA", 9)
               << pad(fixed(c.coverage_pct, 2), 9) << "\n";
        }
    }
    return os.str();
}

CommandResult cmd_simulate(const SimulationConfig& cfg) {
    if (cfg.replications < 1) throw Error(Errc::InvalidSpec, "replications", "must be at least 1");
    const ReplicationSummary s = run_study(cfg.spec, cfg.replications, cfg.seed, cfg.parallelism, cfg.ci_level);
    CommandResult r;
    r.json = summary_to_json(s);
    r.text = cfg.format == OutputFormat::json ? r.json.dump(2) + "\n" : summary_table(s);
    if (!cfg.output.empty()) write_json_file(cfg.output, r.json);
    r.exit_code = s.failure_rate_exceeded() ? kExitReplicationFailures : 0;
    return r;
}

CommandResult cmd_analyze(const AnalysisConfig& cfg) {
    cfg.validate();
    const CsvTable main_t = read_csv(cfg.main_csv);
    const CsvTable val_t = read_csv(cfg.validation_csv);

    std::vector<ColumnRole> main_cols{{cfg.outcome, "outcome"}};
    for (const auto& n : cfg.surrogates) main_cols.push_back({n, "surrogate"});
    for (const auto& n : cfg.confounders) main_cols.push_back({n, "confounder"});
    std::vector<ColumnRole> val_cols;
    for (const auto& n : cfg.exposures) val_cols.push_back({n, "true-exposure"});
    for (const auto& n : cfg.surrogates) val_cols.push_back({n, "surrogate"});
    for (const auto& n : cfg.confounders) val_cols.push_back({n, "confounder"});

    const ColumnBlock mb = select_columns(main_t, main_cols);
    const ColumnBlock vb = select_columns(val_t, val_cols);
    const Index p = static_cast<Index>(cfg.surrogates.size());
    const Index q = static_cast<Index>(cfg.confounders.size());

    MainStudyData main;
    main.y = mb.data.col(0);
    main.z = mb.data.middleCols(1, p);
    main.w = mb.data.rightCols(q);
    ValidationStudyData val;
    val.x = vb.data.leftCols(p);
    val.z = vb.data.middleCols(p, p);
    val.w = vb.data.rightCols(q);

    json report;
    report["kind"] = "analysis";
    report["version"] = kVersion;
    report["ci_level"] = cfg.ci_level;
    report["n_M"] = main.n();
    report["n_V"] = val.n();
    report["rows_dropped"] = {{"main", mb.dropped}, {"validation", vb.dropped}};
    json warnings = json::array();
    if (mb.dropped > 0) warnings.push_back("RowsDropped: " + std::to_string(mb.dropped) + " incomplete main-study rows removed");
    if (vb.dropped > 0)
        warnings.push_back("RowsDropped: " + std::to_string(vb.dropped) + " incomplete validation-study rows removed");
    report["warnings"] = warnings;

    std::vector<Method> methods;
    if (cfg.method == "all" || cfg.method == "naive") methods.push_back(Method::naive);
    if (cfg.method == "all" || cfg.method == "original-rc") methods.push_back(Method::original_rc);
    if (cfg.method == "all" || cfg.method == "transportable-rc") methods.push_back(Method::transportable_rc);

    std::vector<std::string> names{"(intercept)"};
    std::vector<std::string> roles{"intercept"};
    for (const auto& n : cfg.exposures) {
        names.push_back(n);
        roles.push_back("exposure");
    }
    for (const auto& n : cfg.confounders) {
        names.push_back(n);
        roles.push_back("confounder");
    }

    int exit_code = 0;
    std::ostringstream text;
    text << "n_M = " << main.n() << ", n_V = " << val.n() << ", CI level " << cfg.ci_level << "\n";
    for (const auto& w : warnings) text << "warning: " << w.get<std::string>() << "\n";
    json mj = json::array();
    for (Method m : methods) {
        json entry;
        entry["method"] = method_name(m);
        text << "\n" << method_name(m) << "\n";
        try {
            CorrectedEstimate e = m == Method::naive         ? naive_estimate(main)
                                  : m == Method::original_rc ? original_rc(main, val)
                                                             : transportable_rc_rosner(main, val);
            const auto cis = confidence_intervals(e, cfg.ci_level);
            entry["status"] = "ok";
            entry["error"] = nullptr;
            entry["warnings"] = e.warnings;
            json coefs = json::array();
            text << "  " << pad("Coefficient", 16, true) << pad("Estimate", 13) << pad("SE", 13) << pad("CI lower", 13)
                 << pad("CI upper", 13) << pad("p-value", 12) << "\n";
            for (std::size_t i = 0; i < cis.size(); ++i) {
                const auto& ci = cis[i];
                double u = 1.0;
                if (roles[i] == "exposure" && cfg.units.size() > 0) u = cfg.units(static_cast<Index>(i) - 1);
                const double pv = ci.se > 0.0 ? two_sided_p_value(ci.estimate / ci.se)
                                              : (ci.estimate == 0.0 ? 1.0 : 0.0);
                coefs.push_back({
                    {"name", names[i]},
                    {"role", roles[i]},
                    {"units", u},
                    {"estimate", u * ci.estimate},
                    {"se", std::abs(u) * ci.se},
                    {"ci_lower", std::min(u * ci.lower, u * ci.upper)},
                    {"ci_upper", std::max(u * ci.lower, u * ci.upper)},
                    {"p_value", finite_or_null(pv)},
                });
                text << "  " << pad(names[i], 16, true) << pad(fixed(u * ci.estimate, 5), 13)
                     << pad(fixed(std::abs(u) * ci.se, 5), 13)
                     << pad(fixed(std::min(u * ci.lower, u * ci.upper), 5), 13)
                     << pad(fixed(std::max(u * ci.lower, u * ci.upper), 5), 13) << pad(fixed(pv, 6), 12) << "\n";
            }
            for (const auto& w : e.warnings) text << "  warning: " << w << "\n";
            entry["coefficients"] = coefs;
        } catch (const Error& err) {
            entry["status"] = "failed";
            entry["error"] = err.what();
            entry["warnings"] = json::array();
            entry["coefficients"] = json::array();
            text << "  failed: " << err.what() << "\n";
            exit_code = exit_code_for(err.code());
        }
        mj.push_back(entry);
    }
    report["methods"] = mj;

    CommandResult r;
    r.json = report;
    r.text = cfg.format == OutputFormat::json ? report.dump(2) + "\n" : text.str();
    if (!cfg.output.empty()) write_json_file(cfg.output, report);
    r.exit_code = exit_code;
    return r;
}

std::string cmd_version() {
    return std::string("trc ") + kVersion + " (rng " + kRngName + ")";
}

}  // namespace trc
