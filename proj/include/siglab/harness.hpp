#pragma once

#include "siglab/recovery.hpp"

#include <filesystem>
#include <fstream>

namespace siglab {

// ---------------------------------------------------------------- configuration

enum class AdmissibilityMode { Strict, Report };

struct ExperimentConfig {
    enum class MeshKind { Cube, Box, File } mesh_kind = MeshKind::Cube;
    int cube_n = 2;
    Vec3 box_lo = Vec3::Zero(), box_hi = Vec3::Ones();
    std::array<int, 3> box_cells{2, 2, 2};
    std::string mesh_file;

    LoadSpec load;
    MaterialModel material = make_yeoh(1.0, 0.2, 0.1);
    SolverOptions solver;
    Continuation continuation;
    Multistart multistart;

    bool recovery_enabled = false;
    RecoveryOptions recovery;
    std::vector<double> recovery_h;  // defaults to h_list

    std::vector<double> h_list;
    std::string output_dir;
    std::uint64_t seed = 20240611;
    int admissibility_budget = 4000;
    AdmissibilityMode admissibility = AdmissibilityMode::Strict;
    std::optional<KernelClass> kernel;
    double tol_conv = 5e-3;   // final gap <= tol_conv (1 + |min G~|)
    double tol_upper = 1e-2;  // recovery gap <= tol_upper (1 + |G~(u)|)
};

namespace detail {

inline std::vector<double> read_numbers(std::istringstream& ss, const std::string& line) {
    std::vector<double> v;
    std::string tok;
    while (ss >> tok) {
        char* end = nullptr;
        const double x = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end) throw Error("config: bad number '" + tok + "' in '" + line + "'");
        v.push_back(x);
    }
    return v;
}

inline void check_decreasing(const std::vector<double>& hs, const char* what) {
    if (hs.empty()) throw Error(std::string("config: empty ") + what);
    for (size_t i = 0; i < hs.size(); ++i) {
        if (!(hs[i] > 0 && hs[i] < 1)) throw Error(std::string("config: ") + what + " values must lie in (0,1)");
        if (i && !(hs[i] < hs[i - 1])) throw Error(std::string("config: ") + what + " must be strictly decreasing");
    }
}

}  // namespace detail

// Line-oriented config; `#` starts a comment. Relative paths resolve against base_dir.
inline ExperimentConfig parse_config(std::istream& in, const std::filesystem::path& base_dir = ".") {
    ExperimentConfig c;
    bool have_mesh = false, have_h = false;
    std::string line;
    auto resolve = [&](const std::string& p) {
        std::filesystem::path q(p);
        if (q.is_relative()) q = base_dir / q;
        if (!std::filesystem::exists(q)) throw Error("config: file not found: " + q.string());
        return q.string();
    };
    while (std::getline(in, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (parse_load_directive(line, c.load)) continue;
        std::istringstream ss(line);
        std::string key;
        ss >> key;
        auto nums = [&](size_t lo, size_t hi) {
            auto v = detail::read_numbers(ss, line);
            if (v.size() < lo || v.size() > hi) throw Error("config: wrong number of values in '" + line + "'");
            return v;
        };
        if (key == "mesh") {
            std::string kind;
            ss >> kind;
            if (kind == "cube") {
                c.mesh_kind = ExperimentConfig::MeshKind::Cube;
                c.cube_n = static_cast<int>(nums(1, 1)[0]);
            } else if (kind == "box") {
                const auto v = nums(9, 9);
                c.mesh_kind = ExperimentConfig::MeshKind::Box;
                c.box_lo = Vec3(v[0], v[1], v[2]);
                c.box_hi = Vec3(v[3], v[4], v[5]);
                c.box_cells = {static_cast<int>(v[6]), static_cast<int>(v[7]), static_cast<int>(v[8])};
            } else if (kind == "file") {
                std::string p;
                ss >> p;
                c.mesh_kind = ExperimentConfig::MeshKind::File;
                c.mesh_file = resolve(p);
            } else {
                throw Error("config: unknown mesh kind '" + kind + "'");
            }
            have_mesh = true;
        } else if (key == "load") {
            std::string p;
            ss >> p;
            const LoadSpec extra = read_load_file(resolve(p));
            c.load.f = extra.f;
            c.load.g.insert(c.load.g.end(), extra.g.begin(), extra.g.end());
        } else if (key == "material") {
            std::string kind;
            ss >> kind;
            if (kind != "yeoh") throw Error("config: only 'material yeoh c1 c2 c3' is supported");
            const auto v = nums(3, 3);
            const double kappa = c.material.penalty_kappa;
            c.material = make_yeoh(v[0], v[1], v[2], kappa);
        } else if (key == "penalty") {
            const auto v = nums(3, 3);
            c.material.penalty_kappa = v[0];
            c.continuation = {v[0], v[1], static_cast<int>(v[2])};
        } else if (key == "solver") {
            const auto v = nums(2, 2);
            c.solver = {static_cast<int>(v[0]), v[1]};
        } else if (key == "continuation") {
            const auto v = nums(3, 3);
            c.continuation = {v[0], v[1], static_cast<int>(v[2])};
        } else if (key == "multistart") {
            const auto v = nums(2, 2);
            c.multistart = {static_cast<std::uint64_t>(v[0]), static_cast<int>(v[1])};
        } else if (key == "recovery") {
            const auto v = nums(3, 4);
            c.recovery_enabled = true;
            c.recovery.gamma = v[0];
            c.recovery.steps_per_h = static_cast<int>(v[1]);
            c.recovery.ledger_samples = static_cast<int>(v[2]);
            if (v.size() == 4) c.recovery.eval_cells = static_cast<int>(v[3]);
        } else if (key == "recovery_h") {
            c.recovery_h = nums(1, 1000);
            detail::check_decreasing(c.recovery_h, "recovery_h");
        } else if (key == "h") {
            c.h_list = nums(1, 1000);
            detail::check_decreasing(c.h_list, "h list");
            have_h = true;
        } else if (key == "output") {
            ss >> c.output_dir;
            if (std::filesystem::path(c.output_dir).is_relative()) c.output_dir = (base_dir / c.output_dir).string();
        } else if (key == "seed") {
            c.seed = static_cast<std::uint64_t>(nums(1, 1)[0]);
        } else if (key == "tolerance") {
            const auto v = nums(1, 2);
            c.tol_conv = v[0];
            if (v.size() == 2) c.tol_upper = v[1];
        } else if (key == "admissibility") {
            std::string mode;
            ss >> mode;
            if (mode == "strict")
                c.admissibility = AdmissibilityMode::Strict;
            else if (mode == "report")
                c.admissibility = AdmissibilityMode::Report;
            else
                throw Error("config: admissibility must be 'strict' or 'report'");
            const auto v = nums(0, 1);
            if (!v.empty()) c.admissibility_budget = static_cast<int>(v[0]);
        } else if (key == "kernel") {
            std::string k;
            ss >> k;
            if (k == "identity")
                c.kernel = KernelClass::IdentityOnly;
            else if (k == "about_e3")
                c.kernel = KernelClass::RotationsAboutE3;
            else
                throw Error("config: kernel must be 'identity' or 'about_e3'");
        } else {
            throw Error("config: unknown directive '" + key + "'");
        }
    }
    if (!have_mesh) throw Error("config: missing mesh directive");
    if (!have_h) throw Error("config: missing h list");
    if (c.recovery_h.empty()) c.recovery_h = c.h_list;
    return c;
}

inline ExperimentConfig read_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open config " + path);
    return parse_config(f, std::filesystem::path(path).parent_path());
}

inline Mesh build_mesh(const ExperimentConfig& c) {
    switch (c.mesh_kind) {
        case ExperimentConfig::MeshKind::Cube: return build_unit_cube_mesh(c.cube_n);
        case ExperimentConfig::MeshKind::Box:
            return build_box_mesh(c.box_lo, c.box_hi, c.box_cells[0], c.box_cells[1], c.box_cells[2]);
        case ExperimentConfig::MeshKind::File: return read_mesh_file(c.mesh_file);
    }
    throw Error("unreachable");
}

// ---------------------------------------------------------------- records and verdicts

struct ConvergenceRecord {
    double h = 0.0;
    double inf_Gh = 0.0;
    Vec3 R_axis = Vec3::UnitZ();
    double R_angle = 0.0;
    Vec3 c = Vec3::Zero();
    double t_j = 0.0;
    double u_h1 = 0.0;
    double phi_Rj = 0.0;
    double gap = 0.0;
    double det_residual = 0.0;
    int active_nodes = 0;
    double dist_to_limit = 0.0;  // |u_j - u_ref|_{L2}, recorded only
    bool degenerate = false;     // rotation not determined by the data
    bool ok = true;
    std::string termination;
};

struct Verdict {
    bool solved = true;     // every h produced a result
    bool trend = true;      // positive part of the gap nonincreasing over the final three h
    bool threshold = true;  // final positive gap within tolerance
    double final_gap = 0.0;
    double tolerance = 0.0;
    bool pass() const { return solved && trend && threshold; }
};

inline Verdict convergence_verdict(const std::vector<ConvergenceRecord>& records, double min_gtilde, double tol_conv) {
    Verdict v;
    v.tolerance = tol_conv * (1.0 + std::abs(min_gtilde));
    if (records.empty()) {
        v.solved = false;
        return v;
    }
    for (const auto& r : records)
        if (!r.ok || !std::isfinite(r.inf_Gh)) v.solved = false;
    const size_t n = records.size(), first = n >= 3 ? n - 3 : 0;
    for (size_t i = first + 1; i < n; ++i)
        if (std::max(records[i].gap, 0.0) > std::max(records[i - 1].gap, 0.0)) v.trend = false;
    v.final_gap = std::max(records.back().gap, 0.0);
    v.threshold = std::isfinite(records.back().gap) && v.final_gap <= v.tolerance;
    return v;
}

struct LimitSummary {
    KernelClass kernel = KernelClass::IdentityOnly;
    SolveResult e, g, gt;
};

inline LimitSummary solve_limits(const Mesh& m, const MaterialModel& mat, const LoadSpec& load, const ObstacleSet& E,
                                 KernelClass k) {
    LimitSummary s;
    s.kernel = k;
    s.e = minimize_limit({&m, mat, load, E, Variant::EI, k});
    s.g = minimize_limit({&m, mat, load, E, Variant::GI, k});
    s.gt = minimize_limit({&m, mat, load, E, Variant::GTildeI, k});
    return s;
}

struct SandwichReport {
    double gtilde = 0.0, g = 0.0, e = 0.0;
    bool ordered = false;  // G~ <= G <= E within 1e-8
    bool equal = false;    // |G~ - G| <= 1e-8
    std::vector<double> slack;  // max(0, min G~ - inf G_h) per h
    double slack_rate = 0.0;    // least-squares C in slack ~ C h
    bool slack_vanishing = true;
    double lower_bound = INFINITY;  // min over h of inf G_h
    bool bounded = true;
    bool pass() const { return ordered && equal && slack_vanishing && bounded; }
};

inline SandwichReport sandwich_check(const LimitSummary& s, const std::vector<ConvergenceRecord>& records = {}) {
    SandwichReport r;
    r.gtilde = s.gt.objective;
    r.g = s.g.objective;
    r.e = s.e.objective;
    const double tol = 1e-8;
    r.ordered = s.gt.ok && s.g.ok && s.e.ok && r.gtilde <= r.g + tol && r.g <= r.e + tol;
    r.equal = std::abs(r.gtilde - r.g) <= tol;
    double num = 0.0, den = 0.0;
    for (const auto& rec : records) {
        const double sl = std::max(0.0, r.gtilde - rec.inf_Gh);
        r.slack.push_back(sl);
        num += sl * rec.h;
        den += rec.h * rec.h;
        r.lower_bound = std::min(r.lower_bound, rec.inf_Gh);
        if (!std::isfinite(rec.inf_Gh)) r.bounded = false;
    }
    if (den > 0) r.slack_rate = num / den;
    for (size_t i = 1; i < r.slack.size(); ++i)
        if (r.slack[i] > r.slack[i - 1] + 1e-12) r.slack_vanishing = false;
    return r;
}

// ---------------------------------------------------------------- experiment

struct ExperimentReport {
    AdmissibilityReport admissibility;
    KernelClass kernel = KernelClass::IdentityOnly;
    LimitSummary limits;
    std::vector<ConvergenceRecord> records;
    std::optional<RecoverySequence> recovery;
    std::optional<UpperBoundReport> upper;
    SandwichReport sandwich;
    Verdict verdict;
    std::vector<std::string> notes;

    bool upper_pass(double tol_upper) const {
        return !upper || upper->pass(tol_upper * (1.0 + std::abs(upper->reference)));
    }
};

inline bool is_zero_load(const AdmissibilityReport& a) {
    return std::abs(a.L_e1) <= kAdmissTol && std::abs(a.L_e2) <= kAdmissTol && std::abs(a.L_e3) <= kAdmissTol;
}

// Admissibility gate and kernel class shared by the CLI commands.
inline KernelClass resolve_kernel(const ExperimentConfig& cfg, const Mesh& m, const ObstacleSet& E,
                                  AdmissibilityReport& adm, std::vector<std::string>& notes) {
    adm = verify_global_admissibility(cfg.load, E, m, cfg.admissibility_budget, cfg.seed);
    if (!adm.admissible()) {
        std::string what;
        for (const auto& v : adm.violations) what += (what.empty() ? "" : "; ") + v;
        if (cfg.admissibility == AdmissibilityMode::Strict) throw Error("load not admissible: " + what);
        notes.push_back("load not admissible (continuing in report mode): " + what);
    }
    if (cfg.kernel) return *cfg.kernel;
    if (adm.kernel_class) return *adm.kernel_class;
    if (adm.L_e3 < 0) return decide_kernel(load_moments(cfg.load, m), E).grid;
    notes.push_back("L(e3) = 0: every rotation about e3 is compatible");
    return KernelClass::RotationsAboutE3;
}

inline ConvergenceRecord make_record(const Mesh& m, const ExperimentConfig& cfg, const ObstacleSet& E, double h,
                                     const SolveResult& r, double min_gtilde, const NodalField& u_ref, bool zero_load) {
    ConvergenceRecord rec;
    rec.h = h;
    rec.ok = r.ok;
    rec.termination = r.termination;
    rec.inf_Gh = r.objective;
    rec.gap = r.objective - min_gtilde;
    rec.det_residual = r.constraint_residual;
    rec.active_nodes = static_cast<int>(r.active_nodes.size());
    if (!r.ok) return rec;
    const DeformationField y = make_deformation(m, r.y);
    const OptimalRotation R = optimal_rotation(y, m);
    const auto aa = R.R.axis_angle();
    rec.R_axis = aa.axis();
    rec.R_angle = aa.angle();
    rec.degenerate = R.degenerate || zero_load;
    rec.c = translations(y, R.R, E, m);
    NodalField w3 = NodalField::Zero(m.num_nodes(), 3);
    for (int i = 0; i < m.num_nodes(); ++i) w3(i, 2) = r.y(i, 2) - (R.R.R * m.nodes[i])[2] - rec.c[2];
    rec.t_j = l2_norm(m, w3) / h;
    const DisplacementField u = extract_displacement(y, R.R, rec.c, h, m);
    rec.u_h1 = h1_norm(m, u.u);
    rec.phi_Rj = phi(cfg.load, E, R.R, m);
    rec.dist_to_limit = l2_norm(m, u.u - u_ref);
    return rec;
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
    const Mesh m = build_mesh(cfg);
    const ObstacleSet E = extract_obstacle(m);
    ExperimentReport rep;
    rep.kernel = resolve_kernel(cfg, m, E, rep.admissibility, rep.notes);
    const bool zero_load = is_zero_load(rep.admissibility);

    rep.limits = solve_limits(m, cfg.material, cfg.load, E, rep.kernel);
    const double min_gt = rep.limits.gt.objective;

    std::optional<NodalField> warm;
    for (double h : cfg.h_list) {
        NonlinearProblem p;
        p.mesh = &m;
        p.material = cfg.material;
        p.load = cfg.load;
        p.obstacle = E;
        p.h = h;
        p.solver = cfg.solver;
        p.continuation = cfg.continuation;
        p.multistart = cfg.multistart;
        p.warm_start = warm;
        const SolveResult r = minimize_nonlinear(p);
        if (r.ok) warm = r.u;
        rep.records.push_back(make_record(m, cfg, E, h, r, min_gt, rep.limits.gt.u, zero_load));
    }

    if (cfg.recovery_enabled) {
        rep.recovery = build_recovery_sequence(m, rep.limits.gt.u, cfg.material, cfg.load, E, rep.kernel, cfg.recovery_h,
                                               cfg.recovery);
        rep.upper = verify_upper_bound(*rep.recovery, cfg.material, cfg.load, min_gt);
    }
    rep.sandwich = sandwich_check(rep.limits, rep.records);
    rep.verdict = convergence_verdict(rep.records, min_gt, cfg.tol_conv);
    return rep;
}

inline bool experiment_passes(const ExperimentReport& rep, const ExperimentConfig& cfg) {
    return rep.verdict.pass() && rep.sandwich.pass() && rep.upper_pass(cfg.tol_upper);
}

// ---------------------------------------------------------------- outputs

inline constexpr const char* kSweepHeader = "h,inf_Gh,gap,t_j,phi_Rj,det_residual,active_nodes,R_axis,R_angle,c1,c2,c3";

inline std::string format_sweep_csv(const std::vector<ConvergenceRecord>& records) {
    if (records.empty()) throw Error("no records to write");
    std::string out = std::string(kSweepHeader) + "\n";
    char buf[512];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%.17g %.17g %.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.h, r.inf_Gh, r.gap, r.t_j, r.phi_Rj, r.det_residual, r.active_nodes, r.R_axis.x(), r.R_axis.y(),
                      r.R_axis.z(), r.R_angle, r.c.x(), r.c.y(), r.c.z());
        out += buf;
    }
    return out;
}

inline std::string format_report(const ExperimentReport& rep, const ExperimentConfig& cfg) {
    std::ostringstream o;
    char buf[512];
    o << "admissibility: " << (rep.admissibility.admissible() ? "pass" : "FAIL") << "\n";
    for (const auto& v : rep.admissibility.violations) o << "  violated: " << v << "\n";
    for (const auto& n : rep.notes) o << "note: " << n << "\n";
    o << "kernel: " << to_string(rep.kernel) << "\n";
    std::snprintf(buf, sizeof buf, "limits: min G~ = %.12g  min G = %.12g  min E = %.12g\n", rep.sandwich.gtilde,
                  rep.sandwich.g, rep.sandwich.e);
    o << buf;
    o << "sandwich: ordered " << (rep.sandwich.ordered ? "yes" : "NO") << ", G~ = G " << (rep.sandwich.equal ? "yes" : "NO")
      << ", slack nonincreasing " << (rep.sandwich.slack_vanishing ? "yes" : "NO") << "\n";
    o << "\n     h           inf G_h          gap        t_j      Phi(R_j)   det res  active  termination\n";
    for (const auto& r : rep.records) {
        std::snprintf(buf, sizeof buf, "%8.4g  %16.10g  %11.4e  %9.3e  %10.3e  %8.1e  %6d  %s%s\n", r.h, r.inf_Gh, r.gap, r.t_j,
                      r.phi_Rj, r.det_residual, r.active_nodes, r.termination.c_str(), r.degenerate ? " (degenerate)" : "");
        o << buf;
    }
    const Verdict& v = rep.verdict;
    std::snprintf(buf, sizeof buf, "\ngap trend over final three h: %s; final gap %.4e vs tolerance %.4e: %s\n",
                  v.trend ? "nonincreasing" : "INCREASING", v.final_gap, v.tolerance, v.threshold ? "ok" : "FAIL");
    o << buf;
    if (rep.upper) {
        o << "\nrecovery (gamma " << cfg.recovery.gamma << ")\n     h        G_h(y_h)         gap      beta/h    det res\n";
        for (const auto& r : rep.upper->rows) {
            std::snprintf(buf, sizeof buf, "%8.4g  %14.8g  %11.4e  %9.3e  %8.1e\n", r.h, r.value, r.gap, r.beta_over_h,
                          r.det_residual);
            o << buf;
        }
        o << "upper bound: " << (rep.upper_pass(cfg.tol_upper) ? "pass" : "FAIL") << "\n";
    }
    o << "\nverdict: " << (experiment_passes(rep, cfg) ? "PASS" : "FAIL") << "\n";
    return o.str();
}

inline void emit_outputs(const std::vector<ConvergenceRecord>& records, const std::string& dir,
                         const std::string& report) {
    const std::string csv = format_sweep_csv(records);
    std::filesystem::create_directories(dir);
    std::ofstream f(std::filesystem::path(dir) / "sweep.csv", std::ios::binary);
    std::ofstream g(std::filesystem::path(dir) / "report.txt", std::ios::binary);
    if (!f || !g) throw Error("cannot write outputs to " + dir);
    f << csv;
    g << report;
    if (!f || !g) throw Error("write failed in " + dir);
}

}  // namespace siglab
