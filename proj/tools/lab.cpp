// lab run|check-load|limit|recover <config>; exit status 0 iff the verdict passes.

#include "siglab/harness.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

using namespace siglab;

namespace {

struct Setup {
    ExperimentConfig cfg;
    Mesh mesh;
    ObstacleSet E;
};

Setup load_setup(const std::string& path) {
    Setup s{read_config_file(path), {}, {}};
    s.mesh = build_mesh(s.cfg);
    s.E = extract_obstacle(s.mesh);
    return s;
}

int cmd_run(const std::string& path) {
    const ExperimentConfig cfg = read_config_file(path);
    const ExperimentReport rep = run_experiment(cfg);
    const std::string text = format_report(rep, cfg);
    std::cout << text;
    if (!cfg.output_dir.empty()) {
        emit_outputs(rep.records, cfg.output_dir, text);
        std::cout << "wrote " << cfg.output_dir << "/sweep.csv and report.txt\n";
    }
    return experiment_passes(rep, cfg) ? 0 : 1;
}

int cmd_check_load(const std::string& path) {
    const Setup s = load_setup(path);
    const auto r = verify_global_admissibility(s.cfg.load, s.E, s.mesh, s.cfg.admissibility_budget, s.cfg.seed);
    std::printf("L(e1) = %.6g  L(e2) = %.6g  L(e3) = %.6g\n", r.L_e1, r.L_e2, r.L_e3);
    std::printf("L(e3 ^ x) = %.6g  L(e3 ^ (e3 ^ x)) = %.6g\n", r.torque_about_e3, r.planar_compression);
    std::printf("max Phi = %.6g  max shear = %.6g  max L0 sample = %.6g  (budget %d, seed %llu)\n", r.worst_phi,
                r.worst_shear, r.worst_L0, r.budget, static_cast<unsigned long long>(r.seed));
    const auto aa = r.worst_phi_rotation.axis_angle();
    std::printf("worst Phi at rotation by %.6f about (%.4f, %.4f, %.4f)\n", aa.angle(), aa.axis().x(), aa.axis().y(),
                aa.axis().z());
    if (r.kernel_class) std::printf("kernel: %s\n", to_string(*r.kernel_class));
    if (r.load_center)
        std::printf("load center: (%.6g, %.6g, 0)%s\n", r.load_center->x.x(), r.load_center->x.y(),
                    r.load_center->interior ? " inside the contact hull" : " NOT inside the contact hull");
    for (const auto& v : r.violations) std::printf("violated: %s\n", v.c_str());
    std::printf("verdict: %s\n", r.admissible() ? "PASS" : "FAIL");
    return r.admissible() ? 0 : 1;
}

int cmd_limit(const std::string& path) {
    const Setup s = load_setup(path);
    AdmissibilityReport adm;
    std::vector<std::string> notes;
    const KernelClass k = resolve_kernel(s.cfg, s.mesh, s.E, adm, notes);
    for (const auto& n : notes) std::printf("note: %s\n", n.c_str());
    const LimitSummary L = solve_limits(s.mesh, s.cfg.material, s.cfg.load, s.E, k);
    const SandwichReport r = sandwich_check(L);
    std::printf("kernel: %s\n", to_string(k));
    for (const auto* v : {&L.gt, &L.g, &L.e})
        std::printf("%-8s %.12g  (%s, %zu active obstacle nodes)\n", v == &L.gt ? "min G~" : v == &L.g ? "min G" : "min E",
                    v->objective, v->termination.c_str(), v->active_nodes.size());
    std::printf("ordered: %s  G~ = G: %s\n", r.ordered ? "yes" : "NO", r.equal ? "yes" : "NO");
    const bool pass = r.ordered && r.equal;
    std::printf("verdict: %s\n", pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
}

int cmd_recover(const std::string& path) {
    const Setup s = load_setup(path);
    AdmissibilityReport adm;
    std::vector<std::string> notes;
    const KernelClass k = resolve_kernel(s.cfg, s.mesh, s.E, adm, notes);
    for (const auto& n : notes) std::printf("note: %s\n", n.c_str());
    const auto lim = minimize_limit({&s.mesh, s.cfg.material, s.cfg.load, s.E, Variant::GTildeI, k});
    if (!lim.ok) throw Error("limit problem failed: " + lim.termination);
    const auto seq = build_recovery_sequence(s.mesh, lim.u, s.cfg.material, s.cfg.load, s.E, k, s.cfg.recovery_h,
                                             s.cfg.recovery);
    const auto rep = verify_upper_bound(seq, s.cfg.material, s.cfg.load, lim.objective);
    std::printf("G~(u) = %.12g  gamma %g  |u|_0,gamma %.6g\n", lim.objective, seq.gamma, seq.holder);
    std::printf("     h        G_h(y_h)         gap   error bar     beta/h    det res  ledger\n");
    for (size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        std::printf("%8.4g  %14.8g  %11.4e  %10.2e  %9.3e  %8.1e  %s\n", r.h, r.value, r.gap, r.error_bar, r.beta_over_h,
                    r.det_residual, seq.steps[i].flow.ledger_ok() ? "ok" : "VIOLATED");
    }
    const double tol = s.cfg.tol_upper * (1.0 + std::abs(lim.objective));
    const bool pass = rep.pass(tol);
    std::printf("final gap %.4e vs tolerance %.4e\nverdict: %s\n", rep.final_gap(), tol, pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"incompressible contact lab"};
    app.require_subcommand(1);
    std::string config;
    struct Cmd {
        const char* name;
        const char* help;
        int (*fn)(const std::string&);
    };
    const Cmd cmds[] = {{"run", "h-sweep against the limit problem", cmd_run},
                        {"check-load", "global admissibility of the load", cmd_check_load},
                        {"limit", "the three limit minima", cmd_limit},
                        {"recover", "recovery sequence and upper bound", cmd_recover}};
    std::vector<CLI::App*> subs;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        sub->add_option("config", config, "config file")->required()->check(CLI::ExistingFile);
        subs.push_back(sub);
    }
    CLI11_PARSE(app, argc, argv);
    try {
        for (size_t i = 0; i < subs.size(); ++i)
            if (subs[i]->parsed()) return cmds[i].fn(config);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
