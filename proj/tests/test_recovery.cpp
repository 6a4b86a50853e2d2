#include "siglab/recovery.hpp"

#include "flux_oracle.hpp"
#include "oracle.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace siglab;

namespace {

const Mesh& cube2() {
    static const Mesh m = build_unit_cube_mesh(2);
    return m;
}

const MaterialModel& yeoh() {
    static const MaterialModel m = make_yeoh(1.0, 0.2, 0.1);
    return m;
}

LoadSpec bottom_heavy() {
    Mat3 A = Mat3::Zero();
    A(2, 2) = 6.0;
    return {VolumeForce::affine(A, Vec3(0, 0, -4)), {}};
}

NodalField random_div_free(const Mesh& m, std::mt19937_64& rng) {
    const MatrixXd Z = detail::null_space(LimitAssembly(m, yeoh()).B);
    std::normal_distribution<double> n;
    VectorXd c(Z.cols());
    for (int i = 0; i < c.size(); ++i) c[i] = n(rng);
    VectorXd u = Z * c;
    u /= u.cwiseAbs().maxCoeff();
    return unflat(u);
}

// composite Simpson on [0, 1]
double simpson(const std::function<double(double)>& f, int n = 20000) {
    const double h = 1.0 / n;
    double s = f(0) + f(1);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * f(i * h);
    return s * h / 3.0;
}

}  // namespace

TEST(Mollifier, MassAndGradientConstant) {
    const auto c = mollifier_constants();
    const double mass = 4 * M_PI * simpson([](double r) { return mollifier(r) * r * r; });
    const double K = 4 * M_PI * simpson([](double r) { return std::abs(mollifier_derivative(r)) * r * r; });
    EXPECT_NEAR(mass, 1.0, 1e-12);
    EXPECT_NEAR(c.mass, 1.0, 1e-13);
    EXPECT_NEAR(c.K, K, 1e-12);
    EXPECT_NEAR(kMollifierK, K, 1e-12);
    EXPECT_EQ(mollifier(1.0), 0.0);
    EXPECT_EQ(mollifier(1.5), 0.0);
}

TEST(Mollifier, ReproducesAffineDivergenceFreeFields) {
    const Mesh& m = cube2();
    Mat3 A;
    A << 0.3, 0.1, -0.2, 0.4, -0.5, 0.0, 0.1, 0.2, 0.2;
    const Vec3 b(0.1, -0.3, 0.2);
    const NodalField u = interpolate(m, [&](const Vec3& x) { return Vec3(A * x + b); });
    const ExtendedField ext = extend_by_dilation(m, u, 0.3);
    const SmoothField v = mollify(ext, 0.2, 0.5, 0.0, 200);
    EXPECT_LT(v.report.sup_error, 1e-13);
    EXPECT_LT(v.report.div_max, 1e-13);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> U(0, 1);
    for (int k = 0; k < 20; ++k) {
        const Vec3 x(U(rng), U(rng), U(rng));
        // the dilated copy is affine with gradient A / lambda about the box center
        const Vec3 c(0.5, 0.5, 0.5);
        const Vec3 want = A * (c + (x - c) / ext.lambda) + b;
        EXPECT_LT((v.value(x) - want).norm(), 1e-13);
        EXPECT_LT((v.gradient(x) - A / ext.lambda).norm(), 1e-13);
    }
}

TEST(Mollifier, SupErrorWithinHolderBound) {
    const Mesh& m = cube2();
    std::mt19937_64 rng(6);
    const NodalField u = random_div_free(m, rng);
    for (double gamma : {0.25, 1.0}) {
        const ExtendedField ext = extend_by_dilation(m, u, 0.25);
        const SmoothField v = mollify(ext, 0.2, gamma, 0.0, 300);
        EXPECT_TRUE(v.report.estsup_ok()) << v.report.sup_error << " vs " << v.report.sup_error_bound;
        EXPECT_LT(v.report.div_max, 1e-12);
        EXPECT_TRUE(v.report.graduj_ok());
    }
}

TEST(Mollifier, HolderSeminormBoundHoldsOnSamples) {
    const Mesh& m = cube2();
    std::mt19937_64 rng(7);
    const NodalField u = random_div_free(m, rng);
    const ExtendedField ext = extend_by_dilation(m, u, 0.0);
    std::uniform_real_distribution<double> U(0, 1);
    for (double gamma : {0.25, 0.5, 1.0}) {
        const double bound = ext.holder_seminorm(gamma);
        for (int k = 0; k < 300; ++k) {
            const Vec3 x(U(rng), U(rng), U(rng)), y(U(rng), U(rng), U(rng));
            EXPECT_LE((ext.value(x) - ext.value(y)).norm(), bound * std::pow((x - y).norm(), gamma) * (1 + 1e-12));
        }
    }
}

TEST(Mollifier, Errors) {
    const Mesh& m = cube2();
    const ExtendedField ext = extend_by_dilation(m, NodalField::Zero(m.num_nodes(), 3), 0.1);
    EXPECT_THROW(mollify(ext, 0.0, 0.5), Error);
    EXPECT_THROW(mollify(ext, 0.1, 0.5, 0.08), Error);
    EXPECT_THROW(extend_by_dilation(m, NodalField::Zero(m.num_nodes(), 3), -1.0), Error);
}

TEST(Flow, ConstantField) {
    const Mesh& m = cube2();
    const Vec3 c(0.2, -0.1, 0.3);
    const auto v = make_smooth_field([&](const Vec3&) { return c; }, [](const Vec3&) { return Mat3::Zero().eval(); },
                                     Vec3::Constant(-2), Vec3::Constant(3), c.norm(), 0.0);
    const FlowResult r = integrate_flow(v, 0.5, m);
    for (int i = 0; i < m.num_nodes(); ++i) EXPECT_LT((r.displacement.row(i).transpose() - 0.5 * c).norm(), 1e-14);
    for (const Mat3& G : r.grad) EXPECT_EQ(G, Mat3::Identity());
    EXPECT_TRUE(r.ledger_ok());
    EXPECT_NEAR(r.ledger[0].worst_ratio, 1.0, 1e-12);
}

TEST(Flow, RotationField) {
    const Mesh& m = cube2();
    const Vec3 w(0.3, -0.2, 0.5);
    Mat3 W;
    W << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    const auto v = make_smooth_field([&](const Vec3& x) { return Vec3(W * x); }, [&](const Vec3&) { return W; },
                                     Vec3::Constant(-3), Vec3::Constant(3), w.norm() * std::sqrt(3.0), w.norm());
    const double t = 0.7;
    const FlowResult r = integrate_flow(v, t, m, 128);
    const Mat3 Q = oracle::rot(w.normalized(), t * w.norm());
    for (int i = 0; i < m.num_nodes(); ++i) EXPECT_LT((r.z.row(i).transpose() - Q * m.nodes[i]).norm(), 1e-10);
    for (const Mat3& G : r.grad) EXPECT_LT((G - Q).norm(), 1e-10);
    for (double d : r.det) EXPECT_NEAR(d, 1.0, 1e-10);
    EXPECT_TRUE(r.ledger_ok());
    EXPECT_LT(r.richardson, 1e-9);
}

TEST(Flow, AffineShear) {
    const Mesh& m = cube2();
    Mat3 S = Mat3::Zero();
    S(0, 2) = 1.0;
    const auto v = make_smooth_field([&](const Vec3& x) { return Vec3(S * x); }, [&](const Vec3&) { return S; },
                                     Vec3::Constant(-1), Vec3::Constant(3), 1.0, 1.0);
    const FlowResult r = integrate_flow(v, 0.4, m);
    for (int i = 0; i < m.num_nodes(); ++i)
        EXPECT_LT((r.z.row(i).transpose() - (m.nodes[i] + 0.4 * S * m.nodes[i])).norm(), 1e-14);
    for (const Mat3& G : r.grad) EXPECT_LT((G - (Mat3::Identity() + 0.4 * S)).norm(), 1e-14);
    for (double d : r.det) EXPECT_NEAR(d, 1.0, 1e-15);
    EXPECT_TRUE(r.ledger_ok());
    for (const auto& b : r.ledger) EXPECT_GT(b.samples, 0);
}

TEST(Flow, LeavingTheBoxThrows) {
    const Mesh& m = cube2();
    const auto v = make_smooth_field([](const Vec3&) { return Vec3(1, 0, 0); }, [](const Vec3&) { return Mat3::Zero().eval(); },
                                     Vec3::Constant(-0.1), Vec3::Constant(1.1), 1.0, 0.0);
    EXPECT_THROW(integrate_flow(v, 0.5, m), Error);
    EXPECT_THROW(integrate_flow(v, 0.0, m), Error);
}

TEST(Flow, MollifiedFieldPreservesVolume) {
    const Mesh& m = cube2();
    std::mt19937_64 rng(8);
    const NodalField u = random_div_free(m, rng);
    const SmoothField v = mollify(extend_by_dilation(m, u, 0.6), 0.2, 1.0, 0.0, 50);
    const FlowResult r = integrate_flow(v, 0.1, m, 8, 8);
    EXPECT_LE(r.det_drift, 1e-8);
    EXPECT_TRUE(r.ledger_ok());
}

TEST(Bogovskii, DivergenceFreeInputNeedsNoCorrection) {
    const Mesh m = build_unit_cube_mesh(3);
    std::mt19937_64 rng(9);
    const auto r = bogovskii_correct(make_displacement(m, random_div_free(m, rng)), m);
    EXPECT_LT(r.w.vertex.norm() + r.w.edge.norm(), 1e-9);
    EXPECT_LT(r.rhs_l2, 1e-9);
}

TEST(Bogovskii, CorrectsNonuniformDivergence) {
    const Mesh m = build_unit_cube_mesh(3);
    const NodalField u = interpolate(m, [](const Vec3& x) { return Vec3(x.x() * x.x(), 0.5 * x.y() * x.z(), 0.0); });
    const auto r = bogovskii_correct(make_displacement(m, u), m);
    EXPECT_GT(r.rhs_l2, 0.01);
    const VectorXd d = oracle::mean_divergence_by_faces(r.w, m);
    EXPECT_LT((d - r.rhs).cwiseAbs().maxCoeff(), 1e-9);
    for (int i = 0; i < m.num_nodes(); ++i)
        if (m.on_boundary[i]) {
            EXPECT_EQ(r.w.vertex.row(i).norm(), 0.0);
        }
    EXPECT_GT(r.c_star, 0.0);
    EXPECT_TRUE(std::isfinite(r.c_star));
}

TEST(Bogovskii, RandomFields) {
    const Mesh m = build_unit_cube_mesh(3);
    std::mt19937_64 rng(10);
    std::normal_distribution<double> n;
    for (int s = 0; s < 3; ++s) {
        NodalField u(m.num_nodes(), 3);
        for (int i = 0; i < u.size(); ++i) u.data()[i] = n(rng);
        const auto r = bogovskii_correct(make_displacement(m, u), m);
        EXPECT_LT((oracle::mean_divergence_by_faces(r.w, m) - r.rhs).cwiseAbs().maxCoeff(), 1e-9);
        // the corrected target has zero mean
        double mean = 0.0;
        for (int e = 0; e < m.num_elements(); ++e) mean += m.element_volumes[e] * r.rhs[e];
        EXPECT_NEAR(mean, 0.0, 1e-12);
    }
}

TEST(Bogovskii, SingleCubeIsSolvable) {
    const Mesh m = build_unit_cube_mesh(1);
    const NodalField u = interpolate(m, [](const Vec3& x) { return Vec3(x.x() * x.y(), 0, x.z() * x.z()); });
    const auto r = bogovskii_correct(make_displacement(m, u), m);
    EXPECT_LT((oracle::mean_divergence_by_faces(r.w, m) - r.rhs).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Bogovskii, QuadraticNormOfAffineField) {
    const Mesh& m = cube2();
    Mat3 A;
    A << 0.3, 0.1, -0.2, 0.4, -0.5, 0.0, 0.1, 0.2, 0.7;
    const Vec3 b(0.1, -0.3, 0.2);
    P2Field w = make_p2_field(m);
    for (int i = 0; i < m.num_nodes(); ++i) w.vertex.row(i) = (A * m.nodes[i] + b).transpose();
    for (size_t k = 0; k < w.edges.size(); ++k)
        w.edge.row(k) = (A * (0.5 * (m.nodes[w.edges[k][0]] + m.nodes[w.edges[k][1]])) + b).transpose();
    const double want = oracle::box_integral([&](const Vec3& x) { return A.squaredNorm() + (A * x + b).squaredNorm(); },
                                             Vec3::Zero(), Vec3::Ones(), 2);
    EXPECT_NEAR(p2_h1_norm(w, m), std::sqrt(want), 1e-13);
    const VectorXd d = element_mean_divergence(w, m);
    for (int e = 0; e < m.num_elements(); ++e) EXPECT_NEAR(d[e], A.trace(), 1e-13);
}

TEST(Recovery, ZeroFieldIsTheReference) {
    const Mesh& m = cube2();
    const ObstacleSet E = extract_obstacle(m);
    const NodalField u = NodalField::Zero(m.num_nodes(), 3);
    const auto seq = build_recovery_sequence(m, u, yeoh(), bottom_heavy(), E, KernelClass::RotationsAboutE3, {0.1, 0.01});
    for (const auto& st : seq.steps) {
        EXPECT_EQ(st.beta, 0.0);
        EXPECT_LT((st.y.y - coordinates(seq.eval_mesh)).cwiseAbs().maxCoeff(), 1e-15);
    }
    const auto rep = verify_upper_bound(seq, yeoh(), bottom_heavy(), 0.0);
    for (const auto& row : rep.rows) EXPECT_NEAR(row.value, 0.0, 1e-12);
    EXPECT_TRUE(rep.pass(1e-10));
}

TEST(Recovery, LimitMinimiserSequence) {
    const Mesh& m = cube2();
    const ObstacleSet E = extract_obstacle(m);
    const LoadSpec load = bottom_heavy();
    const auto lim = minimize_limit({&m, yeoh(), load, E, Variant::GTildeI, KernelClass::RotationsAboutE3});
    ASSERT_TRUE(lim.ok);
    RecoveryOptions opt;
    opt.gamma = 1.0;
    opt.eval_cells = 2;
    const auto seq = build_recovery_sequence(m, lim.u, yeoh(), load, E, KernelClass::RotationsAboutE3, {0.1, 0.03, 0.01}, opt);
    ASSERT_EQ(seq.steps.size(), 3u);
    for (size_t k = 0; k < seq.steps.size(); ++k) {
        const auto& st = seq.steps[k];
        EXPECT_GE(st.min_obstacle_height, 0.0);
        EXPECT_GE(st.beta, 0.0);
        EXPECT_LE(st.flow.det_drift, 1e-8);
        EXPECT_TRUE(st.mollifier.estsup_ok());
        EXPECT_TRUE(st.flow.ledger_ok());
        if (k) {
            EXPECT_LT(st.beta / st.h, seq.steps[k - 1].beta / seq.steps[k - 1].h);
        }
    }
    const auto rep = verify_upper_bound(seq, yeoh(), load, lim.objective);
    for (const auto& row : rep.rows) {
        EXPECT_LE(row.det_residual, 1e-6);
        EXPECT_TRUE(std::isfinite(row.value));
    }
}

TEST(Recovery, InputChecks) {
    const Mesh& m = cube2();
    const ObstacleSet E = extract_obstacle(m);
    const NodalField div = interpolate(m, [](const Vec3& x) { return Vec3(x.x(), 0, 0); });
    EXPECT_THROW(build_recovery_sequence(m, div, yeoh(), bottom_heavy(), E, KernelClass::IdentityOnly, {0.1}), Error);
    const NodalField down = interpolate(m, [](const Vec3&) { return Vec3(0, 0, -0.1); });
    EXPECT_THROW(build_recovery_sequence(m, down, yeoh(), bottom_heavy(), E, KernelClass::IdentityOnly, {0.1}), Error);
    RecoveryOptions bad;
    bad.gamma = 1.5;
    EXPECT_THROW(build_recovery_sequence(m, NodalField::Zero(m.num_nodes(), 3), yeoh(), bottom_heavy(), E,
                                         KernelClass::IdentityOnly, {0.1}, bad),
                 Error);
}
