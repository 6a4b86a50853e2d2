#pragma once

#include "siglab/solvers.hpp"

#include <functional>
#include <map>
#include <set>

namespace siglab {

// ---------------------------------------------------------------- mollifier

// rho(r) = C (1 - r^2)^3 on the unit ball
inline constexpr double kMollifierC = 315.0 / (64.0 * M_PI);
inline constexpr double kMollifierK = 315.0 / 64.0;  // 4 pi int_0^1 |rho'(r)| r^2 dr

inline double mollifier(double r) {
    if (r >= 1.0) return 0.0;
    const double s = 1.0 - r * r;
    return kMollifierC * s * s * s;
}

inline double mollifier_derivative(double r) {
    if (r >= 1.0) return 0.0;
    const double s = 1.0 - r * r;
    return -6.0 * kMollifierC * r * s * s;
}

// Gauss-Legendre nodes and weights on [0, 1] (Golub-Welsch).
inline std::pair<VectorXd, VectorXd> gauss_legendre(int n) {
    MatrixXd J = MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = k / std::sqrt(4.0 * k * k - 1.0);
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
    VectorXd x = (es.eigenvalues().array() + 1.0) / 2.0;
    VectorXd w = es.eigenvectors().row(0).transpose().array().square();
    return {x, w};
}

struct MollifierConstants {
    double mass = 0.0;
    double K = 0.0;
};

inline MollifierConstants mollifier_constants(int n = 8) {
    const auto [x, w] = gauss_legendre(n);
    MollifierConstants c;
    for (int i = 0; i < n; ++i) {
        c.mass += 4.0 * M_PI * w[i] * mollifier(x[i]) * x[i] * x[i];
        c.K += 4.0 * M_PI * w[i] * std::abs(mollifier_derivative(x[i])) * x[i] * x[i];
    }
    return c;
}

inline double op_norm(const Mat3& A) { return Eigen::JacobiSVD<Mat3>(A).singularValues()[0]; }

// ---------------------------------------------------------------- extension

// x -> u(c + (x - c)/lambda): a dilated copy of a P1 field on a box. The gradient is scaled
// by 1/lambda, so a divergence-free field stays divergence-free on the whole dilated box.
struct ExtendedField {
    const Mesh* mesh = nullptr;
    NodalField u;
    std::vector<Mat3> grad;  // of u on the original mesh
    Vec3 center = Vec3::Zero(), lo = Vec3::Zero(), hi = Vec3::Zero();
    double lambda = 1.0;
    double sup = 0.0;          // max |u|
    double lipschitz = 0.0;    // max |grad|_op of the dilated field
    double oscillation = 0.0;  // max |u(x) - u(y)|

    Vec3 source(const Vec3& x) const { return center + (x - center) / lambda; }

    bool contains(const Vec3& x, double tol = 1e-12) const {
        return (x.array() >= lo.array() - tol).all() && (x.array() <= hi.array() + tol).all();
    }

    void eval(const Vec3& x, Vec3& v, Mat3& G) const {
        Eigen::Vector4d l;
        const int e = locate(*mesh, source(x), l);
        if (e < 0) throw Error("point outside the extension box");
        const auto& t = mesh->tets[e];
        v = Vec3::Zero();
        for (int a = 0; a < 4; ++a) v += l[a] * u.row(t[a]).transpose();
        G = grad[e] / lambda;
    }

    Vec3 value(const Vec3& x) const {
        Vec3 v;
        Mat3 G;
        eval(x, v, G);
        return v;
    }

    // [u]_gamma <= L^gamma osc^(1 - gamma) on a convex set
    double holder_seminorm(double gamma) const {
        if (lipschitz == 0.0 || oscillation == 0.0) return 0.0;
        return std::pow(lipschitz, gamma) * std::pow(oscillation, 1.0 - gamma);
    }
    double holder_norm(double gamma) const { return sup + holder_seminorm(gamma); }
};

inline ExtendedField extend_by_dilation(const Mesh& m, const NodalField& u, double margin) {
    if (!m.is_box) throw Error("extension needs a box domain");
    if (!(margin >= 0)) throw Error("negative extension margin");
    ExtendedField x;
    x.mesh = &m;
    x.u = u;
    x.grad = element_gradients(m, u);
    x.center = 0.5 * (m.box_lo + m.box_hi);
    const Vec3 half = 0.5 * (m.box_hi - m.box_lo);
    x.lambda = 1.0 + margin / half.minCoeff();
    x.lo = x.center - x.lambda * half;
    x.hi = x.center + x.lambda * half;
    double L = 0.0;
    for (const Mat3& G : x.grad) L = std::max(L, op_norm(G));
    x.lipschitz = L / x.lambda;
    for (int i = 0; i < u.rows(); ++i) {
        x.sup = std::max(x.sup, u.row(i).norm());
        for (int j = i + 1; j < u.rows(); ++j) x.oscillation = std::max(x.oscillation, (u.row(i) - u.row(j)).norm());
    }
    return x;
}

// ---------------------------------------------------------------- smooth field

struct MollifierReport {
    int points = 0;
    double mass_error = 0.0;
    double K_quadrature = 0.0;
    double sup_error = 0.0, sup_error_bound = 0.0;  // |v - u| against eps^gamma ||u||_{0,gamma}
    double grad_max = 0.0, grad_bound = 0.0;        // |grad v| against K/eps ||u||_inf, recorded only
    double div_max = 0.0;

    bool estsup_ok() const { return sup_error <= sup_error_bound; }
    bool graduj_ok() const { return grad_max <= grad_bound; }
};

struct SmoothField {
    std::function<void(const Vec3&, Vec3&, Mat3&)> eval;
    Vec3 lo = Vec3::Zero(), hi = Vec3::Zero();  // v is defined and divergence free here
    double sup = 0.0;       // bound on ||v||_inf
    double grad_sup = 0.0;  // bound on ||grad v||_inf, operator norm
    double holder = 0.0;    // ||u||_{0,gamma} of the mollified field
    double gamma = 1.0;
    double eps = 0.0;
    MollifierReport report;

    bool contains(const Vec3& x) const { return (x.array() >= lo.array()).all() && (x.array() <= hi.array()).all(); }
    Vec3 value(const Vec3& x) const {
        Vec3 v;
        Mat3 G;
        eval(x, v, G);
        return v;
    }
    Mat3 gradient(const Vec3& x) const {
        Vec3 v;
        Mat3 G;
        eval(x, v, G);
        return G;
    }
};

inline SmoothField make_smooth_field(std::function<Vec3(const Vec3&)> v, std::function<Mat3(const Vec3&)> grad,
                                     const Vec3& lo, const Vec3& hi, double sup, double grad_sup) {
    SmoothField f;
    f.eval = [v, grad](const Vec3& x, Vec3& out, Mat3& G) {
        out = v(x);
        G = grad(x);
    };
    f.lo = lo;
    f.hi = hi;
    f.sup = sup;
    f.grad_sup = grad_sup;
    return f;
}

// Discrete convolution with rho_eps on the lattice spacing * Z^3. Each term is a translate of
// u, so divergence-free fields stay divergence-free and affine fields are reproduced.
inline SmoothField mollify(const ExtendedField& u, double eps, double gamma, double spacing = 0.0, int probes = 1000,
                           std::uint64_t seed = 7) {
    if (!(eps > 0)) throw Error("mollifier radius must be positive");
    if (spacing == 0.0) spacing = eps / 2.5;
    if (eps < 2.0 * spacing) throw Error("mollifier radius below two sampling spacings: under-resolved");
    const int N = static_cast<int>(std::floor(eps / spacing));
    std::vector<Vec3> pts;
    std::vector<double> wts;
    double total = 0.0;
    for (int i = -N; i <= N; ++i)
        for (int j = -N; j <= N; ++j)
            for (int k = -N; k <= N; ++k) {
                const Vec3 y = spacing * Vec3(i, j, k);
                const double w = mollifier(y.norm() / eps);
                if (w <= 0.0) continue;
                pts.push_back(y);
                wts.push_back(w);
                total += w;
            }
    for (double& w : wts) w /= total;

    SmoothField f;
    f.eval = [u, pts, wts](const Vec3& x, Vec3& v, Mat3& G) {
        v.setZero();
        G.setZero();
        Vec3 vq;
        Mat3 Gq;
        for (size_t q = 0; q < pts.size(); ++q) {
            u.eval(x - pts[q], vq, Gq);
            v += wts[q] * vq;
            G += wts[q] * Gq;
        }
    };
    f.lo = u.lo + Vec3::Constant(eps);
    f.hi = u.hi - Vec3::Constant(eps);
    f.sup = u.sup;
    f.grad_sup = u.lipschitz;
    f.holder = u.holder_norm(gamma);
    f.gamma = gamma;
    f.eps = eps;

    MollifierReport& r = f.report;
    r.points = static_cast<int>(pts.size());
    const auto c = mollifier_constants();
    r.mass_error = std::abs(c.mass - 1.0);
    r.K_quadrature = c.K;
    r.sup_error_bound = std::pow(eps, gamma) * f.holder;
    r.grad_bound = kMollifierK / eps * u.sup;
    std::mt19937_64 rng(seed);
    const Mesh& m = *u.mesh;
    for (int p = 0; p < probes; ++p) {
        Vec3 x;
        for (int d = 0; d < 3; ++d) x[d] = std::uniform_real_distribution<double>(m.box_lo[d], m.box_hi[d])(rng);
        Vec3 v;
        Mat3 G;
        f.eval(x, v, G);
        r.sup_error = std::max(r.sup_error, (v - u.value(x)).norm());
        r.grad_max = std::max(r.grad_max, op_norm(G));
        r.div_max = std::max(r.div_max, std::abs(G.trace()));
    }
    return f;
}

// ---------------------------------------------------------------- flow

struct FlowBound {
    std::string name;
    long samples = 0;
    long violations = 0;
    double worst_ratio = 0.0;  // max lhs / rhs

    // constant fields meet the bounds with equality, so roundoff gets a margin relative to scale
    void record(double lhs, double rhs, double scale) {
        ++samples;
        if (!(lhs <= rhs + 1e-12 * scale)) ++violations;
        if (rhs > 0) worst_ratio = std::max(worst_ratio, lhs / rhs);
    }
};

struct FlowResult {
    NodalField z;
    NodalField displacement;  // z - x
    std::vector<Mat3> grad;   // grad z at element centroids
    std::vector<Mat3> grad_minus_identity;
    std::vector<double> det;
    double det_drift = 0.0;
    int steps = 0;
    double richardson = 0.0;  // max change under step halving on the ledger samples
    std::array<FlowBound, 4> ledger{FlowBound{"displacement"}, FlowBound{"mean velocity"}, FlowBound{"gradient"}, FlowBound{"gradient drift"}};

    bool ledger_ok() const {
        for (const auto& b : ledger)
            if (b.violations) return false;
        return true;
    }
};

namespace detail {

struct FlowState {
    Vec3 d = Vec3::Zero();  // z - x
    Mat3 D = Mat3::Zero();  // grad z - I
};

// RK4 for z' = v(z), Z' = grad v(z) Z in increment form. on_step(k, state) after each step.
template <class OnStep>
FlowState flow_point(const SmoothField& v, const Vec3& x, double t, int steps, OnStep on_step) {
    const double dt = t / steps;
    FlowState s;
    auto rhs = [&](const FlowState& a, FlowState& out) {
        const Vec3 z = x + a.d;
        if (!v.contains(z)) throw Error("flow left the enlarged box before the final time (existence time T exceeded)");
        Vec3 vz;
        Mat3 G;
        v.eval(z, vz, G);
        out.d = vz;
        out.D = G * (Mat3::Identity() + a.D);
    };
    FlowState k1, k2, k3, k4, tmp;
    for (int k = 1; k <= steps; ++k) {
        rhs(s, k1);
        tmp.d = s.d + 0.5 * dt * k1.d;
        tmp.D = s.D + 0.5 * dt * k1.D;
        rhs(tmp, k2);
        tmp.d = s.d + 0.5 * dt * k2.d;
        tmp.D = s.D + 0.5 * dt * k2.D;
        rhs(tmp, k3);
        tmp.d = s.d + dt * k3.d;
        tmp.D = s.D + dt * k3.D;
        rhs(tmp, k4);
        s.d += dt / 6.0 * (k1.d + 2.0 * k2.d + 2.0 * k3.d + k4.d);
        s.D += dt / 6.0 * (k1.D + 2.0 * k2.D + 2.0 * k3.D + k4.D);
        on_step(k, s);
    }
    return s;
}

}  // namespace detail

// Flow of v up to time t from the mesh nodes and element centroids; grad z is taken at centroids.
inline FlowResult integrate_flow(const SmoothField& v, double t, const Mesh& m, int steps = 32, int ledger_samples = 32) {
    if (!(t > 0)) throw Error("flow time must be positive");
    if (steps < 1) throw Error("flow needs at least one step");
    const int nn = m.num_nodes(), ne = m.num_elements();
    std::vector<Vec3> start(m.nodes);
    for (int e = 0; e < ne; ++e) {
        Vec3 c = Vec3::Zero();
        for (int a = 0; a < 4; ++a) c += m.nodes[m.tets[e][a]];
        start.push_back(c / 4.0);
    }
    const int np = static_cast<int>(start.size());
    std::vector<int> sampled;
    const int ns = std::clamp(ledger_samples, 0, np);
    for (int s = 0; s < ns; ++s) sampled.push_back(static_cast<int>((static_cast<long>(s) * np) / ns));

    FlowResult r;
    std::vector<detail::FlowState> out(np);
    auto noop = [](int, const detail::FlowState&) {};
    for (int doubling = 0;; ++doubling) {
        r.steps = steps << doubling;
        r.det_drift = 0.0;
        for (int p = 0; p < np; ++p) out[p] = detail::flow_point(v, start[p], t, r.steps, noop);
        for (int e = 0; e < ne; ++e)
            r.det_drift = std::max(r.det_drift, std::abs(det_minus_one(out[nn + e].D)));
        if (r.det_drift <= 1e-8 || doubling == 6) break;
    }

    const double dt = t / r.steps;
    for (int p : sampled) {
        Vec3 v0;
        Mat3 G0;
        v.eval(start[p], v0, G0);
        auto check = [&](int k, const detail::FlowState& s) {
            const double tk = k * dt;
            const double grow = std::expm1(tk * v.grad_sup);
            r.ledger[0].record(s.d.norm(), tk * v.sup * (1.0 + grow), tk * v.sup);
            r.ledger[1].record((s.d / tk - v0).norm(), v.sup * grow, v.sup);
            r.ledger[2].record((Mat3::Identity() + s.D).norm(), 3.0 * (1.0 + grow), 3.0);
            r.ledger[3].record(s.D.norm(), 3.0 * grow, 3.0);
        };
        detail::flow_point(v, start[p], t, r.steps, check);
        const auto fine = detail::flow_point(v, start[p], t, 2 * r.steps, noop);
        r.richardson = std::max({r.richardson, (fine.d - out[p].d).norm(), (fine.D - out[p].D).norm()});
    }

    r.z.resize(nn, 3);
    r.displacement.resize(nn, 3);
    for (int i = 0; i < nn; ++i) {
        r.displacement.row(i) = out[i].d.transpose();
        r.z.row(i) = (m.nodes[i] + out[i].d).transpose();
    }
    for (int e = 0; e < ne; ++e) {
        const Mat3& D = out[nn + e].D;
        r.grad_minus_identity.push_back(D);
        r.grad.push_back(Mat3::Identity() + D);
        r.det.push_back(1.0 + det_minus_one(D));
    }
    return r;
}

// ---------------------------------------------------------------- divergence corrector

// Quadratic Lagrange field enriched with cubic face bubbles: vertex values, edge midpoint
// values, and a bubble coefficient per face. Plain P2 has spurious divergence modes on Kuhn
// meshes; the bubbles couple every pair of neighbouring elements.
struct P2Field {
    NodalField vertex;
    std::vector<std::array<int, 2>> edges;
    NodalField edge;
    std::vector<std::array<int, 6>> element_edges;  // local order 01 02 03 12 13 23
    std::vector<std::array<int, 3>> faces;          // sorted node triples
    NodalField face;
    std::vector<std::array<int, 4>> element_faces;  // face opposite local vertex a
};

inline constexpr std::array<std::array<int, 2>, 6> kTetEdges{{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

inline P2Field make_p2_field(const Mesh& m) {
    P2Field w;
    std::map<std::pair<int, int>, int> index;
    std::map<std::array<int, 3>, int> findex;
    for (const auto& t : m.tets) {
        std::array<int, 6> ee;
        for (int k = 0; k < 6; ++k) {
            int a = t[kTetEdges[k][0]], b = t[kTetEdges[k][1]];
            if (a > b) std::swap(a, b);
            auto [it, fresh] = index.emplace(std::make_pair(a, b), static_cast<int>(w.edges.size()));
            if (fresh) w.edges.push_back({a, b});
            ee[k] = it->second;
        }
        w.element_edges.push_back(ee);
        std::array<int, 4> ff;
        for (int o = 0; o < 4; ++o) {
            std::array<int, 3> f;
            for (int a = 0, k = 0; a < 4; ++a)
                if (a != o) f[k++] = t[a];
            std::sort(f.begin(), f.end());
            auto [it, fresh] = findex.emplace(f, static_cast<int>(w.faces.size()));
            if (fresh) w.faces.push_back(f);
            ff[o] = it->second;
        }
        w.element_faces.push_back(ff);
    }
    w.vertex = NodalField::Zero(m.num_nodes(), 3);
    w.edge = NodalField::Zero(static_cast<int>(w.edges.size()), 3);
    w.face = NodalField::Zero(static_cast<int>(w.faces.size()), 3);
    return w;
}

namespace detail {

// Polynomials in the barycentric coordinates, one term per monomial.
using Exponent = std::array<int, 4>;
struct ScalarTerm {
    Exponent a;
    double c;
};
struct GradTerm {
    Exponent a;
    Vec3 c;
};
inline constexpr int kCorrectorBasis = 14;

// vertices lambda_i (2 lambda_i - 1), edges 4 lambda_i lambda_j, faces 27 lambda_a lambda_b lambda_c
inline const std::array<std::vector<ScalarTerm>, kCorrectorBasis>& corrector_basis() {
    static const auto basis = [] {
        std::array<std::vector<ScalarTerm>, kCorrectorBasis> B;
        for (int i = 0; i < 4; ++i) {
            Exponent sq{}, lin{};
            sq[i] = 2;
            lin[i] = 1;
            B[i] = {{sq, 2.0}, {lin, -1.0}};
        }
        for (int k = 0; k < 6; ++k) {
            Exponent e{};
            e[kTetEdges[k][0]] = e[kTetEdges[k][1]] = 1;
            B[4 + k] = {{e, 4.0}};
        }
        for (int o = 0; o < 4; ++o) {
            Exponent e{1, 1, 1, 1};
            e[o] = 0;
            B[10 + o] = {{e, 27.0}};
        }
        return B;
    }();
    return basis;
}

// int_T lambda^alpha = 3! alpha! |T| / (|alpha| + 3)!
inline double monomial_integral(const Exponent& a, double V) {
    const int n = a[0] + a[1] + a[2] + a[3];
    double r = 6.0 * V;
    for (int k = 0; k < 4; ++k) r *= std::tgamma(a[k] + 1.0);
    return r / std::tgamma(n + 4.0);
}

inline std::array<std::vector<GradTerm>, kCorrectorBasis> corrector_gradients(const GradMap& G) {
    std::array<std::vector<GradTerm>, kCorrectorBasis> out;
    const auto& B = corrector_basis();
    for (int A = 0; A < kCorrectorBasis; ++A)
        for (const auto& t : B[A])
            for (int a = 0; a < 4; ++a) {
                if (t.a[a] == 0) continue;
                Exponent e = t.a;
                --e[a];
                out[A].push_back({e, t.c * t.a[a] * G.col(a)});
            }
    return out;
}

using CorrectorMatrix = Eigen::Matrix<double, kCorrectorBasis, kCorrectorBasis>;
using CorrectorValues = Eigen::Matrix<double, kCorrectorBasis, 3>;

inline Exponent add(const Exponent& a, const Exponent& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]}; }

inline CorrectorMatrix corrector_stiffness(const GradMap& G, double V) {
    const auto g = corrector_gradients(G);
    CorrectorMatrix K = CorrectorMatrix::Zero();
    for (int A = 0; A < kCorrectorBasis; ++A)
        for (int B = A; B < kCorrectorBasis; ++B) {
            double s = 0.0;
            for (const auto& p : g[A])
                for (const auto& q : g[B]) s += p.c.dot(q.c) * monomial_integral(add(p.a, q.a), V);
            K(A, B) = K(B, A) = s;
        }
    return K;
}

inline CorrectorMatrix corrector_mass(double V) {
    static const CorrectorMatrix ref = [] {
        const auto& b = corrector_basis();
        CorrectorMatrix M;
        for (int A = 0; A < kCorrectorBasis; ++A)
            for (int B = 0; B < kCorrectorBasis; ++B) {
                double s = 0.0;
                for (const auto& p : b[A])
                    for (const auto& q : b[B]) s += p.c * q.c * monomial_integral(add(p.a, q.a), 1.0);
                M(A, B) = s;
            }
        return M;
    }();
    return V * ref;
}

// row A: (1/|T|) int_T grad phi_A
inline CorrectorValues corrector_mean_gradients(const GradMap& G) {
    const auto g = corrector_gradients(G);
    CorrectorValues out = CorrectorValues::Zero();
    for (int A = 0; A < kCorrectorBasis; ++A)
        for (const auto& p : g[A]) out.row(A) += monomial_integral(p.a, 1.0) * p.c.transpose();
    return out;
}

inline CorrectorValues corrector_local(const P2Field& w, const Mesh& m, int e) {
    CorrectorValues U;
    for (int a = 0; a < 4; ++a) U.row(a) = w.vertex.row(m.tets[e][a]);
    for (int k = 0; k < 6; ++k) U.row(4 + k) = w.edge.row(w.element_edges[e][k]);
    for (int o = 0; o < 4; ++o) U.row(10 + o) = w.face.row(w.element_faces[e][o]);
    return U;
}

}  // namespace detail

// (1/|T|) int_T div w
inline VectorXd element_mean_divergence(const P2Field& w, const Mesh& m) {
    VectorXd d(m.num_elements());
    for (int e = 0; e < m.num_elements(); ++e) {
        const auto g = detail::corrector_mean_gradients(m.element_gradient_maps[e]);
        d[e] = g.cwiseProduct(detail::corrector_local(w, m, e)).sum();
    }
    return d;
}

inline double p2_h1_norm(const P2Field& w, const Mesh& m) {
    double s = 0.0;
    for (int e = 0; e < m.num_elements(); ++e) {
        const double V = m.element_volumes[e];
        const auto U = detail::corrector_local(w, m, e);
        const auto K = detail::corrector_stiffness(m.element_gradient_maps[e], V);
        const auto M = detail::corrector_mass(V);
        s += (U.transpose() * (K + M) * U).trace();
    }
    return std::sqrt(s);
}

struct BogovskiiResult {
    P2Field w;
    VectorXd rhs;       // target element-mean divergence
    VectorXd mean_div;  // realised element-mean divergence of w
    double residual = 0.0;
    double rhs_l2 = 0.0;
    double w_h1 = 0.0;
    double c_star = 0.0;  // w_h1 / rhs_l2
};

// w = 0 on the boundary, mean div w = -div v + |Omega|^-1 int div v per element, least int |grad w|^2.
inline BogovskiiResult bogovskii_correct(const DisplacementField& v, const Mesh& m) {
    BogovskiiResult r;
    r.w = make_p2_field(m);
    const int ne = m.num_elements();
    double mean = 0.0;
    for (int e = 0; e < ne; ++e) mean += m.element_volumes[e] * v.div[e];
    mean /= m.volume();
    r.rhs.resize(ne);
    for (int e = 0; e < ne; ++e) r.rhs[e] = -v.div[e] + mean;
    for (int e = 0; e < ne; ++e) r.rhs_l2 += m.element_volumes[e] * r.rhs[e] * r.rhs[e];
    r.rhs_l2 = std::sqrt(r.rhs_l2);

    std::set<std::pair<int, int>> boundary_edges;
    std::set<std::array<int, 3>> boundary_faces;
    for (const auto& bt : m.boundary_tris) {
        for (int k = 0; k < 3; ++k) {
            int a = bt.v[k], b = bt.v[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            boundary_edges.insert({a, b});
        }
        std::array<int, 3> f{bt.v[0], bt.v[1], bt.v[2]};
        std::sort(f.begin(), f.end());
        boundary_faces.insert(f);
    }
    // free unknowns: interior vertices, edges, faces
    std::vector<int> vid(m.num_nodes(), -1), eid(r.w.edges.size(), -1), fid(r.w.faces.size(), -1);
    int nfree = 0, nflux = 0;
    for (int i = 0; i < m.num_nodes(); ++i)
        if (!m.on_boundary[i]) vid[i] = nfree++;
    for (size_t k = 0; k < r.w.edges.size(); ++k)
        if (!boundary_edges.count({r.w.edges[k][0], r.w.edges[k][1]})) {
            eid[k] = nfree++;
            ++nflux;
        }
    for (size_t k = 0; k < r.w.faces.size(); ++k)
        if (!boundary_faces.count(r.w.faces[k])) {
            fid[k] = nfree++;
            ++nflux;
        }
    if (3 * nflux < ne - 1) throw Error("divergence corrector has fewer unknowns than elements; refine the mesh");

    const int n = 3 * nfree;
    MatrixXd K = MatrixXd::Zero(n, n), A = MatrixXd::Zero(ne, n);
    for (int e = 0; e < ne; ++e) {
        const auto& G = m.element_gradient_maps[e];
        const auto Ke = detail::corrector_stiffness(G, m.element_volumes[e]);
        const auto g = detail::corrector_mean_gradients(G);
        std::array<int, detail::kCorrectorBasis> loc;
        for (int a = 0; a < 4; ++a) loc[a] = vid[m.tets[e][a]];
        for (int k = 0; k < 6; ++k) loc[4 + k] = eid[r.w.element_edges[e][k]];
        for (int o = 0; o < 4; ++o) loc[10 + o] = fid[r.w.element_faces[e][o]];
        for (int a = 0; a < detail::kCorrectorBasis; ++a) {
            if (loc[a] < 0) continue;
            for (int b = 0; b < detail::kCorrectorBasis; ++b)
                if (loc[b] >= 0)
                    for (int c = 0; c < 3; ++c) K(3 * loc[a] + c, 3 * loc[b] + c) += Ke(a, b);
            for (int c = 0; c < 3; ++c) A(e, 3 * loc[a] + c) += g(a, c);
        }
    }
    Eigen::LLT<MatrixXd> llt(K);
    if (llt.info() != Eigen::Success) throw Error("corrector stiffness not positive definite");
    const MatrixXd KiAt = llt.solve(A.transpose());
    const MatrixXd S = A * KiAt;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(S);
    const VectorXd lam = es.eigenvalues();
    const double cut = 1e-12 * std::max(lam.cwiseAbs().maxCoeff(), 1e-300);
    VectorXd proj = es.eigenvectors().transpose() * r.rhs;
    for (int i = 0; i < ne; ++i) proj[i] = lam[i] > cut ? proj[i] / lam[i] : 0.0;
    const VectorXd x = KiAt * (es.eigenvectors() * proj);

    for (int i = 0; i < m.num_nodes(); ++i)
        if (vid[i] >= 0) r.w.vertex.row(i) = x.segment<3>(3 * vid[i]).transpose();
    for (size_t k = 0; k < r.w.edges.size(); ++k)
        if (eid[k] >= 0) r.w.edge.row(k) = x.segment<3>(3 * eid[k]).transpose();
    for (size_t k = 0; k < r.w.faces.size(); ++k)
        if (fid[k] >= 0) r.w.face.row(k) = x.segment<3>(3 * fid[k]).transpose();
    r.mean_div = element_mean_divergence(r.w, m);
    r.residual = ne ? (r.mean_div - r.rhs).cwiseAbs().maxCoeff() : 0.0;
    if (r.residual > 1e-9 * std::max(1.0, r.rhs.cwiseAbs().maxCoeff()))
        throw Error("divergence system infeasible on this mesh; refine the mesh");
    r.w_h1 = p2_h1_norm(r.w, m);
    r.c_star = r.rhs_l2 > 0 ? r.w_h1 / r.rhs_l2 : 0.0;
    return r;
}

// ---------------------------------------------------------------- recovery sequence

struct RecoveryOptions {
    double gamma = 0.25;
    int steps_per_h = 32;
    int ledger_samples = 32;
    int eval_cells = 4;  // evaluation mesh cells per unit length
};

struct RecoveryStep {
    double h = 0.0, eps = 0.0;
    double beta = 0.0;
    double beta_nominal = 0.0;      // growth rate K H / eps only, no dilation term
    double dilation_offset = 0.0;   // sup over Omega of |u_ext - u|, added to beta / h
    double lambda = 1.0;
    MollifierReport mollifier;
    FlowResult flow;
    DeformationField y;  // on the evaluation mesh; grad and det from the flow at centroids
    double min_obstacle_height = INFINITY;
};

struct RecoverySequence {
    Mesh eval_mesh;
    NodalField u_tilde;
    Vec2 b = Vec2::Zero();
    Rotation R;
    double sup = 0.0, lipschitz = 0.0, oscillation = 0.0, holder = 0.0;
    double gamma = 0.25;
    std::vector<RecoveryStep> steps;
};

inline RecoverySequence build_recovery_sequence(const Mesh& m, const NodalField& u, const MaterialModel& mat,
                                                const LoadSpec& load, const ObstacleSet& E, KernelClass kernel,
                                                const std::vector<double>& hs, const RecoveryOptions& opt = {}) {
    if (!m.is_box) throw Error("recovery construction needs a box domain");
    if (!(opt.gamma > 0 && opt.gamma <= 1)) throw Error("gamma must lie in (0, 1]");
    const auto field = make_displacement(m, u);
    for (double d : field.div)
        if (std::abs(d) > 1e-9) throw Error("recovery needs a divergence-free field");
    for (int i : E.node_indices)
        if (u(i, 2) < -1e-12) throw Error("recovery needs u_3 >= 0 on the obstacle");

    RecoverySequence seq;
    seq.gamma = opt.gamma;
    seq.b = optimal_shear_b(u, LimitAssembly(m, mat));
    seq.u_tilde = tilde_lift(u, seq.b, m);
    seq.R = max_load_over_kernel(seq.u_tilde, load_vector(load, m), kernel).R;
    const ExtendedField base = extend_by_dilation(m, seq.u_tilde, 0.0);
    seq.sup = base.sup;
    seq.lipschitz = base.lipschitz;
    seq.oscillation = base.oscillation;
    seq.holder = base.holder_norm(opt.gamma);

    const Vec3 size = m.box_hi - m.box_lo;
    std::array<int, 3> cells;
    for (int d = 0; d < 3; ++d) cells[d] = std::max(1, static_cast<int>(std::lround(opt.eval_cells * size[d])));
    seq.eval_mesh = build_box_mesh(m.box_lo, m.box_hi, cells[0], cells[1], cells[2]);
    const Mesh& em = seq.eval_mesh;
    std::vector<int> contact;
    for (int i = 0; i < em.num_nodes(); ++i)
        if (std::abs(em.nodes[i].z()) <= 1e-12 && in_hull(E.hull_vertices_2d, em.nodes[i].head<2>())) contact.push_back(i);
    const double r_max = 0.5 * size.norm();

    for (double h : hs) {
        if (!(h > 0 && h < 1)) throw Error("h must lie in (0,1)");
        RecoveryStep st;
        st.h = h;
        st.eps = std::pow(h, opt.gamma / 2.0);
        const double travel = h * seq.sup * std::exp(h * seq.lipschitz);
        const ExtendedField ext = extend_by_dilation(m, seq.u_tilde, st.eps + 2.0 * travel + 1e-9);
        st.lambda = ext.lambda;
        const SmoothField v = mollify(ext, st.eps, opt.gamma);
        st.mollifier = v.report;
        st.dilation_offset = ext.holder_seminorm(opt.gamma) * std::pow((1.0 - 1.0 / ext.lambda) * r_max, opt.gamma);

        const double H = seq.holder;
        const double rate = std::max(kMollifierK / st.eps * H, v.grad_sup);
        st.beta_nominal = h * H * (std::pow(st.eps, opt.gamma) + std::expm1(kMollifierK * h / st.eps * H));
        st.beta = h * H * (std::pow(st.eps, opt.gamma) + std::expm1(h * rate)) + h * st.dilation_offset;

        st.flow = integrate_flow(v, h, em, opt.steps_per_h, opt.ledger_samples);
        NodalField y(em.num_nodes(), 3);
        for (int i = 0; i < em.num_nodes(); ++i)
            y.row(i) = (seq.R.R * st.flow.z.row(i).transpose() + st.beta * Vec3::UnitZ()).transpose();
        st.y.y = y;
        for (int e = 0; e < em.num_elements(); ++e) {
            st.y.grad.push_back(seq.R.R * st.flow.grad[e]);
            st.y.det.push_back(st.flow.det[e]);
            if (std::abs(st.flow.det[e] - 1.0) > 1e-6) throw Error("flow lost volume preservation beyond 1e-6");
        }
        for (int i : contact) {
            st.min_obstacle_height = std::min(st.min_obstacle_height, y(i, 2));
            if (y(i, 2) < -1e-12)
                throw Error("recovery admissibility violated at evaluation node " + std::to_string(i));
        }
        seq.steps.push_back(std::move(st));
    }
    return seq;
}

struct UpperBoundRow {
    double h = 0.0;
    double value = 0.0;      // G_h^I(y_h) after projecting each element onto det = 1
    double error_bar = 0.0;  // energy change caused by that projection
    double gap = 0.0;        // value - reference
    double beta_over_h = 0.0;
    double det_residual = 0.0;
};

struct UpperBoundReport {
    double reference = 0.0;  // G~^I(u)
    std::vector<UpperBoundRow> rows;

    // positive part of the gap strictly decreasing along the sequence
    bool decreasing() const {
        for (size_t i = 1; i < rows.size(); ++i) {
            const double prev = std::max(rows[i - 1].gap, 0.0), cur = std::max(rows[i].gap, 0.0);
            if (cur > 0.0 && cur >= prev) return false;
        }
        return true;
    }
    double final_gap() const { return rows.empty() ? INFINITY : std::max(rows.back().gap, 0.0); }
    bool pass(double tol) const { return !rows.empty() && decreasing() && final_gap() <= tol; }
};

inline UpperBoundReport verify_upper_bound(const RecoverySequence& seq, const MaterialModel& mat, const LoadSpec& load,
                                           double reference) {
    UpperBoundReport rep;
    rep.reference = reference;
    const Mesh& em = seq.eval_mesh;
    const VectorXd ell = load_vector(load, em);
    for (const auto& st : seq.steps) {
        UpperBoundRow row;
        row.h = st.h;
        const double h = st.h;
        double w = 0.0, bar = 0.0;
        for (int e = 0; e < em.num_elements(); ++e) {
            const Mat3& D = st.flow.grad_minus_identity[e];
            const double dj = det_minus_one(D);
            row.det_residual = std::max(row.det_residual, std::abs(dj));
            const double s = std::expm1(-std::log1p(dj) / 3.0);
            const Mat3 Dp = D + s * (Mat3::Identity() + D);  // (I + D) det^(-1/3) - I
            const double wp = yeoh_phi(mat, 2.0 * Dp.trace() + Dp.squaredNorm());
            const double wr = yeoh_phi(mat, 2.0 * D.trace() + D.squaredNorm());
            w += em.element_volumes[e] * wp;
            bar += em.element_volumes[e] * std::abs(wr - wp);
        }
        // y - x = (R - I) x + R (z - x) + beta e3
        NodalField d(em.num_nodes(), 3);
        for (int i = 0; i < em.num_nodes(); ++i)
            d.row(i) = ((seq.R.R - Mat3::Identity()) * em.nodes[i] + seq.R.R * st.flow.displacement.row(i).transpose() +
                        st.beta * Vec3::UnitZ())
                           .transpose();
        row.value = w / (h * h) - ell.dot(flat(d)) / h;
        row.error_bar = bar / (h * h);
        row.gap = row.value - reference;
        row.beta_over_h = st.beta / h;
        rep.rows.push_back(row);
    }
    return rep;
}

}  // namespace siglab
