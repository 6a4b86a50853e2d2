#pragma once

#include "siglab/kinematics.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include <limits>

namespace siglab {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Vec2 = Eigen::Vector2d;

// ---------------------------------------------------------------- element operators

namespace detail {

// vec(grad u) (row-major, 3i+j) from local nodal values (3a+i)
inline Eigen::Matrix<double, 9, 12> gradient_operator(const GradMap& G) {
    Eigen::Matrix<double, 9, 12> D = Eigen::Matrix<double, 9, 12>::Zero();
    for (int a = 0; a < 4; ++a)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) D(3 * i + j, 3 * a + i) = G(j, a);
    return D;
}

// Mandel strain from vec(H)
inline Eigen::Matrix<double, 6, 9> mandel_of_vec() {
    const double s = 1.0 / std::sqrt(2.0);
    Eigen::Matrix<double, 6, 9> M = Eigen::Matrix<double, 6, 9>::Zero();
    M(0, 0) = M(1, 4) = M(2, 8) = 1.0;
    M(3, 5) = M(3, 7) = s;
    M(4, 2) = M(4, 6) = s;
    M(5, 1) = M(5, 3) = s;
    return M;
}

// Mandel strain of 1/2 b_alpha (e_alpha x e3 + e3 x e_alpha)
inline Eigen::Matrix<double, 6, 2> shear_operator() {
    Eigen::Matrix<double, 6, 2> P = Eigen::Matrix<double, 6, 2>::Zero();
    P(4, 0) = P(3, 1) = 1.0 / std::sqrt(2.0);
    return P;
}

inline std::array<int, 12> dofs(const std::array<int, 4>& t) {
    std::array<int, 12> d;
    for (int a = 0; a < 4; ++a)
        for (int i = 0; i < 3; ++i) d[3 * a + i] = 3 * t[a] + i;
    return d;
}

// Second derivative of det at F as a 9x9 matrix: d2 det / dF_ij dF_kl = eps_ikm eps_jln F_mn
inline Mat9 det_hessian(const Mat3& F) {
    auto eps = [](int i, int j, int k) { return static_cast<double>((i - j) * (j - k) * (k - i)) / 2.0; };
    Mat9 H = Mat9::Zero();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                for (int l = 0; l < 3; ++l) {
                    double s = 0.0;
                    for (int m = 0; m < 3; ++m)
                        for (int n = 0; n < 3; ++n) s += eps(i, k, m) * eps(j, l, n) * F(m, n);
                    H(3 * i + j, 3 * k + l) = s;
                }
    return H;
}

inline Mat3 cofactor(const Mat3& F) {
    Mat3 C;
    C.col(0) = F.col(1).cross(F.col(2));
    C.col(1) = F.col(2).cross(F.col(0));
    C.col(2) = F.col(0).cross(F.col(1));
    return C;
}

inline MatrixXd null_space(const MatrixXd& A, double rel_tol = 1e-10) {
    if (A.rows() == 0) return MatrixXd::Identity(A.cols(), A.cols());
    Eigen::BDCSVD<MatrixXd> svd(A, Eigen::ComputeFullV);
    const auto& s = svd.singularValues();
    const double cut = rel_tol * std::max(1.0, s.size() ? s[0] : 0.0);
    int r = 0;
    while (r < s.size() && s[r] > cut) ++r;
    return svd.matrixV().rightCols(A.cols() - r);
}

}  // namespace detail

// Element strain operators, divergence rows and the Q^I stiffness shared by the limit problems.
struct LimitAssembly {
    int ndof = 0;
    MatrixXd B;      // per-element divergence, ne x ndof
    MatrixXd K;      // int Q^I(E(u)) = 1/2 u^T K u
    MatrixXd Kub;    // coupling with the shear pair b
    Eigen::Matrix2d Kbb = Eigen::Matrix2d::Zero();
    std::vector<Eigen::Matrix<double, 6, 12>> S;
    Mat6 C = Mat6::Zero();

    LimitAssembly(const Mesh& m, const MaterialModel& mat) {
        ndof = 3 * m.num_nodes();
        const int ne = m.num_elements();
        C = constrained_tensor(mat);
        const auto Mv = detail::mandel_of_vec();
        const auto P = detail::shear_operator();
        B = MatrixXd::Zero(ne, ndof);
        K = MatrixXd::Zero(ndof, ndof);
        Kub = MatrixXd::Zero(ndof, 2);
        for (int e = 0; e < ne; ++e) {
            const auto& G = m.element_gradient_maps[e];
            const double V = m.element_volumes[e];
            const auto D = detail::gradient_operator(G);
            S.push_back(Mv * D);
            const auto d = detail::dofs(m.tets[e]);
            const Eigen::Matrix<double, 12, 12> Ke = V * S[e].transpose() * C * S[e];
            const Eigen::Matrix<double, 12, 2> Ce = V * S[e].transpose() * C * P;
            for (int a = 0; a < 12; ++a) {
                B(e, d[a]) += D(0, a) + D(4, a) + D(8, a);
                for (int b = 0; b < 12; ++b) K(d[a], d[b]) += Ke(a, b);
                Kub.row(d[a]) += Ce.row(a);
            }
            Kbb += V * P.transpose() * C * P;
        }
    }
};

// ---------------------------------------------------------------- dense convex QP

struct QPResult {
    VectorXd x;
    double value = 0.0;
    std::vector<int> active;
    int iterations = 0;
    bool converged = false;
    bool unbounded = false;
    std::vector<double> trace;
};

// min 1/2 x^T H x - g^T x  s.t.  C x >= d, H symmetric positive semidefinite, x0 feasible.
// Primal active set; zero-curvature descent directions are followed until a constraint blocks.
inline QPResult solve_qp(const MatrixXd& H, const VectorXd& g, const MatrixXd& C, const VectorXd& d, VectorXd x0,
                         int max_iter = 0) {
    const int n = static_cast<int>(H.rows()), mc = static_cast<int>(C.rows());
    if (max_iter <= 0) max_iter = 50 * (n + mc) + 100;
    const double hscale = std::max(1.0, H.cwiseAbs().maxCoeff());
    const double gscale = std::max(1e-300, std::max(g.cwiseAbs().maxCoeff(), hscale * x0.cwiseAbs().maxCoeff()));
    QPResult r;
    r.x = std::move(x0);
    std::vector<bool> in_w(mc, false);
    auto objective = [&](const VectorXd& x) { return 0.5 * x.dot(H * x) - g.dot(x); };
    r.trace.push_back(objective(r.x));

    for (r.iterations = 0; r.iterations < max_iter; ++r.iterations) {
        MatrixXd Cw(r.active.size(), n);
        for (size_t k = 0; k < r.active.size(); ++k) Cw.row(k) = C.row(r.active[k]);
        const MatrixXd N = detail::null_space(Cw, 1e-12);
        const VectorXd grad = H * r.x - g;
        VectorXd p = VectorXd::Zero(n);
        bool zero_curvature = false;
        if (N.cols() > 0) {
            Eigen::SelfAdjointEigenSolver<MatrixXd> es(N.transpose() * H * N);
            const VectorXd gr = N.transpose() * grad;
            const double lam_cut = 1e-11 * hscale;
            VectorXd q = VectorXd::Zero(N.cols()), flat_part = VectorXd::Zero(N.cols());
            for (int k = 0; k < es.eigenvalues().size(); ++k) {
                const VectorXd v = es.eigenvectors().col(k);
                const double c = v.dot(gr);
                if (es.eigenvalues()[k] > lam_cut)
                    q -= c / es.eigenvalues()[k] * v;
                else
                    flat_part += c * v;
            }
            if (flat_part.norm() > 1e-11 * gscale) {
                p = -N * flat_part;
                zero_curvature = true;
            } else {
                p = N * q;
            }
        }
        if (!zero_curvature && p.norm() <= 1e-13 * std::max(1.0, r.x.norm())) {
            // stationary on the working face: check multipliers grad = Cw^T mu, mu >= 0
            if (r.active.empty()) {
                r.converged = true;
                break;
            }
            const VectorXd mu = Cw.transpose().completeOrthogonalDecomposition().solve(grad);
            int worst = -1;
            double most = -1e-12 * gscale;
            for (int k = 0; k < mu.size(); ++k)
                if (mu[k] < most) {
                    most = mu[k];
                    worst = k;
                }
            if (worst < 0) {
                r.converged = true;
                break;
            }
            in_w[r.active[worst]] = false;
            r.active.erase(r.active.begin() + worst);
            continue;
        }
        double alpha = zero_curvature ? std::numeric_limits<double>::infinity() : 1.0;
        int block = -1;
        for (int i = 0; i < mc; ++i) {
            if (in_w[i]) continue;
            const double cp = C.row(i).dot(p);
            if (cp < -1e-14 * p.norm()) {
                const double a = std::max(0.0, (C.row(i).dot(r.x) - d[i]) / -cp);
                if (a < alpha) {
                    alpha = a;
                    block = i;
                }
            }
        }
        if (!std::isfinite(alpha)) {
            r.unbounded = true;
            break;
        }
        r.x += alpha * p;
        if (block >= 0) {
            in_w[block] = true;
            r.active.push_back(block);
        }
        r.trace.push_back(objective(r.x));
    }
    r.value = objective(r.x);
    std::sort(r.active.begin(), r.active.end());
    return r;
}

// ---------------------------------------------------------------- limit problems

enum class Variant { EI, GI, GTildeI };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::EI: return "E^I";
        case Variant::GI: return "G^I";
        case Variant::GTildeI: return "G~^I";
    }
    return "?";
}

struct QuadraticProblem {
    const Mesh* mesh = nullptr;
    MaterialModel material;
    LoadSpec load;
    ObstacleSet obstacle;
    Variant variant = Variant::EI;
    std::optional<KernelClass> kernel_class;
};

struct SolveResult {
    NodalField u;               // limit displacement, or (y - x)/h for the nonlinear problem
    NodalField y;               // nonlinear only
    Vec2 b = Vec2::Zero();      // shear pair (G~^I)
    Rotation R;                 // attaining rotation in the load term
    double theta = 0.0;
    double objective = 0.0;
    double constraint_residual = 0.0;  // max |div u| or max |det grad y - 1|
    double bound_violation = 0.0;
    std::vector<int> active_nodes;
    int iterations = 0;
    int starts = 0;
    std::string termination;
    bool ok = false;
    std::vector<double> trace;  // merit values; NaN separates restarts of monotone phases
    std::vector<double> start_values;
};

struct LoadOverKernel {
    double value = 0.0;
    Rotation R;
    double theta = 0.0;
};

// max over S_{L,E} of L(R u); for rotations about e3 the maximum of a cos + b sin + c
inline LoadOverKernel max_load_over_kernel(const NodalField& u, const Eigen::VectorXd& ell, KernelClass k) {
    const VectorXd uf = flat(u);
    if (k == KernelClass::IdentityOnly) return {ell.dot(uf), Rotation::identity(), 0.0};
    double a = 0, b = 0, c = 0;
    for (int i = 0; i < u.rows(); ++i) {
        const Vec3 l = ell.segment<3>(3 * i);
        a += l.x() * u(i, 0) + l.y() * u(i, 1);
        b += l.y() * u(i, 0) - l.x() * u(i, 1);
        c += l.z() * u(i, 2);
    }
    const double r = std::hypot(a, b);
    const double th = r == 0.0 ? 0.0 : std::atan2(b, a);
    return {c + r, Rotation::about_e3(th), th};
}

inline LoadOverKernel max_load_over_kernel(const DisplacementField& u, const LoadSpec& load, KernelClass k,
                                           const Mesh& m) {
    return max_load_over_kernel(u.u, load_vector(load, m), k);
}

// Closed-form b*: stationarity of the quadratic in b, a 2x2 SPD system.
inline Vec2 optimal_shear_b(const NodalField& u, const LimitAssembly& A) {
    const Vec2 rhs = -A.Kub.transpose() * flat(u);
    Eigen::LLT<Eigen::Matrix2d> llt(A.Kbb);
    if (llt.info() != Eigen::Success) throw Error("shear system not positive definite");
    return llt.solve(rhs);
}

inline Vec2 optimal_shear_b(const DisplacementField& u, const MaterialModel& mat, const Mesh& m) {
    return optimal_shear_b(u.u, LimitAssembly(m, mat));
}

inline NodalField tilde_lift(const NodalField& u, const Vec2& b, const Mesh& m) {
    NodalField out = u;
    for (int i = 0; i < m.num_nodes(); ++i) {
        out(i, 0) += m.nodes[i].z() * b[0];
        out(i, 1) += m.nodes[i].z() * b[1];
    }
    return out;
}

// Evaluation of E^I, G^I, G~^I at a given field. Infeasible fields give +inf.
struct LimitFunctional {
    const Mesh& mesh;
    LimitAssembly A;
    VectorXd ell;
    ObstacleSet obstacle;
    KernelClass kernel;
    double div_tol = 1e-9;

    LimitFunctional(const Mesh& m, const MaterialModel& mat, const LoadSpec& load, const ObstacleSet& E,
                    KernelClass k)
        : mesh(m), A(m, mat), ell(load_vector(load, m)), obstacle(E), kernel(k) {}

    bool feasible(const NodalField& u) const {
        if ((A.B * flat(u)).cwiseAbs().maxCoeff() > div_tol) return false;
        for (int i : obstacle.node_indices)
            if (u(i, 2) < -1e-12) return false;
        return true;
    }
    double elastic(const NodalField& u, const Vec2& b = Vec2::Zero()) const {
        const VectorXd x = flat(u);
        return 0.5 * x.dot(A.K * x) + b.dot(A.Kub.transpose() * x) + 0.5 * b.dot(A.Kbb * b);
    }
    double value(Variant v, const NodalField& u) const {
        if (!feasible(u)) return INFINITY;
        switch (v) {
            case Variant::EI: return elastic(u) - ell.dot(flat(u));
            case Variant::GI: return elastic(u) - max_load_over_kernel(u, ell, kernel).value;
            case Variant::GTildeI: return elastic(u, optimal_shear_b(u, A)) - max_load_over_kernel(u, ell, kernel).value;
        }
        return INFINITY;
    }
};

namespace detail {

struct ReducedQP {
    MatrixXd Z;   // nullspace basis of B
    MatrixXd H;   // reduced Hessian (with b block for G~)
    MatrixXd C;   // obstacle rows in reduced variables
    bool with_b = false;
};

inline ReducedQP reduce(const LimitAssembly& A, const ObstacleSet& E, bool with_b) {
    ReducedQP q;
    q.with_b = with_b;
    q.Z = null_space(A.B, 1e-10);
    const int k = static_cast<int>(q.Z.cols()), nb = with_b ? 2 : 0;
    q.H = MatrixXd::Zero(k + nb, k + nb);
    q.H.topLeftCorner(k, k) = q.Z.transpose() * A.K * q.Z;
    if (with_b) {
        q.H.topRightCorner(k, 2) = q.Z.transpose() * A.Kub;
        q.H.bottomLeftCorner(2, k) = q.H.topRightCorner(k, 2).transpose();
        q.H.bottomRightCorner(2, 2) = A.Kbb;
    }
    q.H = 0.5 * (q.H + q.H.transpose()).eval();
    q.C = MatrixXd::Zero(E.node_indices.size(), k + nb);
    for (size_t r = 0; r < E.node_indices.size(); ++r) q.C.row(r).head(k) = q.Z.row(3 * E.node_indices[r] + 2);
    return q;
}

// ell_theta with L(R_theta u) = ell_theta . u
inline VectorXd rotate_load(const VectorXd& ell, double theta) {
    const Mat3 Rt = Rotation::about_e3(theta).R.transpose();
    VectorXd out(ell.size());
    for (int i = 0; i < ell.size() / 3; ++i) out.segment<3>(3 * i) = Rt * ell.segment<3>(3 * i);
    return out;
}

inline bool load_is_axisymmetric(const VectorXd& ell) {
    double horiz = 0.0;
    for (int i = 0; i < ell.size() / 3; ++i) horiz = std::max(horiz, ell.segment<2>(3 * i).cwiseAbs().maxCoeff());
    return horiz <= 1e-15 * std::max(1.0, ell.cwiseAbs().maxCoeff());
}

}  // namespace detail

inline SolveResult minimize_limit(const QuadraticProblem& p) {
    if (!p.mesh) throw Error("quadratic problem without mesh");
    if (p.variant != Variant::EI && !p.kernel_class) throw Error("variant requires kernel_class");
    const Mesh& m = *p.mesh;
    const KernelClass kernel = p.kernel_class.value_or(KernelClass::IdentityOnly);
    LimitFunctional F(m, p.material, p.load, p.obstacle, kernel);
    const bool with_b = p.variant == Variant::GTildeI;
    const auto red = detail::reduce(F.A, p.obstacle, with_b);
    const int nv = static_cast<int>(red.H.rows());
    const VectorXd d0 = VectorXd::Zero(red.C.rows());

    auto solve_at = [&](double theta) {
        const VectorXd ell = theta == 0.0 ? F.ell : detail::rotate_load(F.ell, theta);
        VectorXd g = VectorXd::Zero(nv);
        g.head(red.Z.cols()) = red.Z.transpose() * ell;
        return solve_qp(red.H, g, red.C, d0, VectorXd::Zero(nv));
    };

    const bool rotate = p.variant != Variant::EI && kernel == KernelClass::RotationsAboutE3 &&
                        !detail::load_is_axisymmetric(F.ell);
    double best_theta = 0.0;
    QPResult best = solve_at(0.0);
    int total_iters = best.iterations;
    if (rotate) {
        // min over u of [q(u) - max_theta L(R_theta u)] = min over theta of a convex QP
        const int grid = 72;
        std::vector<double> vals(grid);
        vals[0] = best.unbounded ? -INFINITY : best.value;
        for (int k = 1; k < grid; ++k) {
            QPResult r = solve_at(2 * M_PI * k / grid);
            total_iters += r.iterations;
            vals[k] = r.unbounded ? -INFINITY : r.value;
            if (vals[k] < vals[0] - 1e-15 && (r.unbounded || r.value < best.value)) {
                best = r;
                best_theta = 2 * M_PI * k / grid;
            }
        }
        if (!best.unbounded) {
            double lo = best_theta - 2 * M_PI / grid, hi = best_theta + 2 * M_PI / grid;
            const double gr = (std::sqrt(5.0) - 1) / 2;
            double a = hi - gr * (hi - lo), b = lo + gr * (hi - lo);
            QPResult ra = solve_at(a), rb = solve_at(b);
            while (hi - lo > 1e-10) {
                total_iters += ra.iterations + rb.iterations;
                if (ra.value < rb.value) {
                    hi = b;
                    b = a;
                    rb = ra;
                    a = hi - gr * (hi - lo);
                    ra = solve_at(a);
                } else {
                    lo = a;
                    a = b;
                    ra = rb;
                    b = lo + gr * (hi - lo);
                    rb = solve_at(b);
                }
            }
            for (auto* r : {&ra, &rb})
                if (r->value < best.value) {
                    best = *r;
                    best_theta = r == &ra ? a : b;
                }
        }
    }

    SolveResult out;
    out.iterations = total_iters;
    out.trace = best.trace;
    if (best.unbounded) {
        out.termination = "unbounded below (load admissibility violated)";
        out.ok = false;
        out.objective = -INFINITY;
        return out;
    }
    const int k = static_cast<int>(red.Z.cols());
    out.u = unflat(red.Z * best.x.head(k));
    // the reduced variables carry rounding of size 1e-16; clip exact contact back onto the plane
    for (int i : p.obstacle.node_indices)
        if (out.u(i, 2) < 0 && out.u(i, 2) > -1e-13) out.u(i, 2) = 0.0;
    if (with_b) out.b = best.x.tail<2>();
    const auto lk = max_load_over_kernel(out.u, F.ell, p.variant == Variant::EI ? KernelClass::IdentityOnly : kernel);
    out.R = lk.R;
    out.theta = lk.theta;
    out.objective = F.value(p.variant, out.u);
    out.constraint_residual = (F.A.B * flat(out.u)).cwiseAbs().maxCoeff();
    for (int i : p.obstacle.node_indices) {
        out.bound_violation = std::max(out.bound_violation, -out.u(i, 2));
        if (std::abs(out.u(i, 2)) <= 1e-12) out.active_nodes.push_back(i);
    }
    out.ok = best.converged;
    out.termination = best.converged ? "optimal" : "iteration limit";
    return out;
}

// ---------------------------------------------------------------- nonlinear problem

struct SolverOptions {
    int maxiter = 5000;
    double tol = 1e-8;
};

struct Continuation {
    double kappa0 = 100.0;  // multiples of c1
    double factor = 10.0;
    int stages = 3;
};

struct Multistart {
    std::uint64_t seed = 1;
    int starts = 3;
};

struct NonlinearProblem {
    const Mesh* mesh = nullptr;
    MaterialModel material;
    LoadSpec load;
    ObstacleSet obstacle;
    double h = 0.1;
    SolverOptions solver;
    Continuation continuation;
    Multistart multistart;
    std::optional<NodalField> warm_start;  // rescaled displacement (y - x)/h
    // |det - 1| is driven below det_target h^2: the pressure (~2 c1) turns a violation d into an
    // objective error of order 2 c1 d / h^2
    double det_target = 1e-10;
};

// G_h^I in the variables u = (y - x)/h together with the scaled constraints c_e = (det - 1)/h.
struct NonlinearEnergy {
    const Mesh& m;
    const MaterialModel& mat;
    VectorXd ell;
    double h;
    std::vector<Eigen::Matrix<double, 9, 12>> D;

    NonlinearEnergy(const Mesh& mesh, const MaterialModel& material, const LoadSpec& load, double h_)
        : m(mesh), mat(material), ell(load_vector(load, mesh)), h(h_) {
        for (const auto& G : m.element_gradient_maps) D.push_back(detail::gradient_operator(G));
    }

    Mat3 grad(const VectorXd& u, int e) const {
        const auto d = detail::dofs(m.tets[e]);
        Eigen::Matrix<double, 12, 1> ue;
        for (int a = 0; a < 12; ++a) ue[a] = u[d[a]];
        const Eigen::Matrix<double, 9, 1> v = D[e] * ue;
        Mat3 H;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) H(i, j) = v[3 * i + j];
        return H;
    }

    double energy(const VectorXd& u) const {
        double s = 0.0;
        for (int e = 0; e < m.num_elements(); ++e) s += m.element_volumes[e] * yeoh_energy_increment(h * grad(u, e), mat);
        return s / (h * h) - ell.dot(u);
    }

    VectorXd constraints(const VectorXd& u) const {
        VectorXd c(m.num_elements());
        for (int e = 0; e < m.num_elements(); ++e) c[e] = det_minus_one(h * grad(u, e)) / h;
        return c;
    }

    // Augmented Lagrangian merit, gradient and Hessian.
    double merit(const VectorXd& u, const VectorXd& lam, double kappa, VectorXd* g, MatrixXd* Hs) const {
        const int n = static_cast<int>(u.size());
        if (g) *g = -ell;
        if (Hs) Hs->setZero(n, n);
        double val = -ell.dot(u);
        for (int e = 0; e < m.num_elements(); ++e) {
            const double V = m.element_volumes[e];
            const Mat3 H = grad(u, e);
            const Mat3 F = Mat3::Identity() + h * H;
            const double c = det_minus_one(h * H) / h;
            const double mult = lam[e] + kappa * V * c;
            val += V * yeoh_energy_increment(h * H, mat) / (h * h) + lam[e] * c + 0.5 * kappa * V * c * c;
            if (!g && !Hs) continue;
            const auto d = detail::dofs(m.tets[e]);
            const Mat3 P = V * yeoh_stress(F, mat) / h + mult * detail::cofactor(F);
            Eigen::Matrix<double, 9, 1> pv, cv;
            const Mat3 cof = detail::cofactor(F);
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    pv[3 * i + j] = P(i, j);
                    cv[3 * i + j] = cof(i, j);
                }
            if (g) {
                const Eigen::Matrix<double, 12, 1> ge = D[e].transpose() * pv;
                for (int a = 0; a < 12; ++a) (*g)[d[a]] += ge[a];
            }
            if (Hs) {
                const Mat9 H9 = V * yeoh_hessian(F, mat) + mult * h * detail::det_hessian(F) + kappa * V * cv * cv.transpose();
                const Eigen::Matrix<double, 12, 12> He = D[e].transpose() * H9 * D[e];
                for (int a = 0; a < 12; ++a)
                    for (int b = 0; b < 12; ++b) (*Hs)(d[a], d[b]) += He(a, b);
            }
        }
        return val;
    }
};

namespace detail {

struct InnerResult {
    int iterations = 0;
    bool converged = false;
    double pg_norm = 0.0;
};

// Projected Newton (Bertsekas) for the merit with lower bounds lb on the listed dofs.
inline InnerResult projected_newton(const NonlinearEnergy& J, VectorXd& u, const VectorXd& lam, double kappa,
                                    const std::vector<int>& bounded, double tol, int maxiter,
                                    std::vector<double>& trace) {
    const int n = static_cast<int>(u.size());
    std::vector<char> is_bounded(n, 0);
    for (int i : bounded) is_bounded[i] = 1;
    auto project = [&](VectorXd& x) {
        for (int i : bounded) x[i] = std::max(x[i], 0.0);
    };
    project(u);
    InnerResult res;
    VectorXd g;
    MatrixXd Hs;
    double f = J.merit(u, lam, kappa, &g, &Hs);
    trace.push_back(f);
    for (res.iterations = 0; res.iterations < maxiter; ++res.iterations) {
        VectorXd pg = g;
        for (int i : bounded)
            if (u[i] <= 0.0 && g[i] > 0.0) pg[i] = 0.0;
        res.pg_norm = pg.cwiseAbs().maxCoeff();
        if (res.pg_norm <= tol) {
            res.converged = true;
            break;
        }
        const double eps = std::min(1e-3, res.pg_norm);
        std::vector<int> freev, act;
        for (int i = 0; i < n; ++i) {
            if (is_bounded[i] && u[i] <= eps && g[i] > 0.0)
                act.push_back(i);
            else
                freev.push_back(i);
        }
        const int nf = static_cast<int>(freev.size());
        MatrixXd Hf(nf, nf);
        VectorXd gf(nf);
        for (int a = 0; a < nf; ++a) {
            gf[a] = g[freev[a]];
            for (int b = 0; b < nf; ++b) Hf(a, b) = Hs(freev[a], freev[b]);
        }
        const double scale = std::max(1.0, Hf.diagonal().cwiseAbs().maxCoeff());
        double mu = 0.0;
        VectorXd df;
        for (int attempt = 0; attempt < 60; ++attempt) {
            Eigen::LLT<MatrixXd> llt(Hf + mu * MatrixXd::Identity(nf, nf));
            if (llt.info() == Eigen::Success) {
                df = -llt.solve(gf);
                if (df.allFinite() && df.dot(gf) < 0) break;
            }
            mu = mu == 0.0 ? 1e-10 * scale : mu * 10.0;
            df.resize(0);
        }
        VectorXd dir = VectorXd::Zero(n);
        if (df.size() == nf)
            for (int a = 0; a < nf; ++a) dir[freev[a]] = df[a];
        else
            for (int a = 0; a < nf; ++a) dir[freev[a]] = -gf[a] / scale;
        for (int i : act) dir[i] = -g[i] / std::max(Hs(i, i), 1e-12 * scale);

        double alpha = 1.0, fn = f;
        VectorXd un;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            un = u + alpha * dir;
            project(un);
            const double decrease = g.dot(un - u);
            fn = J.merit(un, lam, kappa, nullptr, nullptr);
            if (std::isfinite(fn) && decrease <= 0.0 && fn <= f + 1e-4 * decrease) {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if (!accepted) {
            // rounding floor: accept only a strict, tiny decrease
            if (std::isfinite(fn) && fn < f) {
                u = un;
                f = J.merit(u, lam, kappa, &g, &Hs);
                trace.push_back(f);
                continue;
            }
            break;
        }
        u = un;
        f = J.merit(u, lam, kappa, &g, &Hs);
        trace.push_back(f);
    }
    return res;
}

}  // namespace detail

namespace detail {

struct PolishResult {
    bool ok = false;
    bool floor = false;  // constraints settled at a least-squares floor above ctol
    int iterations = 0;
};

// Newton on the KKT system of min J s.t. c = 0 with the obstacle contacts frozen. The
// penalty cannot resolve constraints whose Jacobian singular values are O(h); Newton can.
inline PolishResult kkt_polish(const NonlinearEnergy& J, VectorXd& u, VectorXd& lam, double kappa,
                               const std::vector<int>& bounded, double gtol, double ctol) {
    const int n = static_cast<int>(u.size()), ne = J.m.num_elements();
    std::vector<char> frozen(n, 0);
    VectorXd x = u;
    for (int i : bounded)
        if (x[i] <= 1e-12) {
            x[i] = 0.0;
            frozen[i] = 1;
        }
    std::vector<int> freev;
    for (int i = 0; i < n; ++i)
        if (!frozen[i]) freev.push_back(i);
    const int nf = static_cast<int>(freev.size());
    VectorXd l = lam;
    PolishResult res;
    double cprev = INFINITY;
    for (res.iterations = 0; res.iterations < 40; ++res.iterations) {
        VectorXd g;
        MatrixXd Hs;
        J.merit(x, l, kappa, &g, &Hs);
        const VectorXd c = J.constraints(x);
        MatrixXd A = MatrixXd::Zero(ne, n);
        for (int e = 0; e < ne; ++e) {
            const Mat3 cof = cofactor(Mat3::Identity() + J.h * J.grad(x, e));
            Eigen::Matrix<double, 9, 1> cv;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) cv[3 * i + j] = cof(i, j);
            const Eigen::Matrix<double, 12, 1> ge = J.D[e].transpose() * cv;
            const auto d = dofs(J.m.tets[e]);
            for (int a = 0; a < 12; ++a) A(e, d[a]) += ge[a];
        }
        double gnorm = 0.0;
        for (int i : freev) gnorm = std::max(gnorm, std::abs(g[i]));
        if (!std::isfinite(gnorm)) return res;
        const double cmax = J.h * c.cwiseAbs().maxCoeff();
        // near-dependent constraints can leave an inconsistent O(h^2) remainder that Newton cannot remove
        const bool settled = res.iterations > 0 && std::abs(cmax - cprev) <= 1e-6 * cmax;
        cprev = cmax;
        if (gnorm <= gtol && (cmax <= ctol || settled)) {
            res.floor = cmax > ctol;
            // frozen contacts must push against the obstacle
            for (int i = 0; i < n; ++i)
                if (frozen[i] && g[i] < -gtol) return res;
            res.ok = true;
            break;
        }
        MatrixXd K = MatrixXd::Zero(nf + ne, nf + ne);
        VectorXd rhs(nf + ne);
        for (int a = 0; a < nf; ++a) {
            rhs[a] = -g[freev[a]];
            for (int b = 0; b < nf; ++b) K(a, b) = Hs(freev[a], freev[b]);
            for (int e = 0; e < ne; ++e) K(nf + e, a) = K(a, nf + e) = A(e, freev[a]);
        }
        rhs.tail(ne) = -c;
        const VectorXd step = Eigen::CompleteOrthogonalDecomposition<MatrixXd>(K).solve(rhs);
        if (!step.allFinite()) return res;
        for (int a = 0; a < nf; ++a) x[freev[a]] += step[a];
        // the merit gradient carries lam + kappa V c, so the new multiplier absorbs that shift
        for (int e = 0; e < ne; ++e) l[e] += step[nf + e];
        for (int i : bounded)
            if (!frozen[i] && x[i] < 0.0) return res;
    }
    if (res.ok) {
        u = x;
        lam = l;
    }
    return res;
}

}  // namespace detail

inline SolveResult minimize_nonlinear_from(const NonlinearProblem& p, const NonlinearEnergy& J, VectorXd u) {
    const Mesh& m = *p.mesh;
    std::vector<int> bounded;
    for (int i : p.obstacle.node_indices) bounded.push_back(3 * i + 2);
    const double c1 = p.material.c1;
    VectorXd lam(m.num_elements());
    for (int e = 0; e < m.num_elements(); ++e) lam[e] = -2.0 * c1 * m.element_volumes[e] / p.h;
    const double tol = p.solver.tol * std::max(1.0, J.ell.cwiseAbs().maxCoeff());

    SolveResult r;
    int iters = 0;
    int budget = p.solver.maxiter;
    double kappa = p.continuation.kappa0 * c1;
    bool inner_ok = false;
    double resid = INFINITY;
    const double ctarget = p.det_target * p.h * p.h;
    const int per_call = std::max(50, p.solver.maxiter / (4 * std::max(1, p.continuation.stages)));
    for (int stage = 0; stage < p.continuation.stages; ++stage, kappa *= p.continuation.factor) {
        for (int outer = 0; outer < 4; ++outer) {
            r.trace.push_back(std::numeric_limits<double>::quiet_NaN());
            auto in = detail::projected_newton(J, u, lam, kappa, bounded, tol, std::min(per_call, std::max(1, budget)),
                                               r.trace);
            iters += in.iterations;
            budget -= in.iterations;
            inner_ok = in.converged;
            const VectorXd c = J.constraints(u);
            for (int e = 0; e < m.num_elements(); ++e) lam[e] += kappa * m.element_volumes[e] * c[e];
            resid = p.h * c.cwiseAbs().maxCoeff();
            if (!u.allFinite() || budget <= 0) break;
            if (inner_ok && resid <= ctarget) break;
        }
        if (!u.allFinite() || budget <= 0) break;
    }
    kappa /= p.continuation.factor;
    bool polished = false, at_floor = false;
    if (u.allFinite() && (resid > ctarget || !inner_ok)) {
        const VectorXd u0 = u, lam0 = lam;
        const double resid0 = resid;
        const auto pr = detail::kkt_polish(J, u, lam, kappa, bounded, tol, ctarget);
        iters += pr.iterations;
        if (pr.ok) {
            polished = true;
            at_floor = pr.floor;
            inner_ok = true;
            resid = p.h * J.constraints(u).cwiseAbs().maxCoeff();
            // at a floor the continuation iterate is equally feasible; keep whichever is lower
            if (at_floor && resid0 <= 10.0 * resid && J.energy(u0) < J.energy(u)) {
                u = u0;
                lam = lam0;
                resid = resid0;
                polished = false;
            }
            r.trace.push_back(J.merit(u, lam, kappa, nullptr, nullptr));
        }
    }
    r.iterations = iters;
    r.u = unflat(u);
    r.y = coordinates(m) + p.h * r.u;
    r.constraint_residual = resid;
    r.objective = J.energy(u);
    for (int i : p.obstacle.node_indices) {
        r.bound_violation = std::max(r.bound_violation, -r.y(i, 2));
        if (r.y(i, 2) <= 1e-12) r.active_nodes.push_back(i);
    }
    if (!u.allFinite()) {
        r.ok = false;
        r.termination = "diverged";
    } else if (resid > 1e-6) {
        r.ok = false;
        r.termination = "det residual above 1e-6 after continuation";
    } else if (!inner_ok) {
        r.ok = true;
        r.termination = budget <= 0 ? "iteration limit" : "line search stalled";
    } else if (at_floor) {
        r.ok = true;
        r.termination = polished ? "converged (KKT polish, det floor)" : "converged (det floor)";
    } else if (resid > ctarget) {
        r.ok = true;
        r.termination = "converged (det residual above target)";
    } else {
        r.ok = true;
        r.termination = polished ? "converged (KKT polish)" : "converged";
    }
    return r;
}

inline std::vector<VectorXd> multistart_points(const NonlinearProblem& p) {
    const Mesh& m = *p.mesh;
    std::vector<VectorXd> starts;
    if (p.warm_start) starts.push_back(flat(*p.warm_start));
    starts.push_back(VectorXd::Zero(3 * m.num_nodes()));
    if (p.multistart.starts >= 2) {
        // rigid turn about the vertical axis through the centroid: det = 1, obstacle untouched
        Vec3 xbar = Vec3::Zero();
        for (const auto& x : m.nodes) xbar += x;
        xbar /= m.num_nodes();
        const Mat3 R = Rotation::about_e3(M_PI / 16).R;
        NodalField u(m.num_nodes(), 3);
        for (int i = 0; i < m.num_nodes(); ++i) u.row(i) = ((R - Mat3::Identity()) * (m.nodes[i] - xbar) / p.h).transpose();
        starts.push_back(flat(u));
    }
    std::mt19937_64 rng(p.multistart.seed);
    std::normal_distribution<double> n(0.0, 0.05);
    for (int s = 2; s < p.multistart.starts; ++s) {
        VectorXd u(3 * m.num_nodes());
        for (int i = 0; i < u.size(); ++i) u[i] = n(rng);
        for (int i : p.obstacle.node_indices) u[3 * i + 2] = std::abs(u[3 * i + 2]);
        starts.push_back(u);
    }
    return starts;
}

inline SolveResult minimize_nonlinear(const NonlinearProblem& p) {
    if (!p.mesh) throw Error("nonlinear problem without mesh");
    if (!(p.h > 0 && p.h < 1)) throw Error("h must lie in (0,1)");
    if (p.obstacle.node_indices.empty()) throw Error("obstacle hypothesis violated");
    const NonlinearEnergy J(*p.mesh, p.material, p.load, p.h);
    std::optional<SolveResult> best;
    std::vector<double> values;
    std::vector<std::string> failures;
    const auto starts = multistart_points(p);
    for (size_t s = 0; s < starts.size(); ++s) {
        SolveResult r = minimize_nonlinear_from(p, J, starts[s]);
        values.push_back(r.ok ? r.objective : INFINITY);
        if (!r.ok) {
            failures.push_back("start " + std::to_string(s) + ": " + r.termination);
            continue;
        }
        if (!best || r.objective < best->objective) best = std::move(r);
    }
    if (!best) {
        SolveResult fail;
        fail.ok = false;
        fail.termination = "all starts failed";
        for (const auto& f : failures) fail.termination += "; " + f;
        fail.objective = INFINITY;
        fail.start_values = values;
        fail.starts = static_cast<int>(starts.size());
        return fail;
    }
    best->start_values = values;
    best->starts = static_cast<int>(starts.size());
    return *best;
}

}  // namespace siglab
