#pragma once

#include "siglab/geometry.hpp"

#include <random>

namespace siglab {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat9 = Eigen::Matrix<double, 9, 9>;

// Symmetric tensors are stored in Mandel order (11, 22, 33, sqrt2*23, sqrt2*13, sqrt2*12),
// so E : C : E = e^T C e and |E|^2 = |e|^2.
inline Vec6 to_mandel(const Mat3& A) {
    const double r2 = std::sqrt(2.0);
    Mat3 E = 0.5 * (A + A.transpose());
    Vec6 e;
    e << E(0, 0), E(1, 1), E(2, 2), r2 * E(1, 2), r2 * E(0, 2), r2 * E(0, 1);
    return e;
}

inline Mat3 from_mandel(const Vec6& e) {
    const double s = 1.0 / std::sqrt(2.0);
    Mat3 E;
    E << e[0], s * e[5], s * e[4], s * e[5], e[1], s * e[3], s * e[4], s * e[3], e[2];
    return E;
}

struct StrainTensor {
    Mat3 E = Mat3::Zero();
    double trace = 0.0;

    StrainTensor() = default;
    explicit StrainTensor(const Mat3& A) : E(0.5 * (A + A.transpose())), trace(E.trace()) {}
};

struct MaterialModel {
    double c1 = 1.0, c2 = 0.0, c3 = 0.0;
    double penalty_kappa = 100.0;
    Mat6 elastic_tensor = Mat6::Zero();  // D^2 W(I) on symmetric arguments
};

inline Mat6 yeoh_elastic_tensor(double c1, double c2) {
    Vec6 m;
    m << 1, 1, 1, 0, 0, 0;
    return 2.0 * c1 * Mat6::Identity() + 8.0 * c2 * m * m.transpose();
}

inline MaterialModel make_yeoh(double c1, double c2, double c3, double kappa = 100.0) {
    if (!(c1 > 0) || !(c2 > 0) || !(c3 > 0)) throw Error("Yeoh coefficients must be positive");
    MaterialModel m{c1, c2, c3, kappa, yeoh_elastic_tensor(c1, c2)};
    return m;
}

inline Mat6 elastic_tensor(const MaterialModel& m) { return m.elastic_tensor; }

// Tensor of the quadratic form seen along det = 1 paths. DW(I) = 2 c1 I is a pressure, so the
// effective tensor is the Hessian of W - 2 c1 (det - 1), which agrees with W on det = 1.
inline Mat6 constrained_tensor(const MaterialModel& m) {
    Vec6 one;
    one << 1, 1, 1, 0, 0, 0;
    const Mat6 d2det = one * one.transpose() - Mat6::Identity();
    return m.elastic_tensor - 2.0 * m.c1 * d2det;
}

// D^2 W(I)[H, H] for an arbitrary (not necessarily symmetric) H
inline double hessian_form(const MaterialModel& m, const Mat3& H) {
    return 2.0 * m.c1 * H.squaredNorm() + 8.0 * m.c2 * H.trace() * H.trace();
}

// |F|^2 - 3 without cancellation near I
inline double yeoh_shift(const Mat3& F) {
    const Mat3 D = F - Mat3::Identity();
    return 2.0 * D.trace() + D.squaredNorm();
}

// det(I + A) - 1 without cancellation
inline double det_minus_one(const Mat3& A) {
    const double t = A.trace();
    return t + 0.5 * (t * t - (A * A).trace()) + A.determinant();
}

inline double yeoh_phi(const MaterialModel& m, double g) { return g * (m.c1 + g * (m.c2 + g * m.c3)); }
inline double yeoh_dphi(const MaterialModel& m, double g) { return m.c1 + g * (2.0 * m.c2 + 3.0 * m.c3 * g); }
inline double yeoh_ddphi(const MaterialModel& m, double g) { return 2.0 * m.c2 + 6.0 * m.c3 * g; }

inline double yeoh_energy(const Mat3& F, const MaterialModel& m) { return yeoh_phi(m, yeoh_shift(F)); }

inline Mat3 yeoh_stress(const Mat3& F, const MaterialModel& m) { return 2.0 * yeoh_dphi(m, yeoh_shift(F)) * F; }

// Same density evaluated at F = I + D; D is never added to I, so small D keeps full precision.
inline double yeoh_energy_increment(const Mat3& D, const MaterialModel& m) {
    return yeoh_phi(m, 2.0 * D.trace() + D.squaredNorm());
}

// Row-major vec(F) ordering: index 3*i + j for F_ij.
inline Mat9 yeoh_hessian(const Mat3& F, const MaterialModel& m) {
    const double g = yeoh_shift(F);
    Eigen::Matrix<double, 9, 1> f;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) f[3 * i + j] = F(i, j);
    return 4.0 * yeoh_ddphi(m, g) * f * f.transpose() + 2.0 * yeoh_dphi(m, g) * Mat9::Identity();
}

enum class ConstraintMode { Strict, Penalized };

struct EnergyValue {
    bool feasible = true;
    double value = 0.0;
};

inline EnergyValue incompressible_energy(const Mat3& F, const MaterialModel& m, ConstraintMode mode) {
    const double dj = det_minus_one(F - Mat3::Identity());
    if (mode == ConstraintMode::Strict) {
        if (std::abs(dj) > 1e-9) return {false, INFINITY};
        return {true, yeoh_energy(F, m)};
    }
    return {true, yeoh_energy(F, m) + m.penalty_kappa * dj * dj};
}

// Largest relative mismatch between 1/2 D^2W(I)[H,H] from the stored tensor and a central
// second difference of t -> W(I + tH), over the given symmetric trace-free probes.
inline double elastic_tensor_fd_mismatch(const MaterialModel& m, const std::vector<Mat3>& probes, double t = 1e-4) {
    double worst = 0.0;
    for (const Mat3& H : probes) {
        const Vec6 h = to_mandel(H);
        const double analytic = 0.5 * h.dot(m.elastic_tensor * h);
        const double fd = 0.5 * (yeoh_energy(Mat3::Identity() + t * H, m) + yeoh_energy(Mat3::Identity() - t * H, m)) / (t * t);
        worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-300));
    }
    return worst;
}

struct QIValue {
    bool feasible = true;
    double value = 0.0;
};

inline QIValue quadratic_form_QI(const StrainTensor& E, const MaterialModel& m) {
    if (std::abs(E.trace) > 1e-9) return {false, INFINITY};
    const Vec6 e = to_mandel(E.E);
    return {true, 0.5 * e.dot(constrained_tensor(m) * e)};
}

// I + hH + h^2 K with det = 1: uniform rescaling of I + hH, K read off afterwards.
inline Mat3 incompressible_path_point(const Mat3& H, double h) {
    const Mat3 A = h * H;
    const double s = std::expm1(-std::log1p(det_minus_one(A)) / 3.0);  // det(I+A)^(-1/3) - 1
    return Mat3::Identity() + (A + s * (Mat3::Identity() + A));
}

struct RemainderRow {
    double h;
    double sup_remainder;
};

// sup over probes of |h^-2 W(I + hH + h^2K) - Q^I(sym H)| / |H|^2 on det = 1 paths
inline std::vector<RemainderRow> verify_taylor_remainder(const MaterialModel& m, const std::vector<Mat3>& probes,
                                                         const std::vector<double>& hs = {1e-1, 1e-2, 1e-3, 1e-4}) {
    std::vector<RemainderRow> table;
    for (double h : hs) {
        double sup = 0.0;
        for (Mat3 H : probes) {
            H -= H.trace() / 3.0 * Mat3::Identity();
            const double n2 = H.squaredNorm();
            if (n2 == 0.0) continue;
            const Mat3 F = incompressible_path_point(H, h);
            const double lhs = yeoh_energy(F, m) / (h * h);
            const double q = quadratic_form_QI(StrainTensor(H), m).value;
            sup = std::max(sup, std::abs(lhs - q) / n2);
        }
        table.push_back({h, sup});
    }
    return table;
}

inline double distance_to_so3_sq(const Mat3& F) {
    Eigen::JacobiSVD<Mat3> svd(F, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 s = svd.singularValues();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) s[2] = -s[2];
    return (s - Vec3::Ones()).squaredNorm();
}

template <class Rng>
Mat3 random_unimodular(Rng& rng, double spread) {
    std::normal_distribution<double> n(0.0, spread);
    Mat3 A;
    for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = n(rng);
    Mat3 F = (Mat3::Identity() + A);
    if (F.determinant() <= 0) F = Mat3::Identity() + 0.1 * A;
    return F / std::cbrt(F.determinant());
}

// Empirical constant in W(F) >= C d(F, SO(3))^2 over sampled unit-determinant F.
inline double fit_coercivity(const MaterialModel& m, int samples, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    double C = INFINITY;
    for (int s = 0; s < samples; ++s) {
        Mat3 F = random_unimodular(rng, 0.3);
        const double d2 = distance_to_so3_sq(F);
        if (d2 > 1e-12) C = std::min(C, yeoh_energy(F, m) / d2);
    }
    return C;
}

}  // namespace siglab
