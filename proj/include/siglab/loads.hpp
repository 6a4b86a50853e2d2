#pragma once

#include "siglab/geometry.hpp"

#include <Eigen/Geometry>

#include <cstdint>
#include <optional>
#include <random>

namespace siglab {

// ---------------------------------------------------------------- rotations

struct Rotation {
    Mat3 R = Mat3::Identity();

    static Rotation identity() { return {}; }
    static Rotation from_axis_angle(const Vec3& axis, double angle) {
        if (axis.norm() == 0.0) return {};
        return {Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix()};
    }
    static Rotation about_e3(double theta) { return from_axis_angle(Vec3::UnitZ(), theta); }

    Eigen::AngleAxisd axis_angle() const {
        Eigen::AngleAxisd aa(R);
        if (aa.angle() < 1e-15) aa.axis() = Vec3::UnitZ();
        return aa;
    }
    double orthogonality_error() const { return (R.transpose() * R - Mat3::Identity()).norm(); }
};

inline Mat3 skew(const Vec3& a) {
    Mat3 S;
    S << 0, -a.z(), a.y(), a.z(), 0, -a.x(), -a.y(), a.x(), 0;
    return S;
}

// Haar-distributed rotation from a unit quaternion.
template <class Rng>
Mat3 random_rotation(Rng& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
    q.normalize();
    return q.toRotationMatrix();
}

// ---------------------------------------------------------------- loads

struct VolumeForce {
    enum class Kind { Constant, Affine, Nodal } kind = Kind::Constant;
    Vec3 c = Vec3::Zero();
    Mat3 A = Mat3::Zero();
    Vec3 b = Vec3::Zero();
    NodalField values;  // Kind::Nodal

    static VolumeForce constant(const Vec3& c) { return {Kind::Constant, c, Mat3::Zero(), Vec3::Zero(), {}}; }
    static VolumeForce affine(const Mat3& A, const Vec3& b) { return {Kind::Affine, Vec3::Zero(), A, b, {}}; }
    static VolumeForce nodal(const NodalField& v) { return {Kind::Nodal, Vec3::Zero(), Mat3::Zero(), Vec3::Zero(), v}; }

    Vec3 at_node(const Mesh& m, int i) const {
        switch (kind) {
            case Kind::Constant: return c;
            case Kind::Affine: return A * m.nodes[i] + b;
            case Kind::Nodal: return values.row(i).transpose();
        }
        return Vec3::Zero();
    }
};

struct SurfaceForce {
    std::string region;
    Vec3 g = Vec3::Zero();
};

struct LoadSpec {
    VolumeForce f;
    std::vector<SurfaceForce> g;

    static LoadSpec gravity(double weight = 1.0) { return {VolumeForce::constant(-weight * Vec3::UnitZ()), {}}; }
    LoadSpec scaled(double s) const {
        LoadSpec out = *this;
        out.f.c *= s;
        out.f.A *= s;
        out.f.b *= s;
        out.f.values *= s;
        for (auto& sf : out.g) sf.g *= s;
        return out;
    }
};

// One load directive: `f constant cx cy cz`, `f affine <9 matrix entries row-major> <3 offset>`,
// `g region=<name> constant cx cy cz`. Returns false for lines that are not load directives.
inline bool parse_load_directive(const std::string& line, LoadSpec& load) {
    std::istringstream ss(line);
    std::string key, kind;
    if (!(ss >> key) || (key != "f" && key != "g")) return false;
    auto read = [&](int n) {
        std::vector<double> v(n);
        for (double& x : v)
            if (!(ss >> x)) throw Error("load directive: expected " + std::to_string(n) + " numbers in '" + line + "'");
        std::string extra;
        if (ss >> extra) throw Error("load directive: trailing text in '" + line + "'");
        return v;
    };
    if (key == "f") {
        ss >> kind;
        if (kind == "constant") {
            const auto v = read(3);
            load.f = VolumeForce::constant(Vec3(v[0], v[1], v[2]));
        } else if (kind == "affine") {
            const auto v = read(12);
            Mat3 A;
            for (int i = 0; i < 9; ++i) A(i / 3, i % 3) = v[i];
            load.f = VolumeForce::affine(A, Vec3(v[9], v[10], v[11]));
        } else {
            throw Error("load directive: unknown volume force kind '" + kind + "'");
        }
        return true;
    }
    std::string region;
    ss >> region >> kind;
    if (region.rfind("region=", 0) != 0) throw Error("load directive: expected region=<name> in '" + line + "'");
    region = region.substr(7);
    named_region(region);
    if (kind != "constant") throw Error("load directive: unknown traction kind '" + kind + "'");
    const auto v = read(3);
    load.g.push_back({region, Vec3(v[0], v[1], v[2])});
    return true;
}

inline LoadSpec read_load(std::istream& in) {
    LoadSpec load;
    std::string line;
    while (std::getline(in, line)) {
        const auto h = line.find('#');
        if (h != std::string::npos) line.erase(h);
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        if (!parse_load_directive(line, load)) throw Error("load file: unknown directive '" + line + "'");
    }
    return load;
}

inline LoadSpec read_load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open load file " + path);
    return read_load(f);
}

// L(v) = ell . v for nodal P1 fields v. Volume part uses the P1 mass matrix with f
// interpolated at the nodes, so constant and affine forces are integrated exactly.
inline Eigen::VectorXd load_vector(const LoadSpec& load, const Mesh& m) {
    Eigen::VectorXd ell = Eigen::VectorXd::Zero(3 * m.num_nodes());
    if (load.f.kind == VolumeForce::Kind::Nodal && load.f.values.rows() != m.num_nodes())
        throw Error("tabulated force size mismatch");
    for (int e = 0; e < m.num_elements(); ++e) {
        const auto& t = m.tets[e];
        const double V = m.element_volumes[e];
        Vec3 fa[4], sum = Vec3::Zero();
        for (int a = 0; a < 4; ++a) {
            fa[a] = load.f.at_node(m, t[a]);
            if (!fa[a].allFinite()) throw Error("force descriptor not finite");
            sum += fa[a];
        }
        for (int a = 0; a < 4; ++a) ell.segment<3>(3 * t[a]) += V / 20.0 * (sum + fa[a]);
    }
    for (const auto& sf : load.g) {
        for (int i : region_triangles(m, named_region(sf.region))) {
            const auto& t = m.boundary_tris[i];
            for (int a : t.v) ell.segment<3>(3 * a) += t.area_vec.norm() / 3.0 * sf.g;
        }
    }
    return ell;
}

inline double eval_load(const LoadSpec& load, const NodalField& v, const Mesh& m) {
    if (v.rows() != m.num_nodes()) throw Error("field size mismatch");
    return load_vector(load, m).dot(flat(v));
}

inline double eval_load_affine(const LoadSpec& load, const Mat3& A, const Vec3& b, const Mesh& m) {
    return eval_load(load, interpolate(m, [&](const Vec3& x) { return Vec3(A * x + b); }), m);
}

// Resultant F_i = L(e_i) and moments M_ij = L(x_j e_i); every affine evaluation reduces to these.
struct LoadMoments {
    Vec3 F = Vec3::Zero();
    Mat3 M = Mat3::Zero();

    double affine(const Mat3& A, const Vec3& b) const { return (A.array() * M.array()).sum() + b.dot(F); }
};

inline LoadMoments load_moments(const Eigen::VectorXd& ell, const Mesh& m) {
    LoadMoments lm;
    for (int i = 0; i < m.num_nodes(); ++i) {
        const Vec3 li = ell.segment<3>(3 * i);
        lm.F += li;
        lm.M += li * m.nodes[i].transpose();
    }
    return lm;
}

inline LoadMoments load_moments(const LoadSpec& load, const Mesh& m) { return load_moments(load_vector(load, m), m); }

// T . a = L(a ^ (x - pivot)) for every a
inline std::pair<Vec3, Vec3> resultant_and_torque(const LoadSpec& load, const Mesh& m, const Vec3& pivot) {
    LoadMoments lm = load_moments(load, m);
    Vec3 T;
    for (int k = 0; k < 3; ++k) {
        Mat3 A = skew(Vec3::Unit(k));
        T[k] = lm.affine(A, -A * pivot);
    }
    return {lm.F, T};
}

inline double phi(const LoadMoments& lm, const ObstacleSet& E, const Mat3& R) {
    return lm.affine(R - Mat3::Identity(), Vec3::Zero()) - lm.F.z() * min_rotated_height(E, R);
}

inline double phi(const LoadSpec& load, const ObstacleSet& E, const Rotation& R, const Mesh& m) {
    return phi(load_moments(load, m), E, R.R);
}

// L((R x - x)_alpha e_alpha)
inline double shear_functional(const LoadMoments& lm, const Mat3& R) {
    Mat3 A = R - Mat3::Identity();
    A.row(2).setZero();
    return lm.affine(A, Vec3::Zero());
}

// ---------------------------------------------------------------- admissibility

enum class KernelClass { IdentityOnly, RotationsAboutE3 };

inline const char* to_string(KernelClass k) {
    return k == KernelClass::IdentityOnly ? "IdentityOnly" : "RotationsAboutE3";
}

struct LoadCenter {
    Vec3 x = Vec3::Zero();
    double residual = 0.0;
    bool interior = false;
};

struct AdmissibilityReport {
    double L_e1 = 0, L_e2 = 0, L_e3 = 0;
    double torque_about_e3 = 0;     // L(e3 ^ x)
    double planar_compression = 0;  // L(e3 ^ (e3 ^ x))
    double worst_phi = 0;
    Rotation worst_phi_rotation;
    double worst_shear = 0;
    Rotation worst_shear_rotation;
    double worst_L0 = 0;               // direct sampling of L((R-I)x + c), c in C_R
    double shear_identity_residual = 0;  // max_a |L((a^x)_alpha e_alpha)|
    double shear_quadratic_max = 0;      // max_a L((a^(a^x))_alpha e_alpha)
    double L_x3e1 = 0, L_x3e2 = 0;
    std::optional<KernelClass> kernel_class;
    std::optional<LoadCenter> load_center;
    std::uint64_t seed = 0;
    int budget = 0;
    std::vector<std::string> violations;

    bool admissible() const { return violations.empty(); }
};

namespace detail {

// Pattern search over left perturbations exp(skew(w)) R; returns the local maximum.
template <class F>
std::pair<double, Mat3> ascend_rotation(const F& f, Mat3 R, double val) {
    double step = 0.2;
    while (step > 1e-11) {
        bool moved = false;
        for (int k = 0; k < 3; ++k)
            for (double s : {step, -step}) {
                Mat3 Rn = Eigen::AngleAxisd(s, Vec3::Unit(k)).toRotationMatrix() * R;
                double v = f(Rn);
                if (v > val + 1e-14 * (1.0 + std::abs(val))) {  // ulp-level gains creep along flat ridges
                    val = v;
                    R = Rn;
                    moved = true;
                }
            }
        if (!moved) step *= 0.5;
    }
    return {val, R};
}

template <class F>
std::pair<double, Mat3> maximize_over_so3(const F& f, int budget, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::pair<double, Mat3>> samples;
    samples.reserve(budget + 1);
    samples.emplace_back(f(Mat3::Identity()), Mat3::Identity());
    for (int s = 0; s < budget; ++s) {
        Mat3 R = random_rotation(rng);
        samples.emplace_back(f(R), R);
    }
    std::stable_sort(samples.begin(), samples.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    auto best = samples.front();
    for (size_t i = 0; i < std::min<size_t>(10, samples.size()); ++i) {
        auto r = ascend_rotation(f, samples[i].second, samples[i].first);
        if (r.first > best.first) best = r;
    }
    return best;
}

inline std::vector<Vec3> sphere_points(int n) {
    std::vector<Vec3> pts;
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
        double z = 1.0 - 2.0 * (i + 0.5) / n, r = std::sqrt(1.0 - z * z);
        pts.emplace_back(r * std::cos(golden * i), r * std::sin(golden * i), z);
    }
    return pts;
}

}  // namespace detail

inline constexpr double kAdmissTol = 1e-9;

inline std::optional<LoadCenter> find_load_center_moments(const LoadMoments& lm, const ObstacleSet& E) {
    if (std::abs(lm.F.z()) < 1e-14) return std::nullopt;
    Vec3 T0;
    for (int k = 0; k < 3; ++k) T0[k] = lm.affine(skew(Vec3::Unit(k)), Vec3::Zero());
    // T(0) = x_L ^ F with x_L3 = 0: first two rows give x_L directly
    LoadCenter c;
    c.x = Vec3(-T0.y() / lm.F.z(), T0.x() / lm.F.z(), 0.0);
    c.residual = (T0 - c.x.cross(lm.F)).norm();
    c.interior = in_hull_interior(E.hull_vertices_2d, c.x.head<2>());
    return c;
}

inline LoadCenter find_load_center(const LoadSpec& load, const ObstacleSet& E, const Mesh& m) {
    auto c = find_load_center_moments(load_moments(load, m), E);
    if (!c) throw Error("load center undetermined");
    return *c;
}

// Phi on a theta grid about e3; the sign test on L(x1 e1 + x2 e2) is the closed-form cross-check.
struct KernelDecision {
    KernelClass grid = KernelClass::IdentityOnly;
    KernelClass closed_form = KernelClass::IdentityOnly;
    double grid_max_abs_phi = 0;
    double planar_moment = 0;  // L(x1 e1 + x2 e2)
    bool agree() const { return grid == closed_form; }
};

inline KernelDecision decide_kernel(const LoadMoments& lm, const ObstacleSet& E, int grid = 3600) {
    if (!(lm.F.z() < 0)) throw Error("kernel classification needs L(e3) < 0");
    KernelDecision d;
    for (int k = 1; k < grid; ++k) {
        double th = 2.0 * M_PI * k / grid;
        d.grid_max_abs_phi = std::max(d.grid_max_abs_phi, std::abs(phi(lm, E, Rotation::about_e3(th).R)));
    }
    d.grid = d.grid_max_abs_phi <= kAdmissTol ? KernelClass::RotationsAboutE3 : KernelClass::IdentityOnly;
    d.planar_moment = lm.M(0, 0) + lm.M(1, 1);
    d.closed_form = std::abs(d.planar_moment) <= kAdmissTol ? KernelClass::RotationsAboutE3 : KernelClass::IdentityOnly;
    return d;
}

inline KernelClass classify_kernel(const LoadSpec& load, const ObstacleSet& E, const Mesh& m) {
    return decide_kernel(load_moments(load, m), E).grid;
}

inline AdmissibilityReport verify_global_admissibility(const LoadSpec& load, const ObstacleSet& E, const Mesh& m,
                                                       int budget = 4000, std::uint64_t seed = 20240611) {
    if (budget < 1000) throw Error("admissibility budget must be >= 1000");
    const LoadMoments lm = load_moments(load, m);
    AdmissibilityReport r;
    r.seed = seed;
    r.budget = budget;
    r.L_e1 = lm.F.x();
    r.L_e2 = lm.F.y();
    r.L_e3 = lm.F.z();
    const Mat3 S3 = skew(Vec3::UnitZ());
    r.torque_about_e3 = lm.affine(S3, Vec3::Zero());
    r.planar_compression = lm.affine(S3 * S3, Vec3::Zero());
    r.L_x3e1 = lm.M(0, 2);
    r.L_x3e2 = lm.M(1, 2);

    auto [wp, Rp] = detail::maximize_over_so3([&](const Mat3& R) { return phi(lm, E, R); }, budget, seed);
    r.worst_phi = wp;
    r.worst_phi_rotation = {Rp};
    auto [ws, Rs] = detail::maximize_over_so3([&](const Mat3& R) { return shear_functional(lm, R); }, budget, seed + 1);
    r.worst_shear = ws;
    r.worst_shear_rotation = {Rs};

    // (L0) sampled on its own terms: c ranges over C_R, horizontal part unrestricted
    std::mt19937_64 rng(seed + 2);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    r.worst_L0 = 0.0;
    for (int s = 0; s < budget; ++s) {
        Mat3 R = s == 0 ? Mat3::Identity() : random_rotation(rng);
        const double c3 = -min_rotated_height(E, R);
        r.worst_L0 = std::max(r.worst_L0, lm.affine(R - Mat3::Identity(), Vec3(0, 0, c3)));
        Vec3 c(U(rng), U(rng), c3 + 0.5 * (1.0 + U(rng)));
        r.worst_L0 = std::max(r.worst_L0, lm.affine(R - Mat3::Identity(), c));
    }

    for (const Vec3& a : detail::sphere_points(200)) {
        Mat3 A = skew(a);
        A.row(2).setZero();
        r.shear_identity_residual = std::max(r.shear_identity_residual, std::abs(lm.affine(A, Vec3::Zero())));
        Mat3 A2 = skew(a) * skew(a);
        A2.row(2).setZero();
        r.shear_quadratic_max = std::max(r.shear_quadratic_max, lm.affine(A2, Vec3::Zero()));
    }

    auto need = [&](bool ok, const std::string& what) {
        if (!ok) r.violations.push_back(what);
    };
    const double t = kAdmissTol;
    need(std::abs(r.L_e1) <= t, "L(e1) = 0 violated");
    need(std::abs(r.L_e2) <= t, "L(e2) = 0 violated");
    need(r.L_e3 <= t, "L(e3) <= 0 violated");
    need(std::abs(r.torque_about_e3) <= t, "L(e3 ^ x) = 0 violated");
    need(r.planar_compression <= t, "L(e3 ^ (e3 ^ x)) <= 0 violated");
    need(r.worst_phi <= t, "Phi(R) <= 0 violated");
    need(r.worst_shear <= t, "shear condition violated");
    need(r.shear_identity_residual <= t, "L((a ^ x)_alpha e_alpha) = 0 violated");
    need(r.shear_quadratic_max <= t, "L((a ^ (a ^ x))_alpha e_alpha) <= 0 violated");
    need(std::abs(r.L_x3e1) <= t && std::abs(r.L_x3e2) <= t, "L(x3 e_alpha) = 0 violated");
    if ((r.worst_L0 <= t) != (r.worst_phi <= t && std::abs(r.L_e1) <= t && std::abs(r.L_e2) <= t && r.L_e3 <= t))
        r.violations.push_back("L0 and L1 disagree");

    if (r.admissible() && r.L_e3 < 0) {
        r.kernel_class = decide_kernel(lm, E).grid;
        r.load_center = find_load_center_moments(lm, E);
    }
    return r;
}

// max |L(v)| / |v|_{H^1} over affine and quadratic probes; diagnostics only.
inline double norm_estimate(const LoadSpec& load, const Mesh& m) {
    const Eigen::VectorXd ell = load_vector(load, m);
    double best = 0.0;
    auto h1 = [&](const NodalField& v) {
        double s = 0.0;
        for (int e = 0; e < m.num_elements(); ++e) {
            const auto& t = m.tets[e];
            Vec3 sum = Vec3::Zero();
            double sq = 0.0;
            for (int a = 0; a < 4; ++a) {
                sum += v.row(t[a]).transpose();
                sq += v.row(t[a]).squaredNorm();
            }
            s += m.element_volumes[e] / 20.0 * (sum.squaredNorm() + sq);
            s += m.element_volumes[e] * element_gradient(m, v, e).squaredNorm();
        }
        return std::sqrt(s);
    };
    for (int i = 0; i < 3; ++i) {
        std::vector<std::function<double(const Vec3&)>> shapes{[](const Vec3&) { return 1.0; }};
        for (int j = 0; j < 3; ++j) {
            shapes.push_back([j](const Vec3& x) { return x[j]; });
            for (int k = j; k < 3; ++k) shapes.push_back([j, k](const Vec3& x) { return x[j] * x[k]; });
        }
        for (const auto& s : shapes) {
            NodalField v = interpolate(m, [&](const Vec3& x) { return Vec3(s(x) * Vec3::Unit(i)); });
            double n = h1(v);
            if (n > 0) best = std::max(best, std::abs(ell.dot(flat(v))) / n);
        }
    }
    return best;
}

}  // namespace siglab
