#pragma once

#include "siglab/loads.hpp"
#include "siglab/material.hpp"

#include <cstdio>

namespace siglab {

struct DeformationField {
    NodalField y;
    std::vector<Mat3> grad;
    std::vector<double> det;
};

struct DisplacementField {
    NodalField u;
    std::vector<Mat3> grad;
    std::vector<Mat3> strain;
    std::vector<double> div;
};

inline DeformationField make_deformation(const Mesh& m, const NodalField& y) {
    DeformationField d{y, element_gradients(m, y), {}};
    d.det.reserve(d.grad.size());
    for (const auto& F : d.grad) d.det.push_back(F.determinant());
    return d;
}

inline DisplacementField make_displacement(const Mesh& m, const NodalField& u) {
    DisplacementField d{u, element_gradients(m, u), {}, {}};
    for (const auto& H : d.grad) {
        d.strain.push_back(0.5 * (H + H.transpose()));
        d.div.push_back(H.trace());
    }
    return d;
}

struct OptimalRotation {
    Rotation R;
    bool degenerate = false;  // sigma_2 ~ sigma_3 ~ 0: minimiser not unique
};

inline Mat3 polar_rotation(const Mat3& A, bool* degenerate = nullptr) {
    Eigen::JacobiSVD<Mat3> svd(A, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3 U = svd.matrixU(), V = svd.matrixV();
    Mat3 D = Mat3::Identity();
    if ((U * V.transpose()).determinant() < 0) D(2, 2) = -1;
    if (degenerate) {
        const Vec3 s = svd.singularValues();
        const double scale = std::max(s[0], 1e-300);
        *degenerate = s[1] <= 1e-12 * scale && s[2] <= 1e-12 * scale;
    }
    return U * D * V.transpose();
}

// argmin over SO(3) of int |grad y - R|^2, i.e. argmax tr(R^T A) with A = int grad y
inline OptimalRotation optimal_rotation(const DeformationField& y, const Mesh& m) {
    Mat3 A = Mat3::Zero();
    for (int e = 0; e < m.num_elements(); ++e) A += m.element_volumes[e] * y.grad[e];
    OptimalRotation r;
    r.R.R = polar_rotation(A, &r.degenerate);
    return r;
}

inline double rotation_misfit(const DeformationField& y, const Mesh& m, const Mat3& R) {
    double s = 0.0;
    for (int e = 0; e < m.num_elements(); ++e) s += m.element_volumes[e] * (y.grad[e] - R).squaredNorm();
    return s;
}

inline Vec3 translations(const DeformationField& y, const Rotation& R, const ObstacleSet& E, const Mesh& m) {
    Vec3 c = Vec3::Zero();
    for (int a = 0; a < 2; ++a) {
        Eigen::VectorXd w(m.num_nodes());
        for (int i = 0; i < m.num_nodes(); ++i) w[i] = y.y(i, a) - (R.R * m.nodes[i])[a];
        c[a] = integrate_volume(m, w, Support::Node) / m.volume();
    }
    c[2] = -min_rotated_height(E, R.R);
    return c;
}

// u = h^-1 R^T { (y - c - R x)_alpha e_alpha + (y_3 - x_3) e_3 }
inline DisplacementField extract_displacement(const DeformationField& y, const Rotation& R, const Vec3& c, double h,
                                              const Mesh& m) {
    if (!(h > 0)) throw Error("h must be positive");
    NodalField u(m.num_nodes(), 3);
    for (int i = 0; i < m.num_nodes(); ++i) {
        const Vec3 x = m.nodes[i];
        const Vec3 yi = y.y.row(i).transpose();
        Vec3 w = yi - c - R.R * x;
        w[2] = yi[2] - x[2];
        u.row(i) = (R.R.transpose() * w / h).transpose();
    }
    return make_displacement(m, u);
}

// Inverse of extract_displacement; used to check the round trip.
inline NodalField rebuild_deformation(const DisplacementField& u, const Rotation& R, const Vec3& c, double h,
                                      const Mesh& m) {
    NodalField y(m.num_nodes(), 3);
    for (int i = 0; i < m.num_nodes(); ++i) {
        const Vec3 x = m.nodes[i];
        const Vec3 w = h * R.R * u.u.row(i).transpose();
        Vec3 yi = w + c + R.R * x;
        yi[2] = w[2] + x[2];
        y.row(i) = yi.transpose();
    }
    return y;
}

// max over elements of |det(I + hH) - expansion|
inline double determinant_expansion_check(const DisplacementField& u, double h) {
    double worst = 0.0;
    for (const Mat3& H : u.grad) {
        const double tr = H.trace();
        const double expansion = 1.0 + h * tr - 0.5 * h * h * ((H * H).trace() - tr * tr) + h * h * h * H.determinant();
        worst = std::max(worst, std::abs((Mat3::Identity() + h * H).determinant() - expansion));
    }
    return worst;
}

// `field N` then N lines `ux uy uz`, index-aligned with the mesh.
inline NodalField read_field(std::istream& in, int expected_nodes = -1) {
    std::string line, key;
    auto next = [&]() {
        while (std::getline(in, line)) {
            const auto h = line.find('#');
            if (h != std::string::npos) line.erase(h);
            if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
        }
        return false;
    };
    long n = -1;
    if (!next() || !(std::istringstream(line) >> key >> n) || key != "field" || n < 0)
        throw Error("field file: expected 'field N'");
    if (expected_nodes >= 0 && n != expected_nodes) throw Error("field file: node count does not match the mesh");
    NodalField u(n, 3);
    for (long i = 0; i < n; ++i) {
        if (!next()) throw Error("field file: truncated");
        std::istringstream ss(line);
        if (!(ss >> u(i, 0) >> u(i, 1) >> u(i, 2))) throw Error("field file: bad line");
    }
    return u;
}

inline NodalField read_field_file(const std::string& path, int expected_nodes = -1) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open field file " + path);
    return read_field(f, expected_nodes);
}

inline void write_field(std::ostream& out, const NodalField& u) {
    out << "field " << u.rows() << "\n";
    char buf[96];
    for (int i = 0; i < u.rows(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", u(i, 0), u(i, 1), u(i, 2));
        out << buf;
    }
}

inline double l2_norm(const Mesh& m, const NodalField& u) {
    double s = 0.0;
    for (int e = 0; e < m.num_elements(); ++e) {
        const auto& t = m.tets[e];
        Vec3 sum = Vec3::Zero();
        double sq = 0.0;
        for (int a = 0; a < 4; ++a) {
            sum += u.row(t[a]).transpose();
            sq += u.row(t[a]).squaredNorm();
        }
        s += m.element_volumes[e] / 20.0 * (sum.squaredNorm() + sq);
    }
    return std::sqrt(s);
}

inline double h1_norm(const Mesh& m, const NodalField& u) {
    double s = l2_norm(m, u);
    s *= s;
    for (int e = 0; e < m.num_elements(); ++e) s += m.element_volumes[e] * element_gradient(m, u, e).squaredNorm();
    return std::sqrt(s);
}

}  // namespace siglab
