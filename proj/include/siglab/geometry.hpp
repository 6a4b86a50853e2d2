#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace siglab {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using GradMap = Eigen::Matrix<double, 3, 4>;
// Nodal vector field, one row per node. Row-major so the flat view is (x0,y0,z0,x1,...).
using NodalField = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Eigen::Map<Eigen::VectorXd> flat(NodalField& u) { return {u.data(), u.size()}; }
inline Eigen::Map<const Eigen::VectorXd> flat(const NodalField& u) { return {u.data(), u.size()}; }

inline NodalField unflat(const Eigen::VectorXd& v) {
    NodalField u(v.size() / 3, 3);
    flat(u) = v;
    return u;
}

struct BoundaryTri {
    std::array<int, 3> v;
    Vec3 area_vec;  // outward, |area_vec| = area
};

struct Mesh {
    std::vector<Vec3> nodes;
    std::vector<std::array<int, 4>> tets;
    std::vector<BoundaryTri> boundary_tris;
    std::vector<double> element_volumes;
    std::vector<GradMap> element_gradient_maps;
    std::vector<bool> on_boundary;
    // Set for built-in boxes; used by point location and named regions.
    bool is_box = false;
    Vec3 box_lo = Vec3::Zero(), box_hi = Vec3::Zero();
    std::array<int, 3> box_cells{0, 0, 0};

    int num_nodes() const { return static_cast<int>(nodes.size()); }
    int num_elements() const { return static_cast<int>(tets.size()); }
    double volume() const {
        return std::accumulate(element_volumes.begin(), element_volumes.end(), 0.0);
    }
    Vec3 centroid(int e) const {
        const auto& t = tets[e];
        return 0.25 * (nodes[t[0]] + nodes[t[1]] + nodes[t[2]] + nodes[t[3]]);
    }
};

namespace detail {

inline Eigen::Matrix4d vertex_matrix(const Mesh& m, const std::array<int, 4>& t) {
    Eigen::Matrix4d M;
    for (int a = 0; a < 4; ++a) {
        M(a, 0) = 1.0;
        M.block<1, 3>(a, 1) = m.nodes[t[a]].transpose();
    }
    return M;
}

inline double signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
    return (b - a).cross(c - a).dot(d - a) / 6.0;
}

}  // namespace detail

// Fills volumes, gradient maps and boundary triangles from nodes + tets.
inline void finalize_mesh(Mesh& m) {
    const int ne = m.num_elements();
    m.element_volumes.resize(ne);
    m.element_gradient_maps.resize(ne);
    for (int e = 0; e < ne; ++e) {
        const auto& t = m.tets[e];
        for (int a : t)
            if (a < 0 || a >= m.num_nodes()) throw Error("tet references missing node");
        double vol = detail::signed_volume(m.nodes[t[0]], m.nodes[t[1]], m.nodes[t[2]], m.nodes[t[3]]);
        if (!(vol > 0.0)) throw Error("tet " + std::to_string(e) + " has nonpositive volume");
        Eigen::Matrix4d Minv = detail::vertex_matrix(m, t).inverse();
        m.element_volumes[e] = vol;
        m.element_gradient_maps[e] = Minv.block<3, 4>(1, 0);
    }

    // faces seen once are boundary faces
    std::map<std::array<int, 3>, std::pair<int, int>> faces;  // sorted face -> (count, tet*4+opposite)
    for (int e = 0; e < ne; ++e) {
        for (int k = 0; k < 4; ++k) {
            std::array<int, 3> f;
            int j = 0;
            for (int a = 0; a < 4; ++a)
                if (a != k) f[j++] = m.tets[e][a];
            std::sort(f.begin(), f.end());
            auto& slot = faces[f];
            slot.first++;
            slot.second = 4 * e + k;
        }
    }
    m.boundary_tris.clear();
    m.on_boundary.assign(m.num_nodes(), false);
    for (const auto& [f, info] : faces) {
        if (info.first > 2) throw Error("non-manifold face");
        if (info.first != 1) continue;
        int e = info.second / 4, k = info.second % 4;
        const Vec3 opp = m.nodes[m.tets[e][k]];
        BoundaryTri bt{f, Vec3::Zero()};
        Vec3 n = 0.5 * (m.nodes[f[1]] - m.nodes[f[0]]).cross(m.nodes[f[2]] - m.nodes[f[0]]);
        if (n.dot(m.nodes[f[0]] - opp) < 0) {
            std::swap(bt.v[1], bt.v[2]);
            n = -n;
        }
        bt.area_vec = n;
        m.boundary_tris.push_back(bt);
        for (int a : f) m.on_boundary[a] = true;
    }
}

// Kuhn subdivision of [lo,hi] into nx*ny*nz boxes of 6 tets each.
inline Mesh build_box_mesh(const Vec3& lo, const Vec3& hi, int nx, int ny, int nz) {
    if (nx < 1 || ny < 1 || nz < 1) throw Error("subdivision count must be >= 1");
    Mesh m;
    auto id = [&](int i, int j, int k) { return i + (nx + 1) * (j + (ny + 1) * k); };
    for (int k = 0; k <= nz; ++k)
        for (int j = 0; j <= ny; ++j)
            for (int i = 0; i <= nx; ++i)
                m.nodes.emplace_back(lo.x() + (hi.x() - lo.x()) * i / nx,
                                     lo.y() + (hi.y() - lo.y()) * j / ny,
                                     lo.z() + (hi.z() - lo.z()) * k / nz);
    std::array<int, 3> perm{0, 1, 2};
    std::vector<std::array<int, 3>> perms;
    do perms.push_back(perm);
    while (std::next_permutation(perm.begin(), perm.end()));

    for (int k = 0; k < nz; ++k)
        for (int j = 0; j < ny; ++j)
            for (int i = 0; i < nx; ++i)
                for (const auto& p : perms) {
                    std::array<int, 3> c{i, j, k};
                    std::array<int, 4> t;
                    t[0] = id(c[0], c[1], c[2]);
                    for (int s = 0; s < 3; ++s) {
                        c[p[s]]++;
                        t[s + 1] = id(c[0], c[1], c[2]);
                    }
                    const auto& n = m.nodes;
                    if (detail::signed_volume(n[t[0]], n[t[1]], n[t[2]], n[t[3]]) < 0) std::swap(t[2], t[3]);
                    m.tets.push_back(t);
                }
    finalize_mesh(m);
    m.is_box = true;
    m.box_lo = lo;
    m.box_hi = hi;
    m.box_cells = {nx, ny, nz};
    return m;
}

inline Mesh build_unit_cube_mesh(int n) {
    if (n < 1) throw Error("subdivision count must be >= 1");
    return build_box_mesh(Vec3::Zero(), Vec3::Ones(), n, n, n);
}

inline Mesh translated(const Mesh& m, const Vec3& d) {
    Mesh out = m;
    for (auto& x : out.nodes) x += d;
    out.box_lo += d;
    out.box_hi += d;
    return out;
}

inline Mesh read_mesh(std::istream& in) {
    Mesh m;
    std::string line;
    auto next = [&](std::string& l) {
        while (std::getline(in, l)) {
            auto h = l.find('#');
            if (h != std::string::npos) l.erase(h);
            if (l.find_first_not_of(" \t\r") != std::string::npos) return true;
        }
        return false;
    };
    auto header = [&](const char* key) {
        if (!next(line)) throw Error(std::string("mesh file: missing '") + key + "'");
        std::istringstream ss(line);
        std::string k;
        long cnt = -1;
        ss >> k >> cnt;
        if (k != key || cnt < 0) throw Error(std::string("mesh file: expected '") + key + " N'");
        return cnt;
    };
    long nn = header("nodes");
    for (long i = 0; i < nn; ++i) {
        if (!next(line)) throw Error("mesh file: truncated node list");
        std::istringstream ss(line);
        Vec3 x;
        if (!(ss >> x[0] >> x[1] >> x[2])) throw Error("mesh file: bad node line");
        m.nodes.push_back(x);
    }
    long nt = header("tets");
    for (long i = 0; i < nt; ++i) {
        if (!next(line)) throw Error("mesh file: truncated tet list");
        std::istringstream ss(line);
        std::array<int, 4> t;
        if (!(ss >> t[0] >> t[1] >> t[2] >> t[3])) throw Error("mesh file: bad tet line");
        m.tets.push_back(t);
    }
    finalize_mesh(m);
    return m;
}

inline Mesh read_mesh_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("cannot open mesh file " + path);
    return read_mesh(f);
}

// Number of connected components of the boundary surface (shared vertices).
inline int boundary_components(const Mesh& m) {
    std::vector<int> parent(m.num_nodes());
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int a) { return parent[a] == a ? a : parent[a] = find(parent[a]); };
    for (const auto& t : m.boundary_tris) {
        parent[find(t.v[1])] = find(t.v[0]);
        parent[find(t.v[2])] = find(t.v[0]);
    }
    int count = 0;
    for (int i = 0; i < m.num_nodes(); ++i)
        if (m.on_boundary[i] && find(i) == i) ++count;
    return count;
}

// ---------------------------------------------------------------- obstacle

struct ObstacleSet {
    std::vector<int> node_indices;
    std::vector<Eigen::Vector2d> hull_vertices_2d;  // counter-clockwise
};

// Andrew monotone chain; collinear points dropped.
inline std::vector<Eigen::Vector2d> convex_hull_2d(std::vector<Eigen::Vector2d> p) {
    std::sort(p.begin(), p.end(), [](const auto& a, const auto& b) {
        return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    p.erase(std::unique(p.begin(), p.end()), p.end());
    if (p.size() < 3) return p;
    auto cross = [](const Eigen::Vector2d& o, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
        return (a - o).x() * (b - o).y() - (a - o).y() * (b - o).x();
    };
    std::vector<Eigen::Vector2d> h(2 * p.size());
    size_t k = 0;
    for (size_t i = 0; i < p.size(); ++i) {
        while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 1e-14) --k;
        h[k++] = p[i];
    }
    for (size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
        while (k >= t && cross(h[k - 2], h[k - 1], p[i - 1]) <= 1e-14) --k;
        h[k++] = p[i - 1];
    }
    h.resize(k - 1);
    return h;
}

// Strictly inside (relative interior for a 2-D hull, open segment for a degenerate one).
inline bool in_hull_interior(const std::vector<Eigen::Vector2d>& hull, const Eigen::Vector2d& q, double tol = 1e-12) {
    if (hull.size() < 3) {
        if (hull.size() == 2) {
            Eigen::Vector2d d = hull[1] - hull[0], r = q - hull[0];
            double t = r.dot(d) / d.squaredNorm();
            return std::abs(d.x() * r.y() - d.y() * r.x()) <= tol && t > tol && t < 1 - tol;
        }
        return hull.size() == 1 && (q - hull[0]).norm() <= tol;
    }
    for (size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        double c = (b - a).x() * (q - a).y() - (b - a).y() * (q - a).x();
        if (c <= tol) return false;
    }
    return true;
}

inline bool in_hull(const std::vector<Eigen::Vector2d>& hull, const Eigen::Vector2d& q, double tol = 1e-12) {
    if (hull.size() < 3) return in_hull_interior(hull, q, tol);
    for (size_t i = 0; i < hull.size(); ++i) {
        const auto& a = hull[i];
        const auto& b = hull[(i + 1) % hull.size()];
        if ((b - a).x() * (q - a).y() - (b - a).y() * (q - a).x() < -tol) return false;
    }
    return true;
}

inline ObstacleSet extract_obstacle(const Mesh& m) {
    ObstacleSet E;
    std::vector<Eigen::Vector2d> pts;
    for (int i = 0; i < m.num_nodes(); ++i)
        if (m.on_boundary[i] && std::abs(m.nodes[i].z()) <= 1e-12) {
            E.node_indices.push_back(i);
            pts.emplace_back(m.nodes[i].x(), m.nodes[i].y());
        }
    if (E.node_indices.empty()) throw Error("obstacle hypothesis violated");
    E.hull_vertices_2d = convex_hull_2d(pts);
    return E;
}

// min over E of (R x)_3, attained at a hull vertex since the map is affine.
inline double min_rotated_height(const ObstacleSet& E, const Mat3& R) {
    if (E.hull_vertices_2d.empty()) throw Error("empty obstacle");
    double best = INFINITY;
    for (const auto& p : E.hull_vertices_2d) best = std::min(best, R(2, 0) * p.x() + R(2, 1) * p.y());
    return best;
}

// ---------------------------------------------------------------- quadrature

enum class Support { Element, Node };

// Centroid rule per tet: exact for P1 nodal fields and element constants.
inline double integrate_volume(const Mesh& m, const Eigen::VectorXd& values, Support s) {
    double sum = 0.0;
    if (s == Support::Element) {
        if (values.size() != m.num_elements()) throw Error("integrand size mismatch");
        for (int e = 0; e < m.num_elements(); ++e) sum += m.element_volumes[e] * values[e];
    } else {
        if (values.size() != m.num_nodes()) throw Error("integrand size mismatch");
        for (int e = 0; e < m.num_elements(); ++e) {
            const auto& t = m.tets[e];
            sum += m.element_volumes[e] * 0.25 * (values[t[0]] + values[t[1]] + values[t[2]] + values[t[3]]);
        }
    }
    return sum;
}

inline double integrate_volume(const Mesh& m, const std::function<double(const Vec3&)>& f) {
    Eigen::VectorXd v(m.num_nodes());
    for (int i = 0; i < m.num_nodes(); ++i) v[i] = f(m.nodes[i]);
    return integrate_volume(m, v, Support::Node);
}

// Boundary selector over triangles (centroid, unit outward normal).
struct Region {
    std::string name;
    std::function<bool(const Vec3&, const Vec3&)> contains;
};

// all | bottom | top | x0 | x1 | y0 | y1 | z0 | z1 (faces by outward normal)
inline Region named_region(const std::string& name) {
    auto by_normal = [name](int axis, double sign) {
        return Region{name, [axis, sign](const Vec3&, const Vec3& n) { return n[axis] * sign > 1.0 - 1e-9; }};
    };
    if (name == "all") return {name, [](const Vec3&, const Vec3&) { return true; }};
    if (name == "bottom" || name == "z0") return by_normal(2, -1);
    if (name == "top" || name == "z1") return by_normal(2, 1);
    if (name == "x0") return by_normal(0, -1);
    if (name == "x1") return by_normal(0, 1);
    if (name == "y0") return by_normal(1, -1);
    if (name == "y1") return by_normal(1, 1);
    throw Error("unknown boundary region '" + name + "'");
}

inline std::vector<int> region_triangles(const Mesh& m, const Region& r) {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(m.boundary_tris.size()); ++i) {
        const auto& t = m.boundary_tris[i];
        Vec3 c = (m.nodes[t.v[0]] + m.nodes[t.v[1]] + m.nodes[t.v[2]]) / 3.0;
        if (r.contains(c, t.area_vec.normalized())) out.push_back(i);
    }
    if (out.empty()) throw Error("region '" + r.name + "' is not on the boundary");
    return out;
}

inline double integrate_surface(const Mesh& m, const Eigen::VectorXd& nodal, const Region& r) {
    if (nodal.size() != m.num_nodes()) throw Error("integrand size mismatch");
    double sum = 0.0;
    for (int i : region_triangles(m, r)) {
        const auto& t = m.boundary_tris[i];
        sum += t.area_vec.norm() * (nodal[t.v[0]] + nodal[t.v[1]] + nodal[t.v[2]]) / 3.0;
    }
    return sum;
}

// ---------------------------------------------------------------- fields

inline NodalField interpolate(const Mesh& m, const std::function<Vec3(const Vec3&)>& f) {
    NodalField u(m.num_nodes(), 3);
    for (int i = 0; i < m.num_nodes(); ++i) u.row(i) = f(m.nodes[i]).transpose();
    return u;
}

inline NodalField coordinates(const Mesh& m) {
    return interpolate(m, [](const Vec3& x) { return x; });
}

// grad(u)_{ij} = d u_i / d x_j on element e
inline Mat3 element_gradient(const Mesh& m, const NodalField& u, int e) {
    const auto& t = m.tets[e];
    Eigen::Matrix<double, 3, 4> U;
    for (int a = 0; a < 4; ++a) U.col(a) = u.row(t[a]).transpose();
    return U * m.element_gradient_maps[e].transpose();
}

inline std::vector<Mat3> element_gradients(const Mesh& m, const NodalField& u) {
    if (u.rows() != m.num_nodes()) throw Error("field size mismatch");
    std::vector<Mat3> g(m.num_elements());
    for (int e = 0; e < m.num_elements(); ++e) g[e] = element_gradient(m, u, e);
    return g;
}

// Barycentric point location; brute force unless the mesh is a Kuhn box.
inline int locate(const Mesh& m, const Vec3& x, Eigen::Vector4d& bary, double tol = 1e-10) {
    auto try_elem = [&](int e) {
        const auto& G = m.element_gradient_maps[e];
        const Vec3& x0 = m.nodes[m.tets[e][0]];
        Eigen::Vector4d l;
        l.tail<3>() = G.rightCols<3>().transpose() * (x - x0);
        l[0] = 1.0 - l.tail<3>().sum();
        if (l.minCoeff() >= -tol) {
            bary = l;
            return true;
        }
        return false;
    };
    if (m.is_box) {
        std::array<int, 3> c;
        for (int d = 0; d < 3; ++d) {
            double s = (x[d] - m.box_lo[d]) / (m.box_hi[d] - m.box_lo[d]) * m.box_cells[d];
            c[d] = std::clamp(static_cast<int>(std::floor(s)), 0, m.box_cells[d] - 1);
        }
        int cell = c[0] + m.box_cells[0] * (c[1] + m.box_cells[1] * c[2]);
        for (int e = 6 * cell; e < 6 * cell + 6; ++e)
            if (try_elem(e)) return e;
    }
    for (int e = 0; e < m.num_elements(); ++e)
        if (try_elem(e)) return e;
    return -1;
}

inline Vec3 evaluate(const Mesh& m, const NodalField& u, const Vec3& x) {
    Eigen::Vector4d l;
    int e = locate(m, x, l);
    if (e < 0) throw Error("point outside mesh");
    Vec3 r = Vec3::Zero();
    for (int a = 0; a < 4; ++a) r += l[a] * u.row(m.tets[e][a]).transpose();
    return r;
}

}  // namespace siglab
