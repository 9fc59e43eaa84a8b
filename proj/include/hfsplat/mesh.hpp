#pragma once

#include "hfsplat/common.hpp"

#include <array>
#include <algorithm>
#include <numbers>
#include <set>
#include <utility>

namespace hfsplat {

using Face = std::array<int, 3>;

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    [[nodiscard]] int num_vertices() const { return static_cast<int>(vertices.size()); }
    [[nodiscard]] int num_faces() const { return static_cast<int>(faces.size()); }

    void validate() const {
        for (std::size_t f = 0; f < faces.size(); ++f)
            for (int v : faces[f])
                if (v < 0 || v >= num_vertices())
                    throw ValidationError("mesh facet " + std::to_string(f) +
                                          " references missing vertex " + std::to_string(v));
    }
};

/// Raised for a facet whose area is too small to define a local frame.
class DegenerateFacet : public NumericalError {
public:
    DegenerateFacet(int facet, double area)
        : NumericalError("degenerate facet " + std::to_string(facet) + " (area " +
                         std::to_string(area) + ")"),
          facet_(facet) {}
    [[nodiscard]] int facet() const { return facet_; }

private:
    int facet_;
};

inline constexpr double kMinFacetArea = 1e-12;

/// Per-facet frames: world = scale * rotation * local + origin.
struct LocalFrameSet {
    std::vector<Mat3> rotation;
    std::vector<Vec3> origin;
    std::vector<double> scale;

    [[nodiscard]] std::size_t size() const { return origin.size(); }
};

/// Columns of R are (first edge direction, n x e0, normal); origin is the
/// centroid; scale is sqrt(2 * area), so a unit right triangle has scale 1.
inline LocalFrameSet compute_local_frames(const TriangleMesh& mesh) {
    LocalFrameSet fr;
    const std::size_t nf = mesh.faces.size();
    fr.rotation.resize(nf);
    fr.origin.resize(nf);
    fr.scale.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& [a, b, c] = mesh.faces[f];
        const Vec3& p0 = mesh.vertices[a];
        const Vec3& p1 = mesh.vertices[b];
        const Vec3& p2 = mesh.vertices[c];
        const Vec3 e0 = p1 - p0;
        const Vec3 cr = e0.cross(p2 - p0);
        const double twice_area = cr.norm();
        if (!(0.5 * twice_area > kMinFacetArea))
            throw DegenerateFacet(static_cast<int>(f), 0.5 * twice_area);
        const Vec3 n = cr / twice_area;
        const Vec3 t = e0.normalized();
        Mat3 r;
        r.col(0) = t;
        r.col(1) = n.cross(t);
        r.col(2) = n;
        fr.rotation[f] = r;
        fr.origin[f] = (p0 + p1 + p2) / 3.0;
        fr.scale[f] = std::sqrt(twice_area);
    }
    return fr;
}

inline TriangleMesh concat_meshes(const TriangleMesh& a, const TriangleMesh& b) {
    TriangleMesh m = a;
    const int off = a.num_vertices();
    m.vertices.insert(m.vertices.end(), b.vertices.begin(), b.vertices.end());
    for (auto f : b.faces) m.faces.push_back({f[0] + off, f[1] + off, f[2] + off});
    return m;
}

inline double facet_area(const TriangleMesh& m, int f) {
    const auto& [a, b, c] = m.faces[static_cast<std::size_t>(f)];
    return 0.5 * (m.vertices[b] - m.vertices[a]).cross(m.vertices[c] - m.vertices[a]).norm();
}

/// Area-weighted vertex normals.
inline std::vector<Vec3> vertex_normals(const TriangleMesh& m) {
    std::vector<Vec3> n(m.vertices.size(), Vec3::Zero());
    for (const auto& f : m.faces) {
        const Vec3 cr = (m.vertices[f[1]] - m.vertices[f[0]]).cross(m.vertices[f[2]] - m.vertices[f[0]]);
        for (int v : f) n[v] += cr;
    }
    for (auto& v : n) {
        const double len = v.norm();
        if (len > 0) v /= len;
    }
    return n;
}

/// Unique undirected edges, sorted.
inline std::vector<std::pair<int, int>> mesh_edges(const TriangleMesh& m) {
    std::set<std::pair<int, int>> e;
    for (const auto& f : m.faces)
        for (int k = 0; k < 3; ++k) {
            int a = f[k], b = f[(k + 1) % 3];
            if (a > b) std::swap(a, b);
            e.emplace(a, b);
        }
    return {e.begin(), e.end()};
}

/// Closest point on triangle (a, b, c) to p (Ericson, Real-Time Collision Detection 5.1.5).
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a, ac = c - a, ap = p - a;
    const double d1 = ab.dot(ap), d2 = ac.dot(ap);
    if (d1 <= 0 && d2 <= 0) return a;
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp), d4 = ac.dot(bp);
    if (d3 >= 0 && d4 <= d3) return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + ab * (d1 / (d1 - d3));
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp), d6 = ac.dot(cp);
    if (d6 >= 0 && d5 <= d6) return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + ac * (d2 / (d2 - d6));
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

struct SurfacePoint {
    Vec3 point = Vec3::Zero();
    int facet = -1;
    double distance = std::numeric_limits<double>::infinity();
};

/// Brute force closest point over all facets; ties keep the lowest facet index.
inline SurfacePoint closest_surface_point(const TriangleMesh& m, const Vec3& p) {
    SurfacePoint best;
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
        const auto& t = m.faces[f];
        const Vec3 q = closest_point_on_triangle(p, m.vertices[t[0]], m.vertices[t[1]], m.vertices[t[2]]);
        const double d = (q - p).norm();
        if (d < best.distance) best = {q, static_cast<int>(f), d};
    }
    return best;
}

/// Generalized winding number of a closed, outward oriented mesh around p
/// (1 inside, 0 outside; overlapping closed parts add up).
inline double winding_number(const TriangleMesh& m, const Vec3& p) {
    double total = 0.0;
    for (const auto& t : m.faces) {
        const Vec3 a = m.vertices[t[0]] - p, b = m.vertices[t[1]] - p, c = m.vertices[t[2]] - p;
        const double la = a.norm(), lb = b.norm(), lc = c.norm();
        const double num = a.dot(b.cross(c));
        const double den = la * lb * lc + a.dot(b) * lc + b.dot(c) * la + c.dot(a) * lb;
        total += 2.0 * std::atan2(num, den);
    }
    return total / (4.0 * std::numbers::pi);
}

inline bool inside_mesh(const TriangleMesh& m, const Vec3& p) { return winding_number(m, p) > 0.5; }

struct RigidMotion {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    [[nodiscard]] Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
};

inline TriangleMesh transform_mesh(const TriangleMesh& m, const RigidMotion& t) {
    TriangleMesh out = m;
    for (auto& v : out.vertices) v = t.apply(v);
    return out;
}

}  // namespace hfsplat
