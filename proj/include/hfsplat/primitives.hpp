#pragma once

// Procedural meshes used by the synthetic proxies and tests.

#include "hfsplat/mesh.hpp"

#include <numbers>

namespace hfsplat {

/// Closed latitude-longitude sphere with outward-facing triangles.
inline TriangleMesh uv_sphere(const Vec3& center, double radius, int n_lat, int n_lon) {
    require(n_lat >= 2 && n_lon >= 3, "uv_sphere: resolution too low");
    TriangleMesh m;
    m.vertices.push_back(center + Vec3(0, 0, radius));
    for (int i = 1; i < n_lat; ++i) {
        const double th = std::numbers::pi * i / n_lat;
        for (int j = 0; j < n_lon; ++j) {
            const double ph = 2 * std::numbers::pi * j / n_lon;
            m.vertices.push_back(center + radius * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th)));
        }
    }
    m.vertices.push_back(center - Vec3(0, 0, radius));
    const int south = static_cast<int>(m.vertices.size()) - 1;
    auto ring = [n_lon](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
    for (int j = 0; j < n_lon; ++j) m.faces.push_back({0, ring(1, j), ring(1, j + 1)});
    for (int i = 1; i < n_lat - 1; ++i)
        for (int j = 0; j < n_lon; ++j) {
            m.faces.push_back({ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)});
            m.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)});
        }
    for (int j = 0; j < n_lon; ++j) m.faces.push_back({south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)});
    return m;
}

/// Closed ellipsoid: a unit sphere scaled by `axes`.
inline TriangleMesh ellipsoid(const Vec3& center, const Vec3& axes, int n_lat, int n_lon) {
    TriangleMesh m = uv_sphere(Vec3::Zero(), 1.0, n_lat, n_lon);
    for (auto& v : m.vertices) v = center + v.cwiseProduct(axes);
    return m;
}

/// Open hemisphere (pole toward -z) of `radius` around the origin: n_lon x (2 n_lat - 1) facets.
/// The rim lies in the z = 0 plane.
inline TriangleMesh hemisphere(double radius, int n_lat, int n_lon) {
    require(n_lat >= 1 && n_lon >= 3, "hemisphere: resolution too low");
    TriangleMesh m;
    m.vertices.push_back(Vec3(0, 0, -radius));
    for (int i = 1; i <= n_lat; ++i) {
        const double th = 0.5 * std::numbers::pi * i / n_lat;
        for (int j = 0; j < n_lon; ++j) {
            const double ph = 2 * std::numbers::pi * j / n_lon;
            m.vertices.push_back(radius * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), -std::cos(th)));
        }
    }
    auto ring = [n_lon](int i, int j) { return 1 + (i - 1) * n_lon + (j % n_lon); };
    // outward normals point away from the origin (toward -z at the pole)
    for (int j = 0; j < n_lon; ++j) m.faces.push_back({0, ring(1, j + 1), ring(1, j)});
    for (int i = 1; i < n_lat; ++i)
        for (int j = 0; j < n_lon; ++j) {
            m.faces.push_back({ring(i, j), ring(i, j + 1), ring(i + 1, j + 1)});
            m.faces.push_back({ring(i, j), ring(i + 1, j + 1), ring(i + 1, j)});
        }
    return m;
}

/// Closed capped cylinder along +z from z = 0 to z = length, n_around x n_len side quads.
inline TriangleMesh capped_tube(double radius, double length, int n_around, int n_len) {
    require(n_around >= 3 && n_len >= 1, "capped_tube: resolution too low");
    TriangleMesh m;
    for (int i = 0; i <= n_len; ++i)
        for (int j = 0; j < n_around; ++j) {
            const double ph = 2 * std::numbers::pi * j / n_around;
            m.vertices.push_back(Vec3(radius * std::cos(ph), radius * std::sin(ph), length * i / n_len));
        }
    const int bottom = static_cast<int>(m.vertices.size());
    m.vertices.push_back(Vec3::Zero());
    const int top = bottom + 1;
    m.vertices.push_back(Vec3(0, 0, length));
    auto id = [n_around](int i, int j) { return i * n_around + (j % n_around); };
    for (int i = 0; i < n_len; ++i)
        for (int j = 0; j < n_around; ++j) {
            m.faces.push_back({id(i, j), id(i, j + 1), id(i + 1, j + 1)});
            m.faces.push_back({id(i, j), id(i + 1, j + 1), id(i + 1, j)});
        }
    for (int j = 0; j < n_around; ++j) {
        m.faces.push_back({bottom, id(0, j + 1), id(0, j)});
        m.faces.push_back({top, id(n_len, j), id(n_len, j + 1)});
    }
    return m;
}

}  // namespace hfsplat
