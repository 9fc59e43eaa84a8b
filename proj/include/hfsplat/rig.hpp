#pragma once

// Generic skinned-mesh rig: linear blendshapes followed by hinge-joint linear
// blend skinning and a global rigid transform. Two procedural proxies stand
// in for licensed parametric hand and face models.

#include "hfsplat/gaussian.hpp"
#include "hfsplat/primitives.hpp"

namespace hfsplat {

struct HingeBone {
    int parent = -1;
    Vec3 joint = Vec3::Zero();  // rest-space pivot
    Vec3 axis = Vec3::UnitX();
};

struct SkinnedMeshRig {
    std::vector<Vec3> rest;
    std::vector<std::array<int, 3>> faces;
    std::vector<std::vector<Vec3>> shape_basis;       // driven by beta
    std::vector<std::vector<Vec3>> expression_basis;  // driven by psi
    std::vector<HingeBone> bones;                      // one angle per bone
    MatX weights;  // vertices x bones; rows sum to at most 1, the remainder stays unposed

    [[nodiscard]] int num_vertices() const { return static_cast<int>(rest.size()); }

    /// Blendshaped rest vertices.
    [[nodiscard]] std::vector<Vec3> shaped(const VecX& beta, const VecX& psi) const {
        require(beta.size() == static_cast<Eigen::Index>(shape_basis.size()), "rig: shape coefficient count mismatch");
        require(psi.size() == static_cast<Eigen::Index>(expression_basis.size()),
                "rig: expression coefficient count mismatch");
        std::vector<Vec3> v = rest;
        for (std::size_t b = 0; b < shape_basis.size(); ++b)
            for (std::size_t i = 0; i < v.size(); ++i) v[i] += beta[static_cast<Eigen::Index>(b)] * shape_basis[b][i];
        for (std::size_t b = 0; b < expression_basis.size(); ++b)
            for (std::size_t i = 0; i < v.size(); ++i)
                v[i] += psi[static_cast<Eigen::Index>(b)] * expression_basis[b][i];
        return v;
    }

    /// Global transforms of each bone for the given joint angles (parents precede children).
    [[nodiscard]] std::vector<RigidMotion> bone_transforms(const VecX& angles) const {
        require(angles.size() == static_cast<Eigen::Index>(bones.size()), "rig: joint angle count mismatch");
        std::vector<RigidMotion> g(bones.size());
        for (std::size_t b = 0; b < bones.size(); ++b) {
            const HingeBone& bone = bones[b];
            const Mat3 r = quat_to_rotmat(axis_angle_quat(bone.axis, angles[static_cast<Eigen::Index>(b)]));
            RigidMotion local{r, bone.joint - r * bone.joint};
            if (bone.parent < 0) {
                g[b] = local;
            } else {
                const RigidMotion& p = g[static_cast<std::size_t>(bone.parent)];
                g[b] = RigidMotion{p.rotation * local.rotation, p.rotation * local.translation + p.translation};
            }
        }
        return g;
    }

    /// World vertices: R (LBS(shaped(beta, psi), angles)) + t.
    [[nodiscard]] TriangleMesh pose(const VecX& beta, const VecX& psi, const VecX& angles, const QuatVec& r,
                                    const Vec3& t) const {
        const std::vector<Vec3> v = shaped(beta, psi);
        const std::vector<RigidMotion> g = bone_transforms(angles);
        const Mat3 rg = quat_to_rotmat(r.normalized());
        TriangleMesh m;
        m.faces = faces;
        m.vertices.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            Vec3 p = Vec3::Zero();
            double rest_w = 1.0;
            for (std::size_t b = 0; b < bones.size(); ++b) {
                const double w = weights(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(b));
                if (w == 0.0) continue;
                p += w * g[b].apply(v[i]);
                rest_w -= w;
            }
            p += rest_w * v[i];
            m.vertices[i] = rg * p + t;
        }
        return m;
    }
};

/// Face proxy: a hemisphere skin (pole toward -z) with a skull ellipsoid inside.
struct FaceProxy {
    SkinnedMeshRig rig;
    TriangleMesh skull;  // rig space
    double radius = 0.08;
};

/// Smooth bump of `amplitude` along the outward normal centred on direction `dir`.
inline std::vector<Vec3> normal_bump(const std::vector<Vec3>& rest, const Vec3& dir, double amplitude, double width) {
    std::vector<Vec3> out(rest.size());
    const Vec3 d = dir.normalized();
    for (std::size_t i = 0; i < rest.size(); ++i) {
        const Vec3 n = rest[i].normalized();
        const double ang = std::acos(std::clamp(n.dot(d), -1.0, 1.0));
        out[i] = amplitude * std::exp(-0.5 * ang * ang / (width * width)) * n;
    }
    return out;
}

inline FaceProxy make_face_proxy(int n_lat = 6, int n_lon = 18, double radius = 0.08) {
    FaceProxy fp;
    fp.radius = radius;
    const TriangleMesh h = hemisphere(radius, n_lat, n_lon);
    fp.rig.rest = h.vertices;
    fp.rig.faces = h.faces;
    // shape: uniform inflation
    std::vector<Vec3> inflate(h.vertices.size());
    for (std::size_t i = 0; i < inflate.size(); ++i) inflate[i] = 0.1 * h.vertices[i];
    fp.rig.shape_basis = {inflate};
    fp.rig.expression_basis = {normal_bump(h.vertices, Vec3(-0.6, 0.2, -1), 0.004, 0.35),
                               normal_bump(h.vertices, Vec3(0.1, -0.7, -1), 0.004, 0.3)};
    // jaw: a hinge about x through the rim centre, lower half follows
    fp.rig.bones = {HingeBone{-1, Vec3::Zero(), Vec3::UnitX()}};
    fp.rig.weights = MatX::Zero(static_cast<Eigen::Index>(h.vertices.size()), 1);
    for (std::size_t i = 0; i < h.vertices.size(); ++i) {
        const double t = std::clamp((-h.vertices[i].y() / radius - 0.1) / 0.5, 0.0, 1.0);
        fp.rig.weights(static_cast<Eigen::Index>(i), 0) = t * t * (3 - 2 * t);
    }
    fp.skull = ellipsoid(Vec3::Zero(), radius * Vec3(0.92, 0.7, 0.85), 8, 12);
    return fp;
}

/// Finger proxy: three capped tubes along +z joined by hinge joints about x.
struct HandProxy {
    SkinnedMeshRig rig;
    std::vector<double> joint_z;  // rest height of each joint
    int tip_vertex = 0;           // centre of the distal cap
};

inline HandProxy make_finger_proxy(int n_around = 8, int n_len = 3) {
    HandProxy hp;
    const double radius[3] = {0.009, 0.008, 0.007};
    const double length[3] = {0.03, 0.026, 0.022};
    double z0 = 0.0;
    std::vector<int> owner;
    for (int s = 0; s < 3; ++s) {
        TriangleMesh tube = capped_tube(radius[s], length[s], n_around, n_len);
        const int base = static_cast<int>(hp.rig.rest.size());
        for (auto& v : tube.vertices) hp.rig.rest.push_back(v + Vec3(0, 0, z0));
        for (const auto& f : tube.faces) hp.rig.faces.push_back({f[0] + base, f[1] + base, f[2] + base});
        owner.insert(owner.end(), tube.vertices.size(), s);
        hp.rig.bones.push_back(HingeBone{s - 1, Vec3(0, 0, z0), Vec3::UnitX()});
        hp.joint_z.push_back(z0);
        if (s == 2) hp.tip_vertex = base + static_cast<int>(tube.vertices.size()) - 1;  // top cap centre
        z0 += length[s];
    }
    hp.rig.weights = MatX::Zero(static_cast<Eigen::Index>(owner.size()), 3);
    for (std::size_t i = 0; i < owner.size(); ++i) hp.rig.weights(static_cast<Eigen::Index>(i), owner[i]) = 1.0;
    // shape: radial thickness
    std::vector<Vec3> thick(hp.rig.rest.size());
    for (std::size_t i = 0; i < thick.size(); ++i) thick[i] = 0.1 * Vec3(hp.rig.rest[i].x(), hp.rig.rest[i].y(), 0.0);
    hp.rig.shape_basis = {thick};
    return hp;
}

}  // namespace hfsplat
