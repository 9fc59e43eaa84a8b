#pragma once

#include "hfsplat/common.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <array>
#include <limits>
#include <numeric>

namespace hfsplat {

inline constexpr double kScaleFloor = 1e-6;
inline constexpr double kUnitQuatTolerance = 1e-6;
inline constexpr int kPointFeatureDim = 64;

// ---------------------------------------------------------------------------
// Quaternion helpers. Layout (w, x, y, z).

inline QuatVec identity_quat() { return QuatVec(1.0, 0.0, 0.0, 0.0); }

/// Rotation matrix of a unit quaternion. The formula is applied as written,
/// so the result is only orthonormal when |q| = 1.
inline Mat3 quat_to_rotmat(const QuatVec& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

/// dL/dq for the formula in quat_to_rotmat, given dL/dR.
inline QuatVec quat_to_rotmat_backward(const QuatVec& q, const Mat3& g) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 dw, dx, dy, dz;
    dw << 0, -z, y, z, 0, -x, -y, x, 0;
    dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    return 2.0 * QuatVec(g.cwiseProduct(dw).sum(), g.cwiseProduct(dx).sum(),
                         g.cwiseProduct(dy).sum(), g.cwiseProduct(dz).sum());
}

inline QuatVec rotmat_to_quat(const Mat3& r) {
    Eigen::Quaterniond e(r);
    e.normalize();
    QuatVec q(e.w(), e.x(), e.y(), e.z());
    if (q[0] < 0) q = -q;
    return q;
}

/// Hamilton product a * b.
inline QuatVec quat_mul(const QuatVec& a, const QuatVec& b) {
    return QuatVec(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                   a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                   a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                   a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

inline QuatVec quat_conj(const QuatVec& q) { return QuatVec(q[0], -q[1], -q[2], -q[3]); }

inline QuatVec axis_angle_quat(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized() * std::sin(0.5 * angle);
    return QuatVec(std::cos(0.5 * angle), a[0], a[1], a[2]);
}

/// Backward of n = q / |q|.
inline QuatVec normalize_backward(const QuatVec& q, const QuatVec& grad_n) {
    const double len = q.norm();
    const QuatVec n = q / len;
    return (grad_n - n * n.dot(grad_n)) / len;
}

// ---------------------------------------------------------------------------
// Covariance and density.

/// Sigma = R(q) diag(s)^2 R(q)^T.
inline Mat3 covariance_from_scale_rotation(const Vec3& s, const QuatVec& q) {
    require((s.array() > 0.0).all(), "covariance_from_scale_rotation: scale must be positive");
    if (std::abs(q.norm() - 1.0) > kUnitQuatTolerance)
        throw ContractViolation("covariance_from_scale_rotation: quaternion is not unit length");
    const Mat3 r = quat_to_rotmat(q);
    const Mat3 m = r * s.asDiagonal();
    return m * m.transpose();
}

struct CovarianceGrad {
    Vec3 scale = Vec3::Zero();
    Mat3 rotation = Mat3::Zero();  // dL/dR
};

/// Backward of Sigma = (R S)(R S)^T for a full-matrix upstream gradient.
inline CovarianceGrad covariance_backward(const Vec3& s, const Mat3& r, const Mat3& grad_sigma) {
    const Mat3 m = r * s.asDiagonal();
    const Mat3 grad_m = (grad_sigma + grad_sigma.transpose()) * m;
    CovarianceGrad out;
    out.rotation = grad_m * s.asDiagonal();
    const Mat3 rt_gm = r.transpose() * grad_m;
    out.scale = rt_gm.diagonal();
    return out;
}

/// G(x) = exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)).
inline double evaluate_gaussian(const Vec3& x, const Vec3& mu, const Mat3& sigma) {
    Eigen::LLT<Mat3> llt(sigma);
    if (llt.info() != Eigen::Success || !(llt.matrixLLT().diagonal().array() > 1e-150).all())
        throw NumericalError("evaluate_gaussian: degenerate covariance");
    const Vec3 d = x - mu;
    const double m = d.dot(llt.solve(d));
    return std::exp(-0.5 * m);
}

struct GaussianValueGrad {
    double value = 0.0;
    Vec3 d_mu = Vec3::Zero();
    Vec3 d_scale = Vec3::Zero();
    QuatVec d_quat = QuatVec::Zero();
};

/// Density of the Gaussian parameterized by (mu, s, q) with analytic gradients.
/// q is normalized internally, so d_quat is the gradient w.r.t. the raw 4-vector.
inline GaussianValueGrad gaussian_value_and_grad(const Vec3& x, const Vec3& mu, const Vec3& s,
                                                 const QuatVec& q) {
    require((s.array() > 0.0).all(), "gaussian_value_and_grad: scale must be positive");
    const QuatVec qn = q.normalized();
    const Mat3 r = quat_to_rotmat(qn);
    const Vec3 d = x - mu;
    const Vec3 y = r.transpose() * d;
    const Vec3 inv_s2 = s.array().square().inverse();
    const double m = (y.array().square() * inv_s2.array()).sum();
    GaussianValueGrad out;
    out.value = std::exp(-0.5 * m);
    // dm/dy = 2 y / s^2; dG/dm = -G/2
    const Vec3 dm_dy = 2.0 * y.cwiseProduct(inv_s2);
    const double g_m = -0.5 * out.value;
    out.d_mu = -g_m * (r * dm_dy);
    out.d_scale = g_m * (-2.0 * y.array().square() * inv_s2.array() / s.array()).matrix();
    // y = R^T d ⇒ dm/dR = d (dm/dy)^T
    const Mat3 grad_r = g_m * (d * dm_dy.transpose());
    out.d_quat = normalize_backward(q, quat_to_rotmat_backward(qn, grad_r));
    return out;
}

// ---------------------------------------------------------------------------
// Gaussian parameter container.

/// Per-Gaussian parameters bound to mesh facets. Geometry lives in the local
/// frame of the parent facet; activations are applied by activate_parameters.
struct GaussianSet {
    std::vector<Vec3> local_position;
    std::vector<Vec3> log_scale;
    std::vector<QuatVec> rotation;
    std::vector<Vec3> color_raw;
    std::vector<double> opacity_logit;
    std::vector<int> parent_face;
    MatX point_feature;  // kPointFeatureDim x N, one column per Gaussian
    std::vector<Vec3> canonical_position;

    [[nodiscard]] std::size_t size() const { return local_position.size(); }

    void resize(std::size_t n) {
        local_position.resize(n, Vec3::Zero());
        log_scale.resize(n, Vec3::Zero());
        rotation.resize(n, identity_quat());
        color_raw.resize(n, Vec3::Zero());
        opacity_logit.resize(n, 0.0);
        parent_face.resize(n, 0);
        canonical_position.resize(n, Vec3::Zero());
        MatX pf = MatX::Zero(kPointFeatureDim, static_cast<Eigen::Index>(n));
        const Eigen::Index keep = std::min<Eigen::Index>(point_feature.cols(), pf.cols());
        if (keep > 0 && point_feature.rows() == kPointFeatureDim)
            pf.leftCols(keep) = point_feature.leftCols(keep);
        point_feature = std::move(pf);
    }

    /// Subset in the given order (indices may repeat).
    [[nodiscard]] GaussianSet select(std::span<const int> idx) const {
        GaussianSet out;
        out.resize(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto i = static_cast<std::size_t>(idx[k]);
            out.local_position[k] = local_position[i];
            out.log_scale[k] = log_scale[i];
            out.rotation[k] = rotation[i];
            out.color_raw[k] = color_raw[i];
            out.opacity_logit[k] = opacity_logit[i];
            out.parent_face[k] = parent_face[i];
            out.canonical_position[k] = canonical_position[i];
            out.point_feature.col(static_cast<Eigen::Index>(k)) =
                point_feature.col(static_cast<Eigen::Index>(i));
        }
        return out;
    }

    /// Throws ValidationError when array lengths disagree or a parent index is out of range.
    void validate(int num_faces) const {
        const std::size_t n = size();
        if (log_scale.size() != n || rotation.size() != n || color_raw.size() != n ||
            opacity_logit.size() != n || parent_face.size() != n ||
            canonical_position.size() != n ||
            point_feature.cols() != static_cast<Eigen::Index>(n) ||
            (n > 0 && point_feature.rows() != kPointFeatureDim))
            throw ValidationError("GaussianSet: inconsistent field lengths");
        for (std::size_t i = 0; i < n; ++i)
            if (parent_face[i] < 0 || parent_face[i] >= num_faces)
                throw ValidationError("GaussianSet: parent_face " + std::to_string(parent_face[i]) +
                                      " out of range for Gaussian " + std::to_string(i));
    }

    bool operator==(const GaussianSet& o) const {
        return local_position == o.local_position && log_scale == o.log_scale &&
               rotation == o.rotation && color_raw == o.color_raw &&
               opacity_logit == o.opacity_logit && parent_face == o.parent_face &&
               canonical_position == o.canonical_position &&
               point_feature.rows() == o.point_feature.rows() &&
               point_feature.cols() == o.point_feature.cols() &&
               point_feature == o.point_feature;
    }
};

struct ActivatedGaussians {
    std::vector<Vec3> scale;
    std::vector<double> opacity;
    std::vector<Vec3> color;
};

inline Vec3 activate_scale(const Vec3& log_scale) {
    return log_scale.array().exp().max(kScaleFloor).matrix();
}

/// exp for scale (floored), sigmoid for opacity and color.
inline ActivatedGaussians activate_parameters(const GaussianSet& g) {
    ActivatedGaussians a;
    const std::size_t n = g.size();
    a.scale.resize(n);
    a.opacity.resize(n);
    a.color.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        a.scale[i] = activate_scale(g.log_scale[i]);
        a.opacity[i] = sigmoid(g.opacity_logit[i]);
        a.color[i] = g.color_raw[i].unaryExpr([](double v) { return sigmoid(v); });
    }
    return a;
}

}  // namespace hfsplat
