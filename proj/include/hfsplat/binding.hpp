#pragma once

#include "hfsplat/gaussian.hpp"
#include "hfsplat/mesh.hpp"

#include <random>

namespace hfsplat {

struct BindOptions {
    int n_per_face = 20;
    /// 0 places every Gaussian on the facet centroid. Values in (0, 1] scatter
    /// local positions over the triangle, shrunk toward the centroid by this factor.
    double init_spread = 0.0;
    /// Local-frame scale; <= 0 selects 0.5 / sqrt(n_per_face).
    double init_local_scale = -1.0;
    double init_opacity = 0.1;
    double point_feature_std = 0.0;
    std::uint64_t seed = 0;
};

/// Per-Gaussian additive offsets. Each array is either empty (treated as
/// zero) or has one entry per Gaussian. Geometry offsets live in the local
/// frame; color and opacity offsets add to activated values.
struct GaussianDeltas {
    std::vector<Vec3> position;
    std::vector<Vec3> scale;
    std::vector<QuatVec> rotation;
    std::vector<Vec3> color;
    std::vector<double> opacity;

    static GaussianDeltas zeros(std::size_t n) {
        GaussianDeltas d;
        d.position.assign(n, Vec3::Zero());
        d.scale.assign(n, Vec3::Zero());
        d.rotation.assign(n, QuatVec::Zero());
        d.color.assign(n, Vec3::Zero());
        d.opacity.assign(n, 0.0);
        return d;
    }
    [[nodiscard]] bool has_geometry() const { return !position.empty(); }
    [[nodiscard]] bool has_appearance() const { return !color.empty(); }
};

inline GaussianSet bind_initial_gaussians(const TriangleMesh& canonical_mesh, const BindOptions& opt) {
    require(opt.n_per_face >= 1, "bind_initial_gaussians: n_per_face must be >= 1");
    const LocalFrameSet frames = compute_local_frames(canonical_mesh);
    const std::size_t nf = frames.size();
    GaussianSet g;
    g.resize(nf * static_cast<std::size_t>(opt.n_per_face));
    const double s0 = opt.init_local_scale > 0 ? opt.init_local_scale
                                               : 0.5 / std::sqrt(static_cast<double>(opt.n_per_face));
    std::mt19937_64 rng(opt.seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::size_t i = 0;
    for (std::size_t f = 0; f < nf; ++f) {
        const auto& tri = canonical_mesh.faces[f];
        for (int k = 0; k < opt.n_per_face; ++k, ++i) {
            Vec3 local = Vec3::Zero();
            if (opt.init_spread > 0.0) {
                double u = uni(rng), v = uni(rng);
                if (u + v > 1.0) {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                const Vec3 p = canonical_mesh.vertices[tri[0]] +
                               u * (canonical_mesh.vertices[tri[1]] - canonical_mesh.vertices[tri[0]]) +
                               v * (canonical_mesh.vertices[tri[2]] - canonical_mesh.vertices[tri[0]]);
                local = opt.init_spread * frames.rotation[f].transpose() * (p - frames.origin[f]) /
                        frames.scale[f];
            }
            g.local_position[i] = local;
            g.log_scale[i] = Vec3::Constant(std::log(s0));
            g.rotation[i] = identity_quat();
            g.color_raw[i] = Vec3::Zero();
            g.opacity_logit[i] = logit(opt.init_opacity);
            g.parent_face[i] = static_cast<int>(f);
            g.canonical_position[i] = frames.scale[f] * (frames.rotation[f] * local) + frames.origin[f];
            if (opt.point_feature_std > 0.0)
                for (int c = 0; c < kPointFeatureDim; ++c)
                    g.point_feature(c, static_cast<Eigen::Index>(i)) = opt.point_feature_std * gauss(rng);
        }
    }
    return g;
}

/// World-space Gaussians ready for rasterization, plus intermediates kept for the backward pass.
struct WorldGaussians {
    std::vector<Vec3> position;
    std::vector<Vec3> scale;
    std::vector<QuatVec> rotation;
    std::vector<Mat3> covariance;
    std::vector<double> opacity;
    std::vector<Vec3> color;

    // backward cache
    std::vector<QuatVec> local_rotation_raw;  // q_i + dq_i
    std::vector<Mat3> world_rotation;
    std::vector<Vec3> scale_pre_clamp;  // s_i + ds_i (local)
    std::vector<Vec3> color_pre_clamp;
    std::vector<double> opacity_pre_clamp;

    [[nodiscard]] std::size_t size() const { return position.size(); }
};

/// mu = k R (mu_i + dmu_i) + T, s = k (s_i + ds_i), rotation = R_j * normalize(q_i + dq_i),
/// c = clamp(c_i + dc_i), o = clamp(o_i + do_i).
inline WorldGaussians to_world(const GaussianSet& g, const LocalFrameSet& frames,
                               const GaussianDeltas* deltas = nullptr) {
    const std::size_t n = g.size();
    const bool geo = deltas && deltas->has_geometry();
    const bool app = deltas && deltas->has_appearance();
    if (geo)
        require(deltas->position.size() == n && deltas->scale.size() == n && deltas->rotation.size() == n,
                "to_world: geometry delta size mismatch");
    if (app)
        require(deltas->color.size() == n && deltas->opacity.size() == n,
                "to_world: appearance delta size mismatch");
    WorldGaussians w;
    w.position.resize(n);
    w.scale.resize(n);
    w.rotation.resize(n);
    w.covariance.resize(n);
    w.opacity.resize(n);
    w.color.resize(n);
    w.local_rotation_raw.resize(n);
    w.world_rotation.resize(n);
    w.scale_pre_clamp.resize(n);
    w.color_pre_clamp.resize(n);
    w.opacity_pre_clamp.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int f = g.parent_face[i];
        require(f >= 0 && static_cast<std::size_t>(f) < frames.size(), "to_world: parent_face out of range");
        const auto fi = static_cast<std::size_t>(f);
        const double k = frames.scale[fi];
        const Mat3& r = frames.rotation[fi];

        Vec3 mu = g.local_position[i];
        Vec3 s = activate_scale(g.log_scale[i]);
        QuatVec q = g.rotation[i];
        if (geo) {
            mu += deltas->position[i];
            s += deltas->scale[i];
            q += deltas->rotation[i];
        }
        w.scale_pre_clamp[i] = s;
        s = s.cwiseMax(kScaleFloor);
        w.local_rotation_raw[i] = q;
        const double qlen = q.norm();
        if (!(qlen > 1e-12)) throw NumericalError("to_world: zero-length rotation quaternion");
        const QuatVec qn = q / qlen;
        w.position[i] = k * (r * mu) + frames.origin[fi];
        w.scale[i] = k * s;
        w.world_rotation[i] = r * quat_to_rotmat(qn);
        w.rotation[i] = quat_mul(rotmat_to_quat(r), qn);
        const Mat3 m = w.world_rotation[i] * w.scale[i].asDiagonal();
        w.covariance[i] = m * m.transpose();

        Vec3 c = g.color_raw[i].unaryExpr([](double v) { return sigmoid(v); });
        double o = sigmoid(g.opacity_logit[i]);
        if (app) {
            c += deltas->color[i];
            o += deltas->opacity[i];
        }
        w.color_pre_clamp[i] = c;
        w.opacity_pre_clamp[i] = o;
        w.color[i] = c.unaryExpr([](double v) { return clamp01(v); });
        w.opacity[i] = clamp01(o);
    }
    return w;
}

struct WorldGrad {
    std::vector<Vec3> position;
    std::vector<Mat3> covariance;
    std::vector<Vec3> color;
    std::vector<double> opacity;

    explicit WorldGrad(std::size_t n = 0)
        : position(n, Vec3::Zero()), covariance(n, Mat3::Zero()), color(n, Vec3::Zero()), opacity(n, 0.0) {}
    [[nodiscard]] std::size_t size() const { return position.size(); }
};

/// Gradients w.r.t. the raw (pre-activation) GaussianSet fields.
struct GaussianGrad {
    std::vector<Vec3> local_position;
    std::vector<Vec3> log_scale;
    std::vector<QuatVec> rotation;
    std::vector<Vec3> color_raw;
    std::vector<double> opacity_logit;

    explicit GaussianGrad(std::size_t n = 0)
        : local_position(n, Vec3::Zero()), log_scale(n, Vec3::Zero()), rotation(n, QuatVec::Zero()),
          color_raw(n, Vec3::Zero()), opacity_logit(n, 0.0) {}
};

/// Backward of to_world. `delta_grad` receives gradients w.r.t. every delta
/// array (sized like GaussianDeltas::zeros), even if deltas were absent.
inline void to_world_backward(const GaussianSet& g, const LocalFrameSet& frames, const WorldGaussians& w,
                              const WorldGrad& grad, GaussianGrad& param_grad, GaussianDeltas& delta_grad) {
    const std::size_t n = g.size();
    require(w.size() == n && grad.size() == n, "to_world_backward: size mismatch");
    param_grad = GaussianGrad(n);
    delta_grad = GaussianDeltas::zeros(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto fi = static_cast<std::size_t>(g.parent_face[i]);
        const double k = frames.scale[fi];
        const Mat3& r = frames.rotation[fi];

        const Vec3 g_mu = k * (r.transpose() * grad.position[i]);
        param_grad.local_position[i] = g_mu;
        delta_grad.position[i] = g_mu;

        const CovarianceGrad cg = covariance_backward(w.scale[i], w.world_rotation[i], grad.covariance[i]);
        Vec3 g_s = k * cg.scale;
        for (int a = 0; a < 3; ++a)
            if (!(w.scale_pre_clamp[i][a] > kScaleFloor)) g_s[a] = 0.0;
        delta_grad.scale[i] = g_s;
        for (int a = 0; a < 3; ++a) {
            const double e = std::exp(g.log_scale[i][a]);
            param_grad.log_scale[i][a] = e > kScaleFloor ? g_s[a] * e : 0.0;
        }

        const QuatVec& q = w.local_rotation_raw[i];
        const QuatVec qn = q.normalized();
        const Mat3 g_rq = r.transpose() * cg.rotation;
        const QuatVec g_q = normalize_backward(q, quat_to_rotmat_backward(qn, g_rq));
        param_grad.rotation[i] = g_q;
        delta_grad.rotation[i] = g_q;

        for (int c = 0; c < 3; ++c) {
            const double pre = w.color_pre_clamp[i][c];
            const double gc = (pre >= 0.0 && pre <= 1.0) ? grad.color[i][c] : 0.0;
            delta_grad.color[i][c] = gc;
            const double sg = sigmoid(g.color_raw[i][c]);
            param_grad.color_raw[i][c] = gc * sg * (1.0 - sg);
        }
        const double pre_o = w.opacity_pre_clamp[i];
        const double go = (pre_o >= 0.0 && pre_o <= 1.0) ? grad.opacity[i] : 0.0;
        delta_grad.opacity[i] = go;
        const double so = sigmoid(g.opacity_logit[i]);
        param_grad.opacity_logit[i] = go * so * (1.0 - so);
    }
}

// ---------------------------------------------------------------------------
// Adaptive density control.

struct DensityStats {
    std::vector<double> grad_accum;  // summed view-space positional gradient norms
    std::vector<int> denom;          // number of accumulations
    std::vector<double> max_world_scale;

    explicit DensityStats(std::size_t n = 0) : grad_accum(n, 0.0), denom(n, 0), max_world_scale(n, 0.0) {}
    [[nodiscard]] std::size_t size() const { return grad_accum.size(); }
};

struct DensifyThresholds {
    double grad_threshold = 2e-4;
    double min_opacity = 0.005;
    double split_world_scale = 0.01;  // Gaussians larger than this are split, smaller cloned
    double split_scale_divisor = 1.6;
    int split_children = 2;
};

struct DensifyResult {
    GaussianSet gaussians;
    std::vector<int> source;    // index of the Gaussian each output entry came from
    std::vector<char> is_new;   // 1 for clones and split children
};

/// Clones small high-gradient Gaussians, splits large ones into children
/// sampled from the source within the same facet frame, and prunes low-opacity ones.
/// New Gaussians inherit parent_face and point_feature of their source.
inline DensifyResult densify_and_prune(const GaussianSet& g, const DensityStats& stats,
                                       const DensifyThresholds& th, const LocalFrameSet& canonical_frames,
                                       std::mt19937_64& rng) {
    const std::size_t n = g.size();
    require(stats.size() == n, "densify_and_prune: stats size mismatch");
    std::vector<int> keep, clones, splits;
    for (std::size_t i = 0; i < n; ++i) {
        const double avg = stats.denom[i] > 0 ? stats.grad_accum[i] / stats.denom[i] : 0.0;
        if (avg >= th.grad_threshold) {
            if (stats.max_world_scale[i] > th.split_world_scale) {
                splits.push_back(static_cast<int>(i));
                continue;
            }
            clones.push_back(static_cast<int>(i));
        }
        keep.push_back(static_cast<int>(i));
    }
    std::vector<int> source = keep;
    std::vector<char> is_new(keep.size(), 0);
    source.insert(source.end(), clones.begin(), clones.end());
    is_new.insert(is_new.end(), clones.size(), 1);
    for (int s : splits)
        for (int c = 0; c < th.split_children; ++c) {
            source.push_back(s);
            is_new.push_back(1);
        }
    GaussianSet out = g.select(source);

    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t split_begin = keep.size() + clones.size();
    for (std::size_t k = split_begin; k < out.size(); ++k) {
        const Vec3 s = activate_scale(out.log_scale[k]);
        const Vec3 z(gauss(rng), gauss(rng), gauss(rng));
        out.local_position[k] += quat_to_rotmat(out.rotation[k].normalized()) * s.cwiseProduct(z);
        out.log_scale[k] = (s / th.split_scale_divisor).array().log().matrix();
    }
    for (std::size_t k = keep.size(); k < out.size(); ++k) {
        const auto f = static_cast<std::size_t>(out.parent_face[k]);
        out.canonical_position[k] =
            canonical_frames.scale[f] * (canonical_frames.rotation[f] * out.local_position[k]) +
            canonical_frames.origin[f];
    }

    std::vector<int> survivors;
    for (std::size_t k = 0; k < out.size(); ++k)
        if (sigmoid(out.opacity_logit[k]) >= th.min_opacity) survivors.push_back(static_cast<int>(k));
    DensifyResult res;
    if (survivors.size() == out.size()) {
        res.gaussians = std::move(out);
        res.source = std::move(source);
        res.is_new = std::move(is_new);
        return res;
    }
    res.gaussians = out.select(survivors);
    for (int k : survivors) {
        res.source.push_back(source[static_cast<std::size_t>(k)]);
        res.is_new.push_back(is_new[static_cast<std::size_t>(k)]);
    }
    return res;
}

}  // namespace hfsplat
