#pragma once

// Pose conditioning and the pose-dependent hand networks. H_geo maps
// (gamma(mu_cano), theta_hand) to (dmu, ds, dq); H_app maps
// (gamma(mu_cano), P_i, F, theta_hand, r_hand, r_rel, t_rel) to (dc, do).

#include "hfsplat/binding.hpp"
#include "hfsplat/mlp.hpp"

namespace hfsplat {

inline constexpr int kGeoFeatureDim = 1024;

/// Quaternion with non-negative real part, so q and -q feed networks identically.
inline QuatVec canonical_quat(const QuatVec& q) { return q[0] < 0.0 ? QuatVec(-q) : q; }

struct PoseState {
    VecX theta_hand;
    VecX theta_face;
    VecX psi;
    QuatVec r_hand = identity_quat();
    Vec3 t_hand = Vec3::Zero();
    QuatVec r_face = identity_quat();
    Vec3 t_face = Vec3::Zero();
    QuatVec r_rel = identity_quat();
    Vec3 t_rel = Vec3::Zero();
    VecX beta_hand;  // carried along, never a network input
    VecX beta_face;

    /// Hand pose expressed in the face frame.
    void update_relative() {
        r_rel = canonical_quat(quat_mul(quat_conj(r_face), r_hand).normalized());
        t_rel = quat_to_rotmat(r_face).transpose() * (t_hand - t_face);
    }

    bool operator==(const PoseState& o) const {
        return theta_hand == o.theta_hand && theta_face == o.theta_face && psi == o.psi && r_hand == o.r_hand &&
               t_hand == o.t_hand && r_face == o.r_face && t_face == o.t_face && r_rel == o.r_rel &&
               t_rel == o.t_rel && beta_hand == o.beta_hand && beta_face == o.beta_face;
    }
};

struct NetworkConfig {
    int hidden = 64;
    int geo_layers = 4;
    int app_layers = 6;
    int interaction_layers = 6;
    int pos_freq = 6;   // gamma(mu_cano)
    int def_freq = 4;   // gamma(d_j)
    int theta_hand_dim = 0;
    int theta_face_dim = 0;
    int psi_dim = 0;
};

// Output layout of each network; one head per Gaussian parameter group.
inline constexpr int kGeoOut = 3 + 3 + 4;           // dmu, ds, dq
inline constexpr int kAppOut = 3 + 1;               // dc, do
inline constexpr int kInteractionOut = 3 + 3 + 4 + 3 + 1;

inline int geo_shared_dim(const NetworkConfig& c) { return c.theta_hand_dim; }
inline int app_shared_dim(const NetworkConfig& c) { return kGeoFeatureDim + c.theta_hand_dim + 4 + 4 + 3; }
inline int interaction_shared_dim(const NetworkConfig& c) {
    return kGeoFeatureDim + c.theta_hand_dim + c.theta_face_dim + c.psi_dim + 3 + 4;
}

inline void check_pose_dims(const PoseState& p, const NetworkConfig& c) {
    if (p.theta_hand.size() != c.theta_hand_dim || p.theta_face.size() != c.theta_face_dim ||
        p.psi.size() != c.psi_dim)
        throw ValidationError("pose dimensions (" + std::to_string(p.theta_hand.size()) + ", " +
                              std::to_string(p.theta_face.size()) + ", " + std::to_string(p.psi.size()) +
                              ") do not match the networks (" + std::to_string(c.theta_hand_dim) + ", " +
                              std::to_string(c.theta_face_dim) + ", " + std::to_string(c.psi_dim) + ")");
}

/// Positional encodings of canonical positions for the selected Gaussians, one column each.
inline MatX encode_canonical(const GaussianSet& g, std::span<const int> idx, int n_freq) {
    MatX out(posenc_size(n_freq), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k)
        out.col(static_cast<Eigen::Index>(k)) = posenc(g.canonical_position[static_cast<std::size_t>(idx[k])], n_freq);
    return out;
}

inline VecX geo_shared_input(const PoseState& p) { return p.theta_hand; }

inline VecX app_shared_input(const PoseState& p, const VecX& feature) {
    VecX s(feature.size() + p.theta_hand.size() + 11);
    s << feature, p.theta_hand, canonical_quat(p.r_hand), canonical_quat(p.r_rel), p.t_rel;
    return s;
}

inline VecX interaction_shared_input(const PoseState& p, const VecX& feature) {
    VecX s(feature.size() + p.theta_hand.size() + p.theta_face.size() + p.psi.size() + 7);
    s << feature, p.theta_hand, p.theta_face, p.psi, p.t_rel, canonical_quat(p.r_rel);
    return s;
}

/// The two hand networks.
struct HandNetworks {
    Mlp geo;
    Mlp app;

    static HandNetworks create(const NetworkConfig& c, std::uint64_t seed) {
        HandNetworks h;
        const int pe = posenc_size(c.pos_freq);
        h.geo = Mlp(MlpConfig::standard(pe, geo_shared_dim(c), c.hidden, c.geo_layers, kGeoOut), mix_seed(seed, 1));
        h.app = Mlp(MlpConfig::standard(pe + kPointFeatureDim, app_shared_dim(c), c.hidden, c.app_layers, kAppOut),
                    mix_seed(seed, 2));
        return h;
    }
};

/// Builds the H_app row input [gamma(mu_cano); P_i] for the selected Gaussians.
inline MatX app_rows(const GaussianSet& g, std::span<const int> idx, int n_freq) {
    const MatX pe = encode_canonical(g, idx, n_freq);
    MatX rows(pe.rows() + kPointFeatureDim, pe.cols());
    rows.topRows(pe.rows()) = pe;
    for (std::size_t k = 0; k < idx.size(); ++k)
        rows.col(static_cast<Eigen::Index>(k)).tail(kPointFeatureDim) = g.point_feature.col(idx[k]);
    return rows;
}

/// Writes network outputs into the delta slots of the selected Gaussians, scaled by `weight` (or 1).
inline void scatter_geo(const MatX& out, std::span<const int> idx, GaussianDeltas& d,
                        const std::vector<double>* weight = nullptr) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        const auto c = static_cast<Eigen::Index>(k);
        const double w = weight ? (*weight)[k] : 1.0;
        d.position[i] += w * out.col(c).segment<3>(0);
        d.scale[i] += w * out.col(c).segment<3>(3);
        d.rotation[i] += w * out.col(c).segment<4>(6);
    }
}

inline void scatter_app(const MatX& out, Eigen::Index row0, std::span<const int> idx, GaussianDeltas& d,
                        const std::vector<double>* weight = nullptr) {
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        const auto c = static_cast<Eigen::Index>(k);
        const double w = weight ? (*weight)[k] : 1.0;
        d.color[i] += w * out.col(c).segment<3>(row0);
        d.opacity[i] += w * out(row0 + 3, c);
    }
}

/// Gathers delta gradients of the selected Gaussians into a network output gradient.
inline MatX gather_geo_grad(const GaussianDeltas& g, std::span<const int> idx) {
    MatX out(kGeoOut, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        const auto c = static_cast<Eigen::Index>(k);
        out.col(c).segment<3>(0) = g.position[i];
        out.col(c).segment<3>(3) = g.scale[i];
        out.col(c).segment<4>(6) = g.rotation[i];
    }
    return out;
}

inline MatX gather_app_grad(const GaussianDeltas& g, std::span<const int> idx) {
    MatX out(kAppOut, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        const auto c = static_cast<Eigen::Index>(k);
        out.col(c).segment<3>(0) = g.color[i];
        out(3, c) = g.opacity[i];
    }
    return out;
}

/// H_geo offsets for the selected (hand) Gaussians, added into `d`.
inline void hand_geo_offsets(const Mlp& geo, const GaussianSet& g, std::span<const int> idx, const PoseState& pose,
                             int n_freq, GaussianDeltas& d, Mlp::Cache* cache = nullptr) {
    const MatX out = geo.forward(encode_canonical(g, idx, n_freq), geo_shared_input(pose), cache);
    scatter_geo(out, idx, d);
}

/// H_app offsets for the selected (hand) Gaussians, added into `d`.
inline void hand_app_offsets(const Mlp& app, const GaussianSet& g, std::span<const int> idx, const PoseState& pose,
                             const VecX& feature, int n_freq, GaussianDeltas& d, Mlp::Cache* cache = nullptr) {
    const MatX out = app.forward(app_rows(g, idx, n_freq), app_shared_input(pose, feature), cache);
    scatter_app(out, 0, idx, d);
}

}  // namespace hfsplat
