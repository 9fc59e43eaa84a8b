#pragma once

// Two-stage optimization of the hybrid mesh-Gaussian avatar.
//
// Stage 1 fits the static Gaussians with the photometric loss and adaptive
// density control. Stage 2 freezes the population and jointly trains the
// Gaussians, the hand networks, the interaction network, the point encoder
// and the per-Gaussian point features with the full objective.
//
// Output directory layout of a training run:
//   config.json        the TrainConfig used
//   stage1.ckpt        state after stage 1
//   stage2.ckpt        state after stage 2
//   step_<n>.ckpt      periodic checkpoints (when checkpoint_every > 0)
//   train_log.tsv      one row per logged step

#include "hfsplat/gaussian_io.hpp"
#include "hfsplat/losses.hpp"
#include "hfsplat/rasterizer.hpp"
#include "hfsplat/scene.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>

namespace hfsplat {

// ---------------------------------------------------------------------------
// Configuration.

struct TrainConfig {
    int stage1_steps = 2000;
    int stage2_steps = 2000;
    int gaussians_per_face = 8;
    double init_spread = 0.8;
    double init_opacity = 0.1;
    // Gaussian learning rates; positions and scales are in facet-local units
    double lr_position = 5e-3;
    double lr_position_final = 5e-5;
    double lr_scale = 1.7e-2;
    double lr_rotation = 1e-3;
    double lr_opacity = 0.05;
    double lr_color = 2.5e-3;
    double lr_mlp = 1e-3;
    double lr_point_feature = 2.5e-3;
    LossWeights loss;
    int densify_from = 300;
    int densify_until = 1500;
    int densify_interval = 300;
    double densify_grad_threshold = 2e-4;  // NDC-space positional gradient
    double min_opacity = 0.005;
    double split_world_scale = 0.003;
    int max_gaussians = 12000;
    double oversample = 4.0;
    std::uint64_t seed = 1;
    int checkpoint_every = 0;
    int log_every = 50;
    bool hand_mlp = true;
    bool interaction_mlp = true;
    bool pbd = true;
    bool patch_loss = true;
    int hidden = 64;
    int threads = 1;

    /// "desk" (defaults) or "full" (long schedule and wide networks).
    static TrainConfig preset(const std::string& name) {
        TrainConfig c;
        if (name == "desk") return c;
        if (name == "full") {
            c.stage1_steps = 100000;
            c.stage2_steps = 100000;
            c.gaussians_per_face = 20;
            c.hidden = 256;
            c.densify_from = 500;
            c.densify_until = 15000;
            c.densify_interval = 100;
            c.max_gaussians = 1 << 20;
            return c;
        }
        throw ValidationError("unknown preset '" + name + "' (expected desk or full)");
    }

    void validate() const {
        auto positive = [](double v, const char* what) {
            if (!(v > 0.0)) throw ValidationError(std::string("train config: ") + what + " must be positive");
        };
        if (stage1_steps < 0 || stage2_steps < 0) throw ValidationError("train config: step counts must be >= 0");
        if (gaussians_per_face < 1) throw ValidationError("train config: gaussians_per_face must be >= 1");
        if (!(init_spread >= 0.0 && init_spread <= 1.0)) throw ValidationError("train config: init_spread must lie in [0, 1]");
        if (!(init_opacity > 0.0 && init_opacity < 1.0)) throw ValidationError("train config: init_opacity must lie in (0, 1)");
        positive(lr_position, "lr_position");
        positive(lr_position_final, "lr_position_final");
        positive(lr_scale, "lr_scale");
        positive(lr_rotation, "lr_rotation");
        positive(lr_opacity, "lr_opacity");
        positive(lr_color, "lr_color");
        positive(lr_mlp, "lr_mlp");
        positive(lr_point_feature, "lr_point_feature");
        loss.validate();
        if (densify_interval < 1) throw ValidationError("train config: densify_interval must be >= 1");
        if (max_gaussians < 1) throw ValidationError("train config: max_gaussians must be >= 1");
        if (!(oversample >= 1.0)) throw ValidationError("train config: oversample must be >= 1");
        if (checkpoint_every < 0 || log_every < 0) throw ValidationError("train config: cadences must be >= 0");
        if (hidden < 1) throw ValidationError("train config: hidden must be >= 1");
        if (threads < 1) throw ValidationError("train config: threads must be >= 1");
    }

    [[nodiscard]] json to_json() const {
        return json{{"stage1_steps", stage1_steps},
                    {"stage2_steps", stage2_steps},
                    {"gaussians_per_face", gaussians_per_face},
                    {"init_spread", init_spread},
                    {"init_opacity", init_opacity},
                    {"lr_position", lr_position},
                    {"lr_position_final", lr_position_final},
                    {"lr_scale", lr_scale},
                    {"lr_rotation", lr_rotation},
                    {"lr_opacity", lr_opacity},
                    {"lr_color", lr_color},
                    {"lr_mlp", lr_mlp},
                    {"lr_point_feature", lr_point_feature},
                    {"lambda", loss.lambda},
                    {"a", loss.a},
                    {"b", loss.b},
                    {"c", loss.c},
                    {"eps_s", loss.eps_s},
                    {"eps_mu", loss.eps_mu},
                    {"densify_from", densify_from},
                    {"densify_until", densify_until},
                    {"densify_interval", densify_interval},
                    {"densify_grad_threshold", densify_grad_threshold},
                    {"min_opacity", min_opacity},
                    {"split_world_scale", split_world_scale},
                    {"max_gaussians", max_gaussians},
                    {"oversample", oversample},
                    {"seed", seed},
                    {"checkpoint_every", checkpoint_every},
                    {"log_every", log_every},
                    {"hand_mlp", hand_mlp},
                    {"interaction_mlp", interaction_mlp},
                    {"pbd", pbd},
                    {"patch_loss", patch_loss},
                    {"hidden", hidden},
                    {"threads", threads}};
    }

    /// Overlays the keys present in `j` onto `base`; unknown keys and a
    /// "preset" key other than the first are rejected.
    static TrainConfig from_json(const json& j) { return from_json(j, TrainConfig()); }
    static TrainConfig from_json(const json& j, TrainConfig base) {
        if (!j.is_object()) throw ValidationError("train config: expected a JSON object");
        TrainConfig c = base;
        if (j.contains("preset")) c = preset(j.at("preset").get<std::string>());
        const json known = c.to_json();
        try {
            for (const auto& [k, v] : j.items()) {
                if (k == "preset") continue;
                if (!known.contains(k)) throw ValidationError("train config: unknown key '" + k + "'");
            }
            auto get = [&]<class T>(const char* key, T& dst) {
                if (j.contains(key)) dst = j.at(key).get<T>();
            };
            get("stage1_steps", c.stage1_steps);
            get("stage2_steps", c.stage2_steps);
            get("gaussians_per_face", c.gaussians_per_face);
            get("init_spread", c.init_spread);
            get("init_opacity", c.init_opacity);
            get("lr_position", c.lr_position);
            get("lr_position_final", c.lr_position_final);
            get("lr_scale", c.lr_scale);
            get("lr_rotation", c.lr_rotation);
            get("lr_opacity", c.lr_opacity);
            get("lr_color", c.lr_color);
            get("lr_mlp", c.lr_mlp);
            get("lr_point_feature", c.lr_point_feature);
            get("lambda", c.loss.lambda);
            get("a", c.loss.a);
            get("b", c.loss.b);
            get("c", c.loss.c);
            get("eps_s", c.loss.eps_s);
            get("eps_mu", c.loss.eps_mu);
            get("densify_from", c.densify_from);
            get("densify_until", c.densify_until);
            get("densify_interval", c.densify_interval);
            get("densify_grad_threshold", c.densify_grad_threshold);
            get("min_opacity", c.min_opacity);
            get("split_world_scale", c.split_world_scale);
            get("max_gaussians", c.max_gaussians);
            get("oversample", c.oversample);
            get("seed", c.seed);
            get("checkpoint_every", c.checkpoint_every);
            get("log_every", c.log_every);
            get("hand_mlp", c.hand_mlp);
            get("interaction_mlp", c.interaction_mlp);
            get("pbd", c.pbd);
            get("patch_loss", c.patch_loss);
            get("hidden", c.hidden);
            get("threads", c.threads);
        } catch (const json::exception& e) {
            throw ValidationError(std::string("train config: ") + e.what());
        }
        c.validate();
        return c;
    }

    [[nodiscard]] RenderSettings render_settings() const {
        RenderSettings rs;
        rs.threads = threads;
        return rs;
    }
};

// ---------------------------------------------------------------------------
// Model.

struct Model {
    NetworkConfig net;
    int face_facets = 0;
    int hand_facets = 0;
    GaussianSet gaussians;
    HandNetworks hand;
    Mlp interaction;
    PointEncoder encoder;

    [[nodiscard]] bool is_hand(std::size_t i) const { return gaussians.parent_face[i] >= face_facets; }

    bool operator==(const Model& o) const {
        return face_facets == o.face_facets && hand_facets == o.hand_facets && gaussians == o.gaussians &&
               hand.geo == o.hand.geo && hand.app == o.hand.app && interaction == o.interaction &&
               encoder.mlp == o.encoder.mlp;
    }
};

inline NetworkConfig network_config_for(const SceneDataset& ds, int hidden) {
    NetworkConfig c;
    c.hidden = hidden;
    const PoseState& p = ds.frames.at(0).pose;
    c.theta_hand_dim = static_cast<int>(p.theta_hand.size());
    c.theta_face_dim = static_cast<int>(p.theta_face.size());
    c.psi_dim = static_cast<int>(p.psi.size());
    return c;
}

/// Binds Gaussians to the canonical combined mesh (face facets first) and creates all networks.
inline Model create_model(const SceneDataset& ds, const TrainConfig& cfg) {
    Model m;
    m.net = network_config_for(ds, cfg.hidden);
    m.face_facets = ds.num_face_facets();
    m.hand_facets = static_cast<int>(ds.hand_faces.size());
    BindOptions bo;
    bo.n_per_face = cfg.gaussians_per_face;
    bo.init_spread = cfg.init_spread;
    bo.init_opacity = cfg.init_opacity;
    bo.seed = mix_seed(cfg.seed, 11);
    m.gaussians = bind_initial_gaussians(concat_meshes(ds.face_mesh(ds.canonical_frame), ds.hand_mesh(ds.canonical_frame)), bo);
    m.hand = HandNetworks::create(m.net, mix_seed(cfg.seed, 12));
    m.interaction = create_interaction_network(m.net, mix_seed(cfg.seed, 13));
    m.encoder = PointEncoder::create(mix_seed(cfg.seed, 14));
    return m;
}

/// Meshes and local frames for one frame, with the collision-resolved face.
struct FrameGeometry {
    TriangleMesh face;  // tracked, before collision resolution
    TriangleMesh hand;
    DeformationField field;
    LocalFrameSet frames;  // of the deformed face followed by the hand
};

inline FrameGeometry make_frame_geometry(TriangleMesh face, TriangleMesh hand, const DeformationField& field) {
    FrameGeometry fg;
    fg.face = std::move(face);
    fg.hand = std::move(hand);
    fg.field = field;
    const TriangleMesh deformed = field.vertex_offset.empty() ? fg.face : apply_offsets(fg.face, field.vertex_offset);
    fg.frames = compute_local_frames(concat_meshes(deformed, fg.hand));
    return fg;
}

inline DeformationField no_deformation(const TriangleMesh& face) {
    DeformationField f;
    f.vertex_offset.assign(face.vertices.size(), Vec3::Zero());
    f.facet_offset.assign(face.faces.size(), Vec3::Zero());
    return f;
}

/// Collision fields per dataset frame, filled once on first use.
class PbdCache {
public:
    PbdCache(const SceneDataset& ds, bool enabled) : ds_(&ds), enabled_(enabled), stiffness_(dataset_stiffness(ds)) {
        fields_.resize(static_cast<std::size_t>(ds.num_frames()));
    }

    const DeformationField& field(int k) {
        std::lock_guard<std::mutex> lock(mu_);
        auto& slot = fields_.at(static_cast<std::size_t>(k));
        if (!slot) {
            const TriangleMesh face = ds_->face_mesh(k);
            slot = enabled_ ? pbd_resolve_collisions(face, ds_->hand_mesh(k), stiffness_) : no_deformation(face);
        }
        return *slot;
    }

    FrameGeometry geometry(int k) { return make_frame_geometry(ds_->face_mesh(k), ds_->hand_mesh(k), field(k)); }
    [[nodiscard]] const std::vector<double>& stiffness() const { return stiffness_; }
    [[nodiscard]] bool enabled() const { return enabled_; }

private:
    const SceneDataset* ds_;
    bool enabled_;
    std::vector<double> stiffness_;
    std::vector<std::optional<DeformationField>> fields_;
    std::mutex mu_;
};

struct DynamicsSwitches {
    bool hand_mlp = true;
    bool interaction_mlp = true;

    [[nodiscard]] bool any() const { return hand_mlp || interaction_mlp; }
    static DynamicsSwitches none() { return {false, false}; }
};

struct ForwardPass {
    GaussianDeltas deltas;
    WorldGaussians world;
    RenderResult render;
    std::vector<int> hand_idx;
    std::vector<int> inter_idx;
    std::vector<double> inter_weight;
    std::vector<Vec3> inter_weight_grad;
    MatX inter_out;
    VecX feature;
    std::vector<int> enc_members;  // Gaussian behind each encoder point
    Mlp::Cache geo_cache, app_cache, inter_cache;
    PointEncoder::Cache enc_cache;
    bool used_dynamics = false;
    bool used_hand = false;
    bool used_interaction = false;
};

/// World positions without offsets.
inline std::vector<Vec3> base_positions(const GaussianSet& g, const LocalFrameSet& frames) {
    std::vector<Vec3> p(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto f = static_cast<std::size_t>(g.parent_face[i]);
        p[i] = frames.scale[f] * (frames.rotation[f] * g.local_position[i]) + frames.origin[f];
    }
    return p;
}

/// Offsets from the enabled networks, world transform and render.
inline ForwardPass model_forward(const Model& m, const FrameGeometry& geo, const PoseState& pose, const Camera& cam,
                                 const DynamicsSwitches& sw, std::uint64_t sample_seed, const RenderSettings& rs) {
    const GaussianSet& g = m.gaussians;
    const std::size_t n = g.size();
    ForwardPass fp;
    fp.used_dynamics = sw.any();
    if (fp.used_dynamics) {
        check_pose_dims(pose, m.net);
        fp.deltas = GaussianDeltas::zeros(n);
        const std::vector<Vec3> base = base_positions(g, geo.frames);
        std::vector<int> face_idx;
        for (std::size_t i = 0; i < n; ++i) (m.is_hand(i) ? fp.hand_idx : face_idx).push_back(static_cast<int>(i));

        // contact weights of face Gaussians
        if (sw.interaction_mlp)
            for (int i : face_idx) {
                const ContactWeight cw = contact_weight(base[static_cast<std::size_t>(i)], geo.hand.vertices);
                if (cw.w <= 0.0) continue;
                fp.inter_idx.push_back(i);
                fp.inter_weight.push_back(cw.w);
                fp.inter_weight_grad.push_back(cw.grad);
            }
        fp.used_interaction = !fp.inter_idx.empty();
        fp.used_hand = sw.hand_mlp && !fp.hand_idx.empty();

        const bool need_feature = fp.used_hand || fp.used_interaction;
        if (need_feature) {
            const auto by_facet = gaussians_by_facet(g, m.face_facets + m.hand_facets);
            std::vector<int> hand_facets(static_cast<std::size_t>(m.hand_facets));
            std::iota(hand_facets.begin(), hand_facets.end(), m.face_facets);
            const std::vector<int> face_reps =
                sample_representative_gaussians(g, by_facet, deformed_facets(geo.field.facet_offset), mix_seed(sample_seed, 1));
            const std::vector<int> hand_reps = sample_representative_gaussians(g, by_facet, hand_facets, mix_seed(sample_seed, 2));
            fp.enc_members = face_reps;
            fp.enc_members.insert(fp.enc_members.end(), hand_reps.begin(), hand_reps.end());
            // facet offsets are indexed by face facet; hand points carry none
            fp.feature = m.encoder.forward(encoder_points(base, face_reps, hand_reps, g, geo.field.facet_offset, pose.t_face),
                                           &fp.enc_cache);
        }
        if (fp.used_hand) {
            hand_geo_offsets(m.hand.geo, g, fp.hand_idx, pose, m.net.pos_freq, fp.deltas, &fp.geo_cache);
            hand_app_offsets(m.hand.app, g, fp.hand_idx, pose, fp.feature, m.net.pos_freq, fp.deltas, &fp.app_cache);
        }
        if (fp.used_interaction) {
            fp.inter_out = interaction_offsets(m.interaction, g, fp.inter_idx, pose, geo.field.facet_offset, fp.feature,
                                               fp.inter_weight, m.net, fp.deltas, &fp.inter_cache);
        }
    }
    fp.world = to_world(g, geo.frames, fp.used_dynamics ? &fp.deltas : nullptr);
    fp.render = render(fp.world.position, fp.world.covariance, fp.world.color, fp.world.opacity, cam, rs);
    return fp;
}

/// Gradients of scalar losses that act directly on Gaussian or delta quantities.
struct ExtraGrad {
    std::vector<Vec3> log_scale;
    std::vector<Vec3> local_position;
    std::vector<Vec3> delta_scale;
    std::vector<Vec3> delta_position;
};

struct ModelGrad {
    GaussianGrad gauss;
    MatX point_feature;
    MlpGrad geo, app, inter, enc;
    std::vector<Vec2> mean2d;  // pixel-space positional gradients
};

inline ModelGrad model_backward(const Model& m, const FrameGeometry& geo, const ForwardPass& fp, const Image& image_grad,
                                const ExtraGrad* extra = nullptr) {
    const GaussianSet& g = m.gaussians;
    const std::size_t n = g.size();
    ModelGrad out;
    out.geo = m.hand.geo.zero_grad();
    out.app = m.hand.app.zero_grad();
    out.inter = m.interaction.zero_grad();
    out.enc = m.encoder.mlp.zero_grad();
    out.point_feature = MatX::Zero(kPointFeatureDim, static_cast<Eigen::Index>(n));

    const RenderGrad rg = render_backward(image_grad, fp.render.state);
    out.mean2d = rg.mean2d;
    GaussianDeltas dgrad;
    to_world_backward(g, geo.frames, fp.world, rg.to_world_grad(), out.gauss, dgrad);
    if (extra) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!extra->log_scale.empty()) out.gauss.log_scale[i] += extra->log_scale[i];
            if (!extra->local_position.empty()) out.gauss.local_position[i] += extra->local_position[i];
            if (!extra->delta_scale.empty()) dgrad.scale[i] += extra->delta_scale[i];
            if (!extra->delta_position.empty()) dgrad.position[i] += extra->delta_position[i];
        }
    }
    if (!fp.used_dynamics) return out;

    VecX grad_feature = VecX::Zero(kGeoFeatureDim);
    bool feature_used = false;
    if (fp.used_hand) {
        m.hand.geo.backward(fp.geo_cache, gather_geo_grad(dgrad, fp.hand_idx), out.geo, nullptr, nullptr);
        MatX grad_rows;
        VecX grad_shared;
        m.hand.app.backward(fp.app_cache, gather_app_grad(dgrad, fp.hand_idx), out.app, &grad_rows, &grad_shared);
        const Eigen::Index pe = grad_rows.rows() - kPointFeatureDim;
        for (std::size_t k = 0; k < fp.hand_idx.size(); ++k)
            out.point_feature.col(fp.hand_idx[k]) += grad_rows.col(static_cast<Eigen::Index>(k)).segment(pe, kPointFeatureDim);
        grad_feature += grad_shared.head(kGeoFeatureDim);
        feature_used = true;
    }
    if (fp.used_interaction) {
        const std::size_t ni = fp.inter_idx.size();
        MatX raw(kInteractionOut, static_cast<Eigen::Index>(ni));
        raw.topRows(kGeoOut) = gather_geo_grad(dgrad, fp.inter_idx);
        raw.bottomRows(kAppOut) = gather_app_grad(dgrad, fp.inter_idx);
        MatX go = raw;
        for (std::size_t k = 0; k < ni; ++k) {
            const auto c = static_cast<Eigen::Index>(k);
            go.col(c) *= fp.inter_weight[k];
            // d/dw of w * out, routed through the base position to mu_local
            const double g_w = raw.col(c).dot(fp.inter_out.col(c));
            const auto i = static_cast<std::size_t>(fp.inter_idx[k]);
            const auto f = static_cast<std::size_t>(g.parent_face[i]);
            out.gauss.local_position[i] +=
                geo.frames.scale[f] * (geo.frames.rotation[f].transpose() * (g_w * fp.inter_weight_grad[k]));
        }
        VecX grad_shared;
        m.interaction.backward(fp.inter_cache, go, out.inter, nullptr, &grad_shared);
        grad_feature += grad_shared.head(kGeoFeatureDim);
        feature_used = true;
    }
    if (feature_used && fp.feature.size() > 0) {
        MatX grad_points;
        m.encoder.backward(fp.enc_cache, grad_feature, out.enc, &grad_points);
        // encoder points are base positions relative to the face origin
        for (std::size_t k = 0; k < fp.enc_members.size(); ++k) {
            const auto i = static_cast<std::size_t>(fp.enc_members[k]);
            const auto f = static_cast<std::size_t>(g.parent_face[i]);
            const Vec3 gp = grad_points.col(static_cast<Eigen::Index>(k)).head<3>();
            out.gauss.local_position[i] += geo.frames.scale[f] * (geo.frames.rotation[f].transpose() * gp);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses for one step.

struct StepLoss {
    LossTerms terms;
    double total = 0.0;
    Image image_grad;
    ExtraGrad extra;
};

/// Stage 1 uses the photometric term only; stage 2 adds the regularizers and the patch term.
inline StepLoss compute_step_loss(const Model& m, const ForwardPass& fp, const Image& target, const PixelBox& hand_box,
                                  const PixelBox& face_box, const LossWeights& w, bool full, bool use_patch) {
    StepLoss sl;
    const PhotometricLoss ph = photometric_loss(fp.render.output.color, target, w.lambda);
    sl.terms.l1 = ph.l1;
    sl.terms.dssim = ph.dssim;
    sl.image_grad = ph.grad;
    if (!full) {
        sl.total = ph.value;
        return sl;
    }
    const std::vector<char>& vis = fp.render.output.visible;
    const std::vector<Vec3>* ds = fp.used_dynamics ? &fp.deltas.scale : nullptr;
    const std::vector<Vec3>* dmu = fp.used_dynamics ? &fp.deltas.position : nullptr;
    const RegularizerResult rs = scale_regularizer(m.gaussians, ds, w.eps_s, vis);
    const RegularizerResult rp = position_regularizer(m.gaussians, dmu, w.eps_mu, vis);
    sl.terms.scale = rs.value;
    sl.terms.position = rp.value;
    const std::size_t n = m.gaussians.size();
    sl.extra.log_scale.resize(n);
    sl.extra.local_position.resize(n);
    sl.extra.delta_scale.resize(n);
    sl.extra.delta_position.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        sl.extra.log_scale[i] = w.a * rs.grad_base[i];
        sl.extra.delta_scale[i] = w.a * rs.grad_delta[i];
        sl.extra.local_position[i] = w.b * rp.grad_base[i];
        sl.extra.delta_position[i] = w.b * rp.grad_delta[i];
    }
    if (use_patch && w.c > 0.0) {
        const PatchLoss pl = patch_loss(fp.render.output.color, target, hand_box, face_box);
        sl.terms.patch = pl.value;
        for (std::size_t k = 0; k < sl.image_grad.data.size(); ++k) sl.image_grad.data[k] += w.c * pl.grad.data[k];
    }
    LossWeights eff = w;
    if (!use_patch) eff.c = 0.0;
    sl.total = total_loss(sl.terms, eff);
    return sl;
}

// ---------------------------------------------------------------------------
// Optimizer state.

struct OptimizerState {
    AdamSlot position, log_scale, rotation, color, opacity, point_feature;
    std::vector<AdamSlot> geo, app, inter, enc;

    bool operator==(const OptimizerState& o) const {
        auto eq = [](const AdamSlot& a, const AdamSlot& b) { return a.m == b.m && a.v == b.v && a.step == b.step; };
        auto eqv = [&](const std::vector<AdamSlot>& a, const std::vector<AdamSlot>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t k = 0; k < a.size(); ++k)
                if (!eq(a[k], b[k])) return false;
            return true;
        };
        return eq(position, o.position) && eq(log_scale, o.log_scale) && eq(rotation, o.rotation) &&
               eq(color, o.color) && eq(opacity, o.opacity) && eq(point_feature, o.point_feature) &&
               eqv(geo, o.geo) && eqv(app, o.app) && eqv(inter, o.inter) && eqv(enc, o.enc);
    }
};

namespace detail {

template <class V>
double* flat(std::vector<V>& v) {
    return v.empty() ? nullptr : v.data()->data();
}
template <class V>
const double* flat(const std::vector<V>& v) {
    return v.empty() ? nullptr : v.data()->data();
}

inline void step_mlp(Mlp& net, const MlpGrad& g, std::vector<AdamSlot>& slots, double lr) {
    auto& w = net.weights();
    auto& b = net.biases();
    slots.resize(2 * w.size());
    for (std::size_t l = 0; l < w.size(); ++l) {
        adam_step(w[l].data(), g.weight[l].data(), static_cast<std::size_t>(w[l].size()), slots[2 * l], lr);
        adam_step(b[l].data(), g.bias[l].data(), static_cast<std::size_t>(b[l].size()), slots[2 * l + 1], lr);
    }
}

/// Reorders per-Gaussian moments after densification; new Gaussians start from zero.
inline void remap_slot(AdamSlot& s, const std::vector<int>& source, const std::vector<char>& is_new, std::size_t stride) {
    if (s.m.empty()) return;
    AdamSlot out;
    out.step = s.step;
    out.m.assign(source.size() * stride, 0.0);
    out.v.assign(source.size() * stride, 0.0);
    for (std::size_t k = 0; k < source.size(); ++k) {
        if (is_new[k]) continue;
        const auto src = static_cast<std::size_t>(source[k]);
        for (std::size_t c = 0; c < stride; ++c) {
            out.m[k * stride + c] = s.m[src * stride + c];
            out.v[k * stride + c] = s.v[src * stride + c];
        }
    }
    s = std::move(out);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Training state and checkpoints.

inline constexpr std::string_view kCheckpointMagic = "HFSCKPT1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
    TrainConfig config;
    Model model;
    OptimizerState opt;
    DensityStats stats;
    int stage = 1;
    std::int64_t step = 0;  // steps completed within `stage`

    bool operator==(const TrainState& o) const {
        return config.to_json() == o.config.to_json() && model == o.model && opt == o.opt &&
               stats.grad_accum == o.stats.grad_accum && stats.denom == o.stats.denom &&
               stats.max_world_scale == o.stats.max_world_scale && stage == o.stage && step == o.step;
    }
};

inline void write_checkpoint(const TrainState& s, const std::filesystem::path& path) {
    std::ostringstream os(std::ios::binary);
    BinaryWriter w(os);
    w.magic(kCheckpointMagic, kCheckpointVersion);
    w.str(s.config.to_json().dump());
    w.i32(s.stage);
    w.u64(static_cast<std::uint64_t>(s.step));
    w.i32(s.model.face_facets);
    w.i32(s.model.hand_facets);
    const NetworkConfig& nc = s.model.net;
    for (int v : {nc.hidden, nc.geo_layers, nc.app_layers, nc.interaction_layers, nc.pos_freq, nc.def_freq,
                  nc.theta_hand_dim, nc.theta_face_dim, nc.psi_dim})
        w.i32(v);
    write_gaussians(os, s.model.gaussians);
    s.model.hand.geo.write(w);
    s.model.hand.app.write(w);
    s.model.interaction.write(w);
    s.model.encoder.mlp.write(w);
    for (const AdamSlot* slot : {&s.opt.position, &s.opt.log_scale, &s.opt.rotation, &s.opt.color, &s.opt.opacity,
                                 &s.opt.point_feature})
        write_slot(w, *slot);
    for (const auto* group : {&s.opt.geo, &s.opt.app, &s.opt.inter, &s.opt.enc}) {
        w.u64(group->size());
        for (const auto& slot : *group) write_slot(w, slot);
    }
    w.f64s(s.stats.grad_accum);
    w.u64(s.stats.denom.size());
    for (int d : s.stats.denom) w.i32(d);
    w.f64s(s.stats.max_world_scale);
    const std::string blob = os.str();
    std::ofstream f(path, std::ios::binary);
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
}

inline TrainState read_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path.string() + ": checkpoint not found");
    const std::string ctx = "checkpoint " + path.filename().string();
    BinaryReader r(f, ctx);
    r.expect_magic(kCheckpointMagic, kCheckpointVersion);
    TrainState s;
    try {
        s.config = TrainConfig::from_json(json::parse(r.str()));
    } catch (const json::exception& e) {
        r.fail(std::string("bad embedded config: ") + e.what());
    }
    s.stage = r.i32();
    if (s.stage != 1 && s.stage != 2) r.fail("bad stage");
    s.step = static_cast<std::int64_t>(r.u64());
    s.model.face_facets = r.i32();
    s.model.hand_facets = r.i32();
    NetworkConfig& nc = s.model.net;
    for (int* v : {&nc.hidden, &nc.geo_layers, &nc.app_layers, &nc.interaction_layers, &nc.pos_freq, &nc.def_freq,
                   &nc.theta_hand_dim, &nc.theta_face_dim, &nc.psi_dim})
        *v = r.i32();
    s.model.gaussians = read_gaussians(f, ctx);
    s.model.hand.geo = Mlp::read(r);
    s.model.hand.app = Mlp::read(r);
    s.model.interaction = Mlp::read(r);
    s.model.encoder.mlp = Mlp::read(r);
    for (AdamSlot* slot : {&s.opt.position, &s.opt.log_scale, &s.opt.rotation, &s.opt.color, &s.opt.opacity,
                           &s.opt.point_feature})
        *slot = read_slot(r);
    for (auto* group : {&s.opt.geo, &s.opt.app, &s.opt.inter, &s.opt.enc}) {
        const std::uint64_t n = r.u64();
        if (n > 1024) r.fail("implausible optimizer group size");
        group->resize(n);
        for (auto& slot : *group) slot = read_slot(r);
    }
    s.stats.grad_accum = r.f64s();
    const std::uint64_t nd = r.u64();
    if (nd != s.stats.grad_accum.size()) r.fail("density statistics size mismatch");
    s.stats.denom.resize(nd);
    for (auto& d : s.stats.denom) d = r.i32();
    s.stats.max_world_scale = r.f64s();
    if (s.stats.max_world_scale.size() != nd) r.fail("density statistics size mismatch");
    char extra;
    if (f.read(&extra, 1)) r.fail("trailing data");
    s.model.gaussians.validate(s.model.face_facets + s.model.hand_facets);
    return s;
}

// ---------------------------------------------------------------------------
// Frame sampling.

/// Interaction frames are drawn `factor` times as often as the others.
class FrameSampler {
public:
    FrameSampler(const std::vector<char>& interaction, double factor) {
        require(!interaction.empty(), "FrameSampler: no frames");
        require(factor >= 1.0, "FrameSampler: factor must be >= 1");
        double acc = 0.0;
        for (char f : interaction) {
            acc += f ? factor : 1.0;
            cumulative_.push_back(acc);
        }
    }

    [[nodiscard]] int sample(std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        const double u = std::uniform_real_distribution<double>(0.0, cumulative_.back())(rng);
        const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
        return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative_.begin(), std::ssize(cumulative_) - 1));
    }

private:
    std::vector<double> cumulative_;
};

inline std::vector<char> interaction_flags(const SceneDataset& ds) {
    std::vector<char> f;
    for (const auto& fr : ds.frames) f.push_back(fr.interaction);
    return f;
}

// ---------------------------------------------------------------------------
// Steps.

struct StepRecord {
    int stage = 1;
    std::int64_t step = 0;
    int frame = 0;
    int view = 0;
    LossTerms terms;
    double total = 0.0;
    std::size_t gaussians = 0;
};

inline TrainState init_training(const SceneDataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    ds.validate();
    if (ds.train_views().empty()) throw ValidationError("dataset has no training views");
    TrainState s;
    s.config = cfg;
    s.model = create_model(ds, cfg);
    s.stats = DensityStats(s.model.gaussians.size());
    return s;
}

inline DynamicsSwitches stage_switches(const TrainState& s) {
    if (s.stage == 1) return DynamicsSwitches::none();
    return DynamicsSwitches{s.config.hand_mlp, s.config.interaction_mlp};
}

inline std::uint64_t step_seed(const TrainConfig& c, int stage, std::int64_t step) {
    return mix_seed(mix_seed(c.seed, static_cast<std::uint64_t>(stage)), static_cast<std::uint64_t>(step));
}

/// Failure report written when a loss turns non-finite.
inline void dump_failure(const std::filesystem::path& dir, const StepRecord& rec) {
    if (dir.empty()) return;
    const json j{{"stage", rec.stage}, {"step", rec.step},     {"frame", rec.frame},
                 {"view", rec.view},   {"l1", rec.terms.l1},   {"dssim", rec.terms.dssim},
                 {"scale", rec.terms.scale}, {"position", rec.terms.position}, {"patch", rec.terms.patch},
                 {"gaussians", rec.gaussians}};
    std::ofstream(dir / "failure_dump.json") << j.dump(1) << "\n";
}

inline void densify(TrainState& s, const SceneDataset& ds, std::uint64_t seed) {
    const TrainConfig& c = s.config;
    DensifyThresholds th;
    th.grad_threshold = s.model.gaussians.size() >= static_cast<std::size_t>(c.max_gaussians)
                            ? std::numeric_limits<double>::infinity()
                            : c.densify_grad_threshold;
    th.min_opacity = c.min_opacity;
    th.split_world_scale = c.split_world_scale;
    const LocalFrameSet canonical =
        compute_local_frames(concat_meshes(ds.face_mesh(ds.canonical_frame), ds.hand_mesh(ds.canonical_frame)));
    std::mt19937_64 rng(seed);
    DensifyResult r = densify_and_prune(s.model.gaussians, s.stats, th, canonical, rng);
    if (r.gaussians.size() == 0) throw NumericalError("densification pruned every Gaussian");
    s.model.gaussians = std::move(r.gaussians);
    detail::remap_slot(s.opt.position, r.source, r.is_new, 3);
    detail::remap_slot(s.opt.log_scale, r.source, r.is_new, 3);
    detail::remap_slot(s.opt.rotation, r.source, r.is_new, 4);
    detail::remap_slot(s.opt.color, r.source, r.is_new, 3);
    detail::remap_slot(s.opt.opacity, r.source, r.is_new, 1);
    detail::remap_slot(s.opt.point_feature, r.source, r.is_new, kPointFeatureDim);
    s.stats = DensityStats(s.model.gaussians.size());
}

/// One optimization step of the current stage.
inline StepRecord train_step(TrainState& s, const SceneDataset& ds, PbdCache& cache, const FrameSampler& sampler,
                             const std::filesystem::path& dump_dir = {}) {
    const TrainConfig& c = s.config;
    const std::uint64_t seed = step_seed(c, s.stage, s.step);
    StepRecord rec;
    rec.stage = s.stage;
    rec.step = s.step;
    rec.frame = sampler.sample(mix_seed(seed, 1));
    const std::vector<int> views = ds.train_views();
    rec.view = views[static_cast<std::size_t>(mix_seed(seed, 2) % views.size())];
    const FrameData& fr = ds.frames[static_cast<std::size_t>(rec.frame)];
    const auto v = static_cast<std::size_t>(rec.view);

    const FrameGeometry geo = cache.geometry(rec.frame);
    const bool full = s.stage == 2;
    const ForwardPass fp = model_forward(s.model, geo, fr.pose, fr.cameras[v], stage_switches(s), mix_seed(seed, 3),
                                         c.render_settings());
    const StepLoss sl = compute_step_loss(s.model, fp, fr.images[v], fr.hand_box[v], fr.face_box[v], c.loss, full,
                                          c.patch_loss);
    rec.terms = sl.terms;
    rec.total = sl.total;
    rec.gaussians = s.model.gaussians.size();
    if (!std::isfinite(sl.total)) {
        dump_failure(dump_dir, rec);
        throw NumericalError("non-finite loss at stage " + std::to_string(s.stage) + " step " + std::to_string(s.step) +
                             " (frame " + std::to_string(rec.frame) + ", view " + std::to_string(rec.view) + ")");
    }
    const ModelGrad grad = model_backward(s.model, geo, fp, sl.image_grad, full ? &sl.extra : nullptr);

    GaussianSet& g = s.model.gaussians;
    const std::size_t n = g.size();
    if (s.stage == 1) {
        const double half_w = 0.5 * fr.cameras[v].width, half_h = 0.5 * fr.cameras[v].height;
        for (std::size_t i = 0; i < n; ++i) {
            if (!fp.render.output.visible[i]) continue;
            s.stats.grad_accum[i] += Vec2(grad.mean2d[i].x() * half_w, grad.mean2d[i].y() * half_h).norm();
            s.stats.denom[i] += 1;
            s.stats.max_world_scale[i] = std::max(s.stats.max_world_scale[i], fp.world.scale[i].maxCoeff());
        }
    }

    const std::int64_t global = s.stage == 1 ? s.step : c.stage1_steps + s.step;
    const double lr_pos = exponential_lr(c.lr_position, c.lr_position_final, global, c.stage1_steps + c.stage2_steps);
    adam_step(detail::flat(g.local_position), detail::flat(grad.gauss.local_position), 3 * n, s.opt.position, lr_pos);
    adam_step(detail::flat(g.log_scale), detail::flat(grad.gauss.log_scale), 3 * n, s.opt.log_scale, c.lr_scale);
    adam_step(detail::flat(g.rotation), detail::flat(grad.gauss.rotation), 4 * n, s.opt.rotation, c.lr_rotation);
    adam_step(detail::flat(g.color_raw), detail::flat(grad.gauss.color_raw), 3 * n, s.opt.color, c.lr_color);
    adam_step(g.opacity_logit.data(), grad.gauss.opacity_logit.data(), n, s.opt.opacity, c.lr_opacity);
    for (auto& q : g.rotation) q.normalize();
    if (s.stage == 2) {
        if (c.hand_mlp) {
            adam_step(g.point_feature.data(), grad.point_feature.data(), static_cast<std::size_t>(g.point_feature.size()),
                      s.opt.point_feature, c.lr_point_feature);
            detail::step_mlp(s.model.hand.geo, grad.geo, s.opt.geo, c.lr_mlp);
            detail::step_mlp(s.model.hand.app, grad.app, s.opt.app, c.lr_mlp);
        }
        if (c.interaction_mlp) detail::step_mlp(s.model.interaction, grad.inter, s.opt.inter, c.lr_mlp);
        if (c.hand_mlp || c.interaction_mlp) detail::step_mlp(s.model.encoder.mlp, grad.enc, s.opt.enc, c.lr_mlp);
    }
    ++s.step;
    if (s.stage == 1 && s.step >= c.densify_from && s.step <= c.densify_until && s.step % c.densify_interval == 0)
        densify(s, ds, mix_seed(seed, 4));
    return rec;
}

struct TrainHooks {
    std::function<void(const StepRecord&)> on_log;
    std::function<void(const TrainState&)> on_checkpoint;
    std::filesystem::path dump_dir;
};

/// Runs the remaining steps of the current stage.
inline void run_stage(TrainState& s, const SceneDataset& ds, PbdCache& cache, const TrainHooks& hooks = {}) {
    const FrameSampler sampler(interaction_flags(ds), s.config.oversample);
    const int total = s.stage == 1 ? s.config.stage1_steps : s.config.stage2_steps;
    while (s.step < total) {
        const StepRecord rec = train_step(s, ds, cache, sampler, hooks.dump_dir);
        if (hooks.on_log && s.config.log_every > 0 && (rec.step % s.config.log_every == 0 || s.step == total))
            hooks.on_log(rec);
        if (hooks.on_checkpoint && s.config.checkpoint_every > 0 && s.step % s.config.checkpoint_every == 0 &&
            s.step < total)
            hooks.on_checkpoint(s);
    }
}

/// Switches a finished stage-1 state to stage 2.
inline void begin_stage2(TrainState& s) {
    if (s.stage != 1) throw ValidationError("stage 2 must start from a stage-1 checkpoint");
    if (s.step != s.config.stage1_steps) throw ValidationError("stage-1 checkpoint is incomplete");
    s.stage = 2;
    s.step = 0;
    s.stats = DensityStats(s.model.gaussians.size());
}

inline TrainState train_stage1(const SceneDataset& ds, const TrainConfig& cfg, PbdCache& cache,
                               const TrainHooks& hooks = {}) {
    TrainState s = init_training(ds, cfg);
    run_stage(s, ds, cache, hooks);
    return s;
}

inline TrainState train_stage2(TrainState s, const SceneDataset& ds, PbdCache& cache, const TrainHooks& hooks = {}) {
    begin_stage2(s);
    run_stage(s, ds, cache, hooks);
    return s;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct MetricRow {
    int frame = 0;
    int view = 0;
    double psnr = 0.0;
    double ssim = 0.0;
    double position_violation = 0.0;  // L_mu over visible Gaussians
};

struct EvalResult {
    std::vector<MetricRow> rows;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    double mean_position_violation = 0.0;
    double interaction_position_violation = 0.0;  // mean over interaction frames
};

/// Representative sampling seed used outside training, so a render depends only on its inputs.
inline constexpr std::uint64_t kInferenceSampleSeed = 0x5eed;

inline Image render_frame(const Model& m, const FrameGeometry& geo, const PoseState& pose, const Camera& cam,
                          const DynamicsSwitches& sw, const RenderSettings& rs, ForwardPass* keep = nullptr) {
    ForwardPass fp = model_forward(m, geo, pose, cam, sw, kInferenceSampleSeed, rs);
    Image img = fp.render.output.color;
    if (keep) *keep = std::move(fp);
    return img;
}

/// PSNR/SSIM of every (frame, view) pair against the ground truth.
inline EvalResult evaluate(const Model& m, const SceneDataset& ds, PbdCache& cache, const std::vector<int>& views,
                           const DynamicsSwitches& sw, const LossWeights& w, const RenderSettings& rs = {}) {
    EvalResult out;
    double inter_sum = 0.0;
    int inter_n = 0;
    for (int k = 0; k < ds.num_frames(); ++k) {
        const FrameGeometry geo = cache.geometry(k);
        const FrameData& fr = ds.frames[static_cast<std::size_t>(k)];
        for (int v : views) {
            const auto sv = static_cast<std::size_t>(v);
            ForwardPass fp;
            const Image img = render_frame(m, geo, fr.pose, fr.cameras[sv], sw, rs, &fp);
            MetricRow row{k, v, psnr(img, fr.images[sv]), ssim(img, fr.images[sv]).value, 0.0};
            row.position_violation =
                position_regularizer(m.gaussians, fp.used_dynamics ? &fp.deltas.position : nullptr, w.eps_mu,
                                     fp.render.output.visible).value;
            if (fr.interaction) {
                inter_sum += row.position_violation;
                ++inter_n;
            }
            out.rows.push_back(row);
        }
    }
    for (const auto& r : out.rows) {
        out.mean_psnr += r.psnr;
        out.mean_ssim += r.ssim;
        out.mean_position_violation += r.position_violation;
    }
    if (!out.rows.empty()) {
        const double inv = 1.0 / static_cast<double>(out.rows.size());
        out.mean_psnr *= inv;
        out.mean_ssim *= inv;
        out.mean_position_violation *= inv;
    }
    out.interaction_position_violation = inter_n ? inter_sum / inter_n : 0.0;
    return out;
}

/// Tab-separated per-row metrics followed by the aggregate.
inline std::string metrics_text(const EvalResult& r) {
    std::ostringstream os;
    char buf[256];
    os << "frame\tview\tpsnr\tssim\tposition_violation\n";
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%d\t%d\t%.17g\t%.17g\t%.17g\n", row.frame, row.view, row.psnr, row.ssim,
                      row.position_violation);
        os << buf;
    }
    std::snprintf(buf, sizeof buf, "mean\tall\t%.17g\t%.17g\t%.17g\n", r.mean_psnr, r.mean_ssim,
                  r.mean_position_violation);
    os << buf;
    std::snprintf(buf, sizeof buf, "interaction_position_violation\t%.17g\n", r.interaction_position_violation);
    os << buf;
    return os.str();
}

}  // namespace hfsplat
