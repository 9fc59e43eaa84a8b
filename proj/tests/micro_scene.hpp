#pragma once

// Tiny end-to-end scenes for gradient checks: a face patch, a hand tetrahedron
// close to it, live networks and a random target.

#include "hfsplat/training.hpp"
#include "test_util.hpp"

namespace hfsplat::testing {

struct MicroScene {
    Model model;
    FrameGeometry geo;
    PoseState pose;
    Camera cam;
    Image target;
    PixelBox hand_box{2, 3, 12, 11};
    PixelBox face_box{5, 1, 15, 14};
    LossWeights weights;
};

inline void randomize_mlp(Mlp& net, std::mt19937_64& rng, double scale) {
    for (auto& w : net.weights())
        for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] += scale * uniform(rng, -1, 1);
    for (auto& b : net.biases())
        for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] += 0.1 * scale * uniform(rng, -1, 1);
}

/// 8 face facets and 4 hand facets, one Gaussian each.
inline MicroScene make_micro_scene(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    MicroScene s;
    TriangleMesh face = grid_mesh(2, 0.24);
    for (auto& v : face.vertices) v.z() += uniform(rng, -0.01, 0.01);
    TriangleMesh hand;
    const auto& tri = face.faces[rng() % face.faces.size()];
    Vec3 c = (face.vertices[tri[0]] + face.vertices[tri[1]] + face.vertices[tri[2]]) / 3.0;
    c.z() = -0.032;
    hand.vertices = {c + Vec3(0.03, 0, -0.02), c + Vec3(-0.02, 0.03, -0.02), c + Vec3(-0.02, -0.03, -0.02),
                     c + Vec3(0, 0, 0.03)};
    hand.faces = {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {2, 0, 3}};

    DeformationField field;
    field.vertex_offset.assign(face.vertices.size(), Vec3::Zero());
    for (auto& o : field.vertex_offset)
        if (uniform(rng, 0, 1) < 0.5) o = random_vec3(rng, -0.004, 0.004);
    field.facet_offset = aggregate_facet_offsets(field.vertex_offset, face);
    s.geo = make_frame_geometry(face, hand, field);

    s.model.net.hidden = 8;
    s.model.net.pos_freq = 2;
    s.model.net.def_freq = 2;
    s.model.net.theta_hand_dim = 2;
    s.model.net.theta_face_dim = 1;
    s.model.net.psi_dim = 2;
    s.model.face_facets = face.num_faces();
    s.model.hand_facets = hand.num_faces();
    BindOptions bo;
    bo.n_per_face = 1;
    bo.init_local_scale = 0.45;
    bo.point_feature_std = 0.5;
    bo.seed = mix_seed(seed, 1);
    s.model.gaussians = bind_initial_gaussians(concat_meshes(face, hand), bo);
    GaussianSet& g = s.model.gaussians;
    for (std::size_t i = 0; i < g.size(); ++i) {
        g.local_position[i] = Vec3(uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, -0.1, 0.1));
        g.log_scale[i] += random_vec3(rng, -0.3, 0.3);
        g.rotation[i] = random_quat(rng);
        g.color_raw[i] = random_vec3(rng, -1, 1);
        g.opacity_logit[i] = uniform(rng, -0.5, 1.5);
    }
    s.model.hand = HandNetworks::create(s.model.net, mix_seed(seed, 2));
    s.model.interaction = create_interaction_network(s.model.net, mix_seed(seed, 3));
    s.model.encoder = PointEncoder::create(mix_seed(seed, 4));
    randomize_mlp(s.model.hand.geo, rng, 0.05);
    randomize_mlp(s.model.hand.app, rng, 0.05);
    randomize_mlp(s.model.interaction, rng, 0.05);

    s.pose.theta_hand = VecX::Random(2);
    s.pose.theta_face = VecX::Random(1);
    s.pose.psi = VecX::Random(2);
    s.pose.r_hand = random_quat(rng);
    s.pose.t_hand = c;
    s.pose.r_face = random_quat(rng);
    s.pose.t_face = random_vec3(rng, -0.05, 0.05);
    s.pose.update_relative();

    s.cam = Camera::look_at(Vec3(0, 0, -1), Vec3::Zero(), Vec3(0, -1, 0), 60.0, 16, 16);
    s.cam.cx += 0.37;
    s.target = Image(16, 16);
    for (auto& v : s.target.data) v = uniform(rng, 0, 1);
    s.weights.eps_s = 0.3;
    s.weights.eps_mu = 0.15;
    s.weights.c = 0.5;
    return s;
}

inline double micro_loss(const MicroScene& s, const DynamicsSwitches& sw = {}) {
    const ForwardPass fp = model_forward(s.model, s.geo, s.pose, s.cam, sw, 7, {});
    return compute_step_loss(s.model, fp, s.target, s.hand_box, s.face_box, s.weights, true, true).total;
}

inline ModelGrad micro_grad(const MicroScene& s, const DynamicsSwitches& sw = {}) {
    const ForwardPass fp = model_forward(s.model, s.geo, s.pose, s.cam, sw, 7, {});
    const StepLoss sl = compute_step_loss(s.model, fp, s.target, s.hand_box, s.face_box, s.weights, true, true);
    return model_backward(s.model, s.geo, fp, sl.image_grad, &sl.extra);
}

struct GradCheck {
    int checked = 0;
    int failed = 0;
    double worst = 0.0;
    std::string worst_name;

    void add(const std::string& name, double analytic, double numeric, double tol, double floor) {
        const double e = relative_error(analytic, numeric, floor);
        ++checked;
        if (e > tol) ++failed;
        if (e > worst) {
            worst = e;
            char buf[96];
            std::snprintf(buf, sizeof buf, " (analytic %.6g, numeric %.6g)", analytic, numeric);
            worst_name = name + buf;
        }
    }
};

/// Compares every Gaussian parameter, the point features of hand Gaussians and
/// sampled network weights of all four networks against central differences.
inline GradCheck check_micro_gradients(MicroScene& s, double h, double tol, double floor, std::uint64_t seed) {
    GradCheck gc;
    const ModelGrad g = micro_grad(s);
    const std::function<double()> loss = [&] { return micro_loss(s); };
    GaussianSet& gs = s.model.gaussians;
    for (std::size_t i = 0; i < gs.size(); ++i) {
        const std::string id = std::to_string(i);
        for (int a = 0; a < 3; ++a) {
            gc.add("local_position " + id, g.gauss.local_position[i][a], central_difference(loss, gs.local_position[i][a], h), tol, floor);
            gc.add("log_scale " + id, g.gauss.log_scale[i][a], central_difference(loss, gs.log_scale[i][a], h), tol, floor);
            gc.add("color " + id, g.gauss.color_raw[i][a], central_difference(loss, gs.color_raw[i][a], h), tol, floor);
        }
        for (int a = 0; a < 4; ++a)
            gc.add("rotation " + id, g.gauss.rotation[i][a], central_difference(loss, gs.rotation[i][a], h), tol, floor);
        gc.add("opacity " + id, g.gauss.opacity_logit[i], central_difference(loss, gs.opacity_logit[i], h), tol, floor);
        if (s.model.is_hand(i))
            for (int c = 0; c < kPointFeatureDim; c += 9)
                gc.add("point_feature " + id, g.point_feature(c, static_cast<Eigen::Index>(i)),
                       central_difference(loss, gs.point_feature(c, static_cast<Eigen::Index>(i)), h), tol, floor);
    }
    std::mt19937_64 rng(seed);
    auto sample_net = [&](const std::string& name, Mlp& net, const MlpGrad& ng, int per_layer) {
        for (std::size_t l = 0; l < net.weights().size(); ++l) {
            MatX& w = net.weights()[l];
            for (int k = 0; k < per_layer; ++k) {
                const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(w.size()));
                gc.add(name + " w" + std::to_string(l), ng.weight[l].data()[idx], central_difference(loss, w.data()[idx], h),
                       tol, floor);
            }
            VecX& b = net.biases()[l];
            const auto idx = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(b.size()));
            gc.add(name + " b" + std::to_string(l), ng.bias[l][idx], central_difference(loss, b[idx], h), tol, floor);
        }
    };
    sample_net("geo", s.model.hand.geo, g.geo, 3);
    sample_net("app", s.model.hand.app, g.app, 3);
    sample_net("interaction", s.model.interaction, g.inter, 3);
    sample_net("encoder", s.model.encoder.mlp, g.enc, 3);
    return gc;
}

}  // namespace hfsplat::testing
