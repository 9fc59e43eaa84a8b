#pragma once

// Multi-view hand-face datasets: the in-memory model, a synthetic generator
// built on the proxy rigs with a reference mesh renderer, and directory IO.
//
// Layout of a dataset directory:
//   scene.meta                       JSON: topology, skull, masks, counts
//   frames/<k>/mesh_face, mesh_hand  vertex lists (text, versioned)
//   frames/<k>/pose                  JSON PoseState
//   frames/<k>/annotations           JSON interaction flag and per-view boxes
//   frames/<k>/cam_<v>               JSON pinhole camera
//   frames/<k>/views/<v>.png         8-bit RGB image

#include "hfsplat/camera.hpp"
#include "hfsplat/dynamics.hpp"
#include "hfsplat/image_io.hpp"
#include "hfsplat/interaction.hpp"
#include "hfsplat/rig.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

namespace hfsplat {

using json = nlohmann::json;

inline constexpr int kSceneVersion = 1;

struct FrameData {
    std::vector<Vec3> face_vertices;  // tracked face mesh, no contact deformation
    std::vector<Vec3> hand_vertices;
    PoseState pose;
    std::vector<Camera> cameras;
    std::vector<Image> images;
    bool interaction = false;
    std::vector<PixelBox> hand_box;
    std::vector<PixelBox> face_box;

    bool operator==(const FrameData& o) const {
        auto img_eq = [](const std::vector<Image>& a, const std::vector<Image>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t k = 0; k < a.size(); ++k)
                if (!a[k].same_shape(b[k]) || a[k].data != b[k].data) return false;
            return true;
        };
        auto cam_eq = [](const std::vector<Camera>& a, const std::vector<Camera>& b) {
            if (a.size() != b.size()) return false;
            for (std::size_t k = 0; k < a.size(); ++k)
                if (a[k].fx != b[k].fx || a[k].fy != b[k].fy || a[k].cx != b[k].cx || a[k].cy != b[k].cy ||
                    a[k].rotation != b[k].rotation || a[k].translation != b[k].translation ||
                    a[k].width != b[k].width || a[k].height != b[k].height)
                    return false;
            return true;
        };
        return face_vertices == o.face_vertices && hand_vertices == o.hand_vertices && pose == o.pose &&
               cam_eq(cameras, o.cameras) && img_eq(images, o.images) && interaction == o.interaction &&
               hand_box == o.hand_box && face_box == o.face_box;
    }
};

struct SceneDataset {
    std::vector<std::array<int, 3>> face_faces;
    std::vector<std::array<int, 3>> hand_faces;
    int face_vertex_count = 0;
    int hand_vertex_count = 0;
    TriangleMesh skull;          // world space, canonical frame
    std::vector<char> nonrigid;  // per face vertex; 0 = rigidly attached skin
    int canonical_frame = 0;
    int held_out_view = -1;      // -1 when every view trains
    std::vector<FrameData> frames;

    [[nodiscard]] int num_frames() const { return static_cast<int>(frames.size()); }
    [[nodiscard]] int num_views() const { return frames.empty() ? 0 : static_cast<int>(frames[0].cameras.size()); }
    [[nodiscard]] int num_face_facets() const { return static_cast<int>(face_faces.size()); }

    [[nodiscard]] TriangleMesh face_mesh(int k) const {
        TriangleMesh m;
        m.vertices = frames.at(static_cast<std::size_t>(k)).face_vertices;
        m.faces = face_faces;
        return m;
    }
    [[nodiscard]] TriangleMesh hand_mesh(int k) const {
        TriangleMesh m;
        m.vertices = frames.at(static_cast<std::size_t>(k)).hand_vertices;
        m.faces = hand_faces;
        return m;
    }
    [[nodiscard]] std::vector<int> train_views() const {
        std::vector<int> v;
        for (int i = 0; i < num_views(); ++i)
            if (i != held_out_view) v.push_back(i);
        return v;
    }

    bool operator==(const SceneDataset& o) const {
        return face_faces == o.face_faces && hand_faces == o.hand_faces && face_vertex_count == o.face_vertex_count &&
               hand_vertex_count == o.hand_vertex_count && skull.vertices == o.skull.vertices &&
               skull.faces == o.skull.faces && nonrigid == o.nonrigid && canonical_frame == o.canonical_frame &&
               held_out_view == o.held_out_view && frames == o.frames;
    }

    void validate() const;
};

namespace detail {

inline void check_topology(const std::vector<std::array<int, 3>>& faces, int nv, const std::string& what) {
    if (faces.empty()) throw ValidationError(what + ": no facets");
    for (std::size_t f = 0; f < faces.size(); ++f)
        for (int v : faces[f])
            if (v < 0 || v >= nv)
                throw ValidationError(what + ": facet " + std::to_string(f) + " references vertex " +
                                      std::to_string(v) + " of " + std::to_string(nv));
}

inline bool finite_points(const std::vector<Vec3>& v) {
    for (const auto& p : v)
        if (!p.allFinite()) return false;
    return true;
}

}  // namespace detail

/// Checks every dataset invariant; throws ValidationError naming the frame and view.
inline void SceneDataset::validate() const {
    if (frames.empty()) throw ValidationError("dataset: no frames");
    detail::check_topology(face_faces, face_vertex_count, "face topology");
    detail::check_topology(hand_faces, hand_vertex_count, "hand topology");
    if (nonrigid.size() != static_cast<std::size_t>(face_vertex_count))
        throw ValidationError("dataset: non-rigid mask has " + std::to_string(nonrigid.size()) + " entries, expected " +
                              std::to_string(face_vertex_count));
    if (!skull.faces.empty()) detail::check_topology(skull.faces, skull.num_vertices(), "skull");
    if (canonical_frame < 0 || canonical_frame >= num_frames())
        throw ValidationError("dataset: canonical frame " + std::to_string(canonical_frame) + " out of range");
    const int nv = num_views();
    if (held_out_view < -1 || held_out_view >= nv)
        throw ValidationError("dataset: held-out view " + std::to_string(held_out_view) + " out of range");
    const PoseState& p0 = frames[0].pose;
    for (int k = 0; k < num_frames(); ++k) {
        const FrameData& fr = frames[static_cast<std::size_t>(k)];
        const std::string at = "frame " + std::to_string(k);
        if (fr.face_vertices.size() != static_cast<std::size_t>(face_vertex_count))
            throw ValidationError(at + ": face mesh has " + std::to_string(fr.face_vertices.size()) +
                                  " vertices, expected " + std::to_string(face_vertex_count));
        if (fr.hand_vertices.size() != static_cast<std::size_t>(hand_vertex_count))
            throw ValidationError(at + ": hand mesh has " + std::to_string(fr.hand_vertices.size()) +
                                  " vertices, expected " + std::to_string(hand_vertex_count));
        if (!detail::finite_points(fr.face_vertices) || !detail::finite_points(fr.hand_vertices))
            throw ValidationError(at + ": non-finite mesh vertices");
        if (fr.cameras.empty()) throw ValidationError(at + ": no views");
        if (static_cast<int>(fr.cameras.size()) != nv)
            throw ValidationError(at + ": has " + std::to_string(fr.cameras.size()) + " views, frame 0 has " +
                                  std::to_string(nv));
        if (fr.images.size() != fr.cameras.size() || fr.hand_box.size() != fr.cameras.size() ||
            fr.face_box.size() != fr.cameras.size())
            throw ValidationError(at + ": per-view images, cameras and boxes differ in count");
        if (fr.pose.theta_hand.size() != p0.theta_hand.size() || fr.pose.theta_face.size() != p0.theta_face.size() ||
            fr.pose.psi.size() != p0.psi.size() || fr.pose.beta_hand.size() != p0.beta_hand.size() ||
            fr.pose.beta_face.size() != p0.beta_face.size())
            throw ValidationError(at + ": pose dimensions differ from frame 0");
        for (int v = 0; v < nv; ++v) {
            const std::string av = at + ", view " + std::to_string(v);
            const auto sv = static_cast<std::size_t>(v);
            try {
                fr.cameras[sv].validate();
            } catch (const ValidationError& e) {
                throw ValidationError(av + ": " + e.what());
            }
            const Image& img = fr.images[sv];
            if (img.width != fr.cameras[sv].width || img.height != fr.cameras[sv].height)
                throw ValidationError(av + ": image is " + std::to_string(img.width) + "x" +
                                      std::to_string(img.height) + " but the camera is " +
                                      std::to_string(fr.cameras[sv].width) + "x" +
                                      std::to_string(fr.cameras[sv].height));
            for (double x : img.data)
                if (!(x >= 0.0 && x <= 1.0)) throw ValidationError(av + ": pixel values outside [0, 1]");
            if (!fr.hand_box[sv].within(img.width, img.height) || !fr.face_box[sv].within(img.width, img.height))
                throw ValidationError(av + ": bounding box outside the image");
        }
    }
}

/// Pixel box covering the projections of `pts` (empty when nothing lands on screen).
inline PixelBox project_box(const std::vector<Vec3>& pts, const Camera& cam) {
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (const auto& p : pts) {
        const Vec3 c = cam.to_camera(p);
        if (c.z() <= 1e-6) continue;
        const double u = cam.fx * c.x() / c.z() + cam.cx, v = cam.fy * c.y() / c.z() + cam.cy;
        x0 = std::min(x0, u);
        y0 = std::min(y0, v);
        x1 = std::max(x1, u);
        y1 = std::max(y1, v);
    }
    if (x0 > x1) return PixelBox{};
    auto clampi = [](double v, int hi) { return static_cast<int>(std::clamp(v, 0.0, static_cast<double>(hi))); };
    PixelBox b{clampi(std::floor(x0 + 0.5), cam.width), clampi(std::floor(y0 + 0.5), cam.height),
               clampi(std::floor(x1 + 0.5) + 1, cam.width), clampi(std::floor(y1 + 0.5) + 1, cam.height)};
    if (b.empty()) return PixelBox{};
    return b;
}

inline void compute_boxes(FrameData& fr) {
    fr.hand_box.clear();
    fr.face_box.clear();
    for (const auto& cam : fr.cameras) {
        fr.hand_box.push_back(project_box(fr.hand_vertices, cam));
        fr.face_box.push_back(project_box(fr.face_vertices, cam));
    }
}

/// Stiffness of the face vertices from the canonical skin-to-skull distances;
/// vertices outside the non-rigid mask are rigid.
inline std::vector<double> dataset_stiffness(const SceneDataset& ds) {
    const TriangleMesh face = ds.face_mesh(ds.canonical_frame);
    std::vector<double> s = ds.skull.faces.empty() ? std::vector<double>(face.vertices.size(), 0.0)
                                                   : compute_stiffness(face, ds.skull);
    for (std::size_t v = 0; v < s.size(); ++v)
        if (!ds.nonrigid[v]) s[v] = 1.0;
    return s;
}

/// Closest distance between any hand vertex and the face surface.
inline double hand_face_distance(const TriangleMesh& face, const TriangleMesh& hand) {
    double d = std::numeric_limits<double>::infinity();
    for (const auto& p : hand.vertices) d = std::min(d, closest_surface_point(face, p).distance);
    return d;
}

// ---------------------------------------------------------------------------
// Reference mesh renderer used to produce ground truth.

/// A posed mesh plus a per-sample albedo callback (rest-space point, world point).
struct ShadedMesh {
    TriangleMesh mesh;
    std::vector<Vec3> rest;
    std::function<Vec3(const Vec3& rest, const Vec3& world)> albedo;
};

struct ReferenceLight {
    Vec3 direction = Vec3(0.3, -0.5, -1.0).normalized();  // toward the light
    double ambient = 0.35;
    double diffuse = 0.65;
};

/// Z-buffered, perspective-correct, Lambert-shaded render with supersample^2 samples per pixel.
inline Image render_reference(const std::vector<ShadedMesh>& meshes, const Camera& cam, int supersample = 2,
                              const ReferenceLight& light = {}) {
    require(supersample >= 1, "render_reference: supersample must be >= 1");
    const int ss = supersample, w = cam.width * ss, h = cam.height * ss;
    const double fx = cam.fx * ss, fy = cam.fy * ss;
    const double cx = cam.cx * ss + 0.5 * (ss - 1), cy = cam.cy * ss + 0.5 * (ss - 1);
    struct Sample {
        double depth = std::numeric_limits<double>::infinity();
        int mesh = -1, tri = -1;
        Vec3 bary = Vec3::Zero();
    };
    std::vector<Sample> zb(static_cast<std::size_t>(w) * h);
    std::vector<std::vector<Vec3>> normals;
    for (std::size_t mi = 0; mi < meshes.size(); ++mi) {
        const TriangleMesh& m = meshes[mi].mesh;
        normals.push_back(vertex_normals(m));
        std::vector<Vec3> pc(m.vertices.size());
        for (std::size_t v = 0; v < pc.size(); ++v) pc[v] = cam.to_camera(m.vertices[v]);
        for (std::size_t t = 0; t < m.faces.size(); ++t) {
            const auto& f = m.faces[t];
            Vec2 s[3];
            double z[3];
            bool ok = true;
            for (int i = 0; i < 3; ++i) {
                const Vec3& p = pc[static_cast<std::size_t>(f[i])];
                if (p.z() < 1e-3) ok = false;
                z[i] = p.z();
                s[i] = Vec2(fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy);
            }
            if (!ok) continue;
            const double area = (s[1] - s[0]).x() * (s[2] - s[0]).y() - (s[1] - s[0]).y() * (s[2] - s[0]).x();
            if (std::abs(area) < 1e-12) continue;
            const int x0 = std::max(0, static_cast<int>(std::ceil(std::min({s[0].x(), s[1].x(), s[2].x()}))));
            const int x1 = std::min(w - 1, static_cast<int>(std::floor(std::max({s[0].x(), s[1].x(), s[2].x()}))));
            const int y0 = std::max(0, static_cast<int>(std::ceil(std::min({s[0].y(), s[1].y(), s[2].y()}))));
            const int y1 = std::min(h - 1, static_cast<int>(std::floor(std::max({s[0].y(), s[1].y(), s[2].y()}))));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const Vec2 q(x, y);
                    auto edge = [&](const Vec2& a, const Vec2& b) {
                        return ((b - a).x() * (q - a).y() - (b - a).y() * (q - a).x()) / area;
                    };
                    const double l0 = edge(s[1], s[2]), l1 = edge(s[2], s[0]), l2 = edge(s[0], s[1]);
                    if (l0 < -1e-12 || l1 < -1e-12 || l2 < -1e-12) continue;
                    Vec3 b(l0 / z[0], l1 / z[1], l2 / z[2]);
                    const double inv_z = b.sum();
                    const double depth = 1.0 / inv_z;
                    Sample& smp = zb[static_cast<std::size_t>(y) * w + x];
                    if (depth >= smp.depth) continue;
                    smp = Sample{depth, static_cast<int>(mi), static_cast<int>(t), b / inv_z};
                }
        }
    }
    const Vec3 eye = cam.center();
    Image out(cam.width, cam.height);
    const double share = 1.0 / (ss * ss);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const Sample& smp = zb[static_cast<std::size_t>(y) * w + x];
            if (smp.mesh < 0) continue;
            const ShadedMesh& sm = meshes[static_cast<std::size_t>(smp.mesh)];
            const auto& f = sm.mesh.faces[static_cast<std::size_t>(smp.tri)];
            Vec3 pw = Vec3::Zero(), pr = Vec3::Zero(), n = Vec3::Zero();
            for (int i = 0; i < 3; ++i) {
                const auto vi = static_cast<std::size_t>(f[i]);
                pw += smp.bary[i] * sm.mesh.vertices[vi];
                pr += smp.bary[i] * sm.rest[vi];
                n += smp.bary[i] * normals[static_cast<std::size_t>(smp.mesh)][vi];
            }
            n.normalize();
            if (n.dot(eye - pw) < 0) n = -n;
            const double shade = light.ambient + light.diffuse * std::max(0.0, n.dot(light.direction));
            const Vec3 c = (sm.albedo(pr, pw) * shade).cwiseMax(0.0).cwiseMin(1.0);
            for (int ch = 0; ch < 3; ++ch) out.at(x / ss, y / ss, ch) += share * c[ch];
        }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scene generation.

struct SceneSpec {
    int approach_frames = 4;
    int contact_frames = 4;
    int retreat_frames = 4;
    int views = 8;
    int held_out_view = 7;
    int width = 96;
    int height = 96;
    double max_depth = 0.006;    // deepest finger penetration before collision resolution
    double gt_softness = 0.5;    // ground-truth stiffness multiplier
    int supersample = 2;
    std::uint64_t seed = 1;

    [[nodiscard]] int frames() const { return approach_frames + contact_frames + retreat_frames; }

    void validate() const {
        if (approach_frames < 0 || contact_frames < 0 || retreat_frames < 0)
            throw ValidationError("scene spec: frame counts must be non-negative");
        if (frames() < 1) throw ValidationError("scene spec: need at least one frame");
        if (views < 1) throw ValidationError("scene spec: need at least one view");
        if (held_out_view < -1 || held_out_view >= views)
            throw ValidationError("scene spec: held_out_view must be -1 or a view index below " + std::to_string(views));
        if (width < 16 || height < 16) throw ValidationError("scene spec: resolution must be at least 16x16");
        if (!(max_depth >= 0.0 && max_depth < 0.02)) throw ValidationError("scene spec: max_depth must lie in [0, 0.02)");
        if (!(gt_softness >= 0.0 && gt_softness <= 1.0))
            throw ValidationError("scene spec: gt_softness must lie in [0, 1]");
        if (supersample < 1 || supersample > 4) throw ValidationError("scene spec: supersample must lie in [1, 4]");
    }
};

inline void to_json(json& j, const SceneSpec& s) {
    j = json{{"approach_frames", s.approach_frames}, {"contact_frames", s.contact_frames},
             {"retreat_frames", s.retreat_frames},   {"views", s.views},
             {"held_out_view", s.held_out_view},     {"width", s.width},
             {"height", s.height},                   {"max_depth", s.max_depth},
             {"gt_softness", s.gt_softness},         {"supersample", s.supersample},
             {"seed", s.seed}};
}

/// Reads a spec; unknown keys are rejected so typos do not pass silently.
inline SceneSpec scene_spec_from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("scene spec: expected a JSON object");
    SceneSpec s;
    const json ref = s;
    for (const auto& [k, v] : j.items())
        if (!ref.contains(k)) throw ValidationError("scene spec: unknown key '" + k + "'");
    try {
        s.approach_frames = j.value("approach_frames", s.approach_frames);
        s.contact_frames = j.value("contact_frames", s.contact_frames);
        s.retreat_frames = j.value("retreat_frames", s.retreat_frames);
        s.views = j.value("views", s.views);
        s.held_out_view = j.value("held_out_view", s.held_out_view);
        s.width = j.value("width", s.width);
        s.height = j.value("height", s.height);
        s.max_depth = j.value("max_depth", s.max_depth);
        s.gt_softness = j.value("gt_softness", s.gt_softness);
        s.supersample = j.value("supersample", s.supersample);
        s.seed = j.value("seed", s.seed);
    } catch (const json::exception& e) {
        throw ValidationError(std::string("scene spec: ") + e.what());
    }
    s.validate();
    return s;
}

/// Minimal rotation taking unit vector a onto unit vector b.
inline QuatVec rotation_between(const Vec3& a, const Vec3& b) {
    const double c = a.dot(b);
    if (c < -1.0 + 1e-12) {
        Vec3 axis = a.cross(Vec3::UnitX());
        if (axis.norm() < 1e-6) axis = a.cross(Vec3::UnitY());
        return axis_angle_quat(axis.normalized(), std::numbers::pi);
    }
    const Vec3 x = a.cross(b);
    return QuatVec(1.0 + c, x.x(), x.y(), x.z()).normalized();
}

/// Cameras on a cone facing the face: view 0 frontal, the others spread over
/// two rings; the held-out view sits between training views.
inline std::vector<Camera> make_rig_cameras(int views, int width, int height) {
    std::vector<Camera> cams;
    const Vec3 target(0, 0, -0.03);
    const double dist = 0.32, f = 1.35 * std::min(width, height);
    for (int v = 0; v < views; ++v) {
        double polar = 0.0, azim = 0.0;
        if (v > 0) {
            const int ring = (v - 1) % 2;
            polar = ring == 0 ? 0.45 : 0.3;
            azim = 2.0 * std::numbers::pi * (v - 1) / std::max(1, views - 1) + 0.3;
        }
        const Vec3 dir(std::sin(polar) * std::cos(azim), std::sin(polar) * std::sin(azim), -std::cos(polar));
        cams.push_back(Camera::look_at(target + dist * dir, target, Vec3(0, 1, 0), f, width, height));
    }
    return cams;
}

inline Vec3 face_albedo(const Vec3& rest, double hand_distance) {
    const double t = 0.5 + 0.5 * std::sin(45.0 * rest.x() + 1.3) * std::cos(38.0 * rest.y() - 0.4);
    Vec3 c = Vec3(0.82, 0.6, 0.5) * (0.8 + 0.35 * t);
    const Vec3 d = rest.normalized();
    const double lip = std::exp(-0.5 * std::pow(std::acos(std::clamp(d.dot(Vec3(0.1, -0.7, -1).normalized()), -1.0, 1.0)) / 0.15, 2));
    c = (1 - lip) * c + lip * Vec3(0.7, 0.28, 0.3);
    const double brow = std::exp(-0.5 * std::pow((rest.y() - 0.035) / 0.006, 2)) * (std::abs(rest.x()) < 0.045);
    c *= 1.0 - 0.45 * brow;
    // contact shadow
    return c * (1.0 - 0.35 * contact_weight_of_distance(hand_distance, 0.025));
}

inline Vec3 finger_albedo(const Vec3& rest, const HandProxy& hp, const VecX& theta) {
    Vec3 c(0.88, 0.68, 0.56);
    c *= 0.93 + 0.07 * std::sin(180.0 * rest.z());
    for (std::size_t j = 0; j < hp.joint_z.size(); ++j) {
        const double crease = std::exp(-0.5 * std::pow((rest.z() - hp.joint_z[j]) / 0.003, 2));
        c *= 1.0 - std::min(0.7, 1.2 * std::abs(theta[static_cast<Eigen::Index>(j)])) * crease;
    }
    const double tip = hp.rig.rest[static_cast<std::size_t>(hp.tip_vertex)].z();
    if (rest.z() > tip - 0.009 && rest.y() > 0.002) c = Vec3(0.96, 0.82, 0.8);
    return c;
}

/// Hand-face scene with approach, contact and retreat phases. Contact frames
/// press the fingertip into the cheek; ground truth uses the softer skin.
inline SceneDataset generate_synthetic_scene(const SceneSpec& spec) {
    spec.validate();
    const FaceProxy face = make_face_proxy();
    const HandProxy hand = make_finger_proxy();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::uniform_real_distribution<double> shape(-0.1, 0.1);
    double ph[6];
    for (double& p : ph) p = phase(rng);
    const VecX beta_face = VecX::Constant(1, shape(rng)), beta_hand = VecX::Constant(1, shape(rng));

    SceneDataset ds;
    ds.face_faces = face.rig.faces;
    ds.hand_faces = hand.rig.faces;
    ds.face_vertex_count = face.rig.num_vertices();
    ds.hand_vertex_count = hand.rig.num_vertices();
    ds.held_out_view = spec.held_out_view;
    ds.nonrigid.resize(face.rig.rest.size());
    for (std::size_t v = 0; v < face.rig.rest.size(); ++v) ds.nonrigid[v] = face.rig.rest[v].z() < -0.2 * face.radius;
    const std::vector<Camera> cams = make_rig_cameras(spec.views, spec.width, spec.height);

    // the fingertip is narrower than a facet, so it presses on a vertex
    int contact_vertex = 0;
    const Vec3 contact_dir = Vec3(0.35, 0.3, -1).normalized();
    for (int v = 1; v < face.rig.num_vertices(); ++v)
        if (face.rig.rest[static_cast<std::size_t>(v)].normalized().dot(contact_dir) >
            face.rig.rest[static_cast<std::size_t>(contact_vertex)].normalized().dot(contact_dir))
            contact_vertex = v;
    const int n = spec.frames();
    std::vector<double> gap(static_cast<std::size_t>(n));
    const bool touches = spec.contact_frames > 0;
    const double near = touches ? 0.012 : 0.065, far = touches ? 0.07 : 0.09;
    for (int k = 0; k < n; ++k) {
        if (k < spec.approach_frames) {
            const double t = spec.approach_frames > 1 ? static_cast<double>(k) / (spec.approach_frames - 1) : 1.0;
            gap[static_cast<std::size_t>(k)] = far + (near - far) * t;
        } else if (k < spec.approach_frames + spec.contact_frames) {
            const int c = k - spec.approach_frames;
            gap[static_cast<std::size_t>(k)] =
                -spec.max_depth * std::sin(std::numbers::pi * (c + 1) / (spec.contact_frames + 1));
        } else {
            const int r = k - spec.approach_frames - spec.contact_frames;
            const double t = spec.retreat_frames > 1 ? static_cast<double>(r) / (spec.retreat_frames - 1) : 0.0;
            gap[static_cast<std::size_t>(k)] = near + (far - near) * t;
        }
    }

    std::vector<double> gt_stiffness;
    std::vector<Vec3> hand_rest = hand.rig.rest, face_rest = face.rig.rest;
    for (int k = 0; k < n; ++k) {
        FrameData fr;
        PoseState& p = fr.pose;
        p.psi = Vec2(0.6 * std::sin(0.5 * k + ph[0]), 0.6 * std::cos(0.45 * k + ph[1]));
        p.theta_face = VecX::Constant(1, 0.06 * std::sin(0.4 * k + ph[2]));
        p.theta_hand = Vec3(0.2 + 0.15 * std::sin(0.7 * k + ph[3]), 0.35 + 0.2 * std::sin(0.9 * k + ph[4]),
                            0.25 + 0.15 * std::sin(1.1 * k + ph[5]));
        p.beta_face = beta_face;
        p.beta_hand = beta_hand;
        p.r_face = axis_angle_quat(Vec3::UnitY(), 0.04 * std::sin(0.3 * k));
        p.t_face = Vec3::Zero();
        const TriangleMesh face_mesh = face.rig.pose(beta_face, p.psi, p.theta_face, p.r_face, p.t_face);

        // place the fingertip along the contact normal
        const std::vector<RigidMotion> bones = hand.rig.bone_transforms(p.theta_hand);
        const Vec3 tip_local = bones[2].apply(hand.rig.shaped(beta_hand, VecX())[static_cast<std::size_t>(hand.tip_vertex)]);
        const Vec3 tip_dir = bones[2].rotation * Vec3::UnitZ();
        const Mat3 rf = quat_to_rotmat(p.r_face);
        const Vec3 normal = vertex_normals(face_mesh)[static_cast<std::size_t>(contact_vertex)];
        const Vec3 surface = face_mesh.vertices[static_cast<std::size_t>(contact_vertex)];
        p.r_hand = rotation_between(tip_dir, -normal);
        p.t_hand = surface + gap[static_cast<std::size_t>(k)] * normal - quat_to_rotmat(p.r_hand) * tip_local;
        p.update_relative();
        const TriangleMesh hand_mesh = hand.rig.pose(beta_hand, VecX(), p.theta_hand, p.r_hand, p.t_hand);

        if (k == 0) {
            ds.skull = transform_mesh(face.skull, RigidMotion{rf, p.t_face});
            gt_stiffness = compute_stiffness(face_mesh, ds.skull);
            for (std::size_t v = 0; v < gt_stiffness.size(); ++v)
                gt_stiffness[v] = ds.nonrigid[v] ? gt_stiffness[v] * spec.gt_softness : 1.0;
        }
        const DeformationField field = pbd_resolve_collisions(face_mesh, hand_mesh, gt_stiffness);
        const TriangleMesh gt_face = apply_offsets(face_mesh, field.vertex_offset);

        std::vector<ShadedMesh> scene;
        scene.push_back(ShadedMesh{gt_face, face_rest, [&hand_mesh](const Vec3& rest, const Vec3& world) {
                                       double d = std::numeric_limits<double>::infinity();
                                       for (const auto& h : hand_mesh.vertices) d = std::min(d, (h - world).norm());
                                       return face_albedo(rest, d);
                                   }});
        const VecX theta = p.theta_hand;
        scene.push_back(ShadedMesh{hand_mesh, hand_rest, [&hand, theta](const Vec3& rest, const Vec3&) {
                                       return finger_albedo(rest, hand, theta);
                                   }});
        for (const auto& cam : cams) {
            fr.cameras.push_back(cam);
            fr.images.push_back(quantize_image(render_reference(scene, cam, spec.supersample)));
        }
        fr.face_vertices = face_mesh.vertices;
        fr.hand_vertices = hand_mesh.vertices;
        fr.interaction = hand_face_distance(face_mesh, hand_mesh) < kContactMaxDistance;
        compute_boxes(fr);
        ds.frames.push_back(std::move(fr));
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Directory IO.

namespace detail {

inline json vec_json(const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline VecX json_vec(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VecX>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <int N>
Eigen::Matrix<double, N, 1> json_fixed(const json& j) {
    const auto v = j.get<std::vector<double>>();
    if (v.size() != N) throw ValidationError("expected " + std::to_string(N) + " numbers, found " + std::to_string(v.size()));
    return Eigen::Map<const Eigen::Matrix<double, N, 1>>(v.data());
}

inline json faces_json(const std::vector<std::array<int, 3>>& f) { return f; }

inline json read_json_file(const std::filesystem::path& p, const std::string& context) {
    std::ifstream is(p);
    if (!is) throw FormatError(context + ": missing file " + p.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw FormatError(context + ": cannot parse " + p.filename().string() + ": " + e.what());
    }
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream os(p);
    os << s;
    if (!os) throw std::runtime_error("cannot write " + p.string());
}

inline void check_version(const json& j, const std::string& format, const std::string& context) {
    if (!j.is_object() || j.value("format", std::string()) != format)
        throw FormatError(context + ": not a " + format + " file");
    const int v = j.value("version", -1);
    if (v != kSceneVersion)
        throw VersionMismatch(context + ": format version " + std::to_string(v) + " is incompatible (expected " +
                              std::to_string(kSceneVersion) + ")");
}

inline constexpr std::string_view kVertexHeader = "hfsplat-vertices";

inline std::string vertices_text(const std::vector<Vec3>& v) {
    std::ostringstream os;
    os << kVertexHeader << ' ' << kSceneVersion << '\n' << v.size() << '\n';
    char buf[96];
    for (const auto& p : v) {
        std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p.x(), p.y(), p.z());
        os << buf;
    }
    return os.str();
}

inline std::vector<Vec3> read_vertices(const std::filesystem::path& p, const std::string& context) {
    std::ifstream is(p);
    if (!is) throw FormatError(context + ": missing file " + p.filename().string());
    std::string tag;
    int version = 0;
    std::size_t n = 0;
    if (!(is >> tag >> version) || tag != kVertexHeader)
        throw FormatError(context + ": " + p.filename().string() + " is not a vertex file");
    if (version != kSceneVersion)
        throw VersionMismatch(context + ": " + p.filename().string() + " has format version " + std::to_string(version));
    if (!(is >> n) || n > (1u << 24)) throw FormatError(context + ": " + p.filename().string() + " has a bad vertex count");
    std::vector<Vec3> v(n);
    for (std::size_t i = 0; i < n; ++i)
        if (!(is >> v[i].x() >> v[i].y() >> v[i].z()))
            throw FormatError(context + ": " + p.filename().string() + " is truncated at vertex " + std::to_string(i) +
                              " of " + std::to_string(n));
    std::string extra;
    if (is >> extra) throw FormatError(context + ": " + p.filename().string() + " has trailing data");
    return v;
}

inline json pose_json(const PoseState& p) {
    return json{{"format", "hfsplat-pose"},        {"version", kSceneVersion},
                {"theta_hand", vec_json(p.theta_hand)}, {"theta_face", vec_json(p.theta_face)},
                {"psi", vec_json(p.psi)},           {"r_hand", vec_json(p.r_hand)},
                {"t_hand", vec_json(p.t_hand)},     {"r_face", vec_json(p.r_face)},
                {"t_face", vec_json(p.t_face)},     {"beta_hand", vec_json(p.beta_hand)},
                {"beta_face", vec_json(p.beta_face)}};
}

inline PoseState json_pose(const json& j, const std::string& context) {
    check_version(j, "hfsplat-pose", context);
    PoseState p;
    try {
        p.theta_hand = json_vec(j.at("theta_hand"));
        p.theta_face = json_vec(j.at("theta_face"));
        p.psi = json_vec(j.at("psi"));
        p.r_hand = json_fixed<4>(j.at("r_hand"));
        p.t_hand = json_fixed<3>(j.at("t_hand"));
        p.r_face = json_fixed<4>(j.at("r_face"));
        p.t_face = json_fixed<3>(j.at("t_face"));
        p.beta_hand = json_vec(j.at("beta_hand"));
        p.beta_face = json_vec(j.at("beta_face"));
    } catch (const json::exception& e) {
        throw FormatError(context + ": bad pose: " + e.what());
    }
    if (std::abs(p.r_hand.norm() - 1.0) > 1e-6 || std::abs(p.r_face.norm() - 1.0) > 1e-6)
        throw ValidationError(context + ": pose rotations must be unit quaternions");
    p.update_relative();
    return p;
}

inline json camera_json(const Camera& c) {
    return json{{"format", "hfsplat-camera"},
                {"version", kSceneVersion},
                {"fx", c.fx},
                {"fy", c.fy},
                {"cx", c.cx},
                {"cy", c.cy},
                {"width", c.width},
                {"height", c.height},
                {"rotation", std::vector<double>(c.rotation.data(), c.rotation.data() + 9)},
                {"translation", vec_json(c.translation)}};
}

inline Camera json_camera(const json& j, const std::string& context) {
    check_version(j, "hfsplat-camera", context);
    Camera c;
    try {
        c.fx = j.at("fx").get<double>();
        c.fy = j.at("fy").get<double>();
        c.cx = j.at("cx").get<double>();
        c.cy = j.at("cy").get<double>();
        c.width = j.at("width").get<int>();
        c.height = j.at("height").get<int>();
        const auto r = j.at("rotation").get<std::vector<double>>();
        if (r.size() != 9) throw ValidationError(context + ": camera rotation needs 9 entries");
        c.rotation = Eigen::Map<const Mat3>(r.data());
        c.translation = json_fixed<3>(j.at("translation"));
    } catch (const json::exception& e) {
        throw FormatError(context + ": bad camera: " + e.what());
    }
    return c;
}

inline json box_json(const PixelBox& b) { return std::vector<int>{b.x0, b.y0, b.x1, b.y1}; }

inline PixelBox json_box(const json& j) {
    const auto v = j.get<std::vector<int>>();
    if (v.size() != 4) throw ValidationError("bounding box needs 4 entries");
    return PixelBox{v[0], v[1], v[2], v[3]};
}

/// Runs fn(k) for k in [0, n) on up to hardware_concurrency threads; rethrows
/// the failure of the lowest index so error messages are deterministic.
template <class Fn>
void parallel_frames(int n, Fn&& fn) {
    const int threads = std::max(1, std::min<int>(n, static_cast<int>(std::thread::hardware_concurrency())));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::atomic<int> next{0};
    auto work = [&] {
        for (int k = next++; k < n; k = next++) try {
                fn(k);
            } catch (...) {
                errors[static_cast<std::size_t>(k)] = std::current_exception();
            }
    };
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace detail

inline void save_dataset(const SceneDataset& ds, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    ds.validate();
    fs::create_directories(dir / "frames");
    const json meta{{"format", "hfsplat-scene"},
                    {"version", kSceneVersion},
                    {"frames", ds.num_frames()},
                    {"views", ds.num_views()},
                    {"canonical_frame", ds.canonical_frame},
                    {"held_out_view", ds.held_out_view},
                    {"face_vertex_count", ds.face_vertex_count},
                    {"hand_vertex_count", ds.hand_vertex_count},
                    {"face_faces", detail::faces_json(ds.face_faces)},
                    {"hand_faces", detail::faces_json(ds.hand_faces)},
                    {"skull_vertices", [&] {
                         json a = json::array();
                         for (const auto& v : ds.skull.vertices) a.push_back(detail::vec_json(v));
                         return a;
                     }()},
                    {"skull_faces", detail::faces_json(ds.skull.faces)},
                    {"nonrigid_mask", std::vector<int>(ds.nonrigid.begin(), ds.nonrigid.end())}};
    detail::write_text(dir / "scene.meta", meta.dump(1) + "\n");
    for (int k = 0; k < ds.num_frames(); ++k) {
        const FrameData& fr = ds.frames[static_cast<std::size_t>(k)];
        const fs::path fd = dir / "frames" / std::to_string(k);
        fs::create_directories(fd / "views");
        detail::write_text(fd / "mesh_face", detail::vertices_text(fr.face_vertices));
        detail::write_text(fd / "mesh_hand", detail::vertices_text(fr.hand_vertices));
        detail::write_text(fd / "pose", detail::pose_json(fr.pose).dump(1) + "\n");
        json ann{{"format", "hfsplat-annotations"}, {"version", kSceneVersion}, {"interaction", fr.interaction}};
        ann["hand_boxes"] = json::array();
        ann["face_boxes"] = json::array();
        for (std::size_t v = 0; v < fr.cameras.size(); ++v) {
            ann["hand_boxes"].push_back(detail::box_json(fr.hand_box[v]));
            ann["face_boxes"].push_back(detail::box_json(fr.face_box[v]));
            detail::write_text(fd / ("cam_" + std::to_string(v)), detail::camera_json(fr.cameras[v]).dump(1) + "\n");
            write_png((fd / "views" / (std::to_string(v) + ".png")).string(), fr.images[v]);
        }
        detail::write_text(fd / "annotations", ann.dump(1) + "\n");
    }
}

/// Loads and validates a dataset directory. A frame without annotations is
/// treated as a no-interaction frame with boxes derived from its meshes.
inline SceneDataset load_dataset(const std::filesystem::path& dir, std::ostream* warnings = &std::cerr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw ValidationError("dataset: " + dir.string() + " is not a directory");
    const json meta = detail::read_json_file(dir / "scene.meta", "scene.meta");
    detail::check_version(meta, "hfsplat-scene", "scene.meta");
    SceneDataset ds;
    int n_frames = 0, n_views = 0;
    try {
        n_frames = meta.at("frames").get<int>();
        n_views = meta.at("views").get<int>();
        ds.canonical_frame = meta.at("canonical_frame").get<int>();
        ds.held_out_view = meta.at("held_out_view").get<int>();
        ds.face_vertex_count = meta.at("face_vertex_count").get<int>();
        ds.hand_vertex_count = meta.at("hand_vertex_count").get<int>();
        ds.face_faces = meta.at("face_faces").get<std::vector<std::array<int, 3>>>();
        ds.hand_faces = meta.at("hand_faces").get<std::vector<std::array<int, 3>>>();
        for (const auto& v : meta.at("skull_vertices")) ds.skull.vertices.push_back(detail::json_fixed<3>(v));
        ds.skull.faces = meta.at("skull_faces").get<std::vector<std::array<int, 3>>>();
        for (int m : meta.at("nonrigid_mask").get<std::vector<int>>()) ds.nonrigid.push_back(static_cast<char>(m != 0));
    } catch (const json::exception& e) {
        throw FormatError(std::string("scene.meta: ") + e.what());
    }
    if (n_frames < 1 || n_frames > 100000) throw ValidationError("scene.meta: bad frame count " + std::to_string(n_frames));
    if (n_views < 1 || n_views > 1000) throw ValidationError("scene.meta: bad view count " + std::to_string(n_views));
    ds.frames.resize(static_cast<std::size_t>(n_frames));
    std::vector<std::string> notes(static_cast<std::size_t>(n_frames));
    detail::parallel_frames(n_frames, [&](int k) {
        const std::string ctx = "frame " + std::to_string(k);
        const fs::path fd = dir / "frames" / std::to_string(k);
        if (!fs::is_directory(fd)) throw ValidationError(ctx + ": missing directory " + fd.string());
        FrameData& fr = ds.frames[static_cast<std::size_t>(k)];
        fr.face_vertices = detail::read_vertices(fd / "mesh_face", ctx);
        fr.hand_vertices = detail::read_vertices(fd / "mesh_hand", ctx);
        fr.pose = detail::json_pose(detail::read_json_file(fd / "pose", ctx), ctx);
        int found = 0;
        while (fs::exists(fd / ("cam_" + std::to_string(found)))) ++found;
        if (found != n_views)
            throw ValidationError(ctx + ": has " + std::to_string(found) + " views, scene.meta declares " +
                                  std::to_string(n_views));
        for (int v = 0; v < n_views; ++v) {
            const std::string cv = ctx + ", view " + std::to_string(v);
            fr.cameras.push_back(detail::json_camera(detail::read_json_file(fd / ("cam_" + std::to_string(v)), cv), cv));
            try {
                fr.images.push_back(read_png((fd / "views" / (std::to_string(v) + ".png")).string()));
            } catch (const FormatError& e) {
                throw FormatError(cv + ": " + e.what());
            }
        }
        if (!fs::exists(fd / "annotations")) {
            notes[static_cast<std::size_t>(k)] = ctx + ": no annotations, treated as a no-interaction frame";
            compute_boxes(fr);
            return;
        }
        const json ann = detail::read_json_file(fd / "annotations", ctx);
        detail::check_version(ann, "hfsplat-annotations", ctx + " annotations");
        try {
            fr.interaction = ann.at("interaction").get<bool>();
            for (const auto& b : ann.at("hand_boxes")) fr.hand_box.push_back(detail::json_box(b));
            for (const auto& b : ann.at("face_boxes")) fr.face_box.push_back(detail::json_box(b));
        } catch (const json::exception& e) {
            throw FormatError(ctx + ": bad annotations: " + e.what());
        }
    });
    if (warnings)
        for (const auto& w : notes)
            if (!w.empty()) *warnings << "warning: " << w << '\n';
    ds.validate();
    return ds;
}

}  // namespace hfsplat
