#pragma once

// Hand-face contact: position-based collision resolution on the face mesh,
// deformation aggregation, the point-set encoder producing F, contact weights,
// and the interaction network I.

#include "hfsplat/dynamics.hpp"

#include <limits>
#include <numbers>

namespace hfsplat {

inline constexpr double kContactMaxDistance = 0.05;  // d_max
inline constexpr double kDeformationThreshold = 1e-4;  // tau_def, world units

// ---------------------------------------------------------------------------
// Stiffness and PBD.

/// Per-vertex stiffness clamp(1 - dist / d_soft, 0, 1), d_soft the 95th-percentile skin-skull distance.
inline std::vector<double> compute_stiffness(const TriangleMesh& face, const TriangleMesh& skull) {
    require(skull.num_faces() > 0, "compute_stiffness: empty skull proxy");
    std::vector<double> dist(face.vertices.size());
    for (std::size_t v = 0; v < dist.size(); ++v) dist[v] = closest_surface_point(skull, face.vertices[v]).distance;
    if (dist.empty()) return {};
    std::vector<double> sorted = dist;
    const auto k = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(sorted.size()))) - 1;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
    const double d_soft = sorted[k];
    std::vector<double> s(dist.size());
    for (std::size_t v = 0; v < s.size(); ++v)
        s[v] = d_soft > 0.0 ? std::clamp(1.0 - dist[v] / d_soft, 0.0, 1.0) : 1.0;
    return s;
}

struct PbdOptions {
    int iterations = 10;
    double relaxation = 0.5;
    double margin = 1e-5;      // clearance left outside the hand surface
    double tolerance = 1e-4;   // allowed residual penetration
    int max_projection_passes = 8;
};

struct DeformationField {
    std::vector<Vec3> vertex_offset;
    std::vector<Vec3> facet_offset;  // d_j
    bool converged = true;
    double max_penetration = 0.0;
    int contact_vertices = 0;

    [[nodiscard]] bool any() const {
        for (const auto& o : vertex_offset)
            if (!o.isZero(0.0)) return true;
        return false;
    }
};

/// d_j = mean of the facet's three vertex offsets.
inline std::vector<Vec3> aggregate_facet_offsets(const std::vector<Vec3>& vertex_offset, const TriangleMesh& mesh) {
    require(vertex_offset.size() == mesh.vertices.size(), "aggregate_facet_offsets: field/mesh mismatch");
    std::vector<Vec3> d(mesh.faces.size());
    for (std::size_t f = 0; f < d.size(); ++f) {
        const auto& t = mesh.faces[f];
        d[f] = (vertex_offset[t[0]] + vertex_offset[t[1]] + vertex_offset[t[2]]) / 3.0;
    }
    return d;
}

namespace detail {

struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
    void add(const Vec3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    [[nodiscard]] bool contains(const Vec3& p, double pad) const {
        return (p.array() >= lo.array() - pad).all() && (p.array() <= hi.array() + pad).all();
    }
};

/// Depth of p below the hand surface (0 when outside).
inline double penetration(const TriangleMesh& hand, const Aabb& box, const Vec3& p) {
    if (!box.contains(p, 0.0) || !inside_mesh(hand, p)) return 0.0;
    return closest_surface_point(hand, p).distance;
}

/// Moves p to the nearest hand surface point plus `margin` along that facet's outward normal.
inline Vec3 project_out(const TriangleMesh& hand, const Vec3& p, double margin) {
    const SurfacePoint sp = closest_surface_point(hand, p);
    const auto& t = hand.faces[static_cast<std::size_t>(sp.facet)];
    const Vec3 n = (hand.vertices[t[1]] - hand.vertices[t[0]]).cross(hand.vertices[t[2]] - hand.vertices[t[0]]).normalized();
    return sp.point + margin * n;
}

}  // namespace detail

/// Resolves face-into-hand penetration. Per iteration: Jacobi edge-length projection
/// (inverse mass 1 - stiffness), pull toward rest by stiffness, then collision projection.
/// Vertices with stiffness 1 never move.
inline DeformationField pbd_resolve_collisions(const TriangleMesh& face, const TriangleMesh& hand,
                                               const std::vector<double>& stiffness, const PbdOptions& opt = {}) {
    require(stiffness.size() == face.vertices.size(), "pbd_resolve_collisions: stiffness size mismatch");
    require(opt.iterations >= 1, "pbd_resolve_collisions: iterations must be >= 1");
    const std::size_t nv = face.vertices.size();
    DeformationField out;
    out.vertex_offset.assign(nv, Vec3::Zero());
    detail::Aabb box;
    for (const auto& v : hand.vertices) box.add(v);

    std::vector<char> movable(nv);
    for (std::size_t v = 0; v < nv; ++v) movable[v] = stiffness[v] < 1.0 ? 1 : 0;

    std::vector<Vec3> p = face.vertices;
    auto collide = [&] {
        int hits = 0;
        for (std::size_t v = 0; v < nv; ++v) {
            if (!movable[v]) continue;
            if (detail::penetration(hand, box, p[v]) > 0.0) {
                p[v] = detail::project_out(hand, p[v], opt.margin);
                ++hits;
            }
        }
        return hits;
    };
    if (collide() == 0) {  // non-intersecting: exact zero field
        out.facet_offset.assign(face.faces.size(), Vec3::Zero());
        return out;
    }

    const auto edges = mesh_edges(face);
    std::vector<double> rest_len(edges.size());
    for (std::size_t e = 0; e < edges.size(); ++e)
        rest_len[e] = (face.vertices[static_cast<std::size_t>(edges[e].second)] -
                       face.vertices[static_cast<std::size_t>(edges[e].first)]).norm();
    std::vector<Vec3> corr(nv);
    std::vector<int> count(nv);
    for (int it = 0; it < opt.iterations; ++it) {
        std::fill(corr.begin(), corr.end(), Vec3::Zero());
        std::fill(count.begin(), count.end(), 0);
        for (std::size_t e = 0; e < edges.size(); ++e) {
            const auto a = static_cast<std::size_t>(edges[e].first), b = static_cast<std::size_t>(edges[e].second);
            const double wa = 1.0 - stiffness[a], wb = 1.0 - stiffness[b];
            if (wa + wb <= 0.0) continue;
            const Vec3 d = p[b] - p[a];
            const double len = d.norm();
            if (len <= 0.0) continue;
            const Vec3 c = (len - rest_len[e]) / (len * (wa + wb)) * d;
            corr[a] += wa * c;
            corr[b] -= wb * c;
            ++count[a];
            ++count[b];
        }
        for (std::size_t v = 0; v < nv; ++v) {
            if (!movable[v]) continue;
            if (count[v] > 0) p[v] += opt.relaxation * corr[v] / count[v];
            p[v] = face.vertices[v] + (1.0 - stiffness[v]) * (p[v] - face.vertices[v]);
        }
        collide();
    }
    for (int pass = 0; pass < opt.max_projection_passes; ++pass)
        if (collide() == 0) break;
    for (std::size_t v = 0; v < nv; ++v) {
        out.vertex_offset[v] = movable[v] ? Vec3(p[v] - face.vertices[v]) : Vec3::Zero();
        if (!out.vertex_offset[v].isZero(0.0)) ++out.contact_vertices;
        if (movable[v]) out.max_penetration = std::max(out.max_penetration, detail::penetration(hand, box, p[v]));
    }
    out.converged = out.max_penetration <= opt.tolerance;
    out.facet_offset = aggregate_facet_offsets(out.vertex_offset, face);
    return out;
}

inline TriangleMesh apply_offsets(const TriangleMesh& m, const std::vector<Vec3>& offset) {
    require(offset.size() == m.vertices.size(), "apply_offsets: size mismatch");
    TriangleMesh out = m;
    for (std::size_t v = 0; v < offset.size(); ++v) out.vertices[v] += offset[v];
    return out;
}

// ---------------------------------------------------------------------------
// Contact weight.

/// w = (cos(pi d / d_max) + 1) / 2 for d < d_max, else 0; d = nearest hand-vertex distance.
inline double contact_weight_of_distance(double d, double d_max = kContactMaxDistance) {
    if (d >= d_max) return 0.0;
    return 0.5 * (std::cos(std::numbers::pi * d / d_max) + 1.0);
}

struct ContactWeight {
    double w = 0.0;
    Vec3 grad = Vec3::Zero();  // dw/dmu
};

inline ContactWeight contact_weight(const Vec3& mu, const std::vector<Vec3>& hand_vertices,
                                    double d_max = kContactMaxDistance) {
    require(!hand_vertices.empty(), "contact_weight: no hand vertices");
    double best = std::numeric_limits<double>::infinity();
    Vec3 nearest = Vec3::Zero();
    for (const auto& v : hand_vertices) {
        const double d2 = (mu - v).squaredNorm();
        if (d2 < best) {
            best = d2;
            nearest = v;
        }
    }
    const double d = std::sqrt(best);
    ContactWeight out;
    out.w = contact_weight_of_distance(d, d_max);
    if (d < d_max && d > 0.0)
        out.grad = -0.5 * std::sin(std::numbers::pi * d / d_max) * std::numbers::pi / d_max * (mu - nearest) / d;
    return out;
}

// ---------------------------------------------------------------------------
// Representative sampling and the point encoder.

/// Gaussians grouped by parent facet.
inline std::vector<std::vector<int>> gaussians_by_facet(const GaussianSet& g, int num_facets) {
    std::vector<std::vector<int>> by(static_cast<std::size_t>(num_facets));
    for (std::size_t i = 0; i < g.size(); ++i) by[static_cast<std::size_t>(g.parent_face[i])].push_back(static_cast<int>(i));
    return by;
}

/// For each facet in `facets`, one Gaussian drawn with probability proportional to o_i * ||s_i||.
/// Facets without Gaussians are skipped; a facet whose weights are all zero falls back to uniform.
inline std::vector<int> sample_representative_gaussians(const GaussianSet& g, const std::vector<std::vector<int>>& by_facet,
                                                        std::span<const int> facets, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<int> out;
    out.reserve(facets.size());
    std::vector<double> w;
    for (int f : facets) {
        const auto& members = by_facet[static_cast<std::size_t>(f)];
        if (members.empty()) continue;
        w.clear();
        double total = 0.0;
        for (int i : members) {
            const auto k = static_cast<std::size_t>(i);
            const double wi = sigmoid(g.opacity_logit[k]) * activate_scale(g.log_scale[k]).norm();
            w.push_back(wi);
            total += wi;
        }
        const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        if (!(total > 0.0)) {
            out.push_back(members[std::min(members.size() - 1, static_cast<std::size_t>(u * static_cast<double>(members.size())))]);
            continue;
        }
        double acc = 0.0;
        std::size_t pick = members.size() - 1;
        for (std::size_t k = 0; k < members.size(); ++k) {
            acc += w[k];
            if (u * total < acc) {
                pick = k;
                break;
            }
        }
        out.push_back(members[pick]);
    }
    return out;
}

inline constexpr int kEncoderPointDim = 7;  // position (3), offset (3), hand flag (1)

/// Shared per-point MLP followed by max-pooling into F.
struct PointEncoder {
    Mlp mlp;

    static PointEncoder create(std::uint64_t seed) {
        MlpConfig c;
        c.widths = {kEncoderPointDim, 64, 128, kGeoFeatureDim};
        c.layer_norm = false;
        c.zero_init_last = false;
        return PointEncoder{Mlp(c, seed)};
    }

    struct Cache {
        Mlp::Cache mlp;
        std::vector<Eigen::Index> argmax;
        Eigen::Index points = 0;
    };

    /// points: 7 x P with P >= 1.
    VecX forward(const MatX& points, Cache* cache = nullptr) const {
        require(points.cols() >= 1, "PointEncoder: need at least one point");
        Mlp::Cache local;
        const MatX h = mlp.forward(points, VecX(), cache ? &cache->mlp : &local);
        VecX f(h.rows());
        std::vector<Eigen::Index> arg(static_cast<std::size_t>(h.rows()));
        for (Eigen::Index r = 0; r < h.rows(); ++r) {
            Eigen::Index c;
            f[r] = h.row(r).maxCoeff(&c);
            arg[static_cast<std::size_t>(r)] = c;
        }
        if (cache) {
            cache->argmax = std::move(arg);
            cache->points = points.cols();
        }
        return f;
    }

    /// Accumulates weight gradients; optionally returns d/d(points).
    void backward(const Cache& cache, const VecX& grad_f, MlpGrad& grad, MatX* grad_points = nullptr) const {
        MatX go = MatX::Zero(grad_f.size(), cache.points);
        for (Eigen::Index r = 0; r < grad_f.size(); ++r) go(r, cache.argmax[static_cast<std::size_t>(r)]) = grad_f[r];
        mlp.backward(cache.mlp, go, grad, grad_points);
    }
};

/// Encoder input: representative face Gaussians of the deformed region (with their facet
/// offset) and every hand facet's representative, positions relative to the face origin.
inline MatX encoder_points(const std::vector<Vec3>& world_position, std::span<const int> face_reps,
                           std::span<const int> hand_reps, const GaussianSet& g,
                           const std::vector<Vec3>& facet_offset, const Vec3& origin) {
    MatX pts(kEncoderPointDim, static_cast<Eigen::Index>(face_reps.size() + hand_reps.size()));
    Eigen::Index c = 0;
    for (int i : face_reps) {
        const auto k = static_cast<std::size_t>(i);
        pts.col(c).segment<3>(0) = world_position[k] - origin;
        pts.col(c).segment<3>(3) = facet_offset[static_cast<std::size_t>(g.parent_face[k])];
        pts(6, c++) = 0.0;
    }
    for (int i : hand_reps) {
        const auto k = static_cast<std::size_t>(i);
        pts.col(c).segment<3>(0) = world_position[k] - origin;
        pts.col(c).segment<3>(3).setZero();
        pts(6, c++) = 1.0;
    }
    return pts;
}

// ---------------------------------------------------------------------------
// Interaction network.

inline Mlp create_interaction_network(const NetworkConfig& c, std::uint64_t seed) {
    const int rows = posenc_size(c.pos_freq) + posenc_size(c.def_freq);
    return Mlp(MlpConfig::standard(rows, interaction_shared_dim(c), c.hidden, c.interaction_layers, kInteractionOut),
               seed);
}

/// Facets whose aggregated deformation exceeds tau_def.
inline std::vector<int> deformed_facets(const std::vector<Vec3>& facet_offset, double tau = kDeformationThreshold) {
    std::vector<int> out;
    for (std::size_t f = 0; f < facet_offset.size(); ++f)
        if (facet_offset[f].norm() > tau) out.push_back(static_cast<int>(f));
    return out;
}

/// Row input [gamma(mu_cano); gamma(d_j / d_max)] for the selected Gaussians.
inline MatX interaction_rows(const GaussianSet& g, std::span<const int> idx, const std::vector<Vec3>& facet_offset,
                             int pos_freq, int def_freq) {
    const MatX pe = encode_canonical(g, idx, pos_freq);
    MatX rows(pe.rows() + posenc_size(def_freq), pe.cols());
    rows.topRows(pe.rows()) = pe;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Vec3& d = facet_offset[static_cast<std::size_t>(g.parent_face[static_cast<std::size_t>(idx[k])])];
        rows.col(static_cast<Eigen::Index>(k)).tail(posenc_size(def_freq)) = posenc(d / kContactMaxDistance, def_freq);
    }
    return rows;
}

/// Adds w_i * I(...) into every delta slot of the selected Gaussians; returns the raw outputs.
inline MatX interaction_offsets(const Mlp& inter, const GaussianSet& g, std::span<const int> idx, const PoseState& pose,
                                const std::vector<Vec3>& facet_offset, const VecX& feature,
                                const std::vector<double>& weight, const NetworkConfig& c, GaussianDeltas& d,
                                Mlp::Cache* cache = nullptr) {
    require(weight.size() == idx.size(), "interaction_offsets: weight count mismatch");
    const MatX out = inter.forward(interaction_rows(g, idx, facet_offset, c.pos_freq, c.def_freq),
                                   interaction_shared_input(pose, feature), cache);
    scatter_geo(out, idx, d, &weight);
    scatter_app(out, kGeoOut, idx, d, &weight);
    return out;
}

}  // namespace hfsplat
