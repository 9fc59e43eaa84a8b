#pragma once

// Tile-based front-to-back compositing of projected 3D Gaussians with an
// exact analytic backward pass.
//
// Screen-space footprint: with Mahalanobis distance m = d^T conic d,
//   footprint(m) = exp(-m/2) * window(m),
// where window is 1 up to m = 4 (2 sigma) and falls smoothly (quintic) to 0 at
// m = 9 (3 sigma).
// Support is therefore the 3-sigma ellipse, whose axis-aligned bounding box
// drives tile assignment exactly, and the footprint stays C^2.

#include "hfsplat/binding.hpp"
#include "hfsplat/camera.hpp"

#include <algorithm>
#include <numeric>
#include <optional>
#include <thread>

namespace hfsplat {

inline constexpr int kTileSize = 16;

struct RenderSettings {
    Vec3 background = Vec3::Zero();
    double blur = 0.3;               // px^2 added to the projected covariance diagonal
    double z_near = 0.01;
    double min_transmittance = 1e-4;  // stop compositing a pixel once T drops below this
    double visibility_threshold = 1e-3;
    int threads = 1;
};

struct Projection {
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Identity();  // includes blur
    double depth = 0.0;
};

namespace detail {

struct Jacobian {
    Eigen::Matrix<double, 2, 3> j;
    Vec3 p;
};

inline Jacobian projection_jacobian(const Vec3& p, const Camera& cam) {
    const double iz = 1.0 / p.z();
    Jacobian out;
    out.p = p;
    out.j << cam.fx * iz, 0.0, -cam.fx * p.x() * iz * iz, 0.0, cam.fy * iz, -cam.fy * p.y() * iz * iz;
    return out;
}

inline constexpr double kTaperStart = 4.0;

inline double footprint_window(double m, double* d_window) {
    if (m <= kTaperStart) {
        *d_window = 0.0;
        return 1.0;
    }
    if (m >= 9.0) {
        *d_window = 0.0;
        return 0.0;
    }
    constexpr double span = 9.0 - kTaperStart;
    const double t = (m - kTaperStart) / span;
    *d_window = -30.0 * t * t * (1.0 - t) * (1.0 - t) / span;
    return 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t);
}

}  // namespace detail

/// EWA first-order projection. Returns nullopt for points at or behind z_near.
inline std::optional<Projection> project(const Vec3& mu, const Mat3& sigma, const Camera& cam,
                                         double blur = 0.3, double z_near = 0.01) {
    const Vec3 p = cam.to_camera(mu);
    if (!(p.z() > z_near)) return std::nullopt;
    const auto jac = detail::projection_jacobian(p, cam);
    const Eigen::Matrix<double, 2, 3> t = jac.j * cam.rotation;
    Mat2 cov = t * sigma * t.transpose();
    const double off = 0.5 * (cov(0, 1) + cov(1, 0));
    cov(0, 1) = cov(1, 0) = off;
    cov(0, 0) += blur;
    cov(1, 1) += blur;
    Projection out;
    out.mean = Vec2(cam.fx * p.x() / p.z() + cam.cx, cam.fy * p.y() / p.z() + cam.cy);
    out.cov = cov;
    out.depth = p.z();
    return out;
}

struct RenderOutput {
    Image color;
    Map alpha;
    std::vector<double> contribution;  // sum over pixels of the compositing weight
    std::vector<char> visible;
    std::vector<Vec2> mean2d_grad;  // filled by render_backward
};

/// Forward state needed by render_backward.
struct RenderState {
    Camera camera;
    RenderSettings settings;
    std::size_t num_gaussians = 0;
    int tiles_x = 0;
    int tiles_y = 0;

    // per Gaussian (indexed by input order)
    std::vector<char> valid;
    std::vector<Vec2> mean;
    std::vector<Mat2> conic;
    std::vector<Mat2> cov;
    std::vector<double> depth;
    std::vector<Vec3> cam_point;
    std::vector<Mat3> world_cov;
    std::vector<double> opacity;
    std::vector<Vec3> color;

    std::vector<std::vector<int>> tile_lists;  // depth-sorted Gaussian ids per tile
    std::vector<int> n_processed;              // list entries visited per pixel
    std::vector<double> final_transmittance;
};

struct RenderGrad {
    std::vector<Vec3> position;
    std::vector<Mat3> covariance;
    std::vector<Vec3> color;
    std::vector<double> opacity;
    std::vector<Vec2> mean2d;

    explicit RenderGrad(std::size_t n = 0)
        : position(n, Vec3::Zero()), covariance(n, Mat3::Zero()), color(n, Vec3::Zero()),
          opacity(n, 0.0), mean2d(n, Vec2::Zero()) {}

    [[nodiscard]] WorldGrad to_world_grad() const {
        WorldGrad w;
        w.position = position;
        w.covariance = covariance;
        w.color = color;
        w.opacity = opacity;
        return w;
    }
};

namespace detail {

template <class Fn>
void for_each_tile(int num_tiles, int threads, Fn&& fn) {
    if (threads <= 1 || num_tiles <= 1) {
        for (int t = 0; t < num_tiles; ++t) fn(0, t);
        return;
    }
    // Static round-robin partition over tiles.
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            for (int t = w; t < num_tiles; t += threads) fn(w, t);
        });
    for (auto& th : pool) th.join();
}

}  // namespace detail

struct RenderResult {
    RenderOutput output;
    RenderState state;
};

/// Renders world-space Gaussians (position, covariance, color, opacity) into `cam`.
inline RenderResult render(const std::vector<Vec3>& position, const std::vector<Mat3>& covariance,
                           const std::vector<Vec3>& color, const std::vector<double>& opacity,
                           const Camera& cam, const RenderSettings& rs = {}) {
    const std::size_t n = position.size();
    require(covariance.size() == n && color.size() == n && opacity.size() == n,
            "render: attribute arrays differ in length");
    const int w = cam.width, h = cam.height;
    RenderResult res;
    RenderState& st = res.state;
    st.camera = cam;
    st.settings = rs;
    st.num_gaussians = n;
    st.tiles_x = (w + kTileSize - 1) / kTileSize;
    st.tiles_y = (h + kTileSize - 1) / kTileSize;
    st.valid.assign(n, 0);
    st.mean.assign(n, Vec2::Zero());
    st.conic.assign(n, Mat2::Zero());
    st.cov.assign(n, Mat2::Zero());
    st.depth.assign(n, 0.0);
    st.cam_point.assign(n, Vec3::Zero());
    st.world_cov = covariance;
    st.opacity = opacity;
    st.color = color;

    struct Rect {
        int tx0, ty0, tx1, ty1;
    };
    std::vector<Rect> rect(n);
    std::vector<int> order;
    order.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto pr = project(position[i], covariance[i], cam, rs.blur, rs.z_near);
        if (!pr) continue;
        const Mat2& c = pr->cov;
        const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
        if (!(det > 0.0)) continue;
        const double rx = 3.0 * std::sqrt(c(0, 0)), ry = 3.0 * std::sqrt(c(1, 1));
        const double x0 = std::ceil(pr->mean.x() - rx), x1 = std::floor(pr->mean.x() + rx);
        const double y0 = std::ceil(pr->mean.y() - ry), y1 = std::floor(pr->mean.y() + ry);
        if (x1 < 0 || y1 < 0 || x0 > w - 1 || y0 > h - 1 || x0 > x1 || y0 > y1) continue;
        const int px0 = static_cast<int>(std::max(0.0, x0)), px1 = static_cast<int>(std::min<double>(w - 1, x1));
        const int py0 = static_cast<int>(std::max(0.0, y0)), py1 = static_cast<int>(std::min<double>(h - 1, y1));
        rect[i] = {px0 / kTileSize, py0 / kTileSize, px1 / kTileSize, py1 / kTileSize};
        st.valid[i] = 1;
        st.mean[i] = pr->mean;
        st.cov[i] = c;
        Mat2 q;
        q << c(1, 1) / det, -c(0, 1) / det, -c(1, 0) / det, c(0, 0) / det;
        st.conic[i] = q;
        st.depth[i] = pr->depth;
        st.cam_point[i] = cam.to_camera(position[i]);
        order.push_back(static_cast<int>(i));
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return st.depth[static_cast<std::size_t>(a)] < st.depth[static_cast<std::size_t>(b)]; });
    st.tile_lists.assign(static_cast<std::size_t>(st.tiles_x * st.tiles_y), {});
    for (int id : order) {
        const Rect& r = rect[static_cast<std::size_t>(id)];
        for (int ty = r.ty0; ty <= r.ty1; ++ty)
            for (int tx = r.tx0; tx <= r.tx1; ++tx)
                st.tile_lists[static_cast<std::size_t>(ty * st.tiles_x + tx)].push_back(id);
    }

    RenderOutput& out = res.output;
    out.color = Image(w, h);
    out.alpha = Map(w, h);
    st.n_processed.assign(static_cast<std::size_t>(w) * h, 0);
    st.final_transmittance.assign(static_cast<std::size_t>(w) * h, 1.0);
    const int threads = std::max(1, rs.threads);
    // Per-tile accumulators indexed by list position, reduced in tile order so
    // the result does not depend on the thread count.
    std::vector<std::vector<double>> contrib(st.tile_lists.size());

    detail::for_each_tile(st.tiles_x * st.tiles_y, threads, [&](int, int tile) {
        const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
        const auto& list = st.tile_lists[static_cast<std::size_t>(tile)];
        auto& acc = contrib[static_cast<std::size_t>(tile)];
        acc.assign(list.size(), 0.0);
        for (int y = ty * kTileSize; y < std::min(h, (ty + 1) * kTileSize); ++y)
            for (int x = tx * kTileSize; x < std::min(w, (tx + 1) * kTileSize); ++x) {
                double t = 1.0;
                Vec3 c = Vec3::Zero();
                int processed = 0;
                for (std::size_t k = 0; k < list.size(); ++k) {
                    ++processed;
                    const auto i = static_cast<std::size_t>(list[k]);
                    const Vec2 d(x - st.mean[i].x(), y - st.mean[i].y());
                    const Mat2& q = st.conic[i];
                    const double m = q(0, 0) * d.x() * d.x() + (q(0, 1) + q(1, 0)) * d.x() * d.y() +
                                     q(1, 1) * d.y() * d.y();
                    if (m >= 9.0) continue;
                    double dwin;
                    const double alpha = opacity[i] * std::exp(-0.5 * m) * detail::footprint_window(m, &dwin);
                    if (alpha <= 0.0) continue;
                    const double weight = alpha * t;
                    c += weight * color[i];
                    acc[k] += weight;
                    t *= (1.0 - alpha);
                    if (t < rs.min_transmittance) break;
                }
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                st.n_processed[p] = processed;
                st.final_transmittance[p] = t;
                c += t * rs.background;
                for (int ch = 0; ch < 3; ++ch) out.color.at(x, y, ch) = c[ch];
                out.alpha.at(x, y) = 1.0 - t;
            }
    });

    out.contribution.assign(n, 0.0);
    for (std::size_t t = 0; t < contrib.size(); ++t)
        for (std::size_t k = 0; k < contrib[t].size(); ++k)
            out.contribution[static_cast<std::size_t>(st.tile_lists[t][k])] += contrib[t][k];
    out.visible.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) out.visible[i] = out.contribution[i] > rs.visibility_threshold ? 1 : 0;
    out.mean2d_grad.assign(n, Vec2::Zero());
    return res;
}

inline RenderResult render(const WorldGaussians& g, const Camera& cam, const RenderSettings& rs = {}) {
    return render(g.position, g.covariance, g.color, g.opacity, cam, rs);
}

/// Analytic gradients of sum(out_grad * image) w.r.t. every Gaussian attribute.
inline RenderGrad render_backward(const Image& out_grad, const RenderState& st) {
    const Camera& cam = st.camera;
    const int w = cam.width, h = cam.height;
    if (out_grad.width != w || out_grad.height != h)
        throw ContractViolation("render_backward: gradient image does not match the forward pass");
    if (st.n_processed.size() != static_cast<std::size_t>(w) * h || st.valid.size() != st.num_gaussians)
        throw ContractViolation("render_backward: render state is incomplete");
    const std::size_t n = st.num_gaussians;
    const int threads = std::max(1, st.settings.threads);

    struct Acc {
        std::vector<Vec2> mean;
        std::vector<Mat2> conic;
        std::vector<double> opacity;
        std::vector<Vec3> color;
    };
    std::vector<Acc> accs(st.tile_lists.size());

    struct Hit {
        int k;
        double alpha, t, m, g, win, dwin;
        Vec2 d;
    };

    detail::for_each_tile(st.tiles_x * st.tiles_y, threads, [&](int, int tile) {
        const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
        const auto& list = st.tile_lists[static_cast<std::size_t>(tile)];
        Acc& acc = accs[static_cast<std::size_t>(tile)];
        acc.mean.assign(list.size(), Vec2::Zero());
        acc.conic.assign(list.size(), Mat2::Zero());
        acc.opacity.assign(list.size(), 0.0);
        acc.color.assign(list.size(), Vec3::Zero());
        std::vector<Hit> hits;
        for (int y = ty * kTileSize; y < std::min(h, (ty + 1) * kTileSize); ++y)
            for (int x = tx * kTileSize; x < std::min(w, (tx + 1) * kTileSize); ++x) {
                const Vec3 gpix(out_grad.at(x, y, 0), out_grad.at(x, y, 1), out_grad.at(x, y, 2));
                if (gpix.isZero(0.0)) continue;
                const std::size_t p = static_cast<std::size_t>(y) * w + x;
                const int processed = st.n_processed[p];
                hits.clear();
                double t = 1.0;
                for (int k = 0; k < processed; ++k) {
                    const int id = list[static_cast<std::size_t>(k)];
                    const auto i = static_cast<std::size_t>(id);
                    const Vec2 d(x - st.mean[i].x(), y - st.mean[i].y());
                    const Mat2& q = st.conic[i];
                    const double m = q(0, 0) * d.x() * d.x() + (q(0, 1) + q(1, 0)) * d.x() * d.y() +
                                     q(1, 1) * d.y() * d.y();
                    if (m >= 9.0) continue;
                    double dwin;
                    const double win = detail::footprint_window(m, &dwin);
                    const double g = std::exp(-0.5 * m);
                    const double alpha = st.opacity[i] * g * win;
                    if (alpha <= 0.0) continue;
                    hits.push_back({k, alpha, t, m, g, win, dwin, d});
                    t *= (1.0 - alpha);
                }
                Vec3 behind = st.settings.background;
                for (auto it = hits.rbegin(); it != hits.rend(); ++it) {
                    const auto i = static_cast<std::size_t>(list[static_cast<std::size_t>(it->k)]);
                    const auto k = static_cast<std::size_t>(it->k);
                    const Vec3& ci = st.color[i];
                    acc.color[k] += (it->alpha * it->t) * gpix;
                    const double g_alpha = it->t * gpix.dot(ci - behind);
                    behind = it->alpha * ci + (1.0 - it->alpha) * behind;
                    acc.opacity[k] += g_alpha * it->g * it->win;
                    // d alpha / d m = o * (dG/dm * win + G * dwin)
                    const double g_m = g_alpha * st.opacity[i] * it->g * (-0.5 * it->win + it->dwin);
                    const Mat2& q = st.conic[i];
                    // m = d^T Q d with d = pixel - mean
                    acc.mean[k] -= g_m * (q + q.transpose()) * it->d;
                    acc.conic[k] += g_m * (it->d * it->d.transpose());
                }
            }
    });

    RenderGrad grad(n);
    std::vector<Mat2> g_conic(n, Mat2::Zero());
    for (std::size_t t = 0; t < accs.size(); ++t) {
        const Acc& a = accs[t];
        for (std::size_t k = 0; k < a.opacity.size(); ++k) {
            const auto i = static_cast<std::size_t>(st.tile_lists[t][k]);
            grad.mean2d[i] += a.mean[k];
            g_conic[i] += a.conic[k];
            grad.opacity[i] += a.opacity[k];
            grad.color[i] += a.color[k];
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!st.valid[i]) continue;
        const Mat2& q = st.conic[i];
        // conic = cov^-1, cov symmetrized from raw J M J^T
        const Mat2 g_cov_sym = -q.transpose() * g_conic[i] * q.transpose();
        const Mat2 g_cov = 0.5 * (g_cov_sym + g_cov_sym.transpose());
        const Vec3& p = st.cam_point[i];
        const auto jac = detail::projection_jacobian(p, cam);
        const Eigen::Matrix<double, 2, 3>& j = jac.j;
        const Mat3& wr = cam.rotation;
        const Mat3 sc = wr * st.world_cov[i] * wr.transpose();
        grad.covariance[i] = wr.transpose() * (j.transpose() * g_cov * j) * wr;
        const Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_cov * j * sc;
        const double iz = 1.0 / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;
        const Vec2& gm = grad.mean2d[i];
        Vec3 g_p;
        g_p.x() = g_j(0, 2) * (-cam.fx * iz2) + gm.x() * cam.fx * iz;
        g_p.y() = g_j(1, 2) * (-cam.fy * iz2) + gm.y() * cam.fy * iz;
        g_p.z() = g_j(0, 0) * (-cam.fx * iz2) + g_j(0, 2) * (2.0 * cam.fx * p.x() * iz3) +
                  g_j(1, 1) * (-cam.fy * iz2) + g_j(1, 2) * (2.0 * cam.fy * p.y() * iz3) -
                  gm.x() * cam.fx * p.x() * iz2 - gm.y() * cam.fy * p.y() * iz2;
        grad.position[i] = wr.transpose() * g_p;
    }
    return grad;
}

}  // namespace hfsplat
