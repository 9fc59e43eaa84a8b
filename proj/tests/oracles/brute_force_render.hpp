#pragma once

// Reference compositor: every Gaussian is tested against every pixel, with no
// tiling, culling by bounding box, or early-out other than the transmittance stop.
// Projection is re-derived here from the pinhole model rather than shared with
// the production rasterizer.

#include "hfsplat/camera.hpp"

#include <algorithm>
#include <numeric>
#include <vector>

namespace hfsplat::oracle {

struct Splat {
    Vec2 mean;
    Mat2 cov;
    double depth;
};

/// Linearized projection, Jacobian obtained by central differences of the pinhole map.
inline bool project_brute(const Vec3& mu, const Mat3& sigma, const Camera& cam, double blur, Splat& out) {
    const Vec3 pc = cam.rotation * mu + cam.translation;
    if (pc.z() <= 0.01) return false;
    auto pix = [&](const Vec3& x) {
        const Vec3 c = cam.rotation * x + cam.translation;
        return Vec2(cam.fx * c.x() / c.z() + cam.cx, cam.fy * c.y() / c.z() + cam.cy);
    };
    Eigen::Matrix<double, 2, 3> j;
    const double h = 1e-6 * std::max(1.0, mu.norm());
    for (int a = 0; a < 3; ++a) {
        Vec3 e = Vec3::Zero();
        e[a] = h;
        j.col(a) = (pix(mu + e) - pix(mu - e)) / (2 * h);
    }
    out.mean = pix(mu);
    out.cov = j * sigma * j.transpose();
    out.cov = 0.5 * (out.cov + out.cov.transpose()).eval();
    out.cov(0, 0) += blur;
    out.cov(1, 1) += blur;
    out.depth = pc.z();
    return true;
}

inline double window(double m) {
    if (m <= 4.0) return 1.0;
    if (m >= 9.0) return 0.0;
    const double t = (m - 4.0) / 5.0;
    return 1.0 - 10.0 * std::pow(t, 3) + 15.0 * std::pow(t, 4) - 6.0 * std::pow(t, 5);
}

struct BruteResult {
    Image color;
    std::vector<double> contribution;
};

inline BruteResult render_brute(const std::vector<Vec3>& pos, const std::vector<Mat3>& cov,
                                const std::vector<Vec3>& col, const std::vector<double>& op, const Camera& cam,
                                const Vec3& background = Vec3::Zero(), double blur = 0.3) {
    const std::size_t n = pos.size();
    std::vector<Splat> sp(n);
    std::vector<int> idx;
    for (std::size_t i = 0; i < n; ++i)
        if (project_brute(pos[i], cov[i], cam, blur, sp[i]) && sp[i].cov.determinant() > 0)
            idx.push_back(static_cast<int>(i));
    // exact order: depth, then input index
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (sp[a].depth != sp[b].depth) return sp[a].depth < sp[b].depth;
        return a < b;
    });
    BruteResult r;
    r.color = Image(cam.width, cam.height);
    r.contribution.assign(n, 0.0);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            double t = 1.0;
            Vec3 c = Vec3::Zero();
            for (int i : idx) {
                const Vec2 d = Vec2(x, y) - sp[i].mean;
                const double m = d.dot(sp[i].cov.inverse() * d);
                const double a = op[i] * std::exp(-0.5 * m) * window(m);
                if (a <= 0) continue;
                c += t * a * col[i];
                r.contribution[i] += t * a;
                t *= 1 - a;
                if (t < 1e-4) break;
            }
            c += t * background;
            for (int ch = 0; ch < 3; ++ch) r.color.at(x, y, ch) = c[ch];
        }
    return r;
}

}  // namespace hfsplat::oracle
