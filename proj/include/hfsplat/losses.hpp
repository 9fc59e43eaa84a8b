#pragma once

// Image losses with analytic gradients, Gaussian regularizers, and metrics.

#include "hfsplat/binding.hpp"
#include "hfsplat/common.hpp"

namespace hfsplat {

struct LossWeights {
    double lambda = 0.2;  // D-SSIM mix
    double a = 1.0;       // scale regularizer
    double b = 0.01;      // position regularizer
    double c = 0.1;       // patch loss
    double eps_s = 0.4;
    double eps_mu = 0.2;

    void validate() const {
        if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("loss weights: lambda must lie in [0, 1]");
        if (!(a >= 0.0 && b >= 0.0 && c >= 0.0 && eps_s >= 0.0 && eps_mu >= 0.0))
            throw ValidationError("loss weights must be non-negative");
    }
};

struct LossTerms {
    double l1 = 0.0;
    double dssim = 0.0;
    double scale = 0.0;
    double position = 0.0;
    double patch = 0.0;
};

inline double total_loss(const LossTerms& t, const LossWeights& w) {
    return (1.0 - w.lambda) * t.l1 + w.lambda * t.dssim + w.a * t.scale + w.b * t.position + w.c * t.patch;
}

namespace detail {

inline constexpr int kSsimRadius = 5;  // 11-tap window

inline std::array<double, 2 * kSsimRadius + 1> ssim_kernel() {
    std::array<double, 2 * kSsimRadius + 1> k{};
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
        k[static_cast<std::size_t>(i + kSsimRadius)] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
        sum += k[static_cast<std::size_t>(i + kSsimRadius)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

/// Separable Gaussian filter of a single-channel W x H plane with zero padding.
/// The kernel is symmetric, so this operator is its own adjoint.
inline std::vector<double> blur(const std::vector<double>& in, int w, int h) {
    static const auto k = ssim_kernel();
    std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int xx = x + d;
                if (xx >= 0 && xx < w) s += k[static_cast<std::size_t>(d + kSsimRadius)] * in[static_cast<std::size_t>(y) * w + xx];
            }
            tmp[static_cast<std::size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
                const int yy = y + d;
                if (yy >= 0 && yy < h) s += k[static_cast<std::size_t>(d + kSsimRadius)] * tmp[static_cast<std::size_t>(yy) * w + x];
            }
            out[static_cast<std::size_t>(y) * w + x] = s;
        }
    return out;
}

inline std::vector<double> channel(const Image& img, int c) {
    std::vector<double> out(img.pixel_count());
    for (std::size_t p = 0; p < out.size(); ++p) out[p] = img.data[p * 3 + static_cast<std::size_t>(c)];
    return out;
}

}  // namespace detail

struct SsimResult {
    double value = 0.0;
    Image grad;  // d mean-SSIM / d img (only when requested)
};

/// Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2).
inline SsimResult ssim(const Image& img, const Image& ref, bool with_grad = false) {
    if (!img.same_shape(ref)) throw ContractViolation("ssim: image sizes differ");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int w = img.width, h = img.height;
    const std::size_t np = img.pixel_count();
    SsimResult res;
    if (with_grad) res.grad = Image(w, h);
    const double norm = 1.0 / static_cast<double>(np * 3);
    double total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const auto x = detail::channel(img, c), y = detail::channel(ref, c);
        std::vector<double> xx(np), yy(np), xy(np);
        for (std::size_t p = 0; p < np; ++p) {
            xx[p] = x[p] * x[p];
            yy[p] = y[p] * y[p];
            xy[p] = x[p] * y[p];
        }
        const auto mx = detail::blur(x, w, h), my = detail::blur(y, w, h);
        const auto exx = detail::blur(xx, w, h), eyy = detail::blur(yy, w, h), exy = detail::blur(xy, w, h);
        std::vector<double> g_mx, g_xx, g_xy;
        if (with_grad) {
            g_mx.resize(np);
            g_xx.resize(np);
            g_xy.resize(np);
        }
        for (std::size_t p = 0; p < np; ++p) {
            const double sx = exx[p] - mx[p] * mx[p], sy = eyy[p] - my[p] * my[p], sxy = exy[p] - mx[p] * my[p];
            const double a1 = 2 * mx[p] * my[p] + c1, a2 = 2 * sxy + c2;
            const double b1 = mx[p] * mx[p] + my[p] * my[p] + c1, b2 = sx + sy + c2;
            const double s = a1 * a2 / (b1 * b2);
            total += s;
            if (!with_grad) continue;
            const double d_mu = 2 * my[p] * a2 / (b1 * b2) - s * 2 * mx[p] / b1;
            const double d_sxy = 2 * a1 / (b1 * b2);
            const double d_sx = -s / b2;
            g_mx[p] = norm * (d_mu - d_sxy * my[p] - 2 * d_sx * mx[p]);
            g_xx[p] = norm * d_sx;
            g_xy[p] = norm * d_sxy;
        }
        if (!with_grad) continue;
        const auto bm = detail::blur(g_mx, w, h), bxx = detail::blur(g_xx, w, h), bxy = detail::blur(g_xy, w, h);
        for (std::size_t p = 0; p < np; ++p)
            res.grad.data[p * 3 + static_cast<std::size_t>(c)] = bm[p] + 2 * x[p] * bxx[p] + y[p] * bxy[p];
    }
    res.value = total * norm;
    return res;
}

/// PSNR in dB for images in [0, 1], capped at 100 dB.
inline double psnr(const Image& img, const Image& ref) {
    if (!img.same_shape(ref)) throw ContractViolation("psnr: image sizes differ");
    double se = 0.0;
    for (std::size_t k = 0; k < img.data.size(); ++k) se += (img.data[k] - ref.data[k]) * (img.data[k] - ref.data[k]);
    const double mse = se / static_cast<double>(img.data.size());
    if (mse < 1e-10) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

struct ImageLoss {
    double l1 = 0.0;
    double dssim = 0.0;
    Image grad_l1;     // d l1 / d render
    Image grad_dssim;  // d dssim / d render
};

/// L1 (mean absolute error) and D-SSIM = (1 - SSIM) / 2, with gradients w.r.t. `render`.
inline ImageLoss image_loss(const Image& render, const Image& target) {
    if (!render.same_shape(target)) throw ContractViolation("image_loss: image sizes differ");
    ImageLoss out;
    out.grad_l1 = Image(render.width, render.height);
    const double inv = 1.0 / static_cast<double>(render.data.size());
    for (std::size_t k = 0; k < render.data.size(); ++k) {
        const double d = render.data[k] - target.data[k];
        out.l1 += std::abs(d);
        out.grad_l1.data[k] = d > 0 ? inv : (d < 0 ? -inv : 0.0);
    }
    out.l1 *= inv;
    SsimResult s = ssim(render, target, true);
    out.dssim = 0.5 * (1.0 - s.value);
    out.grad_dssim = std::move(s.grad);
    for (auto& v : out.grad_dssim.data) v *= -0.5;
    return out;
}

struct PhotometricLoss {
    double value = 0.0;
    double l1 = 0.0;
    double dssim = 0.0;
    Image grad;
};

/// (1 - lambda) L1 + lambda D-SSIM.
inline PhotometricLoss photometric_loss(const Image& render, const Image& target, double lambda) {
    const ImageLoss il = image_loss(render, target);
    PhotometricLoss out;
    out.l1 = il.l1;
    out.dssim = il.dssim;
    out.value = (1.0 - lambda) * il.l1 + lambda * il.dssim;
    out.grad = Image(render.width, render.height);
    for (std::size_t k = 0; k < out.grad.data.size(); ++k)
        out.grad.data[k] = (1.0 - lambda) * il.grad_l1.data[k] + lambda * il.grad_dssim.data[k];
    return out;
}

// ---------------------------------------------------------------------------
// Patch loss.

inline constexpr int kPatchSize = 64;

namespace detail {

struct BilinearTap {
    int x0, x1;
    double t;
};

inline std::vector<BilinearTap> resize_taps(int lo, int hi, int out) {
    std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(hi - lo) / out;
    for (int u = 0; u < out; ++u) {
        const double x = std::clamp(lo + (u + 0.5) * scale - 0.5, static_cast<double>(lo), static_cast<double>(hi - 1));
        const int x0 = static_cast<int>(std::floor(x));
        const int x1 = std::min(x0 + 1, hi - 1);
        taps[static_cast<std::size_t>(u)] = {x0, x1, x - x0};
    }
    return taps;
}

}  // namespace detail

/// Bilinear resize of the crop `box` to size x size.
inline Image crop_resize(const Image& img, const PixelBox& box, int size = kPatchSize) {
    const auto tx = detail::resize_taps(box.x0, box.x1, size), ty = detail::resize_taps(box.y0, box.y1, size);
    Image out(size, size);
    for (int v = 0; v < size; ++v) {
        const auto& b = ty[static_cast<std::size_t>(v)];
        for (int u = 0; u < size; ++u) {
            const auto& a = tx[static_cast<std::size_t>(u)];
            for (int c = 0; c < 3; ++c)
                out.at(u, v, c) = (1 - b.t) * ((1 - a.t) * img.at(a.x0, b.x0, c) + a.t * img.at(a.x1, b.x0, c)) +
                                  b.t * ((1 - a.t) * img.at(a.x0, b.x1, c) + a.t * img.at(a.x1, b.x1, c));
        }
    }
    return out;
}

/// Adjoint of crop_resize: scatters a patch gradient back into `grad`.
inline void crop_resize_backward(const Image& patch_grad, const PixelBox& box, Image& grad) {
    const int size = patch_grad.width;
    const auto tx = detail::resize_taps(box.x0, box.x1, size), ty = detail::resize_taps(box.y0, box.y1, size);
    for (int v = 0; v < size; ++v) {
        const auto& b = ty[static_cast<std::size_t>(v)];
        for (int u = 0; u < size; ++u) {
            const auto& a = tx[static_cast<std::size_t>(u)];
            for (int c = 0; c < 3; ++c) {
                const double g = patch_grad.at(u, v, c);
                grad.at(a.x0, b.x0, c) += (1 - b.t) * (1 - a.t) * g;
                grad.at(a.x1, b.x0, c) += (1 - b.t) * a.t * g;
                grad.at(a.x0, b.x1, c) += b.t * (1 - a.t) * g;
                grad.at(a.x1, b.x1, c) += b.t * a.t * g;
            }
        }
    }
}

struct PatchLoss {
    double value = 0.0;
    int crops = 0;
    Image grad;
};

/// Mean over the hand crop and the hand/face overlap crop of L1 + D-SSIM on 64x64 resampled patches.
inline PatchLoss patch_loss(const Image& render, const Image& target, const PixelBox& hand, const PixelBox& face) {
    if (!render.same_shape(target)) throw ContractViolation("patch_loss: image sizes differ");
    PatchLoss out;
    out.grad = Image(render.width, render.height);
    std::vector<PixelBox> boxes;
    if (!hand.empty()) {
        if (!hand.within(render.width, render.height)) throw ContractViolation("patch_loss: hand box outside image");
        boxes.push_back(hand);
        const PixelBox both = hand.intersect(face);
        if (!both.empty()) boxes.push_back(both);
    }
    if (boxes.empty()) return out;
    const double share = 1.0 / static_cast<double>(boxes.size());
    for (const auto& b : boxes) {
        const ImageLoss il = image_loss(crop_resize(render, b), crop_resize(target, b));
        out.value += share * (il.l1 + il.dssim);
        Image g(kPatchSize, kPatchSize);
        for (std::size_t k = 0; k < g.data.size(); ++k) g.data[k] = share * (il.grad_l1.data[k] + il.grad_dssim.data[k]);
        crop_resize_backward(g, b, out.grad);
    }
    out.crops = static_cast<int>(boxes.size());
    return out;
}

// ---------------------------------------------------------------------------
// Regularizers on local-frame quantities of visible Gaussians.

struct RegularizerResult {
    double value = 0.0;
    std::vector<Vec3> grad_base;   // w.r.t. log_scale (scale term) or local_position (position term)
    std::vector<Vec3> grad_delta;  // w.r.t. ds or dmu
};

/// sum over visible i of ||ReLU(s_i + ds_i - eps_s)||^2 with s_i the activated local scale.
inline RegularizerResult scale_regularizer(const GaussianSet& g, const std::vector<Vec3>* ds, double eps_s,
                                           const std::vector<char>& visible) {
    require(visible.size() == g.size(), "scale_regularizer: visibility size mismatch");
    RegularizerResult r;
    r.grad_base.assign(g.size(), Vec3::Zero());
    r.grad_delta.assign(g.size(), Vec3::Zero());
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!visible[i]) continue;
        const Vec3 s = activate_scale(g.log_scale[i]);
        const Vec3 v = ds && !ds->empty() ? Vec3(s + (*ds)[i]) : s;
        for (int a = 0; a < 3; ++a) {
            const double e = v[a] - eps_s;
            if (e <= 0.0) continue;
            r.value += e * e;
            r.grad_delta[i][a] = 2.0 * e;
            r.grad_base[i][a] = std::exp(g.log_scale[i][a]) > kScaleFloor ? 2.0 * e * s[a] : 0.0;
        }
    }
    return r;
}

/// sum over visible i of ||ReLU(|mu_i + dmu_i| - eps_mu)||^2, componentwise magnitude.
inline RegularizerResult position_regularizer(const GaussianSet& g, const std::vector<Vec3>* dmu, double eps_mu,
                                              const std::vector<char>& visible) {
    require(visible.size() == g.size(), "position_regularizer: visibility size mismatch");
    RegularizerResult r;
    r.grad_base.assign(g.size(), Vec3::Zero());
    r.grad_delta.assign(g.size(), Vec3::Zero());
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!visible[i]) continue;
        const Vec3 v = dmu && !dmu->empty() ? Vec3(g.local_position[i] + (*dmu)[i]) : g.local_position[i];
        for (int a = 0; a < 3; ++a) {
            const double e = std::abs(v[a]) - eps_mu;
            if (e <= 0.0) continue;
            r.value += e * e;
            const double gv = 2.0 * e * (v[a] > 0 ? 1.0 : -1.0);
            r.grad_base[i][a] = gv;
            r.grad_delta[i][a] = gv;
        }
    }
    return r;
}

}  // namespace hfsplat
