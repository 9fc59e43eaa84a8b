#pragma once

// GaussianSet record layout (little endian):
//
//   char[8]  "HFSGAUSS"
//   u32      version (= 1)
//   u64      N            number of Gaussians
//   u32      feature_dim  (= 64)
//   then one block per field, each block column-major: all N values of
//   component 0, then all N values of component 1, ...
//     local_position     3 x f64
//     log_scale          3 x f64
//     rotation           4 x f64   (w, x, y, z)
//     color_raw          3 x f64
//     opacity_logit      1 x f64
//     parent_face        1 x i32
//     point_feature     64 x f64
//     canonical_position 3 x f64

#include "hfsplat/binary_io.hpp"
#include "hfsplat/gaussian.hpp"

namespace hfsplat {

inline constexpr std::string_view kGaussianMagic = "HFSGAUSS";
inline constexpr std::uint32_t kGaussianVersion = 1;

namespace detail {

template <int K, class V>
void write_columns(BinaryWriter& w, const std::vector<V>& field) {
    for (int c = 0; c < K; ++c)
        for (const auto& v : field) w.f64(v[c]);
}

template <int K, class V>
void read_columns(BinaryReader& r, std::vector<V>& field) {
    for (int c = 0; c < K; ++c)
        for (auto& v : field) v[c] = r.f64();
}

}  // namespace detail

inline void write_gaussians(std::ostream& os, const GaussianSet& g) {
    BinaryWriter w(os);
    w.magic(kGaussianMagic, kGaussianVersion);
    const std::size_t n = g.size();
    w.u64(n);
    w.u32(kPointFeatureDim);
    detail::write_columns<3>(w, g.local_position);
    detail::write_columns<3>(w, g.log_scale);
    detail::write_columns<4>(w, g.rotation);
    detail::write_columns<3>(w, g.color_raw);
    for (double v : g.opacity_logit) w.f64(v);
    for (int v : g.parent_face) w.i32(v);
    for (int c = 0; c < kPointFeatureDim; ++c)
        for (std::size_t i = 0; i < n; ++i) w.f64(g.point_feature(c, static_cast<Eigen::Index>(i)));
    detail::write_columns<3>(w, g.canonical_position);
}

inline GaussianSet read_gaussians(std::istream& is, const std::string& context = "gaussians") {
    BinaryReader r(is, context);
    r.expect_magic(kGaussianMagic, kGaussianVersion);
    const std::uint64_t n = r.u64();
    if (n > (1ULL << 26)) r.fail("implausible Gaussian count");
    if (r.u32() != kPointFeatureDim) r.fail("unexpected point feature dimension");
    GaussianSet g;
    g.resize(n);
    detail::read_columns<3>(r, g.local_position);
    detail::read_columns<3>(r, g.log_scale);
    detail::read_columns<4>(r, g.rotation);
    detail::read_columns<3>(r, g.color_raw);
    for (double& v : g.opacity_logit) v = r.f64();
    for (int& v : g.parent_face) v = r.i32();
    for (int c = 0; c < kPointFeatureDim; ++c)
        for (std::size_t i = 0; i < n; ++i) g.point_feature(c, static_cast<Eigen::Index>(i)) = r.f64();
    detail::read_columns<3>(r, g.canonical_position);
    return g;
}

}  // namespace hfsplat
