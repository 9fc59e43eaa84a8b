#pragma once

#include "hfsplat/common.hpp"

namespace hfsplat {

/// Pinhole camera. Pixel (x, y) samples the image plane at integer
/// coordinates (x, y), so the principal point is expressed in that convention.
struct Camera {
    double fx = 100.0;
    double fy = 100.0;
    double cx = 0.0;
    double cy = 0.0;
    Mat3 rotation = Mat3::Identity();  // world -> camera
    Vec3 translation = Vec3::Zero();
    int width = 16;
    int height = 16;

    void validate() const {
        if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("camera: focal lengths must be positive");
        if (width < 16 || height < 16) throw ValidationError("camera: image must be at least 16x16");
        const double orth = (rotation.transpose() * rotation - Mat3::Identity()).norm();
        if (!(orth < 1e-6) || !(rotation.determinant() > 0.0))
            throw ValidationError("camera: extrinsic rotation is not a proper rotation");
        if (!translation.allFinite() || !std::isfinite(cx) || !std::isfinite(cy))
            throw ValidationError("camera: non-finite parameters");
    }

    [[nodiscard]] Vec3 to_camera(const Vec3& p) const { return rotation * p + translation; }
    [[nodiscard]] Vec3 center() const { return -rotation.transpose() * translation; }

    [[nodiscard]] Mat4 extrinsic() const {
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = rotation;
        m.topRightCorner<3, 1>() = translation;
        return m;
    }

    /// Camera at `eye` looking at `target`; camera axes x right, y down, z forward.
    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double f, int w, int h) {
        const Vec3 z = (target - eye).normalized();
        const Vec3 x = z.cross(up).normalized();
        const Vec3 y = z.cross(x);
        Camera c;
        c.rotation.row(0) = x;
        c.rotation.row(1) = y;
        c.rotation.row(2) = z;
        c.translation = -c.rotation * eye;
        c.fx = c.fy = f;
        c.cx = 0.5 * (w - 1);
        c.cy = 0.5 * (h - 1);
        c.width = w;
        c.height = h;
        return c;
    }
};

}  // namespace hfsplat
