#include "hfsplat/rasterizer.hpp"

#include "oracles/brute_force_render.hpp"
#include "test_util.hpp"

using namespace hfsplat;
using namespace hfsplat::testing;

namespace {

Camera front_camera(int w, int h, double f = 100.0) {
    return Camera::look_at(Vec3(0, 0, -2), Vec3::Zero(), Vec3(0, -1, 0), f, w, h);
}

struct Scene {
    std::vector<Vec3> pos;
    std::vector<Mat3> cov;
    std::vector<Vec3> col;
    std::vector<double> op;
};

Scene random_scene(std::mt19937_64& rng, int n, double max_opacity, double spread = 0.3) {
    Scene s;
    for (int i = 0; i < n; ++i) {
        s.pos.push_back(random_vec3(rng, -spread, spread));
        s.cov.push_back(covariance_from_scale_rotation(random_vec3(rng, 0.01, 0.08), random_quat(rng)));
        s.col.push_back(random_vec3(rng, 0, 1));
        s.op.push_back(uniform(rng, 0.05, max_opacity));
    }
    return s;
}

double max_abs_diff(const Image& a, const Image& b) {
    double m = 0;
    for (std::size_t k = 0; k < a.data.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
    return m;
}

double weighted_sum(const Image& img, const Image& w) {
    double s = 0;
    for (std::size_t k = 0; k < img.data.size(); ++k) s += img.data[k] * w.data[k];
    return s;
}

}  // namespace

TEST(Projection, CenteredPointMapsToPrincipalPoint) {
    const Camera cam = front_camera(64, 48);
    const auto pr = project(Vec3::Zero(), 1e-4 * Mat3::Identity(), cam, 0.0);
    ASSERT_TRUE(pr);
    EXPECT_NEAR(pr->mean.x(), cam.cx, 1e-12);
    EXPECT_NEAR(pr->mean.y(), cam.cy, 1e-12);
    EXPECT_NEAR(pr->depth, 2.0, 1e-12);
}

TEST(Projection, IsotropicCovarianceMatchesDenseJacobian) {
    const Camera cam = front_camera(64, 64, 120.0);
    const Vec3 mu(0.2, -0.1, 0.3);
    const double var = 0.01;
    const auto pr = project(mu, var * Mat3::Identity(), cam, 0.3);
    ASSERT_TRUE(pr);
    // J J^T by hand for a camera looking down +z
    const Vec3 p = cam.to_camera(mu);
    Eigen::Matrix<double, 2, 3> j;
    j << cam.fx / p.z(), 0, -cam.fx * p.x() / (p.z() * p.z()), 0, cam.fy / p.z(), -cam.fy * p.y() / (p.z() * p.z());
    const Mat2 oracle = var * (j * cam.rotation) * (j * cam.rotation).transpose() + 0.3 * Mat2::Identity();
    EXPECT_LT((pr->cov - oracle).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Projection, DoublingDepthQuartersFootprintArea) {
    Camera cam;
    cam.width = cam.height = 64;
    cam.cx = cam.cy = 31.5;
    const Mat3 sigma = 0.01 * Mat3::Identity();
    const auto a = project(Vec3(0, 0, 1), sigma, cam, 0.0);
    const auto b = project(Vec3(0, 0, 2), sigma, cam, 0.0);
    ASSERT_TRUE(a && b);
    EXPECT_NEAR(a->cov.determinant() / b->cov.determinant(), 16.0, 1e-9);  // each axis halves
    EXPECT_NEAR(a->cov(0, 0) / b->cov(0, 0), 4.0, 1e-12);
}

TEST(Projection, CullsBehindNearPlane) {
    Camera cam;
    EXPECT_FALSE(project(Vec3(0, 0, 0.005), Mat3::Identity(), cam));
    EXPECT_FALSE(project(Vec3(0, 0, -1), Mat3::Identity(), cam));
}

TEST(Render, EmptySceneIsBackground) {
    const Camera cam = front_camera(40, 24);
    RenderSettings rs;
    rs.background = Vec3(0.25, 0.5, 0.75);
    const auto r = render(std::vector<Vec3>{}, {}, {}, {}, cam, rs);
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            EXPECT_EQ(r.output.color.at(x, y, 0), 0.25);
            EXPECT_EQ(r.output.color.at(x, y, 2), 0.75);
            EXPECT_EQ(r.output.alpha.at(x, y), 0.0);
        }
}

TEST(Render, OpaqueGaussianCenterGivesItsColor) {
    Camera cam;
    cam.width = cam.height = 33;
    cam.cx = cam.cy = 16;
    const Vec3 c(0.2, 0.6, 0.9);
    const auto r = render({Vec3(0, 0, 1)}, {1e-4 * Mat3::Identity()}, {c}, {1.0}, cam);
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(r.output.color.at(16, 16, ch), c[ch], 1e-12);
    EXPECT_TRUE(r.output.visible[0]);
}

TEST(Render, TwoHalfOpaqueGaussiansFrontFirst) {
    Camera cam;
    cam.width = cam.height = 33;
    cam.cx = cam.cy = 16;
    const Mat3 s = 1e-6 * Mat3::Identity();
    // listed back-to-front to check sorting
    const auto r = render({Vec3(0, 0, 2), Vec3(0, 0, 1)}, {4 * s, s}, {Vec3(0, 0, 1), Vec3(1, 0, 0)}, {0.5, 0.5},
                          cam);
    EXPECT_NEAR(r.output.color.at(16, 16, 0), 0.5, 1e-12);
    EXPECT_NEAR(r.output.color.at(16, 16, 2), 0.25, 1e-12);
    EXPECT_NEAR(r.output.alpha.at(16, 16), 0.75, 1e-12);
}

TEST(Render, HalfWhiteOverOpaqueBlackIsMidGray) {
    Camera cam;
    cam.width = cam.height = 17;
    cam.cx = cam.cy = 8;
    const Mat3 s = 1e-6 * Mat3::Identity();
    const auto r = render({Vec3(0, 0, 1), Vec3(0, 0, 3)}, {s, 9 * s}, {Vec3::Ones(), Vec3::Zero()}, {0.5, 1.0}, cam);
    for (int ch = 0; ch < 3; ++ch) EXPECT_NEAR(r.output.color.at(8, 8, ch), 0.5, 1e-12);
}

TEST(Render, EqualDepthTiesResolveByIndex) {
    Camera cam;
    cam.width = cam.height = 16;
    cam.cx = cam.cy = 8;
    const Mat3 s = 1e-6 * Mat3::Identity();
    const auto r = render({Vec3(0, 0, 1), Vec3(0, 0, 1)}, {s, s}, {Vec3(1, 0, 0), Vec3(0, 1, 0)}, {0.5, 0.5}, cam);
    EXPECT_NEAR(r.output.color.at(8, 8, 0), 0.5, 1e-12);
    EXPECT_NEAR(r.output.color.at(8, 8, 1), 0.25, 1e-12);
}

TEST(Render, MatchesBruteForceOnRandomScenes) {
    std::mt19937_64 rng(42);
    for (int t = 0; t < 100; ++t) {
        const int w = t < 50 ? 32 : 20 + static_cast<int>(rng() % 40);
        const int h = t < 50 ? 32 : 20 + static_cast<int>(rng() % 40);
        const Camera cam = front_camera(w, h, 40.0 + uniform(rng, 0, 60));
        const Scene s = random_scene(rng, 1 + static_cast<int>(rng() % 50), 0.99);
        RenderSettings rs;
        rs.background = random_vec3(rng, 0, 1);
        const auto r = render(s.pos, s.cov, s.col, s.op, cam, rs);
        const auto o = oracle::render_brute(s.pos, s.cov, s.col, s.op, cam, rs.background);
        ASSERT_LT(max_abs_diff(r.output.color, o.color), 1e-5) << "scene " << t;
        for (std::size_t i = 0; i < s.pos.size(); ++i)
            ASSERT_NEAR(r.output.contribution[i], o.contribution[i], 1e-5 * (1 + o.contribution[i]));
    }
}

TEST(Render, ColorsStayInUnitRange) {
    std::mt19937_64 rng(43);
    for (int t = 0; t < 20; ++t) {
        const Scene s = random_scene(rng, 60, 1.0);
        const auto r = render(s.pos, s.cov, s.col, s.op, front_camera(48, 48));
        for (double v : r.output.color.data) {
            EXPECT_GE(v, -1e-12);
            EXPECT_LE(v, 1.0 + 1e-12);
        }
    }
}

TEST(Render, OffscreenGaussianIsInvisible) {
    const Camera cam = front_camera(32, 32);
    const auto r = render({Vec3(5, 0, 0)}, {1e-4 * Mat3::Identity()}, {Vec3::Ones()}, {0.9}, cam);
    EXPECT_FALSE(r.output.visible[0]);
    EXPECT_EQ(r.output.contribution[0], 0.0);
}

TEST(Render, ThreadCountDoesNotChangeResult) {
    std::mt19937_64 rng(44);
    const Scene s = random_scene(rng, 200, 0.9);
    const Camera cam = front_camera(80, 64);
    RenderSettings one, four;
    four.threads = 4;
    const auto a = render(s.pos, s.cov, s.col, s.op, cam, one);
    const auto b = render(s.pos, s.cov, s.col, s.op, cam, four);
    EXPECT_EQ(a.output.color.data, b.output.color.data);
    EXPECT_EQ(a.output.contribution, b.output.contribution);
    Image g(cam.width, cam.height);
    for (auto& v : g.data) v = uniform(rng, -1, 1);
    const RenderGrad ga = render_backward(g, a.state), gb = render_backward(g, b.state);
    for (std::size_t i = 0; i < s.pos.size(); ++i) {
        EXPECT_EQ(ga.position[i], gb.position[i]);
        EXPECT_EQ(ga.covariance[i], gb.covariance[i]);
        EXPECT_EQ(ga.opacity[i], gb.opacity[i]);
    }
}

TEST(RenderBackward, ZeroUpstreamGivesZeroGradient) {
    std::mt19937_64 rng(45);
    const Scene s = random_scene(rng, 10, 0.8);
    const Camera cam = front_camera(32, 32);
    const auto r = render(s.pos, s.cov, s.col, s.op, cam);
    const RenderGrad g = render_backward(Image(32, 32), r.state);
    for (std::size_t i = 0; i < s.pos.size(); ++i) {
        EXPECT_TRUE(g.position[i].isZero(0.0));
        EXPECT_TRUE(g.covariance[i].isZero(0.0));
        EXPECT_EQ(g.opacity[i], 0.0);
    }
}

TEST(RenderBackward, ColorGradientOfSingleGaussianIsAlpha) {
    Camera cam;
    cam.width = cam.height = 16;
    cam.cx = cam.cy = 8;
    const auto r = render({Vec3(0, 0, 1)}, {4e-4 * Mat3::Identity()}, {Vec3(0.3, 0.3, 0.3)}, {0.6}, cam);
    Image g(16, 16);
    g.at(10, 7, 1) = 1.0;
    const RenderGrad rg = render_backward(g, r.state);
    EXPECT_NEAR(rg.color[0][1], r.output.alpha.at(10, 7), 1e-14);
    EXPECT_EQ(rg.color[0][0], 0.0);
}

TEST(RenderBackward, RejectsMismatchedGradientImage) {
    const Camera cam = front_camera(32, 32);
    const auto r = render({Vec3::Zero()}, {1e-3 * Mat3::Identity()}, {Vec3::Ones()}, {0.5}, cam);
    EXPECT_THROW(render_backward(Image(16, 32), r.state), ContractViolation);
}

namespace {

// Gradient check of every rendered parameter on a 5-Gaussian 16x16 scene.
void check_render_gradients(std::uint64_t seed, double focal, double spread, double h, double tol, int trials) {
    std::mt19937_64 rng(seed);
    Camera cam = front_camera(16, 16, focal);
    cam.cx += 0.37;  // off-grid principal point
    for (int trial = 0; trial < trials; ++trial) {
        Scene s = random_scene(rng, 5, 0.8, spread);
        std::vector<Vec3> scale(5);
        std::vector<QuatVec> quat(5);
        for (int i = 0; i < 5; ++i) {
            scale[i] = random_vec3(rng, 0.03, 0.1);
            quat[i] = random_quat(rng);
        }
        Image wimg(16, 16);
        for (auto& v : wimg.data) v = uniform(rng, -1, 1);
        auto build_cov = [&] {
            for (int i = 0; i < 5; ++i) s.cov[i] = covariance_from_scale_rotation(scale[i], quat[i].normalized());
        };
        auto loss = [&] {
            build_cov();
            return weighted_sum(render(s.pos, s.cov, s.col, s.op, cam).output.color, wimg);
        };
        build_cov();
        const auto r = render(s.pos, s.cov, s.col, s.op, cam);
        const RenderGrad g = render_backward(wimg, r.state);
        const double fl = 1e-5;
        for (int i = 0; i < 5; ++i) {
            const CovarianceGrad cg = covariance_backward(scale[i], quat_to_rotmat(quat[i]), g.covariance[i]);
            const QuatVec gq = normalize_backward(quat[i], quat_to_rotmat_backward(quat[i], cg.rotation));
            for (int a = 0; a < 3; ++a) {
                EXPECT_LT(relative_error(g.position[i][a], central_difference(loss, s.pos[i][a], h), fl), tol)
                    << "position " << i << "," << a;
                EXPECT_LT(relative_error(g.color[i][a], central_difference(loss, s.col[i][a], h), fl), tol);
                EXPECT_LT(relative_error(cg.scale[a], central_difference(loss, scale[i][a], h), fl), tol)
                    << "scale " << i << "," << a;
            }
            for (int a = 0; a < 4; ++a)
                EXPECT_LT(relative_error(gq[a], central_difference(loss, quat[i][a], h), fl), tol)
                    << "rotation " << i << "," << a;
            EXPECT_LT(relative_error(g.opacity[i], central_difference(loss, s.op[i], h), fl), tol);
        }
    }
}

}  // namespace

TEST(RenderBackward, MatchesFiniteDifferences) { check_render_gradients(46, 60.0, 0.1, 1e-4, 1e-3, 20); }

// Sub-pixel Gaussians: the footprint curvature is large, so a smaller step is needed.
TEST(RenderBackward, MatchesFiniteDifferencesSubPixel) { check_render_gradients(47, 30.0, 0.15, 1e-6, 1e-4, 5); }
