#include "hfsplat/gaussian.hpp"
#include "hfsplat/gaussian_io.hpp"

#include "test_util.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include <numbers>
#include <sstream>

using namespace hfsplat;
using namespace hfsplat::testing;

TEST(Covariance, IdentityScaleAndRotation) {
    const Mat3 s = covariance_from_scale_rotation(Vec3(1, 1, 1), identity_quat());
    EXPECT_TRUE(s.isApprox(Mat3::Identity(), 1e-15));
}

TEST(Covariance, AxisAligned) {
    const Mat3 s = covariance_from_scale_rotation(Vec3(2, 1, 1), identity_quat());
    EXPECT_TRUE(s.isApprox(Vec3(4, 1, 1).asDiagonal().toDenseMatrix(), 1e-15));
}

TEST(Covariance, QuarterTurnAboutZMatchesExplicitProduct) {
    const QuatVec q = axis_angle_quat(Vec3::UnitZ(), std::numbers::pi / 2);
    const Mat3 sigma = covariance_from_scale_rotation(Vec3(2, 1, 1), q);
    // explicit R S S^T R^T with the textbook quarter-turn matrix
    Mat3 r;
    r << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Mat3 s = Vec3(2, 1, 1).asDiagonal();
    const Mat3 oracle = r * s * s.transpose() * r.transpose();
    EXPECT_LT((sigma - oracle).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_NEAR(sigma(0, 0), 1.0, 1e-14);
    EXPECT_NEAR(sigma(1, 1), 4.0, 1e-14);
    EXPECT_NEAR(sigma(2, 2), 1.0, 1e-14);
}

TEST(Covariance, EigenvaluesAreSquaredScales) {
    std::mt19937_64 rng(3);
    for (int t = 0; t < 50; ++t) {
        const Vec3 s = random_vec3(rng, 0.1, 3.0);
        const Mat3 sigma = covariance_from_scale_rotation(s, random_quat(rng));
        EXPECT_LT((sigma - sigma.transpose()).norm(), 1e-14);
        Eigen::SelfAdjointEigenSolver<Mat3> es(sigma);
        Vec3 ev = es.eigenvalues();
        Vec3 expected = s.array().square();
        std::sort(ev.data(), ev.data() + 3);
        std::sort(expected.data(), expected.data() + 3);
        EXPECT_LT((ev - expected).norm(), 1e-12);
    }
}

TEST(Covariance, RejectsNonUnitQuaternion) {
    EXPECT_THROW(covariance_from_scale_rotation(Vec3(1, 1, 1), QuatVec(1.0 + 1e-5, 0, 0, 0)),
                 ContractViolation);
    EXPECT_NO_THROW(covariance_from_scale_rotation(Vec3(1, 1, 1), QuatVec(1.0 + 1e-7, 0, 0, 0)));
}

TEST(Covariance, RotationEquivariance) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 200; ++t) {
        const Vec3 s = random_vec3(rng, 0.05, 2.0);
        const QuatVec q = random_quat(rng);
        const QuatVec q0 = random_quat(rng);
        const Mat3 r0 = quat_to_rotmat(q0);
        const Mat3 lhs = covariance_from_scale_rotation(s, quat_mul(q0, q).normalized());
        const Mat3 rhs = r0 * covariance_from_scale_rotation(s, q) * r0.transpose();
        EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10);
    }
}

TEST(EvaluateGaussian, PeakAndAnalyticValues) {
    const Vec3 mu(0.3, -0.2, 1.0);
    EXPECT_EQ(evaluate_gaussian(mu, mu, Mat3::Identity()), 1.0);
    EXPECT_NEAR(evaluate_gaussian(mu + Vec3(0, 1, 0), mu, Mat3::Identity()), std::exp(-0.5), 1e-15);
    const Mat3 sigma = Vec3(4, 1, 1).asDiagonal();
    const Vec3 d(2, 0, 0);
    const double oracle = std::exp(-0.5 * d.dot(sigma.fullPivLu().solve(d)));
    EXPECT_NEAR(evaluate_gaussian(mu + d, mu, sigma), oracle, 1e-15);
    EXPECT_NEAR(oracle, std::exp(-0.5), 1e-15);
}

TEST(EvaluateGaussian, DegenerateCovarianceThrows) {
    const Mat3 sigma = Vec3(1, 1, 0).asDiagonal();
    EXPECT_THROW(evaluate_gaussian(Vec3::Zero(), Vec3::Zero(), sigma), NumericalError);
}

TEST(EvaluateGaussian, MatchesDenseSolveOracle) {
    std::mt19937_64 rng(5);
    for (int t = 0; t < 500; ++t) {
        Eigen::Matrix3d a = Eigen::Matrix3d::NullaryExpr([&](Eigen::Index, Eigen::Index) {
            return uniform(rng, -1.0, 1.0);
        });
        const Mat3 sigma = a * a.transpose() + 0.1 * Mat3::Identity();
        const Vec3 mu = random_vec3(rng, -1, 1);
        const Vec3 x = mu + random_vec3(rng, -1, 1);
        const Vec3 d = x - mu;
        const double oracle = std::exp(-0.5 * d.dot(sigma.fullPivLu().inverse() * d));
        EXPECT_NEAR(evaluate_gaussian(x, mu, sigma), oracle, 1e-12);
    }
}

TEST(EvaluateGaussian, StrictlyDecreasingAlongRays) {
    std::mt19937_64 rng(8);
    const Mat3 sigma = covariance_from_scale_rotation(Vec3(0.5, 1.0, 2.0), random_quat(rng));
    const Vec3 mu(0.1, 0.2, 0.3);
    for (int r = 0; r < 20; ++r) {
        const Vec3 dir = random_vec3(rng, -1, 1).normalized();
        double prev = 1.0;
        for (int k = 1; k < 30; ++k) {
            const double v = evaluate_gaussian(mu + 0.1 * k * dir, mu, sigma);
            EXPECT_LT(v, prev);
            prev = v;
        }
    }
}

TEST(EvaluateGaussian, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(21);
    const double h = 1e-5;
    for (int t = 0; t < 50; ++t) {
        Vec3 mu = random_vec3(rng, -0.5, 0.5);
        Vec3 s = random_vec3(rng, 0.4, 1.5);
        QuatVec q = random_quat(rng);
        const Vec3 x = mu + random_vec3(rng, -1.0, 1.0);
        const auto g = gaussian_value_and_grad(x, mu, s, q);
        EXPECT_NEAR(g.value, evaluate_gaussian(x, mu, covariance_from_scale_rotation(s, q)), 1e-12);
        auto f = [&] { return gaussian_value_and_grad(x, mu, s, q).value; };
        for (int a = 0; a < 3; ++a) {
            EXPECT_LT(relative_error(g.d_mu[a], central_difference(f, mu[a], h), 1e-6), 1e-4);
            EXPECT_LT(relative_error(g.d_scale[a], central_difference(f, s[a], h), 1e-6), 1e-4);
        }
        for (int a = 0; a < 4; ++a)
            EXPECT_LT(relative_error(g.d_quat[a], central_difference(f, q[a], h), 1e-6), 1e-4);
    }
}

TEST(Activation, Conventions) {
    GaussianSet g;
    g.resize(2);
    g.opacity_logit = {0.0, 50.0};
    g.log_scale[0] = Vec3::Zero();
    g.log_scale[1] = Vec3::Constant(-100.0);
    g.color_raw[0] = Vec3::Zero();
    g.color_raw[1] = Vec3::Constant(1e6);
    const auto a = activate_parameters(g);
    EXPECT_EQ(a.opacity[0], 0.5);
    EXPECT_EQ(a.scale[0], Vec3::Ones());
    EXPECT_EQ(a.scale[1], Vec3::Constant(kScaleFloor));
    EXPECT_EQ(a.color[1], Vec3::Ones());
    EXPECT_GT(a.opacity[1], 0.0);
    EXPECT_LE(a.opacity[1], 1.0);
}

TEST(Activation, InvariantsOnRandomRawValues) {
    std::mt19937_64 rng(2);
    GaussianSet g;
    g.resize(1000);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g.opacity_logit[i] = uniform(rng, -30, 30);
        g.color_raw[i] = random_vec3(rng, -30, 30);
        g.log_scale[i] = random_vec3(rng, -30, 3);
    }
    const auto a = activate_parameters(g);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_GT(a.opacity[i], 0.0);
        EXPECT_LT(a.opacity[i], 1.0);
        EXPECT_TRUE((a.color[i].array() >= 0.0).all() && (a.color[i].array() <= 1.0).all());
        EXPECT_TRUE((a.scale[i].array() >= kScaleFloor).all());
    }
}

TEST(GaussianRecord, RoundTripIsBitExact) {
    std::mt19937_64 rng(4);
    GaussianSet g;
    g.resize(37);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g.local_position[i] = random_vec3(rng, -1, 1);
        g.log_scale[i] = random_vec3(rng, -3, 0);
        g.rotation[i] = random_quat(rng);
        g.color_raw[i] = random_vec3(rng, -2, 2);
        g.opacity_logit[i] = uniform(rng, -3, 3);
        g.parent_face[i] = static_cast<int>(i % 5);
        g.canonical_position[i] = random_vec3(rng, -1, 1);
        for (int c = 0; c < kPointFeatureDim; ++c) g.point_feature(c, static_cast<Eigen::Index>(i)) = uniform(rng, -1, 1);
    }
    std::stringstream ss;
    write_gaussians(ss, g);
    const GaussianSet back = read_gaussians(ss);
    EXPECT_TRUE(back == g);
}

TEST(GaussianRecord, RejectsBadMagicVersionAndTruncation) {
    GaussianSet g;
    g.resize(3);
    std::stringstream ss;
    write_gaussians(ss, g);
    std::string bytes = ss.str();

    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream s1(bad);
    EXPECT_THROW(read_gaussians(s1), FormatError);

    std::string ver = bytes;
    ver[8] = 9;
    std::stringstream s2(ver);
    EXPECT_THROW(read_gaussians(s2), VersionMismatch);

    std::stringstream s3(bytes.substr(0, bytes.size() - 5));
    EXPECT_THROW(read_gaussians(s3), FormatError);
}
