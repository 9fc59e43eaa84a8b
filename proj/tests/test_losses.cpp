#include "hfsplat/losses.hpp"

#include "test_util.hpp"

using namespace hfsplat;
using namespace hfsplat::testing;

namespace {

Image random_image(std::mt19937_64& rng, int w, int h) {
    Image img(w, h);
    for (auto& v : img.data) v = uniform(rng, 0.0, 1.0);
    return img;
}

/// Direct 2D-window SSIM with zero padding, written without separability.
double ssim_direct(const Image& a, const Image& b) {
    double k1[11], sum = 0;
    for (int i = 0; i < 11; ++i) sum += (k1[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5)));
    for (double& v : k1) v /= sum;
    double total = 0;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < a.height; ++y)
            for (int x = 0; x < a.width; ++x) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (int dy = -5; dy <= 5; ++dy)
                    for (int dx = -5; dx <= 5; ++dx) {
                        const int u = x + dx, v = y + dy;
                        if (u < 0 || v < 0 || u >= a.width || v >= a.height) continue;
                        const double w = k1[dx + 5] * k1[dy + 5], pa = a.at(u, v, c), pb = b.at(u, v, c);
                        ma += w * pa;
                        mb += w * pb;
                        saa += w * pa * pa;
                        sbb += w * pb * pb;
                        sab += w * pa * pb;
                    }
                const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
                total += (2 * ma * mb + 1e-4) * (2 * cov + 9e-4) / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
            }
    return total / (3.0 * a.width * a.height);
}

void check_image_gradient(const std::function<double(const Image&)>& f, const Image& grad, Image img) {
    for (std::size_t k = 0; k < img.data.size(); ++k) {
        auto g = [&] { return f(img); };
        const double fd = central_difference(g, img.data[k], 1e-6);
        ASSERT_LT(relative_error(grad.data[k], fd, 1e-7), 1e-4) << "entry " << k;
    }
}

}  // namespace

TEST(Photometric, IdenticalImagesGiveZero) {
    std::mt19937_64 rng(1);
    const Image a = random_image(rng, 16, 12);
    const PhotometricLoss l = photometric_loss(a, a, 0.2);
    EXPECT_EQ(l.l1, 0.0);
    EXPECT_NEAR(l.dssim, 0.0, 1e-15);
    EXPECT_NEAR(l.value, 0.0, 1e-15);
}

TEST(Photometric, ConstantOffsetL1) {
    Image a(10, 10), b(10, 10);
    for (auto& v : a.data) v = 0.4;
    for (auto& v : b.data) v = 0.5;
    const PhotometricLoss l = photometric_loss(a, b, 0.2);
    EXPECT_NEAR(l.l1, 0.1, 1e-15);
    EXPECT_NEAR(l.value, 0.8 * l.l1 + 0.2 * l.dssim, 1e-15);
}

TEST(Photometric, RejectsSizeMismatch) {
    EXPECT_THROW(photometric_loss(Image(4, 4), Image(4, 5), 0.2), ContractViolation);
}

TEST(Ssim, MatchesDirectWindowSum) {
    std::mt19937_64 rng(2);
    for (int t = 0; t < 5; ++t) {
        const Image a = random_image(rng, 13, 9), b = random_image(rng, 13, 9);
        EXPECT_NEAR(ssim(a, b).value, ssim_direct(a, b), 1e-12);
    }
}

TEST(Ssim, IdentitySymmetryAndAnticorrelation) {
    std::mt19937_64 rng(3);
    const Image a = random_image(rng, 20, 20), b = random_image(rng, 20, 20);
    EXPECT_NEAR(ssim(a, a).value, 1.0, 1e-12);
    EXPECT_NEAR(ssim(a, b).value, ssim(b, a).value, 1e-14);
    Image neg = a;
    for (auto& v : neg.data) v = 1.0 - v;
    EXPECT_LT(ssim(a, neg).value, 0.0);
}

TEST(Psnr, KnownValueAndCap) {
    Image a(8, 8), b(8, 8);
    for (auto& v : b.data) v = 0.1;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-10);
    EXPECT_EQ(psnr(a, a), 100.0);
}

TEST(Photometric, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    const Image img = random_image(rng, 8, 8), ref = random_image(rng, 8, 8);
    const PhotometricLoss l = photometric_loss(img, ref, 0.2);
    check_image_gradient([&](const Image& x) { return photometric_loss(x, ref, 0.2).value; }, l.grad, img);
}

TEST(Patch, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    const Image img = random_image(rng, 8, 8), ref = random_image(rng, 8, 8);
    const PixelBox hand{1, 1, 6, 7}, face{3, 0, 8, 5};
    const PatchLoss l = patch_loss(img, ref, hand, face);
    EXPECT_EQ(l.crops, 2);
    check_image_gradient([&](const Image& x) { return patch_loss(x, ref, hand, face).value; }, l.grad, img);
}

TEST(Patch, OnlyCropPixelsMatter) {
    std::mt19937_64 rng(6);
    const Image img = random_image(rng, 40, 30), ref = random_image(rng, 40, 30);
    const PixelBox hand{5, 4, 20, 18}, face{12, 10, 35, 28};
    const PatchLoss l = patch_loss(img, ref, hand, face);
    Image other = img;
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 40; ++x)
            if (x < 5 || x >= 20 || y < 4 || y >= 18)
                for (int c = 0; c < 3; ++c) other.at(x, y, c) = uniform(rng, 0, 1);
    EXPECT_EQ(patch_loss(other, ref, hand, face).value, l.value);
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 40; ++x)
            if (x < 5 || x >= 20 || y < 4 || y >= 18) {
                EXPECT_EQ(l.grad.at(x, y, 0), 0.0);
            }
}

TEST(Patch, NoHandMeansNoLoss) {
    const Image a(16, 16), b(16, 16);
    const PatchLoss l = patch_loss(a, b, PixelBox{}, PixelBox{0, 0, 16, 16});
    EXPECT_EQ(l.value, 0.0);
    EXPECT_EQ(l.crops, 0);
}

TEST(Patch, HandWithoutOverlapUsesOneCrop) {
    std::mt19937_64 rng(7);
    const Image a = random_image(rng, 16, 16), b = random_image(rng, 16, 16);
    const PixelBox hand{0, 0, 6, 6};
    const PatchLoss l = patch_loss(a, b, hand, PixelBox{8, 8, 16, 16});
    EXPECT_EQ(l.crops, 1);
    const ImageLoss il = image_loss(crop_resize(a, hand), crop_resize(b, hand));
    EXPECT_NEAR(l.value, il.l1 + il.dssim, 1e-15);
}

TEST(CropResize, IdentityAtNativeSize) {
    std::mt19937_64 rng(8);
    const Image a = random_image(rng, 64, 64);
    EXPECT_EQ(crop_resize(a, PixelBox{0, 0, 64, 64}).data, a.data);
}

namespace {

GaussianSet reg_set() {
    GaussianSet g;
    g.resize(2);
    return g;
}

}  // namespace

TEST(Regularizers, ScaleExample) {
    GaussianSet g = reg_set();
    g.log_scale[0] = Vec3::Constant(std::log(0.5));
    g.log_scale[1] = Vec3::Constant(std::log(0.5));
    const auto r = scale_regularizer(g, nullptr, 0.4, {1, 0});
    EXPECT_NEAR(r.value, 3 * 0.01, 1e-15);
    EXPECT_TRUE(r.grad_base[1].isZero(0.0));
    EXPECT_EQ(scale_regularizer(g, nullptr, 0.4, {0, 0}).value, 0.0);
    const std::vector<Vec3> ds{Vec3(-0.2, 0, 0), Vec3::Zero()};
    EXPECT_NEAR(scale_regularizer(g, &ds, 0.4, {1, 0}).value, 2 * 0.01, 1e-15);
}

TEST(Regularizers, PositionIsSymmetric) {
    GaussianSet g = reg_set();
    g.local_position[0] = Vec3(0.3, 0, 0);
    g.local_position[1] = Vec3(-0.3, 0, 0);
    EXPECT_NEAR(position_regularizer(g, nullptr, 0.2, {1, 0}).value, 0.01, 1e-15);
    EXPECT_NEAR(position_regularizer(g, nullptr, 0.2, {0, 1}).value, 0.01, 1e-15);
    const std::vector<Vec3> dmu{Vec3(-0.25, 0, 0), Vec3::Zero()};
    EXPECT_EQ(position_regularizer(g, &dmu, 0.2, {1, 0}).value, 0.0);
}

TEST(Regularizers, GradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(9);
    GaussianSet g;
    g.resize(6);
    std::vector<Vec3> ds(6), dmu(6);
    for (std::size_t i = 0; i < 6; ++i) {
        g.log_scale[i] = random_vec3(rng, std::log(0.2), std::log(0.8));
        g.local_position[i] = random_vec3(rng, -0.5, 0.5);
        ds[i] = random_vec3(rng, -0.1, 0.1);
        dmu[i] = random_vec3(rng, -0.1, 0.1);
    }
    const std::vector<char> vis{1, 1, 0, 1, 1, 1};
    const auto rs = scale_regularizer(g, &ds, 0.4, vis);
    const auto rp = position_regularizer(g, &dmu, 0.2, vis);
    auto fs = [&] { return scale_regularizer(g, &ds, 0.4, vis).value; };
    auto fp = [&] { return position_regularizer(g, &dmu, 0.2, vis).value; };
    for (std::size_t i = 0; i < 6; ++i)
        for (int a = 0; a < 3; ++a) {
            EXPECT_LT(relative_error(rs.grad_base[i][a], central_difference(fs, g.log_scale[i][a], 1e-7), 1e-7), 1e-4);
            EXPECT_LT(relative_error(rs.grad_delta[i][a], central_difference(fs, ds[i][a], 1e-7), 1e-7), 1e-4);
            EXPECT_LT(relative_error(rp.grad_base[i][a], central_difference(fp, g.local_position[i][a], 1e-7), 1e-7),
                      1e-4);
            EXPECT_LT(relative_error(rp.grad_delta[i][a], central_difference(fp, dmu[i][a], 1e-7), 1e-7), 1e-4);
        }
}

TEST(TotalLoss, WeightedCombination) {
    LossTerms t;
    t.l1 = 1.0;
    EXPECT_NEAR(total_loss(t, LossWeights{}), 0.8, 1e-15);
    t = LossTerms{};
    t.dssim = 1.0;
    t.scale = 1.0;
    t.position = 1.0;
    t.patch = 1.0;
    EXPECT_NEAR(total_loss(t, LossWeights{}), 0.2 + 1.0 + 0.01 + 0.1, 1e-15);
}

TEST(TotalLoss, InvalidWeightsRejected) {
    LossWeights w;
    w.lambda = 1.5;
    EXPECT_THROW(w.validate(), ValidationError);
    w = LossWeights{};
    w.a = -1;
    EXPECT_THROW(w.validate(), ValidationError);
}
