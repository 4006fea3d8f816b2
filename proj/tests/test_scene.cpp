#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "evgs/scene.hpp"

using namespace evgs;

namespace {

Vec4 random_quat(std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    return Vec4(g(rng), g(rng), g(rng), g(rng));
}

}  // namespace

TEST(BuildCovariance, IdentityRotationUnitScale) {
    const Covariance3 c = build_covariance(Vec4(1, 0, 0, 0), Vec3(1, 1, 1));
    EXPECT_TRUE(c.m.isApprox(Mat3::Identity(), 0.0));
}

TEST(BuildCovariance, AxisAlignedSquaresScales) {
    const Covariance3 c = build_covariance(Vec4(1, 0, 0, 0), Vec3(2, 1, 1));
    EXPECT_EQ(c.m, Vec3(4, 1, 1).asDiagonal().toDenseMatrix());
}

TEST(BuildCovariance, QuarterTurnAboutZSwapsAxes) {
    // oracle: explicit R diag(s)^2 R^T with R written out by hand
    Mat3 r;
    r << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const Mat3 expected = r * Vec3(4, 1, 1).asDiagonal() * r.transpose();
    ASSERT_TRUE(expected.isApprox(Vec3(1, 4, 1).asDiagonal().toDenseMatrix()));
    const double h = std::sqrt(0.5);
    const Covariance3 c = build_covariance(Vec4(h, 0, 0, h), Vec3(2, 1, 1));
    EXPECT_LT((c.m - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BuildCovariance, NormalisesQuaternionInternally) {
    const Covariance3 a = build_covariance(Vec4(0.3, -0.2, 0.5, 0.1), Vec3(0.5, 1.5, 2.0));
    const Covariance3 b = build_covariance(Vec4(0.3, -0.2, 0.5, 0.1) * 7.0, Vec3(0.5, 1.5, 2.0));
    EXPECT_LT((a.m - b.m).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(BuildCovariance, RejectsBadInput) {
    EXPECT_THROW(build_covariance(Vec4::Zero(), Vec3(1, 1, 1)), InvalidParameter);
    EXPECT_THROW(build_covariance(Vec4(1, 0, 0, 0), Vec3(1, NAN, 1)), InvalidParameter);
    EXPECT_THROW(build_covariance(Vec4(INFINITY, 0, 0, 0), Vec3(1, 1, 1)), InvalidParameter);
    EXPECT_THROW(build_covariance(Vec4(1, 0, 0, 0), Vec3(1, 0, 1)), InvalidParameter);
}

TEST(BuildCovariance, PropertiesOverRandomInputs) {
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<double> ls(-3.0, 2.0);
    for (int trial = 0; trial < 500; ++trial) {
        const Vec4 q = random_quat(rng);
        const Vec3 s(std::exp(ls(rng)), std::exp(ls(rng)), std::exp(ls(rng)));
        const Covariance3 c = build_covariance(q, s);
        // sign invariance is exact: R(q) is quadratic in q
        EXPECT_EQ(build_covariance(-q, s).m, c.m);
        EXPECT_EQ(c.m, c.m.transpose());
        const double tr = s.squaredNorm();
        EXPECT_LE(std::abs(c.m.trace() - tr), 1e-9 * tr);
        Eigen::SelfAdjointEigenSolver<Mat3> es(c.m);
        EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12 * tr);
    }
}

TEST(Activate, PlainValues) {
    GaussianCloud c;
    c.resize(1);
    c.rotations = {2, 0, 0, 0};
    c.opacity_logits[0] = 0.0;
    c.intensity[0] = 1.7;
    const ActivatedGaussian a = activate(c, 0);
    EXPECT_EQ(a.opacity, 0.5);
    EXPECT_EQ(a.scale, Vec3(1, 1, 1));
    EXPECT_EQ(a.rotation, Vec4(1, 0, 0, 0));
    EXPECT_EQ(a.intensity, 1.0);  // clamped at render time
    EXPECT_EQ(c.intensity[0], 1.7);  // stored value untouched
}

TEST(Activate, RoundTripThroughInverseActivations) {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    for (int i = 0; i < 200; ++i) {
        const double o = u(rng), s = u(rng);
        const double back_o = logit(sigmoid(o));
        const double back_s = std::log(std::exp(s));
        EXPECT_LE(std::abs(back_o - o), 1e-9 * std::max(1.0, std::abs(o)));
        EXPECT_LE(std::abs(back_s - s), 1e-9 * std::max(1.0, std::abs(s)));
    }
}

TEST(InitRandomCloud, DeterministicForSeed) {
    Box3 box{Vec3::Zero(), Vec3::Ones()};
    const GaussianCloud a = init_random_cloud(1000, box, 7);
    const GaussianCloud b = init_random_cloud(1000, box, 7);
    EXPECT_EQ(a, b);
    const GaussianCloud c = init_random_cloud(1000, box, 8);
    EXPECT_NE(a, c);
}

TEST(InitRandomCloud, FollowsConfiguredDefaults) {
    Box3 box{Vec3(-1, -2, 0), Vec3(1, 2, 3)};
    const GaussianCloud c = init_random_cloud(500, box, 3);
    ASSERT_EQ(c.size(), 500u);
    c.validate();
    for (std::size_t i = 0; i < c.size(); ++i) {
        const Vec3 p = c.position(i);
        EXPECT_TRUE((p.array() >= box.lo.array()).all() && (p.array() <= box.hi.array()).all());
        EXPECT_EQ(c.rotation(i), Vec4(1, 0, 0, 0));
        EXPECT_NEAR(sigmoid(c.opacity_logits[i]), 0.1, 1e-12);
        EXPECT_EQ(c.intensity[i], 0.5);
        EXPECT_EQ(c.log_scales[3 * i], c.log_scales[3 * i + 1]);
    }
    // 50% of mean NN spacing: for uniform points the spacing is ~0.55 (V/n)^(1/3)
    const double s = std::exp(c.log_scales[0]);
    const double expected = 0.5 * 0.554 * std::cbrt(box.volume() / 500.0);
    EXPECT_NEAR(s, expected, 0.25 * expected);
}

TEST(InitRandomCloud, MillionGaussians) {
    Box3 box;
    InitConfig cfg;
    cfg.nn_sample = 100;  // keep the spacing estimate cheap here
    const GaussianCloud c = init_random_cloud(1000000, box, 1, cfg);
    EXPECT_EQ(c.size(), 1000000u);
    EXPECT_EQ(c.positions.size(), 3000000u);
}

TEST(InitRandomCloud, RejectsDegenerateInput) {
    EXPECT_THROW(init_random_cloud(0, Box3{}, 1), InvalidParameter);
    EXPECT_THROW(init_random_cloud(4, Box3{Vec3(0, 0, 0), Vec3(1, 1, 0)}, 1), InvalidParameter);
    EXPECT_THROW(init_random_cloud(4, Box3{Vec3(0, 0, 0), Vec3(-1, 1, 1)}, 1), InvalidParameter);
}

TEST(Cloud, ValidateCatchesBrokenInvariants) {
    GaussianCloud c = init_random_cloud(4, Box3{}, 2);
    c.validate();
    GaussianCloud z = c;
    z.rotations[4] = z.rotations[5] = z.rotations[6] = z.rotations[7] = 0.0;
    EXPECT_THROW(z.validate(), InvalidParameter);
    GaussianCloud big = c;
    big.log_scales[0] = 1e4;
    EXPECT_THROW(big.validate(), InvalidParameter);
    GaussianCloud nan = c;
    nan.intensity[2] = NAN;
    EXPECT_THROW(nan.validate(), InvalidParameter);
    GaussianCloud empty;
    EXPECT_THROW(empty.validate(), InvalidParameter);
}

TEST(Checkpoint, SaveLoadSaveIsByteStable) {
    Checkpoint ck;
    ck.cloud = make_analytic_scene(5);
    ck.config_hash = 0xdeadbeefcafe;
    ck.width = 64;
    ck.height = 48;
    ck.iteration = 17;
    OptimizerMoments m;
    m.step = 17;
    m.m1 = ck.cloud;
    m.m2 = ck.cloud;
    ck.optimizer = m;

    std::stringstream a;
    write_checkpoint(a, ck);
    const std::string bytes = a.str();
    std::stringstream in(bytes);
    const Checkpoint back = read_checkpoint(in);
    EXPECT_EQ(back, ck);
    std::stringstream b;
    write_checkpoint(b, back);
    EXPECT_EQ(b.str(), bytes);
}

TEST(Checkpoint, RejectsCorruptInput) {
    Checkpoint ck;
    ck.cloud = make_analytic_scene(5);
    std::stringstream a;
    write_checkpoint(a, ck);
    std::string bytes = a.str();

    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_checkpoint(truncated), ParseError);
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream badmagic(bad);
    EXPECT_THROW(read_checkpoint(badmagic), ParseError);
    std::stringstream trailing(bytes + "z");
    EXPECT_THROW(read_checkpoint(trailing), ParseError);
}

TEST(Cloud, CompactKeepsOrder) {
    GaussianCloud c = make_analytic_scene(3);
    const GaussianCloud orig = c;
    std::vector<bool> keep(c.size(), true);
    keep[0] = keep[5] = false;
    c.compact(keep);
    ASSERT_EQ(c.size(), orig.size() - 2);
    EXPECT_EQ(c.intensity[0], orig.intensity[1]);
    EXPECT_EQ(Vec4(c.rotation(4)), Vec4(orig.rotation(6)));
}
