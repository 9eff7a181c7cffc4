#include <catch2/catch_amalgamated.hpp>

#include "neslam/geometry.hpp"
#include "neslam/rng.hpp"

using namespace neslam;

namespace {

Intrinsics test_k() {
    Intrinsics k;
    k.fx = k.fy = 100;
    k.cx = k.cy = 50;
    k.width = k.height = 100;
    k.depth_scale = 5000;
    return k;
}

}  // namespace

TEST_CASE("project maps optical axis to principal point") {
    const Intrinsics k = test_k();
    Vec2 px = project(Vec3(0, 0, 1), k);
    CHECK(px.x() == Catch::Approx(50.0));
    CHECK(px.y() == Catch::Approx(50.0));

    px = project(Vec3(0.5, 0, 1), k);
    CHECK(px.x() == Catch::Approx(100.0));
    CHECK(px.y() == Catch::Approx(50.0));
}

TEST_CASE("project rejects points behind the camera") {
    const Intrinsics k = test_k();
    CHECK_THROWS_AS(project(Vec3(0, 0, -1), k), ContractViolation);
    CHECK_THROWS_AS(project(Vec3(0, 0, 0), k), ContractViolation);
}

TEST_CASE("backproject known pixels") {
    const Intrinsics k = test_k();
    Vec3 p = backproject(Vec2(50, 50), 2.0, k);
    CHECK((p - Vec3(0, 0, 2)).norm() < 1e-12);
    p = backproject(Vec2(150, 50), 1.0, k);
    CHECK((p - Vec3(1, 0, 1)).norm() < 1e-12);
    CHECK_THROWS_AS(backproject(Vec2(10, 10), 0.0, k), ContractViolation);
}

TEST_CASE("project/backproject roundtrip identity") {
    const Intrinsics k = test_k();
    Rng rng(7);
    for (int i = 0; i < 200; ++i) {
        const Vec3 p(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0.1, 8));
        const Vec2 px = project(p, k);
        const Vec3 q = backproject(px, p.z(), k);
        REQUIRE((q - p).norm() < 1e-9);
    }
}

TEST_CASE("pose_retract zero delta is identity") {
    Pose p;
    p.rotation = so3_exp(Vec3(0.3, -0.2, 0.5));
    p.translation = Vec3(1, 2, 3);
    const Pose q = pose_retract(p, Vec6::Zero());
    CHECK((q.rotation - p.rotation).norm() < 1e-15);
    CHECK((q.translation - p.translation).norm() < 1e-15);
}

TEST_CASE("pose_retract pure translation") {
    Vec6 d = Vec6::Zero();
    d[3] = 1.0;
    const Pose q = pose_retract(Pose::identity(), d);
    CHECK((q.rotation - Mat3::Identity()).norm() < 1e-15);
    CHECK((q.translation - Vec3(1, 0, 0)).norm() < 1e-15);
}

TEST_CASE("pose_retract rotation matches closed-form z rotation") {
    // Oracle: a 90 degree rotation about z has the closed form below; the
    // retraction of (0,0,pi/2) must reproduce it.
    Vec6 d = Vec6::Zero();
    d[2] = M_PI / 2;
    const Pose q = pose_retract(Pose::identity(), d);
    Mat3 expected;
    expected << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    CHECK((q.rotation - expected).norm() < 1e-12);
}

TEST_CASE("pose_retract inverts through pose_log for small deltas") {
    Rng rng(11);
    for (int i = 0; i < 100; ++i) {
        Pose p;
        p.rotation = so3_exp(Vec3(rng.normal(), rng.normal(), rng.normal()));
        p.translation = Vec3(rng.normal(), rng.normal(), rng.normal());
        Vec6 d;
        for (int a = 0; a < 6; ++a) d[a] = rng.uniform(-0.05, 0.05);
        const Pose q = pose_retract(p, d);
        const Vec6 rec = pose_log(q.compose(p.inverse()));
        REQUIRE((rec - d).norm() < 1e-6);
    }
}

TEST_CASE("rotation stays orthonormal over many retractions") {
    Pose p;
    Rng rng(3);
    for (int i = 0; i < 10000; ++i) {
        Vec6 d;
        for (int a = 0; a < 6; ++a) d[a] = rng.uniform(-0.01, 0.01);
        p = pose_retract(p, d);
    }
    CHECK(p.orthonormality_error() < 1e-6);
}

TEST_CASE("pose composition with inverse yields identity") {
    Pose p;
    p.rotation = so3_exp(Vec3(0.4, 0.1, -0.7));
    p.translation = Vec3(0.5, -1, 2);
    const Pose id = p.compose(p.inverse());
    CHECK((id.rotation - Mat3::Identity()).norm() < 1e-9);
    CHECK(id.translation.norm() < 1e-9);
}

TEST_CASE("so3 log inverts exp") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        Vec3 w(rng.normal(), rng.normal(), rng.normal());
        w *= rng.uniform(0, 0.95) * M_PI / std::max(w.norm(), 1e-12);
        const Vec3 rec = so3_log(so3_exp(w));
        REQUIRE((rec - w).norm() < 1e-8);
    }
}

TEST_CASE("ray_for_pixel at principal point looks along +z") {
    const Intrinsics k = test_k();
    Aabb box{Vec3(-5, -5, 0.01), Vec3(5, 5, 10)};
    auto ray = ray_for_pixel(Pose::identity(), k, Vec2(50, 50), box, 0.1, 8.0);
    REQUIRE(ray.has_value());
    CHECK((ray->direction - Vec3(0, 0, 1)).norm() < 1e-12);
    CHECK(ray->origin.norm() < 1e-12);
    CHECK(ray->t_near == Catch::Approx(0.1));
    CHECK(ray->t_far == Catch::Approx(8.0));
}

TEST_CASE("ray_for_pixel translation shifts origin only") {
    const Intrinsics k = test_k();
    Aabb box{Vec3(-5, -5, -5), Vec3(5, 5, 10)};
    Pose p;
    p.translation = Vec3(0.5, -0.25, 1);
    const auto r0 = ray_for_pixel(Pose::identity(), k, Vec2(30, 70), box, 0.1, 8.0);
    const auto r1 = ray_for_pixel(p, k, Vec2(30, 70), box, 0.1, 8.0);
    REQUIRE(r0.has_value());
    REQUIRE(r1.has_value());
    CHECK((r0->direction - r1->direction).norm() < 1e-12);
    CHECK((r1->origin - p.translation).norm() < 1e-12);
}

TEST_CASE("ray_for_pixel equals explicit matrix composition") {
    // Oracle: build the ray by multiplying 4x4 homogeneous matrices directly.
    const Intrinsics k = test_k();
    Aabb box{Vec3(-8, -8, -8), Vec3(8, 8, 8)};
    Rng rng(13);
    for (int i = 0; i < 100; ++i) {
        Pose p;
        p.rotation = so3_exp(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
        p.translation = Vec3(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
        const Vec2 px(rng.uniform(1, 99), rng.uniform(1, 99));

        Mat4 T = Mat4::Identity();
        T.block<3, 3>(0, 0) = p.rotation;
        T.block<3, 1>(0, 3) = p.translation;
        Eigen::Vector4d dir_h;
        Vec3 d_cam((px.x() - k.cx) / k.fx, (px.y() - k.cy) / k.fy, 1.0);
        d_cam.normalize();
        dir_h << d_cam.x(), d_cam.y(), d_cam.z(), 0.0;
        const Vec3 dir_oracle = (T * dir_h).head<3>();

        const auto ray = ray_for_pixel(p, k, px, box, 0.1, 8.0);
        REQUIRE(ray.has_value());
        REQUIRE((ray->direction - dir_oracle).norm() < 1e-9);
        REQUIRE((ray->origin - p.translation).norm() < 1e-12);
    }
}

TEST_CASE("ray missing the scene bounds is empty") {
    const Intrinsics k = test_k();
    Aabb box{Vec3(10, 10, 10), Vec3(11, 11, 11)};
    const auto ray = ray_for_pixel(Pose::identity(), k, Vec2(50, 50), box, 0.1, 8.0);
    CHECK_FALSE(ray.has_value());
}

TEST_CASE("intrinsics validation") {
    Intrinsics k = test_k();
    CHECK_NOTHROW(k.validate());
    k.fx = -1;
    CHECK_THROWS_AS(k.validate(), ContractViolation);
}
