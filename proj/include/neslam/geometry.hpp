#pragma once

#include "neslam/core.hpp"

#include <cmath>
#include <optional>

namespace neslam {

/// Pinhole camera. Image coordinates: u along width, v along height, origin at
/// the top-left pixel center. depth_scale divides raw sensor values to meters.
struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    double depth_scale = 1.0;

    void validate() const {
        if (!(fx > 0 && fy > 0)) throw ContractViolation("intrinsics: focal lengths must be positive");
        if (!(cx > 0 && cx < width && cy > 0 && cy < height))
            throw ContractViolation("intrinsics: principal point outside image");
        if (!(depth_scale > 0)) throw ContractViolation("intrinsics: depth_scale must be positive");
    }
};

inline Mat3 skew(const Vec3& v) {
    Mat3 s;
    s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return s;
}

/// Rodrigues rotation from an axis-angle vector.
inline Mat3 so3_exp(const Vec3& w) {
    const double t = w.norm();
    const Mat3 W = skew(w);
    if (t < 1e-12) return Mat3::Identity() + W + 0.5 * W * W;
    const double a = std::sin(t) / t;
    const double b = (1.0 - std::cos(t)) / (t * t);
    return Mat3::Identity() + a * W + b * W * W;
}

/// Axis-angle from a rotation matrix.
inline Vec3 so3_log(const Mat3& R) {
    const double c = std::min(1.0, std::max(-1.0, (R.trace() - 1.0) * 0.5));
    const double t = std::acos(c);
    Vec3 axis(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    if (t < 1e-9) return 0.5 * axis;
    if (t > M_PI - 1e-6) {
        // Near pi the off-diagonal difference degenerates; recover the axis
        // from the symmetric part.
        Vec3 d((R(0, 0) + 1) * 0.5, (R(1, 1) + 1) * 0.5, (R(2, 2) + 1) * 0.5);
        int k = 0;
        d.maxCoeff(&k);
        Vec3 ax = Vec3::Zero();
        ax[k] = std::sqrt(std::max(0.0, d[k]));
        for (int i = 0; i < 3; ++i)
            if (i != k) ax[i] = (R(i, k) + R(k, i)) * 0.25 / ax[k];
        ax.normalize();
        if ((t < M_PI) && axis.dot(ax) < 0) ax = -ax;
        return t * ax;
    }
    return (t / (2.0 * std::sin(t))) * axis;
}

/// Right Jacobian of SO(3): exp(w + d) = exp(w) exp(Jr(w) d) to first order.
inline Mat3 so3_right_jacobian(const Vec3& w) {
    const double t = w.norm();
    const Mat3 W = skew(w);
    if (t < 1e-8) return Mat3::Identity() - 0.5 * W + (1.0 / 6.0) * W * W;
    const double t2 = t * t;
    const double a = (1.0 - std::cos(t)) / t2;
    const double b = (t - std::sin(t)) / (t2 * t);
    return Mat3::Identity() - a * W + b * W * W;
}

/// Camera-to-world rigid transform.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    static Pose identity() { return {}; }

    Vec3 apply(const Vec3& p_cam) const { return rotation * p_cam + translation; }
    Vec3 apply_inverse(const Vec3& p_world) const {
        return rotation.transpose() * (p_world - translation);
    }
    Vec3 rotate(const Vec3& v) const { return rotation * v; }

    Pose compose(const Pose& rhs) const {
        return {rotation * rhs.rotation, rotation * rhs.translation + translation};
    }
    Pose inverse() const {
        return {rotation.transpose(), -(rotation.transpose() * translation)};
    }

    /// Frobenius distance of R^T R from identity; health check for drift.
    double orthonormality_error() const {
        return (rotation.transpose() * rotation - Mat3::Identity()).norm();
    }

    /// Projects the rotation block back onto SO(3).
    void reorthonormalize() {
        Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 R = svd.matrixU() * svd.matrixV().transpose();
        if (R.determinant() < 0) {
            Mat3 flip = Mat3::Identity();
            flip(2, 2) = -1;
            R = svd.matrixU() * flip * svd.matrixV().transpose();
        }
        rotation = R;
    }
};

/// Tangent increment applied on the left: delta = (w, v) maps pose T to
/// (exp(w), v) * T. Rotation uses the exponential map, translation is added
/// directly, so pose_log below is its exact inverse.
inline Pose pose_retract(const Pose& pose, const Vec6& delta) {
    const Vec3 w = delta.head<3>();
    const Vec3 v = delta.tail<3>();
    const Mat3 R = so3_exp(w);
    return {R * pose.rotation, R * pose.translation + v};
}

/// Decoupled log map matching pose_retract: log(T) = (so3_log(R), t).
inline Vec6 pose_log(const Pose& pose) {
    Vec6 out;
    out.head<3>() = so3_log(pose.rotation);
    out.tail<3>() = pose.translation;
    return out;
}

/// Perspective projection of a camera-frame point to pixel coordinates.
inline Vec2 project(const Vec3& point, const Intrinsics& k) {
    if (!(point.z() > 0))
        throw ContractViolation("project: point behind camera (z <= 0)");
    return {k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy};
}

/// Non-throwing projection; empty when the point is behind the camera.
inline std::optional<Vec2> try_project(const Vec3& point, const Intrinsics& k) {
    if (!(point.z() > 1e-12)) return std::nullopt;
    return Vec2{k.fx * point.x() / point.z() + k.cx, k.fy * point.y() / point.z() + k.cy};
}

/// Lifts a pixel at the given z-depth into the camera frame.
inline Vec3 backproject(const Vec2& pixel, double depth, const Intrinsics& k) {
    if (!(depth > 0)) throw ContractViolation("backproject: depth must be positive");
    return {(pixel.x() - k.cx) * depth / k.fx, (pixel.y() - k.cy) * depth / k.fy, depth};
}

/// Unit direction through a pixel in the camera frame (z component < 1 off axis).
inline Vec3 pixel_direction(const Vec2& pixel, const Intrinsics& k) {
    Vec3 d((pixel.x() - k.cx) / k.fx, (pixel.y() - k.cy) / k.fy, 1.0);
    return d.normalized();
}

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3::UnitZ();  // unit norm
    double t_near = 0;
    double t_far = 0;
};

/// Slab intersection of a ray with an axis-aligned box; empty if it misses.
inline std::optional<std::pair<double, double>> intersect_aabb(const Vec3& origin,
                                                               const Vec3& dir,
                                                               const Aabb& box) {
    double t0 = -1e300, t1 = 1e300;
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dir[a]) < 1e-15) {
            if (origin[a] < box.lo[a] || origin[a] > box.hi[a]) return std::nullopt;
            continue;
        }
        double ta = (box.lo[a] - origin[a]) / dir[a];
        double tb = (box.hi[a] - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) return std::nullopt;
    return std::make_pair(t0, t1);
}

/// World-space ray through a pixel, clipped against the scene box and the
/// configured near/far planes. Empty when the ray misses the scene bounds.
inline std::optional<Ray> ray_for_pixel(const Pose& pose, const Intrinsics& k,
                                        const Vec2& pixel, const Aabb& scene_bounds,
                                        double t_near_plane, double t_far_plane) {
    Ray r;
    r.origin = pose.translation;
    r.direction = pose.rotate(pixel_direction(pixel, k));
    auto hit = intersect_aabb(r.origin, r.direction, scene_bounds);
    if (!hit) return std::nullopt;
    r.t_near = std::max(hit->first, t_near_plane);
    r.t_far = std::min(hit->second, t_far_plane);
    if (!(r.t_near < r.t_far)) return std::nullopt;
    return r;
}

/// z-depth of a ray sample: depth maps store z, rendering integrates ray length.
inline double ray_t_to_z(double t, const Vec3& dir_cam) { return t * dir_cam.z(); }
inline double z_to_ray_t(double z, const Vec3& dir_cam) { return z / dir_cam.z(); }

}  // namespace neslam
