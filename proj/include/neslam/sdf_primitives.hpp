#pragma once

#include "neslam/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace neslam {

/// Analytic signed distance fields. Sign convention across the system:
/// positive inside occupied matter, negative in observed free space, zero on
/// surfaces. The VolSDF-style density transform saturates for s > 0, so this
/// orientation makes matter opaque and free space transparent.
using SdfFn = std::function<double(const Vec3&)>;

/// Solid sphere: positive inside.
inline double occ_sphere(const Vec3& p, const Vec3& center, double radius) {
    return radius - (p - center).norm();
}

/// Solid axis-aligned box: positive inside. Exact distance on both sides.
inline double occ_box(const Vec3& p, const Vec3& center, const Vec3& half_extent) {
    const Vec3 q = (p - center).cwiseAbs() - half_extent;
    const double outside = q.cwiseMax(0.0).norm();
    const double inside = std::min(0.0, q.maxCoeff());
    return -(outside + inside);
}

/// Room shell: matter everywhere outside the interior box (walls of infinite
/// thickness). Positive in the walls, negative in the room.
inline double occ_room_shell(const Vec3& p, const Vec3& center, const Vec3& half_extent) {
    return -occ_box(p, center, half_extent);
}

/// Union of solids.
inline double occ_union(double a, double b) { return std::max(a, b); }

/// Free-space distance (how far one can march before hitting matter).
inline double free_distance(const SdfFn& occ, const Vec3& p) { return -occ(p); }

/// Central-difference surface normal of an occupancy-signed field, oriented
/// out of the matter.
inline Vec3 sdf_normal(const SdfFn& occ, const Vec3& p, double h = 1e-5) {
    Vec3 n;
    for (int a = 0; a < 3; ++a) {
        Vec3 pp = p, pm = p;
        pp[a] += h;
        pm[a] -= h;
        n[a] = occ(pp) - occ(pm);
    }
    // occupancy grows into the matter, so the outward normal is -grad.
    const double len = n.norm();
    return len > 1e-12 ? Vec3(-n / len) : Vec3(0, 0, 1);
}

/// Sphere tracing along a ray through free space. Returns the hit distance or
/// a negative value when nothing is hit before t_max.
inline double sphere_trace(const SdfFn& occ, const Vec3& origin, const Vec3& dir,
                           double t_min, double t_max, double tol = 1e-6) {
    double t = t_min;
    for (int i = 0; i < 256 && t < t_max; ++i) {
        const double d = free_distance(occ, origin + t * dir);
        if (d < tol) return t;
        t += std::max(d, tol);
    }
    return -1.0;
}

}  // namespace neslam
