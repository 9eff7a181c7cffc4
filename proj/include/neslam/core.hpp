#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace neslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

using MatXR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<MatXR>;
using MapConstMat = Eigen::Map<const MatXR>;

/// Base class for all recoverable errors raised by the library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Violated precondition or API misuse.
struct ContractViolation : Error {
    explicit ContractViolation(const std::string& msg) : Error(msg) {}
};

/// Input data cannot be read or parsed.
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

/// Too little data to compute a meaningful result (e.g. almost-empty depth map).
struct InsufficientSupport : Error {
    explicit InsufficientSupport(const std::string& msg) : Error(msg) {}
};

/// Dense row-major image buffer with `channels` interleaved values per pixel.
template <typename T>
struct Image {
    int width = 0;
    int height = 0;
    int channels = 1;
    std::vector<T> data;

    Image() = default;
    Image(int w, int h, int c, T fill = T{})
        : width(w), height(h), channels(c), data(static_cast<size_t>(w) * h * c, fill) {}

    T& at(int x, int y, int c = 0) {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    const T& at(int x, int y, int c = 0) const {
        return data[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
    bool empty() const { return data.empty(); }
    bool same_size(const Image& o) const {
        return width == o.width && height == o.height && channels == o.channels;
    }
};

using ImageF = Image<double>;

/// Luma conversion of an interleaved RGB image in [0,1].
inline ImageF to_grayscale(const ImageF& rgb) {
    if (rgb.channels == 1) return rgb;
    ImageF gray(rgb.width, rgb.height, 1);
    for (size_t i = 0; i < rgb.pixel_count(); ++i) {
        const double* p = &rgb.data[i * rgb.channels];
        gray.data[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    }
    return gray;
}

/// Axis-aligned box in world meters.
struct Aabb {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();

    bool contains(const Vec3& p, double margin = 0.0) const {
        return (p.array() >= lo.array() - margin).all() &&
               (p.array() <= hi.array() + margin).all();
    }
    Vec3 extent() const { return hi - lo; }
};

inline bool is_finite(double v) { return std::isfinite(v); }

template <typename It>
bool all_finite(It begin, It end) {
    for (It it = begin; it != end; ++it)
        if (!std::isfinite(*it)) return false;
    return true;
}

}  // namespace neslam
