#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace finv {

using Vec3 = std::array<double, 3>;
using Mat4 = std::array<double, 16>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline Vec3 normalized(const Vec3& a) {
    const double n = norm(a);
    if (n == 0.0) throw std::invalid_argument("normalized: zero vector");
    return (1.0 / n) * a;
}

inline Mat4 mat4_identity() {
    return {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
}

inline Mat4 mat4_mul(const Mat4& a, const Mat4& b) {
    Mat4 c{};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            double s = 0;
            for (int k = 0; k < 4; ++k) s += a[i * 4 + k] * b[k * 4 + j];
            c[i * 4 + j] = s;
        }
    return c;
}

/// Pinhole camera. World-to-camera rigid transform; camera frame is x right,
/// y down, z forward (points with z > 0 are in front).
struct Camera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Mat4 world_to_camera = mat4_identity();
    int width = 0, height = 0;

    Vec3 to_camera(const Vec3& p) const {
        const Mat4& m = world_to_camera;
        return {m[0] * p[0] + m[1] * p[1] + m[2] * p[2] + m[3],
                m[4] * p[0] + m[5] * p[1] + m[6] * p[2] + m[7],
                m[8] * p[0] + m[9] * p[1] + m[10] * p[2] + m[11]};
    }

    /// Camera position in world coordinates (-R^T t).
    Vec3 position() const {
        const Mat4& m = world_to_camera;
        return {-(m[0] * m[3] + m[4] * m[7] + m[8] * m[11]),
                -(m[1] * m[3] + m[5] * m[7] + m[9] * m[11]),
                -(m[2] * m[3] + m[6] * m[7] + m[10] * m[11])};
    }

    /// World-space direction of the ray through pixel center (u, v).
    Vec3 ray_direction(double u, double v) const {
        const Mat4& m = world_to_camera;
        const Vec3 d_cam = {(u - cx) / fx, (v - cy) / fy, 1.0};
        // rows of R are the camera axes in world coordinates
        return normalized({m[0] * d_cam[0] + m[4] * d_cam[1] + m[8] * d_cam[2],
                           m[1] * d_cam[0] + m[5] * d_cam[1] + m[9] * d_cam[2],
                           m[2] * d_cam[0] + m[6] * d_cam[1] + m[10] * d_cam[2]});
    }

    /// Max-norm deviation of R^T R from identity; rotation validity check.
    double rotation_error() const {
        const Mat4& m = world_to_camera;
        double worst = 0.0;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += m[k * 4 + i] * m[k * 4 + j];
                worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
            }
        return worst;
    }

    double rotation_determinant() const {
        const Mat4& m = world_to_camera;
        return m[0] * (m[5] * m[10] - m[6] * m[9]) - m[1] * (m[4] * m[10] - m[6] * m[8]) +
               m[2] * (m[4] * m[9] - m[5] * m[8]);
    }

    bool valid() const { return fx > 0 && fy > 0 && rotation_error() < 1e-9 && rotation_determinant() > 0; }
};

struct Projection {
    double u = 0, v = 0, depth = 0;
    bool behind = false;  // depth <= 0: projection undefined
};

/// Pinhole projection of a world point.
inline Projection project(const Vec3& point, const Camera& cam) {
    const Vec3 p = cam.to_camera(point);
    Projection out;
    out.depth = p[2];
    if (p[2] <= 0.0) {
        out.behind = true;
        return out;
    }
    out.u = cam.fx * p[0] / p[2] + cam.cx;
    out.v = cam.fy * p[1] / p[2] + cam.cy;
    return out;
}

/// World point on the pixel ray at the given camera depth.
inline Vec3 unproject(double u, double v, double depth, const Camera& cam) {
    const Vec3 origin = cam.position();
    const Mat4& m = cam.world_to_camera;
    const Vec3 d_cam = {(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth};
    return {origin[0] + m[0] * d_cam[0] + m[4] * d_cam[1] + m[8] * d_cam[2],
            origin[1] + m[1] * d_cam[0] + m[5] * d_cam[1] + m[9] * d_cam[2],
            origin[2] + m[2] * d_cam[0] + m[6] * d_cam[1] + m[10] * d_cam[2]};
}

/// Camera at `eye` looking at `target` (world +z up by default), with the
/// image y axis pointing down.
inline Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy, int width,
                      int height) {
    const Vec3 forward = normalized(target - eye);
    Vec3 right = cross(forward, up);
    if (norm(right) < 1e-12) right = cross(forward, Vec3{0.0, 1.0, 0.0});
    right = normalized(right);
    const Vec3 down = cross(forward, right);  // completes the x-right, y-down, z-forward frame
    Camera cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = width / 2.0;
    cam.cy = height / 2.0;
    cam.width = width;
    cam.height = height;
    Mat4& m = cam.world_to_camera;
    m = mat4_identity();
    const Vec3 rows[3] = {right, down, forward};
    for (int i = 0; i < 3; ++i) {
        m[i * 4 + 0] = rows[i][0];
        m[i * 4 + 1] = rows[i][1];
        m[i * 4 + 2] = rows[i][2];
        m[i * 4 + 3] = -dot(rows[i], eye);
    }
    return cam;
}

/// Camera on a circle of the given radius/elevation looking at the origin.
inline Camera orbit_camera(double radius, double elevation_deg, double azimuth_deg, double fx, int width,
                           int height) {
    const double el = elevation_deg * M_PI / 180.0;
    const double az = azimuth_deg * M_PI / 180.0;
    const Vec3 eye = {radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
                      radius * std::sin(el)};
    return look_at(eye, {0, 0, 0}, {0, 0, 1}, fx, fx, width, height);
}

}  // namespace finv
