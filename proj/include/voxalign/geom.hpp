#pragma once

#include <array>
#include <cmath>
#include <span>

#include "voxalign/errors.hpp"

namespace voxalign::geom {

struct Vec3 {
    double v[3]{0, 0, 0};
    double& operator[](int i) { return v[i]; }
    double operator[](int i) const { return v[i]; }
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& v) { return {s * v[0], s * v[1], s * v[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

// Row-major 3x3 matrix; defaults to identity.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    double& operator()(int r, int c) { return m[3 * r + c]; }
    double operator()(int r, int c) const { return m[3 * r + c]; }

    static Mat3 identity() { return Mat3{}; }

    Mat3 transposed() const {
        Mat3 t;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) t(r, c) = (*this)(c, r);
        return t;
    }

    Vec3 col(int j) const { return {m[j], m[3 + j], m[6 + j]}; }
    void set_col(int j, const Vec3& v) {
        m[j] = v[0];
        m[3 + j] = v[1];
        m[6 + j] = v[2];
    }

    Vec3 row(int i) const { return {m[3 * i], m[3 * i + 1], m[3 * i + 2]}; }

    double trace() const { return m[0] + m[4] + m[8]; }
};

Mat3 operator*(const Mat3& a, const Mat3& b);
Vec3 operator*(const Mat3& a, const Vec3& v);

// Rigid map x -> R x + t with R in SO(3) and t in millimetres.
struct RigidTransform {
    Mat3 R;
    Vec3 t{0, 0, 0};

    static RigidTransform identity() { return RigidTransform{}; }

    // Orthonormality and determinant within tol.
    bool valid(double tol = 1e-6) const;
};

// The 12-value regression target: rotation matrix columns stacked
// (theta_r[0..2] = first column, [3..5] = second, [6..8] = third),
// followed by the translation in millimetres.
struct TransformParams {
    std::array<double, 9> theta_r{1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::array<double, 3> theta_t{0, 0, 0};

    std::span<const double, 6> first6() const { return std::span<const double, 6>(theta_r.data(), 6); }
};

// Maps the continuous 6D rotation representation onto SO(3):
//   r1 = N(v[0:3]),  r2 = N(v[3:6] - (r1 . v[3:6]) r1),  r3 = r1 x r2,
// returned as the columns of R. Throws DegenerateInput when a normalization
// denominator falls below 1e-9.
Mat3 orthogonalize6d(std::span<const double, 6> v);

TransformParams params_from_transform(const RigidTransform& T);

// Decodes predicted parameters: R = orthogonalize6d(theta_r[0:6]), t = theta_t.
RigidTransform transform_from_params(const TransformParams& p);

// (a . b)(x) = a(b(x))
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);

// R' = R^T, t' = -R^T t
RigidTransform invert(const RigidTransform& T);

// Rodrigues rotation about a unit axis.
Mat3 axis_angle(const Vec3& unit_axis, double angle_rad);

// Geodesic angle in [0, pi] between the true rotation and the decoded
// prediction, i.e. the angle of R^T O(r_hat6). Evaluated through the chord
// length 2 asin(||R - O(r_hat6)||_F / (2 sqrt 2)), which equals
// arccos((tr(R^T O) - 1) / 2) on SO(3) but is well conditioned near zero and
// returns exactly 0 for bit-identical rotations; the asin argument is clamped
// to [0, 1] against floating-point overshoot.
double rotation_error(const Mat3& r_true, std::span<const double, 6> r_hat6);

// || t - t_hat ||_2 in millimetres.
double translation_error(const Vec3& t, const Vec3& t_hat);

constexpr double kPi = 3.14159265358979323846;

}  // namespace voxalign::geom
