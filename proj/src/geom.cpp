#include "voxalign/geom.hpp"

#include <algorithm>

namespace voxalign::geom {

Mat3 operator*(const Mat3& a, const Mat3& b) {
    Mat3 out;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            out(r, c) = a(r, 0) * b(0, c) + a(r, 1) * b(1, c) + a(r, 2) * b(2, c);
    return out;
}

Vec3 operator*(const Mat3& a, const Vec3& v) {
    return {a(0, 0) * v[0] + a(0, 1) * v[1] + a(0, 2) * v[2],
            a(1, 0) * v[0] + a(1, 1) * v[1] + a(1, 2) * v[2],
            a(2, 0) * v[0] + a(2, 1) * v[1] + a(2, 2) * v[2]};
}

bool RigidTransform::valid(double tol) const {
    const Mat3 g = R.transposed() * R;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
            const double want = r == c ? 1.0 : 0.0;
            if (std::abs(g(r, c) - want) > tol) return false;
        }
    const double det = R(0, 0) * (R(1, 1) * R(2, 2) - R(1, 2) * R(2, 1)) -
                       R(0, 1) * (R(1, 0) * R(2, 2) - R(1, 2) * R(2, 0)) +
                       R(0, 2) * (R(1, 0) * R(2, 1) - R(1, 1) * R(2, 0));
    return std::abs(det - 1.0) <= tol;
}

Mat3 orthogonalize6d(std::span<const double, 6> v) {
    const Vec3 a{v[0], v[1], v[2]};
    const double na = norm(a);
    if (na < 1e-9) throw DegenerateInput("orthogonalize6d: first 3-vector has near-zero norm");
    const Vec3 r1 = (1.0 / na) * a;

    const Vec3 b{v[3], v[4], v[5]};
    const Vec3 u = b - dot(r1, b) * r1;
    const double nu = norm(u);
    if (nu < 1e-9) throw DegenerateInput("orthogonalize6d: second 3-vector is parallel to the first");
    const Vec3 r2 = (1.0 / nu) * u;

    const Vec3 r3 = cross(r1, r2);

    Mat3 R;
    R.set_col(0, r1);
    R.set_col(1, r2);
    R.set_col(2, r3);
    return R;
}

TransformParams params_from_transform(const RigidTransform& T) {
    TransformParams p;
    for (int j = 0; j < 3; ++j)
        for (int i = 0; i < 3; ++i) p.theta_r[3 * j + i] = T.R(i, j);
    p.theta_t = {T.t[0], T.t[1], T.t[2]};
    return p;
}

RigidTransform transform_from_params(const TransformParams& p) {
    RigidTransform T;
    T.R = orthogonalize6d(p.first6());
    T.t = {p.theta_t[0], p.theta_t[1], p.theta_t[2]};
    return T;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
    RigidTransform out;
    out.R = a.R * b.R;
    out.t = a.R * b.t + a.t;
    return out;
}

RigidTransform invert(const RigidTransform& T) {
    RigidTransform out;
    out.R = T.R.transposed();
    out.t = -1.0 * (out.R * T.t);
    return out;
}

Mat3 axis_angle(const Vec3& unit_axis, double angle_rad) {
    const double c = std::cos(angle_rad);
    const double s = std::sin(angle_rad);
    const double k = 1.0 - c;
    const double x = unit_axis[0], y = unit_axis[1], z = unit_axis[2];
    Mat3 R;
    R(0, 0) = c + x * x * k;
    R(0, 1) = x * y * k - z * s;
    R(0, 2) = x * z * k + y * s;
    R(1, 0) = y * x * k + z * s;
    R(1, 1) = c + y * y * k;
    R(1, 2) = y * z * k - x * s;
    R(2, 0) = z * x * k - y * s;
    R(2, 1) = z * y * k + x * s;
    R(2, 2) = c + z * z * k;
    return R;
}

double rotation_error(const Mat3& r_true, std::span<const double, 6> r_hat6) {
    const Mat3 r_hat = orthogonalize6d(r_hat6);
    double sq = 0.0;
    for (int i = 0; i < 9; ++i) {
        const double d = r_true.m[i] - r_hat.m[i];
        sq += d * d;
    }
    const double chord = std::sqrt(sq) / (2.0 * std::sqrt(2.0));
    return 2.0 * std::asin(std::clamp(chord, 0.0, 1.0));
}

double translation_error(const Vec3& t, const Vec3& t_hat) { return norm(t - t_hat); }

}  // namespace voxalign::geom
