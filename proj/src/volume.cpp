#include "voxalign/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "voxalign/parallel.hpp"

namespace voxalign::vol {

int64_t BinaryMask3::count() const {
    int64_t n = 0;
    for (uint8_t v : data) n += v;
    return n;
}

Volume3 threshold_normalize(const Volume3& v, float x_th, float x_max) {
    if (!(x_max > x_th)) throw BadRange("threshold_normalize: x_max must exceed x_th");
    Volume3 out = v;
    const float inv = 1.0f / (x_max - x_th);
    for (float& x : out.data) {
        const float y = (x - x_th) * inv;
        x = std::clamp(y, 0.0f, 1.0f);
    }
    return out;
}

Volume3 resample_rigid(const Volume3& v, const geom::RigidTransform& T, std::array<int, 3> out_shape,
                       float fill) {
    Volume3 out(out_shape[0], out_shape[1], out_shape[2], v.spacing, v.origin);

    // Source continuous index as an affine map of the output index:
    //   x = origin + i * spacing            (output voxel centre)
    //   y = R^T (x - c - t) + c             (inverse of the centred map)
    //   s = (y - origin) / spacing
    // folds to s = A i + o. A's diagonal is built from spacing ratios so the
    // identity transform maps indices exactly, and o cancels exactly when
    // R = I and t = 0.
    const geom::Mat3 Rt = T.R.transposed();
    const geom::Vec3 c = v.physical_center();
    const geom::Vec3 u = v.origin - c - T.t;

    double A[3][3], o[3];
    for (int r = 0; r < 3; ++r) {
        for (int j = 0; j < 3; ++j) A[r][j] = Rt(r, j) * (v.spacing[j] / v.spacing[r]);
        o[r] = (dot(Rt.row(r), u) + (c[r] - v.origin[r])) / v.spacing[r];
    }

    const int sd = v.d, sh = v.h, sw = v.w;
    const float* src = v.data.data();

    parallel_for(out.d, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            for (int j = 0; j < out.h; ++j) {
                float* row = &out.data[out.index(static_cast<int>(i), j, 0)];
                for (int k = 0; k < out.w; ++k) {
                    const double di = static_cast<double>(i), dj = j, dk = k;
                    const double s0 = A[0][0] * di + A[0][1] * dj + A[0][2] * dk + o[0];
                    const double s1 = A[1][0] * di + A[1][1] * dj + A[1][2] * dk + o[1];
                    const double s2 = A[2][0] * di + A[2][1] * dj + A[2][2] * dk + o[2];

                    const double f0 = std::floor(s0), f1 = std::floor(s1), f2 = std::floor(s2);
                    const int i0i = static_cast<int>(f0), j0i = static_cast<int>(f1),
                              k0i = static_cast<int>(f2);
                    const double w0 = s0 - f0, w1 = s1 - f1, w2 = s2 - f2;

                    double acc = 0.0;
                    for (int ci = 0; ci < 2; ++ci) {
                        const int si = i0i + ci;
                        const double wi = ci ? w0 : 1.0 - w0;
                        for (int cj = 0; cj < 2; ++cj) {
                            const int sj = j0i + cj;
                            const double wj = cj ? w1 : 1.0 - w1;
                            for (int ck = 0; ck < 2; ++ck) {
                                const int sk = k0i + ck;
                                const double wk = ck ? w2 : 1.0 - w2;
                                const bool inside = si >= 0 && si < sd && sj >= 0 && sj < sh &&
                                                    sk >= 0 && sk < sw;
                                const double val =
                                    inside ? src[(static_cast<size_t>(si) * sh + sj) * sw + sk] : fill;
                                acc += wi * wj * wk * val;
                            }
                        }
                    }
                    row[k] = static_cast<float>(acc);
                }
            }
        }
    });
    return out;
}

Volume3 resample_rigid(const Volume3& v, const geom::RigidTransform& T, float fill) {
    return resample_rigid(v, T, {v.d, v.h, v.w}, fill);
}

Volume3 downsample(const Volume3& v, int factor) {
    if (factor < 1 || v.d % factor || v.h % factor || v.w % factor)
        throw BadFactor("downsample: factor must be >= 1 and divide every dimension");
    if (factor == 1) return v;

    Volume3 out(v.d / factor, v.h / factor, v.w / factor,
                {v.spacing[0] * factor, v.spacing[1] * factor, v.spacing[2] * factor},
                {v.origin[0] + 0.5 * (factor - 1) * v.spacing[0],
                 v.origin[1] + 0.5 * (factor - 1) * v.spacing[1],
                 v.origin[2] + 0.5 * (factor - 1) * v.spacing[2]});
    const double inv = 1.0 / (static_cast<double>(factor) * factor * factor);

    parallel_for(out.d, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i)
            for (int j = 0; j < out.h; ++j)
                for (int k = 0; k < out.w; ++k) {
                    double acc = 0.0;
                    for (int a = 0; a < factor; ++a)
                        for (int b = 0; b < factor; ++b)
                            for (int c = 0; c < factor; ++c)
                                acc += v.at(static_cast<int>(i) * factor + a, j * factor + b,
                                            k * factor + c);
                    out.at(static_cast<int>(i), j, k) = static_cast<float>(acc * inv);
                }
    });
    return out;
}

BinaryMask3 binarize(const Volume3& v, float tau) {
    BinaryMask3 m;
    m.d = v.d;
    m.h = v.h;
    m.w = v.w;
    m.spacing = v.spacing;
    m.data.resize(v.data.size());
    for (size_t i = 0; i < v.data.size(); ++i) m.data[i] = v.data[i] >= tau ? 1 : 0;
    return m;
}

double dice(const BinaryMask3& a, const BinaryMask3& b) {
    if (a.d != b.d || a.h != b.h || a.w != b.w)
        throw ShapeMismatch("dice: mask shapes differ");
    int64_t na = 0, nb = 0, ni = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        na += a.data[i];
        nb += b.data[i];
        ni += a.data[i] & b.data[i];
    }
    if (na + nb == 0) return 1.0;  // vacuously identical
    return 2.0 * static_cast<double>(ni) / static_cast<double>(na + nb);
}

namespace {

constexpr char kMagic[4] = {'V', 'O', 'L', '3'};
constexpr uint32_t kVersion = 1;
constexpr size_t kHeaderSize = 64;

void put_u32(char* p, uint32_t v) { std::memcpy(p, &v, 4); }
void put_f32(char* p, float v) { std::memcpy(p, &v, 4); }
uint32_t get_u32(const char* p) {
    uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}
float get_f32(const char* p) {
    float v;
    std::memcpy(&v, p, 4);
    return v;
}

}  // namespace

void write_vol3(const Volume3& v, const std::string& path) {
    char header[kHeaderSize] = {};
    std::memcpy(header, kMagic, 4);
    put_u32(header + 4, kVersion);
    put_u32(header + 8, static_cast<uint32_t>(v.d));
    put_u32(header + 12, static_cast<uint32_t>(v.h));
    put_u32(header + 16, static_cast<uint32_t>(v.w));
    for (int i = 0; i < 3; ++i) put_f32(header + 20 + 4 * i, static_cast<float>(v.spacing[i]));
    for (int i = 0; i < 3; ++i) put_f32(header + 32 + 4 * i, static_cast<float>(v.origin[i]));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("write_vol3: cannot open " + tmp);
        f.write(header, kHeaderSize);
        f.write(reinterpret_cast<const char*>(v.data.data()),
                static_cast<std::streamsize>(v.data.size() * sizeof(float)));
        if (!f) throw IoError("write_vol3: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Volume3 read_vol3(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_vol3: cannot open " + path);
    char header[kHeaderSize];
    f.read(header, kHeaderSize);
    if (f.gcount() != static_cast<std::streamsize>(kHeaderSize))
        throw IoError("read_vol3: truncated header in " + path);
    if (std::memcmp(header, kMagic, 4) != 0) throw IoError("read_vol3: bad magic in " + path);
    if (get_u32(header + 4) != kVersion) throw IoError("read_vol3: unsupported version in " + path);

    Volume3 v;
    v.d = static_cast<int>(get_u32(header + 8));
    v.h = static_cast<int>(get_u32(header + 12));
    v.w = static_cast<int>(get_u32(header + 16));
    if (v.d < 1 || v.h < 1 || v.w < 1) throw IoError("read_vol3: bad dimensions in " + path);
    for (int i = 0; i < 3; ++i) v.spacing[i] = get_f32(header + 20 + 4 * i);
    for (int i = 0; i < 3; ++i) v.origin[i] = get_f32(header + 32 + 4 * i);
    if (!(v.spacing[0] > 0 && v.spacing[1] > 0 && v.spacing[2] > 0))
        throw IoError("read_vol3: non-positive spacing in " + path);

    v.data.resize(static_cast<size_t>(v.numel()));
    f.read(reinterpret_cast<char*>(v.data.data()),
           static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    if (f.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float)))
        throw IoError("read_vol3: truncated voxel data in " + path);
    return v;
}

}  // namespace voxalign::vol
