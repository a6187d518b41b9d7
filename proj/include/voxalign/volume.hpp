#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "voxalign/errors.hpp"
#include "voxalign/geom.hpp"

namespace voxalign::vol {

// Scalar grid with physical voxel spacing. Index order is (d, h, w) with d
// slowest; physical axis r corresponds to index axis r, and the centre of
// voxel (i, j, k) sits at origin + (i, j, k) * spacing.
struct Volume3 {
    std::vector<float> data;
    int d = 0, h = 0, w = 0;
    geom::Vec3 spacing{1, 1, 1};  // mm / voxel
    geom::Vec3 origin{0, 0, 0};   // mm

    Volume3() = default;
    Volume3(int d_, int h_, int w_, geom::Vec3 sp = {1, 1, 1}, geom::Vec3 org = {0, 0, 0})
        : data(static_cast<size_t>(d_) * h_ * w_, 0.f), d(d_), h(h_), w(w_), spacing(sp), origin(org) {}

    int64_t numel() const { return static_cast<int64_t>(d) * h * w; }
    size_t index(int i, int j, int k) const { return (static_cast<size_t>(i) * h + j) * w + k; }
    float& at(int i, int j, int k) { return data[index(i, j, k)]; }
    float at(int i, int j, int k) const { return data[index(i, j, k)]; }

    std::array<int, 3> shape() const { return {d, h, w}; }

    // Centre of the voxel-centre bounding box; rotations are taken about it.
    geom::Vec3 physical_center() const {
        return {origin[0] + 0.5 * (d - 1) * spacing[0],
                origin[1] + 0.5 * (h - 1) * spacing[1],
                origin[2] + 0.5 * (w - 1) * spacing[2]};
    }
};

struct BinaryMask3 {
    std::vector<uint8_t> data;
    int d = 0, h = 0, w = 0;
    geom::Vec3 spacing{1, 1, 1};

    int64_t numel() const { return static_cast<int64_t>(d) * h * w; }
    int64_t count() const;
};

// x -> ReLU(x - x_th) / (x_max - x_th), clamped into [0, 1].
// Throws BadRange unless x_max > x_th.
Volume3 threshold_normalize(const Volume3& v, float x_th, float x_max);

// Trilinear pull-back resampling: out(p) = v(M^-1(p)) where M applies T's
// rotation about the volume's physical centre, M(x) = R (x - c) + c + t.
// Sample points outside the source take `fill` (per missing corner).
Volume3 resample_rigid(const Volume3& v, const geom::RigidTransform& T, std::array<int, 3> out_shape,
                       float fill);
Volume3 resample_rigid(const Volume3& v, const geom::RigidTransform& T, float fill = 0.f);

// Box-filter averaging; factor must divide every dimension (BadFactor).
Volume3 downsample(const Volume3& v, int factor);

// mask = (value >= tau)
BinaryMask3 binarize(const Volume3& v, float tau);

// 2|A^B| / (|A|+|B|); 1 when both masks are empty. Throws ShapeMismatch.
double dice(const BinaryMask3& a, const BinaryMask3& b);

// Raw volume file: 64-byte header (magic "VOL3", version u32, d/h/w u32,
// spacing 3xf32, origin 3xf32, zero padding), then little-endian f32 voxels in
// C order with d slowest.
void write_vol3(const Volume3& v, const std::string& path);
Volume3 read_vol3(const std::string& path);

}  // namespace voxalign::vol
