#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "voxalign/geom.hpp"
#include "voxalign/rng.hpp"
#include "voxalign/volume.hpp"

namespace voxalign::synth {

struct SynthConfig {
    double t_range_mm = 0.64;  // translation components ~ U(-t_range, t_range)
    double angle_min = -geom::kPi;
    double angle_max = geom::kPi;
    double scale_min = 0.95;
    double scale_max = 1.05;
    double noise_sigma = 0.001;
    uint64_t seed = 0;

    void validate() const;  // throws BadConfig
};

// Unit vector uniform on the sphere (normalized Gaussian triple; near-zero
// draws are rejected and resampled).
geom::Vec3 sample_axis_uniform(Rng& rng);

// Random rigid transform: axis uniform on S^2, angle ~ U(angle_min, angle_max),
// translation components ~ U(-t_range, t_range). Draw order is axis, angle,
// then translation.
std::pair<geom::TransformParams, geom::RigidTransform> sample_rigid(Rng& rng, const SynthConfig& cfg);

// v' = clamp(s * v + n, 0, 1), s ~ U(scale_min, scale_max), n ~ N(0, sigma)
// per voxel. Expects a normalized volume.
vol::Volume3 augment(const vol::Volume3& v, Rng& rng, const SynthConfig& cfg);

struct Pair {
    vol::Volume3 fixed;
    vol::Volume3 moving;
    geom::TransformParams theta;
};

// fixed = augment(v); moving = augment(resample_rigid(v, T)); theta encodes T.
Pair make_pair(const vol::Volume3& v, Rng& rng, const SynthConfig& cfg);

// Bone-like phantom: a curved hollow shaft with a bulbous end plus 1-3 small
// detached high-intensity fragments, randomly oriented, background zero.
// Values lie in [0, 1] and the geometry stays inside the rotation-safe ball
// around the volume centre.
vol::Volume3 gen_phantom(Rng& rng, std::array<int, 3> shape, geom::Vec3 spacing_mm = {0.08, 0.08, 0.08});

// Deterministic intensity remap standing in for contrast enhancement when a
// subject is scanned twice.
vol::Volume3 apply_contrast(const vol::Volume3& v);

// Dataset manifest: JSON lines, one record per synthesized pair.
struct PairRecord {
    std::string fixed_path;
    std::string moving_path;
    geom::TransformParams theta;
    uint64_t seed = 0;
};

void write_pair_manifest(const std::vector<PairRecord>& records, const std::string& path);
std::vector<PairRecord> read_pair_manifest(const std::string& path);

}  // namespace voxalign::synth
