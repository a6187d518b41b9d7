#include "voxalign/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "voxalign/errors.hpp"
#include "voxalign/parallel.hpp"

namespace voxalign::synth {

using geom::Vec3;

void SynthConfig::validate() const {
    if (!(t_range_mm > 0)) throw BadConfig("SynthConfig: t_range_mm must be positive");
    if (!(noise_sigma >= 0)) throw BadConfig("SynthConfig: noise_sigma must be non-negative");
    if (!(scale_min > 0) || !(scale_max >= scale_min))
        throw BadConfig("SynthConfig: intensity scale range must be positive");
    if (!(angle_max >= angle_min)) throw BadConfig("SynthConfig: empty angle range");
}

Vec3 sample_axis_uniform(Rng& rng) {
    for (;;) {
        const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
        const double n = geom::norm(v);
        if (n > 1e-6) return (1.0 / n) * v;
    }
}

std::pair<geom::TransformParams, geom::RigidTransform> sample_rigid(Rng& rng, const SynthConfig& cfg) {
    const Vec3 axis = sample_axis_uniform(rng);
    const double angle = rng.uniform(cfg.angle_min, cfg.angle_max);
    geom::RigidTransform T;
    T.R = geom::axis_angle(axis, angle);
    for (int i = 0; i < 3; ++i) T.t[i] = rng.uniform(-cfg.t_range_mm, cfg.t_range_mm);
    return {geom::params_from_transform(T), T};
}

vol::Volume3 augment(const vol::Volume3& v, Rng& rng, const SynthConfig& cfg) {
    const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
    vol::Volume3 out = v;
    for (float& x : out.data) {
        const double n = rng.normal() * cfg.noise_sigma;
        x = static_cast<float>(std::clamp(s * x + n, 0.0, 1.0));
    }
    return out;
}

Pair make_pair(const vol::Volume3& v, Rng& rng, const SynthConfig& cfg) {
    auto [theta, T] = sample_rigid(rng, cfg);
    vol::Volume3 moving = vol::resample_rigid(v, T, 0.0f);
    Pair p;
    p.fixed = augment(v, rng, cfg);
    p.moving = augment(moving, rng, cfg);
    p.theta = theta;
    return p;
}

namespace {

// Smooth 1 -> 0 ramp over [0, width] of signed distance outside a surface.
double edge(double signed_dist, double width) {
    if (signed_dist <= 0) return 1.0;
    if (signed_dist >= width) return 0.0;
    const double t = signed_dist / width;
    return 1.0 - t * t * (3.0 - 2.0 * t);
}

double point_segment_dist(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = geom::dot(ab, ab);
    double t = len2 > 0 ? geom::dot(p - a, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec3 q = a + t * ab;
    return geom::norm(p - q);
}

struct Ellipsoid {
    Vec3 center;
    Vec3 radii;
    // Approximate signed distance (exact on axes, good enough for rendering).
    double signed_dist(const Vec3& p) const {
        const Vec3 q{(p[0] - center[0]) / radii[0], (p[1] - center[1]) / radii[1],
                     (p[2] - center[2]) / radii[2]};
        const double r = geom::norm(q);
        const double rmin = std::min({radii[0], radii[1], radii[2]});
        return (r - 1.0) * rmin;
    }
};

}  // namespace

vol::Volume3 gen_phantom(Rng& rng, std::array<int, 3> shape, Vec3 spacing_mm) {
    const int d = shape[0], h = shape[1], w = shape[2];
    if (d < 16 || h < 16 || w < 16) throw BadConfig("gen_phantom: shape must be at least 16^3");

    // All geometry lives in normalized coordinates q in [-1,1]^3 and inside
    // the ball |q| <= 0.8 so arbitrary rotations about the centre plus the
    // synthetic translations keep the object in frame.
    const Vec3 axis = sample_axis_uniform(rng);
    const double tilt = rng.uniform(-geom::kPi, geom::kPi);
    const geom::Mat3 Q = geom::axis_angle(axis, tilt);

    const double bend = rng.uniform(0.25, 0.45);
    const double r_shaft = rng.uniform(0.17, 0.21);
    const double s_lo = -0.60, s_hi = 0.26;

    // Curved shaft centerline, rotated into the random orientation.
    constexpr int kSegments = 48;
    std::array<Vec3, kSegments + 1> line;
    for (int i = 0; i <= kSegments; ++i) {
        const double s = s_lo + (s_hi - s_lo) * i / kSegments;
        const Vec3 local{bend * (s * s - s_lo * s_hi), 0.0, s};
        line[i] = Q * local;
    }

    Ellipsoid bulb;
    bulb.center = Q * Vec3{bend * (s_hi * s_hi - s_lo * s_hi), 0.04, s_hi + 0.10};
    bulb.radii = {rng.uniform(0.30, 0.38), rng.uniform(0.26, 0.32), rng.uniform(0.24, 0.30)};

    // Detached fragments: high-intensity blobs clear of the bone surface.
    const int n_frag = 1 + static_cast<int>(rng.uniform() * 3.0) % 3;
    std::vector<Ellipsoid> frags;
    for (int f = 0; f < n_frag; ++f) {
        for (int attempt = 0; attempt < 64; ++attempt) {
            const Vec3 dir = sample_axis_uniform(rng);
            const Vec3 center = rng.uniform(0.50, 0.72) * dir;
            const double r = rng.uniform(0.045, 0.075);
            double clearance = bulb.signed_dist(center);
            for (const auto& seg : line) clearance = std::min(clearance, geom::norm(center - seg) - r_shaft);
            for (const auto& other : frags) clearance = std::min(clearance, other.signed_dist(center));
            if (clearance > r + 0.06 && geom::norm(center) + r < 0.78) {
                frags.push_back({center, {r, r * rng.uniform(0.7, 1.0), r * rng.uniform(0.7, 1.0)}});
                break;
            }
        }
    }

    vol::Volume3 out(d, h, w, spacing_mm);
    const double inv_half_d = 2.0 / (d - 1), inv_half_h = 2.0 / (h - 1), inv_half_w = 2.0 / (w - 1);
    // ~1.3 voxels of smooth falloff at the outer surfaces
    const double edge_w = 1.3 * std::max({inv_half_d, inv_half_h, inv_half_w});

    const double wall = 0.35 * r_shaft;

    parallel_for(d, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            for (int j = 0; j < h; ++j)
                for (int k = 0; k < w; ++k) {
                    const Vec3 q{i * inv_half_d - 1.0, j * inv_half_h - 1.0, k * inv_half_w - 1.0};

                    double rho = 1e9;
                    for (int s = 0; s < kSegments; ++s)
                        rho = std::min(rho, point_segment_dist(q, line[s], line[s + 1]));

                    // Cortical wall at full intensity, medullary interior dimmer.
                    double val = 0.0;
                    const double shaft_out = rho - r_shaft;
                    if (shaft_out < edge_w) {
                        const double core = rho > r_shaft - wall ? 1.0 : 0.65;
                        val = std::max(val, core * edge(shaft_out, edge_w));
                    }

                    const double bulb_out = bulb.signed_dist(q);
                    if (bulb_out < edge_w) {
                        const double core = bulb_out > -wall ? 1.0 : 0.7;
                        val = std::max(val, core * edge(bulb_out, edge_w));
                    }

                    for (const auto& fr : frags) {
                        const double fo = fr.signed_dist(q);
                        if (fo < edge_w) val = std::max(val, edge(fo, edge_w));
                    }

                    out.at(static_cast<int>(i), j, k) = static_cast<float>(std::clamp(val, 0.0, 1.0));
                }
        }
    });
    return out;
}

vol::Volume3 apply_contrast(const vol::Volume3& v) {
    vol::Volume3 out = v;
    for (float& x : out.data)
        if (x > 0.0f) x = std::min(1.0f, std::pow(x, 0.85f));
    return out;
}

void write_pair_manifest(const std::vector<PairRecord>& records, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("write_pair_manifest: cannot open " + tmp);
        for (const auto& r : records) {
            nlohmann::json j;
            j["fixed_path"] = r.fixed_path;
            j["moving_path"] = r.moving_path;
            j["theta_r"] = r.theta.theta_r;
            j["theta_t"] = r.theta.theta_t;
            j["seed"] = r.seed;
            f << j.dump() << '\n';
        }
        if (!f) throw IoError("write_pair_manifest: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<PairRecord> read_pair_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_pair_manifest: cannot open " + path);
    std::vector<PairRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        PairRecord r;
        r.fixed_path = j.at("fixed_path").get<std::string>();
        r.moving_path = j.at("moving_path").get<std::string>();
        const auto tr = j.at("theta_r");
        const auto tt = j.at("theta_t");
        for (int i = 0; i < 9; ++i) r.theta.theta_r[i] = tr.at(i).get<double>();
        for (int i = 0; i < 3; ++i) r.theta.theta_t[i] = tt.at(i).get<double>();
        r.seed = j.at("seed").get<uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace voxalign::synth
