#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "voxalign/geom.hpp"
#include "voxalign/volume.hpp"

namespace voxalign::eval {

struct SweepSpec {
    geom::Vec3 axis{0.5773502691896258, 0.5773502691896258, 0.5773502691896258};  // (1,1,1)/sqrt 3
    int n_steps = 11;
    geom::Vec3 fixed_translation_mm{0.4, 0.4, 0.4};       // rotation sweep
    double fixed_rotation_angle = geom::kPi / 2;           // translation sweep
    double angle_min = -geom::kPi, angle_max = geom::kPi;  // rotation sweep grid
    double translation_half_range_mm = 0.8660254037844386; // sqrt(3)/2
    double dsc_tau = 0.3;

    void validate() const;  // throws BadConfig
};

struct EvalRecord {
    int case_id = 0;
    double angle_rad = 0;
    geom::Vec3 t_mm{0, 0, 0};
    bool has_gt = false;
    double te_mm = 0;   // valid when has_gt
    double re_rad = 0;  // valid when has_gt
    double dsc = 0;
};

// Prediction source. A learned model ignores `gt`; the harness oracle returns
// it verbatim, which validates the evaluation pipeline independent of
// learning.
using Predictor = std::function<geom::TransformParams(
    const vol::Volume3& fixed, const vol::Volume3& moving,
    const std::optional<geom::TransformParams>& gt)>;

Predictor oracle_predictor();

// Predicts, fills TE/RE when ground truth is present, and always computes the
// Dice overlap between the binarized fixed volume and the moving volume warped
// by the inverse of the decoded prediction.
EvalRecord evaluate_pair(const Predictor& predict, const vol::Volume3& fixed,
                         const vol::Volume3& moving, const std::optional<geom::TransformParams>& gt,
                         double dsc_tau, int case_id = 0);

// n_steps angles uniform over [angle_min, angle_max] (endpoints exact) about
// spec.axis with the fixed translation; one synthetic case per (volume, angle).
std::vector<EvalRecord> rotation_sweep(const Predictor& predict,
                                       std::span<const vol::Volume3> volumes, const SweepSpec& spec);

// Fixed rotation of spec.fixed_rotation_angle about spec.axis; n_steps
// translations along the axis with magnitudes uniform over
// [-translation_half_range, +translation_half_range] (endpoints exact).
std::vector<EvalRecord> translation_sweep(const Predictor& predict,
                                          std::span<const vol::Volume3> volumes,
                                          const SweepSpec& spec);

struct MetricSummary {
    double mean = 0, std_dev = 0;
    int64_t n = 0;
};

struct Summary {
    MetricSummary te_mm, te_um, re_rad, re_deg, dsc;
};

// Per-case CSV (header case_id,angle_rad,tx_mm,ty_mm,tz_mm,te_mm,re_rad,dsc;
// TE/RE cells empty without ground truth) plus a JSON summary with per-metric
// mean/std/n. TE is reported in both mm and um, RE in radians and degrees.
Summary write_report(std::span<const EvalRecord> records, const std::string& csv_path,
                     const std::string& json_path);

Summary summarize(std::span<const EvalRecord> records);  // throws EmptyInput

}  // namespace voxalign::eval
