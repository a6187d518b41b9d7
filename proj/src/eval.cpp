#include "voxalign/eval.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "voxalign/errors.hpp"

namespace voxalign::eval {

void SweepSpec::validate() const {
    if (n_steps < 2) throw BadConfig("SweepSpec: n_steps must be >= 2");
    if (std::abs(geom::norm(axis) - 1.0) > 1e-9) throw BadConfig("SweepSpec: axis must be unit norm");
    if (!(angle_max >= angle_min)) throw BadConfig("SweepSpec: empty angle range");
    if (!(translation_half_range_mm > 0)) throw BadConfig("SweepSpec: bad translation range");
}

Predictor oracle_predictor() {
    return [](const vol::Volume3&, const vol::Volume3&,
              const std::optional<geom::TransformParams>& gt) -> geom::TransformParams {
        if (!gt) throw BadConfig("oracle predictor needs ground truth");
        return *gt;
    };
}

EvalRecord evaluate_pair(const Predictor& predict, const vol::Volume3& fixed,
                         const vol::Volume3& moving, const std::optional<geom::TransformParams>& gt,
                         double dsc_tau, int case_id) {
    EvalRecord rec;
    rec.case_id = case_id;

    const geom::TransformParams pred = predict(fixed, moving, gt);

    if (gt) {
        rec.has_gt = true;
        const geom::Vec3 t{gt->theta_t[0], gt->theta_t[1], gt->theta_t[2]};
        const geom::Vec3 t_hat{pred.theta_t[0], pred.theta_t[1], pred.theta_t[2]};
        rec.te_mm = geom::translation_error(t, t_hat);
        // Ground truth decodes through the same 6d mapping as the prediction.
        const geom::Mat3 R = geom::orthogonalize6d(gt->first6());
        rec.re_rad = geom::rotation_error(R, pred.first6());
    }

    const geom::RigidTransform t_hat = geom::transform_from_params(pred);
    const vol::Volume3 aligned = vol::resample_rigid(moving, geom::invert(t_hat), 0.f);
    rec.dsc = vol::dice(vol::binarize(fixed, static_cast<float>(dsc_tau)),
                        vol::binarize(aligned, static_cast<float>(dsc_tau)));
    return rec;
}

namespace {

// Uniform grid with bit-exact endpoints.
double grid_value(double lo, double hi, int i, int n) {
    if (i == 0) return lo;
    if (i == n - 1) return hi;
    return lo + (hi - lo) * (static_cast<double>(i) / (n - 1));
}

}  // namespace

std::vector<EvalRecord> rotation_sweep(const Predictor& predict,
                                       std::span<const vol::Volume3> volumes, const SweepSpec& spec) {
    spec.validate();
    std::vector<EvalRecord> records;
    int case_id = 0;
    for (const auto& v : volumes) {
        for (int i = 0; i < spec.n_steps; ++i) {
            const double angle = grid_value(spec.angle_min, spec.angle_max, i, spec.n_steps);
            geom::RigidTransform T;
            T.R = geom::axis_angle(spec.axis, angle);
            T.t = spec.fixed_translation_mm;
            const geom::TransformParams theta = geom::params_from_transform(T);
            const vol::Volume3 moving = vol::resample_rigid(v, T, 0.f);
            EvalRecord rec = evaluate_pair(predict, v, moving, theta, spec.dsc_tau, case_id++);
            rec.angle_rad = angle;
            rec.t_mm = T.t;
            records.push_back(rec);
        }
    }
    return records;
}

std::vector<EvalRecord> translation_sweep(const Predictor& predict,
                                          std::span<const vol::Volume3> volumes,
                                          const SweepSpec& spec) {
    spec.validate();
    std::vector<EvalRecord> records;
    int case_id = 0;
    const double r = spec.translation_half_range_mm;
    for (const auto& v : volumes) {
        for (int i = 0; i < spec.n_steps; ++i) {
            const double s = grid_value(-r, r, i, spec.n_steps);
            geom::RigidTransform T;
            T.R = geom::axis_angle(spec.axis, spec.fixed_rotation_angle);
            T.t = s * spec.axis;
            const geom::TransformParams theta = geom::params_from_transform(T);
            const vol::Volume3 moving = vol::resample_rigid(v, T, 0.f);
            EvalRecord rec = evaluate_pair(predict, v, moving, theta, spec.dsc_tau, case_id++);
            rec.angle_rad = spec.fixed_rotation_angle;
            rec.t_mm = T.t;
            records.push_back(rec);
        }
    }
    return records;
}

namespace {

MetricSummary summarize_values(const std::vector<double>& values) {
    MetricSummary s;
    s.n = static_cast<int64_t>(values.size());
    if (values.empty()) return s;
    double sum = 0;
    for (double v : values) sum += v;
    s.mean = sum / static_cast<double>(s.n);
    double sq = 0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.std_dev = std::sqrt(sq / static_cast<double>(s.n));
    return s;
}

nlohmann::json to_json(const MetricSummary& s) {
    return nlohmann::json{{"mean", s.mean}, {"std", s.std_dev}, {"n", s.n}};
}

}  // namespace

Summary summarize(std::span<const EvalRecord> records) {
    if (records.empty()) throw EmptyInput("summarize: no records");
    std::vector<double> te, re, dsc;
    for (const auto& r : records) {
        if (r.has_gt) {
            te.push_back(r.te_mm);
            re.push_back(r.re_rad);
        }
        dsc.push_back(r.dsc);
    }
    Summary s;
    s.te_mm = summarize_values(te);
    s.re_rad = summarize_values(re);
    s.dsc = summarize_values(dsc);
    constexpr double kDegPerRad = 180.0 / geom::kPi;
    s.te_um = MetricSummary{s.te_mm.mean * 1000.0, s.te_mm.std_dev * 1000.0, s.te_mm.n};
    s.re_deg = MetricSummary{s.re_rad.mean * kDegPerRad, s.re_rad.std_dev * kDegPerRad, s.re_rad.n};
    return s;
}

Summary write_report(std::span<const EvalRecord> records, const std::string& csv_path,
                     const std::string& json_path) {
    const Summary s = summarize(records);

    const std::string csv_tmp = csv_path + ".tmp";
    {
        std::ofstream csv(csv_tmp, std::ios::trunc);
        if (!csv) throw IoError("write_report: cannot open " + csv_tmp);
        csv << "case_id,angle_rad,tx_mm,ty_mm,tz_mm,te_mm,re_rad,dsc\n";
        char buf[320];
        for (const auto& r : records) {
            if (r.has_gt) {
                std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                              r.case_id, r.angle_rad, r.t_mm[0], r.t_mm[1], r.t_mm[2], r.te_mm,
                              r.re_rad, r.dsc);
            } else {
                std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,,,%.17g\n", r.case_id,
                              r.angle_rad, r.t_mm[0], r.t_mm[1], r.t_mm[2], r.dsc);
            }
            csv << buf;
        }
        if (!csv) throw IoError("write_report: short write to " + csv_tmp);
    }

    nlohmann::json j;
    j["te_mm"] = to_json(s.te_mm);
    j["te_um"] = to_json(s.te_um);
    j["re_rad"] = to_json(s.re_rad);
    j["re_deg"] = to_json(s.re_deg);
    j["dsc"] = to_json(s.dsc);
    const std::string json_tmp = json_path + ".tmp";
    {
        std::ofstream js(json_tmp, std::ios::trunc);
        if (!js) throw IoError("write_report: cannot open " + json_tmp);
        js << j.dump(2) << '\n';
        if (!js) throw IoError("write_report: short write to " + json_tmp);
    }
    std::filesystem::rename(csv_tmp, csv_path);
    std::filesystem::rename(json_tmp, json_path);
    return s;
}

}  // namespace voxalign::eval
