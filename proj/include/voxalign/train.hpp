#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxalign/autodiff.hpp"
#include "voxalign/geom.hpp"
#include "voxalign/nets.hpp"
#include "voxalign/synth.hpp"
#include "voxalign/volume.hpp"

namespace voxalign::train {

struct LossConfig {
    double alpha = 0.5;
    double beta = 0.5;
    double epsilon = 0.01;

    void validate() const;  // throws BadConfig
};

// L = alpha ||t - t_hat||^2 / (||t||^2 + eps)  +  beta ||r - r_hat||^2,
// translations in millimetres, r the 9 stacked rotation-matrix entries.
double loss_value(const geom::TransformParams& gt, std::span<const double, 12> pred,
                  const LossConfig& cfg);

// Differentiable batch-mean loss over predictions (B, 12). The per-sample
// relative-translation denominators depend only on the ground truth, so they
// enter as constant per-element weights.
template <typename T>
ad::Tensor<T> loss_node(ad::Graph<T>& g, const ad::Tensor<T>& pred,
                        std::span<const geom::TransformParams> gts, const LossConfig& cfg) {
    const ad::Shape& ps = pred.shape();
    if (ps.ndim() != 2 || ps[1] != 12 || ps[0] != static_cast<ad::Dim>(gts.size()))
        throw ShapeMismatch("loss_node: predictions must be (batch, 12)");
    const size_t B = gts.size();

    std::vector<T> target(12 * B), weight(12 * B);
    for (size_t b = 0; b < B; ++b) {
        const auto& gt = gts[b];
        double tsq = 0;
        for (int i = 0; i < 3; ++i) tsq += gt.theta_t[i] * gt.theta_t[i];
        const double wt = cfg.alpha / ((tsq + cfg.epsilon) * static_cast<double>(B));
        const double wr = cfg.beta / static_cast<double>(B);
        for (int i = 0; i < 9; ++i) {
            target[b * 12 + i] = static_cast<T>(gt.theta_r[i]);
            weight[b * 12 + i] = static_cast<T>(wr);
        }
        for (int i = 0; i < 3; ++i) {
            target[b * 12 + 9 + i] = static_cast<T>(gt.theta_t[i]);
            weight[b * 12 + 9 + i] = static_cast<T>(wt);
        }
    }
    const ad::Dim Bd = static_cast<ad::Dim>(B);
    auto tgt = ad::Tensor<T>::leaf({Bd, 12}, std::move(target));
    auto wgt = ad::Tensor<T>::leaf({Bd, 12}, std::move(weight));
    auto diff = g.sub(pred, tgt);
    return g.sum(g.mul(g.mul(diff, diff), wgt));
}

struct TrainConfig {
    double lr = 0.0001;
    double momentum = 0.9;
    int64_t iterations = 5000;
    int batch_size = 4;
    uint64_t seed = 0;
    int64_t checkpoint_interval = 1000;
    int64_t val_interval = 250;
    int val_size = 16;

    void validate() const;
};

struct CurvePoint {
    int64_t iteration = 0;
    double loss = 0, te_mm = 0, re_rad = 0;
};

struct Sample {
    vol::Volume3 fixed, moving;
    geom::TransformParams theta;
};

// Deterministic sample source: sample i must depend only on i (and captured
// config), never on evaluation order.
using SampleSource = std::function<Sample(uint64_t)>;

// Stream of synthetic pairs over a set of base volumes; each sample owns an
// RNG substream derived from (cfg.seed, index).
SampleSource synthetic_stream(std::shared_ptr<const std::vector<vol::Volume3>> bases,
                              synth::SynthConfig cfg);

struct FitResult {
    std::vector<CurvePoint> train_curve;
    std::vector<CurvePoint> val_curve;
    std::string last_checkpoint;
};

// Checkpoint: magic "DNCK", version, arch-config JSON blob, named parameter
// table, optimizer velocities, iteration, trailing 64-bit checksum.
struct Checkpoint {
    nets::ArchConfig arch;
    int64_t iteration = 0;
    std::vector<std::pair<std::string, std::vector<float>>> params;
    std::vector<std::pair<std::string, std::vector<float>>> velocity;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);  // throws CorruptCheckpoint

Checkpoint snapshot(const nets::Model<float>& model, const ad::SgdMomentum<float>& opt,
                    int64_t iteration);
// Copies parameters and velocities into an already-built model/optimizer.
void restore(nets::Model<float>& model, ad::SgdMomentum<float>& opt, const Checkpoint& ck);

// Runs momentum-SGD iterations start_iteration+1 .. cfg.iterations. Writes a
// checkpoint every checkpoint_interval iterations into checkpoint_dir (when
// non-empty) and validation curve points every val_interval iterations.
// Throws DivergenceDetected (carrying the last written checkpoint) if the
// loss goes non-finite.
FitResult fit(nets::Model<float>& model, ad::SgdMomentum<float>& opt,
              const SampleSource& train_stream, const SampleSource& val_stream,
              const TrainConfig& cfg, const LossConfig& loss_cfg,
              const std::string& checkpoint_dir, int64_t start_iteration = 0);

// Curve file: CSV with header iteration,loss,te_mm,re_rad.
void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path);
std::vector<CurvePoint> read_curve_csv(const std::string& path);

// Mean TE (mm) and RE (rad) of a batch of raw 12-value predictions against
// ground truth. A prediction with a degenerate rotation head counts as the
// maximal rotation error pi.
std::pair<double, double> batch_te_re(std::span<const float> pred, size_t batch,
                                      std::span<const geom::TransformParams> gts);

}  // namespace voxalign::train
