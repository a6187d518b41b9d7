#include "voxalign/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

namespace voxalign::train {

void LossConfig::validate() const {
    if (!(alpha >= 0) || !(beta >= 0)) throw BadConfig("LossConfig: alpha, beta must be >= 0");
    if (!(epsilon > 0)) throw BadConfig("LossConfig: epsilon must be > 0");
}

void TrainConfig::validate() const {
    if (!(lr > 0)) throw BadConfig("TrainConfig: lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw BadConfig("TrainConfig: momentum must be in [0,1)");
    if (iterations < 0 || batch_size < 1) throw BadConfig("TrainConfig: bad iterations/batch");
    if (checkpoint_interval < 1 || val_interval < 1 || val_size < 1)
        throw BadConfig("TrainConfig: bad intervals");
}

double loss_value(const geom::TransformParams& gt, std::span<const double, 12> pred,
                  const LossConfig& cfg) {
    double dr = 0;
    for (int i = 0; i < 9; ++i) {
        const double d = gt.theta_r[i] - pred[i];
        dr += d * d;
    }
    double dt = 0, tsq = 0;
    for (int i = 0; i < 3; ++i) {
        const double d = gt.theta_t[i] - pred[9 + i];
        dt += d * d;
        tsq += gt.theta_t[i] * gt.theta_t[i];
    }
    return cfg.alpha * dt / (tsq + cfg.epsilon) + cfg.beta * dr;
}

SampleSource synthetic_stream(std::shared_ptr<const std::vector<vol::Volume3>> bases,
                              synth::SynthConfig cfg) {
    if (!bases || bases->empty()) throw BadConfig("synthetic_stream: no base volumes");
    cfg.validate();
    return [bases, cfg](uint64_t index) -> Sample {
        Rng rng = Rng::stream(cfg.seed, index);
        const size_t bi = static_cast<size_t>(rng.next_u64() % bases->size());
        synth::Pair p = synth::make_pair((*bases)[bi], rng, cfg);
        return Sample{std::move(p.fixed), std::move(p.moving), p.theta};
    };
}

std::pair<double, double> batch_te_re(std::span<const float> pred, size_t batch,
                                      std::span<const geom::TransformParams> gts) {
    double te = 0, re = 0;
    for (size_t b = 0; b < batch; ++b) {
        const float* row = pred.data() + b * 12;
        const geom::Vec3 t_hat{row[9], row[10], row[11]};
        const geom::Vec3 t{gts[b].theta_t[0], gts[b].theta_t[1], gts[b].theta_t[2]};
        te += geom::translation_error(t, t_hat);
        const std::array<double, 6> r6{row[0], row[1], row[2], row[3], row[4], row[5]};
        try {
            const geom::Mat3 R = geom::orthogonalize6d(gts[b].first6());
            re += geom::rotation_error(R, std::span<const double, 6>(r6));
        } catch (const DegenerateInput&) {
            re += geom::kPi;
        }
    }
    const double n = static_cast<double>(batch);
    return {te / n, re / n};
}

namespace {

// Evaluates loss/TE/RE on a fixed validation set without touching gradients.
CurvePoint eval_validation(const nets::Model<float>& model, const SampleSource& val_stream,
                           const TrainConfig& cfg, const LossConfig& loss_cfg, int64_t iteration) {
    double loss_sum = 0, te_sum = 0, re_sum = 0;
    int done = 0;
    while (done < cfg.val_size) {
        const int bsz = std::min<int>(cfg.batch_size, cfg.val_size - done);
        std::vector<Sample> samples;
        samples.reserve(bsz);
        for (int i = 0; i < bsz; ++i) samples.push_back(val_stream(static_cast<uint64_t>(done + i)));

        std::vector<const vol::Volume3*> fixed, moving;
        std::vector<geom::TransformParams> gts;
        for (const auto& s : samples) {
            fixed.push_back(&s.fixed);
            moving.push_back(&s.moving);
            gts.push_back(s.theta);
        }
        ad::Graph<float> g(false);
        auto xf = nets::volume_tensor<float>(std::span<const vol::Volume3* const>(fixed));
        auto xm = nets::volume_tensor<float>(std::span<const vol::Volume3* const>(moving));
        auto pred = model.forward(g, xf, xm);
        auto loss = loss_node(g, pred, gts, loss_cfg);
        const auto [te, re] = batch_te_re(pred.value(), gts.size(), gts);
        loss_sum += static_cast<double>(loss.value()[0]) * bsz;
        te_sum += te * bsz;
        re_sum += re * bsz;
        done += bsz;
    }
    const double n = static_cast<double>(cfg.val_size);
    return CurvePoint{iteration, loss_sum / n, te_sum / n, re_sum / n};
}

std::string checkpoint_name(const std::string& dir, int64_t iteration) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%07lld.dnck", static_cast<long long>(iteration));
    return (std::filesystem::path(dir) / buf).string();
}

}  // namespace

FitResult fit(nets::Model<float>& model, ad::SgdMomentum<float>& opt,
              const SampleSource& train_stream, const SampleSource& val_stream,
              const TrainConfig& cfg, const LossConfig& loss_cfg, const std::string& checkpoint_dir,
              int64_t start_iteration) {
    cfg.validate();
    loss_cfg.validate();
    if (!checkpoint_dir.empty()) std::filesystem::create_directories(checkpoint_dir);

    FitResult result;
    auto params = model.params();
    ad::Graph<float> g;

    for (int64_t it = start_iteration + 1; it <= cfg.iterations; ++it) {
        // Sample indices depend only on (seed, iteration, slot) through the
        // stream, so interrupted and resumed runs see identical data.
        std::vector<Sample> samples;
        samples.reserve(cfg.batch_size);
        const uint64_t base = static_cast<uint64_t>(it - 1) * cfg.batch_size;
        for (int s = 0; s < cfg.batch_size; ++s) samples.push_back(train_stream(base + s));

        std::vector<const vol::Volume3*> fixed, moving;
        std::vector<geom::TransformParams> gts;
        for (const auto& s : samples) {
            fixed.push_back(&s.fixed);
            moving.push_back(&s.moving);
            gts.push_back(s.theta);
        }

        g.clear();
        model.zero_grad();
        auto xf = nets::volume_tensor<float>(std::span<const vol::Volume3* const>(fixed));
        auto xm = nets::volume_tensor<float>(std::span<const vol::Volume3* const>(moving));
        auto pred = model.forward(g, xf, xm);
        auto loss = loss_node(g, pred, gts, loss_cfg);

        const double loss_v = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(loss_v))
            throw DivergenceDetected("fit: non-finite loss at iteration " + std::to_string(it),
                                     result.last_checkpoint);

        const auto [te, re] = batch_te_re(pred.value(), gts.size(), gts);
        result.train_curve.push_back(CurvePoint{it, loss_v, te, re});

        g.backward(loss);
        opt.step(params);

        if (it % cfg.val_interval == 0 || it == cfg.iterations)
            result.val_curve.push_back(eval_validation(model, val_stream, cfg, loss_cfg, it));

        if (!checkpoint_dir.empty() &&
            (it % cfg.checkpoint_interval == 0 || it == cfg.iterations)) {
            const std::string path = checkpoint_name(checkpoint_dir, it);
            save_checkpoint(snapshot(model, opt, it), path);
            result.last_checkpoint = path;
        }
    }
    return result;
}

// ---- checkpoint serialization ----

namespace {

constexpr char kMagic[4] = {'D', 'N', 'C', 'K'};
constexpr uint32_t kVersion = 1;

void append_u32(std::string& buf, uint32_t v) { buf.append(reinterpret_cast<const char*>(&v), 4); }
void append_u64(std::string& buf, uint64_t v) { buf.append(reinterpret_cast<const char*>(&v), 8); }

void append_table(std::string& buf, const std::vector<std::pair<std::string, std::vector<float>>>& t) {
    append_u32(buf, static_cast<uint32_t>(t.size()));
    for (const auto& [name, values] : t) {
        append_u32(buf, static_cast<uint32_t>(name.size()));
        buf.append(name);
        append_u64(buf, values.size());
        buf.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
    }
}

uint64_t fnv1a(const std::string& buf) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : buf) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

class Reader {
  public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    uint32_t u32() { return static_cast<uint32_t>(raw(4, "u32")); }
    uint64_t u64() { return raw(8, "u64"); }

    std::string str(size_t n) {
        need(n, "string");
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::vector<float> floats(size_t n) {
        need(n * sizeof(float), "float data");
        std::vector<float> v(n);
        std::memcpy(v.data(), buf_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return v;
    }

    std::vector<std::pair<std::string, std::vector<float>>> table() {
        const uint32_t count = u32();
        std::vector<std::pair<std::string, std::vector<float>>> t;
        t.reserve(count);
        for (uint32_t i = 0; i < count; ++i) {
            const uint32_t nlen = u32();
            std::string name = str(nlen);
            const uint64_t n = u64();
            t.emplace_back(std::move(name), floats(n));
        }
        return t;
    }

  private:
    uint64_t raw(size_t n, const char* what) {
        need(n, what);
        uint64_t v = 0;
        std::memcpy(&v, buf_.data() + pos_, n);
        pos_ += n;
        return v;
    }
    void need(size_t n, const char* what) {
        if (pos_ + n > buf_.size())
            throw CorruptCheckpoint("checkpoint " + path_ + ": truncated " + what);
    }
    const std::string& buf_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::string buf;
    buf.append(kMagic, 4);
    append_u32(buf, kVersion);
    const std::string arch = ck.arch.to_json().dump();
    append_u32(buf, static_cast<uint32_t>(arch.size()));
    buf.append(arch);
    append_u64(buf, static_cast<uint64_t>(ck.iteration));
    append_table(buf, ck.params);
    append_table(buf, ck.velocity);
    append_u64(buf, fnv1a(buf));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("save_checkpoint: cannot open " + tmp);
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw IoError("save_checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 24) throw CorruptCheckpoint("checkpoint " + path + ": too small");

    const std::string body = buf.substr(0, buf.size() - 8);
    uint64_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 8, 8);
    if (fnv1a(body) != stored) throw CorruptCheckpoint("checkpoint " + path + ": checksum mismatch");

    Reader r(body, path);
    if (r.str(4) != std::string(kMagic, 4))
        throw CorruptCheckpoint("checkpoint " + path + ": bad magic");
    if (r.u32() != kVersion) throw CorruptCheckpoint("checkpoint " + path + ": unsupported version");

    Checkpoint ck;
    const uint32_t arch_len = r.u32();
    const std::string arch_json = r.str(arch_len);
    try {
        ck.arch = nets::ArchConfig::from_json(nlohmann::json::parse(arch_json));
    } catch (const std::exception& e) {
        throw CorruptCheckpoint("checkpoint " + path + ": bad arch config: " + e.what());
    }
    ck.iteration = static_cast<int64_t>(r.u64());
    ck.params = r.table();
    ck.velocity = r.table();
    return ck;
}

Checkpoint snapshot(const nets::Model<float>& model, const ad::SgdMomentum<float>& opt,
                    int64_t iteration) {
    Checkpoint ck;
    ck.arch = model.config();
    ck.iteration = iteration;
    for (const auto& [name, t] : model.named_params()) ck.params.emplace_back(name, t.value());
    const auto& vel = opt.velocity();
    const auto& named = model.named_params();
    for (size_t i = 0; i < named.size(); ++i)
        ck.velocity.emplace_back(named[i].first,
                                 i < vel.size() ? vel[i] : std::vector<float>(named[i].second.value().size(), 0.f));
    return ck;
}

void restore(nets::Model<float>& model, ad::SgdMomentum<float>& opt, const Checkpoint& ck) {
    const auto& named = model.named_params();
    if (named.size() != ck.params.size() || named.size() != ck.velocity.size())
        throw CorruptCheckpoint("restore: parameter table size mismatch");
    auto& vel = opt.velocity();
    vel.resize(named.size());
    for (size_t i = 0; i < named.size(); ++i) {
        ad::Tensor<float> t = named[i].second;  // shared handle
        if (named[i].first != ck.params[i].first || t.value().size() != ck.params[i].second.size())
            throw CorruptCheckpoint("restore: parameter '" + ck.params[i].first + "' mismatch");
        if (ck.velocity[i].second.size() != ck.params[i].second.size())
            throw CorruptCheckpoint("restore: velocity '" + ck.velocity[i].first + "' mismatch");
        t.value() = ck.params[i].second;
        vel[i] = ck.velocity[i].second;
    }
}

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("write_curve_csv: cannot open " + tmp);
        f << "iteration,loss,te_mm,re_rad\n";
        char buf[160];
        for (const auto& p : curve) {
            std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g\n",
                          static_cast<long long>(p.iteration), p.loss, p.te_mm, p.re_rad);
            f << buf;
        }
        if (!f) throw IoError("write_curve_csv: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<CurvePoint> read_curve_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_curve_csv: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "iteration,loss,te_mm,re_rad")
        throw IoError("read_curve_csv: bad header in " + path);
    std::vector<CurvePoint> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        CurvePoint p;
        long long it;
        if (std::sscanf(line.c_str(), "%lld,%lg,%lg,%lg", &it, &p.loss, &p.te_mm, &p.re_rad) != 4)
            throw IoError("read_curve_csv: bad row in " + path);
        p.iteration = it;
        out.push_back(p);
    }
    return out;
}

}  // namespace voxalign::train
