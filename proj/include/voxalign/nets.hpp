#pragma once

// The attention links (mutual and self non-local), residual sampling blocks,
// and the five registration architectures as configurable model builders.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "voxalign/autodiff.hpp"
#include "voxalign/geom.hpp"
#include "voxalign/rng.hpp"
#include "voxalign/volume.hpp"

namespace voxalign::nets {

enum class ArchKind { ME, SE, SED, SNL_SED, DNET };

std::string to_string(ArchKind k);
ArchKind arch_from_string(const std::string& s);  // "me","se","sed","snl-sed","dnet"

struct ArchConfig {
    ArchKind kind = ArchKind::DNET;
    std::vector<int> d, h, w;  // size sequences, length n_down + 1, halving
    std::vector<int> c;        // channels, length n_down + 1; c[0] per input volume
    int n_down = 0;
    int n_up = 0;    // 0 for ME / SE
    int n_link = 0;  // links sit on the last n_link down blocks
    int head_hidden = 128;
    int head_out = 12;
    uint64_t seed = 0;

    void validate() const;  // throws BadConfig

    static ArchConfig full_scale(ArchKind k);
    static ArchConfig toy(ArchKind k);

    nlohmann::json to_json() const;
    static ArchConfig from_json(const nlohmann::json& j);  // validates
};

template <typename T>
struct ConvPair {
    ad::Tensor<T> w, b;
};

template <typename T>
struct ResDownBlock {
    ConvPair<T> proj, c1, c2;
};

template <typename T>
struct ResUpBlock {
    ConvPair<T> up, fuse, c1, c2;
};

constexpr double kLeakySlope = 0.1;

// Mutual non-local link between the two branch feature maps (B, C, D, H, W)
// with shared embedding weights W (C, C). For every position k of one branch
// the other branch is attended over all positions j with weights
// softmax_j((W x_k)^T (W x_j)), and the attended values are W-embedded. The
// pre-softmax score matrix of the f->m direction is the exact transpose of the
// m->f direction by construction. Returns (y_m2f, y_f2m).
template <typename T>
std::pair<ad::Tensor<T>, ad::Tensor<T>> mnl_link(ad::Graph<T>& g, const ad::Tensor<T>& xf,
                                                 const ad::Tensor<T>& xm, const ad::Tensor<T>& W) {
    if (xf.shape() != xm.shape()) throw ShapeMismatch("mnl_link: branch shapes differ");
    const ad::Shape& s = xf.shape();
    if (s.ndim() != 5) throw ShapeMismatch("mnl_link: need (B,C,D,H,W) maps");
    const ad::Dim B = s[0], C = s[1], n = s[2] * s[3] * s[4];
    if (W.shape().ndim() != 2 || W.shape()[0] != C || W.shape()[1] != C)
        throw ShapeMismatch("mnl_link: W must be (C,C)");

    auto Ff = g.reshape(xf, {B, C, n});
    auto Fm = g.reshape(xm, {B, C, n});
    auto U = g.matmul(W, Ff);  // embedded fixed branch
    auto V = g.matmul(W, Fm);  // embedded moving branch
    auto E = g.matmul(g.transpose_last2(U), V);  // (B, n_f, n_m) scores

    auto Am2f = g.softmax(E, 2);
    auto Ym2f = g.matmul(V, g.transpose_last2(Am2f));

    auto Af2m = g.softmax(g.transpose_last2(E), 2);
    auto Yf2m = g.matmul(U, g.transpose_last2(Af2m));

    return {g.reshape(Ym2f, s), g.reshape(Yf2m, s)};
}

// Self non-local link: the mutual link of a branch with itself.
template <typename T>
ad::Tensor<T> snl_link(ad::Graph<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& W) {
    const ad::Shape& s = x.shape();
    if (s.ndim() != 5) throw ShapeMismatch("snl_link: need (B,C,D,H,W) maps");
    const ad::Dim B = s[0], C = s[1], n = s[2] * s[3] * s[4];
    if (W.shape().ndim() != 2 || W.shape()[0] != C || W.shape()[1] != C)
        throw ShapeMismatch("snl_link: W must be (C,C)");

    auto F = g.reshape(x, {B, C, n});
    auto U = g.matmul(W, F);
    auto E = g.matmul(g.transpose_last2(U), U);
    auto A = g.softmax(E, 2);
    auto Y = g.matmul(U, g.transpose_last2(A));
    return g.reshape(Y, s);
}

// Halves spatial resolution: stride-2 projection conv plus a two-conv residual
// branch, leaky relu activations.
template <typename T>
ad::Tensor<T> res_down(ad::Graph<T>& g, const ad::Tensor<T>& x, const ResDownBlock<T>& p) {
    const T slope = static_cast<T>(kLeakySlope);
    auto y0 = g.conv3d(x, p.proj.w, p.proj.b, 2);
    auto r = g.conv3d(g.leaky_relu(g.conv3d(y0, p.c1.w, p.c1.b, 1), slope), p.c2.w, p.c2.b, 1);
    return g.leaky_relu(g.add(y0, r), slope);
}

// Doubles spatial resolution: nearest x2 upsample + conv, fuses the skip by
// channel concatenation + conv, then a two-conv residual branch. The skip must
// have twice the spatial dims of x.
template <typename T>
ad::Tensor<T> res_up(ad::Graph<T>& g, const ad::Tensor<T>& x, const ad::Tensor<T>& skip,
                     const ResUpBlock<T>& p) {
    const ad::Shape& xs = x.shape();
    const ad::Shape& ss = skip.shape();
    if (ss.ndim() != 5 || xs.ndim() != 5 || ss[2] != 2 * xs[2] || ss[3] != 2 * xs[3] ||
        ss[4] != 2 * xs[4])
        throw ShapeMismatch("res_up: skip " + ss.str() + " must be 2x of x " + xs.str());
    const T slope = static_cast<T>(kLeakySlope);
    auto u = g.conv3d(g.upsample_nearest2(x), p.up.w, p.up.b, 1);
    auto v = g.concat_channels(u, skip);
    auto y0 = g.conv3d(v, p.fuse.w, p.fuse.b, 1);
    auto r = g.conv3d(g.leaky_relu(g.conv3d(y0, p.c1.w, p.c1.b, 1), slope), p.c2.w, p.c2.b, 1);
    return g.leaky_relu(g.add(y0, r), slope);
}

// (B, 1, d, h, w) tensor from one volume or a batch of equally-shaped volumes.
template <typename T>
ad::Tensor<T> volume_tensor(std::span<const vol::Volume3* const> batch) {
    if (batch.empty()) throw ShapeMismatch("volume_tensor: empty batch");
    const vol::Volume3& first = *batch[0];
    std::vector<T> data;
    data.reserve(batch.size() * first.data.size());
    for (const vol::Volume3* v : batch) {
        if (v->d != first.d || v->h != first.h || v->w != first.w)
            throw ShapeMismatch("volume_tensor: inconsistent volume shapes in batch");
        for (float x : v->data) data.push_back(static_cast<T>(x));
    }
    return ad::Tensor<T>::leaf({static_cast<ad::Dim>(batch.size()), 1, first.d, first.h, first.w},
                               std::move(data));
}

template <typename T>
ad::Tensor<T> volume_tensor(const vol::Volume3& v) {
    const vol::Volume3* p = &v;
    return volume_tensor<T>(std::span<const vol::Volume3* const>(&p, 1));
}

// A built architecture. The Siamese branches reference the same parameter
// tensors, so they stay weight-identical through training by construction.
template <typename T>
class Model {
  public:
    static Model build(const ArchConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg_ = cfg;
        Rng rng(cfg.seed);

        const bool mixed = cfg.kind == ArchKind::ME;
        for (int i = 0; i < cfg.n_down; ++i) {
            const int cin = i == 0 ? cfg.c[0] * (mixed ? 2 : 1) : cfg.c[i];
            const int cout = cfg.c[i + 1];
            ResDownBlock<T> blk;
            blk.proj = m.make_conv("enc" + std::to_string(i) + ".proj", cout, cin, rng);
            blk.c1 = m.make_conv("enc" + std::to_string(i) + ".c1", cout, cout, rng);
            blk.c2 = m.make_conv("enc" + std::to_string(i) + ".c2", cout, cout, rng);
            m.enc_.push_back(blk);
        }

        if (cfg.kind == ArchKind::SNL_SED || cfg.kind == ArchKind::DNET) {
            for (int l = 0; l < cfg.n_link; ++l) {
                const int blk = cfg.n_down - cfg.n_link + l;
                const int ch = cfg.c[blk + 1];
                m.link_w_.push_back(m.make_param("link" + std::to_string(blk) + ".w", {ch, ch},
                                                 static_cast<double>(ch), rng));
            }
        }

        if (cfg.n_up > 0) {
            for (int j = 0; j < cfg.n_up; ++j) {
                const int cin = j == 0 ? 2 * cfg.c[cfg.n_down] : cfg.c[cfg.n_down - j];
                const int cout = cfg.c[cfg.n_down - j - 1];
                const int cskip = 2 * cfg.c[cfg.n_down - j - 1];
                ResUpBlock<T> blk;
                blk.up = m.make_conv("dec" + std::to_string(j) + ".up", cout, cin, rng);
                blk.fuse = m.make_conv("dec" + std::to_string(j) + ".fuse", cout, cout + cskip, rng);
                blk.c1 = m.make_conv("dec" + std::to_string(j) + ".c1", cout, cout, rng);
                blk.c2 = m.make_conv("dec" + std::to_string(j) + ".c2", cout, cout, rng);
                m.dec_.push_back(blk);
            }
        }

        int head_in;
        if (cfg.kind == ArchKind::ME)
            head_in = cfg.c[cfg.n_down];
        else if (cfg.kind == ArchKind::SE)
            head_in = 2 * cfg.c[cfg.n_down];
        else
            head_in = cfg.c[cfg.n_down - cfg.n_up];
        m.fc1_ = m.make_fc("head.fc1", cfg.head_hidden, head_in, rng);
        m.fc2_ = m.make_fc("head.fc2", cfg.head_out, cfg.head_hidden, rng);
        return m;
    }

    const ArchConfig& config() const { return cfg_; }

    // (B, 12) regression output for preprocessed input tensors of shape
    // (B, c0, d0, h0, w0).
    ad::Tensor<T> forward(ad::Graph<T>& g, const ad::Tensor<T>& xf, const ad::Tensor<T>& xm) const {
        check_input(xf);
        check_input(xm);

        if (cfg_.kind == ArchKind::ME) {
            auto x = g.concat_channels(xf, xm);
            for (const auto& blk : enc_) x = res_down(g, x, blk);
            return head(g, g.global_avg_pool(x));
        }

        auto f = xf, mv = xm;
        std::vector<std::pair<ad::Tensor<T>, ad::Tensor<T>>> taps;
        const int first_linked = cfg_.n_down - cfg_.n_link;
        for (int i = 0; i < cfg_.n_down; ++i) {
            f = res_down(g, f, enc_[i]);
            mv = res_down(g, mv, enc_[i]);
            if (i >= first_linked && cfg_.kind == ArchKind::DNET) {
                auto [ym2f, yf2m] = mnl_link(g, f, mv, link_w_[i - first_linked]);
                f = g.add(f, ym2f);
                mv = g.add(mv, yf2m);
            } else if (i >= first_linked && cfg_.kind == ArchKind::SNL_SED) {
                const auto& W = link_w_[i - first_linked];
                f = g.add(f, snl_link(g, f, W));
                mv = g.add(mv, snl_link(g, mv, W));
            }
            taps.emplace_back(f, mv);
        }

        if (cfg_.kind == ArchKind::SE)
            return head(g, g.concat_channels(g.global_avg_pool(f), g.global_avg_pool(mv)));

        auto z = g.concat_channels(f, mv);
        for (int j = 0; j < cfg_.n_up; ++j) {
            const auto& tap = taps[cfg_.n_down - j - 2];
            auto skip = g.concat_channels(tap.first, tap.second);
            z = res_up(g, z, skip, dec_[j]);
        }
        return head(g, g.global_avg_pool(z));
    }

    // Runs the network on a fixed/moving volume pair and splits the 12 outputs
    // into theta_r (9) and theta_t (3).
    geom::TransformParams predict(const vol::Volume3& fixed, const vol::Volume3& moving) const {
        ad::Graph<T> g(false);
        auto y = forward(g, volume_tensor<T>(fixed), volume_tensor<T>(moving));
        geom::TransformParams p;
        for (int i = 0; i < 9; ++i) p.theta_r[i] = static_cast<double>(y.value()[i]);
        for (int i = 0; i < 3; ++i) p.theta_t[i] = static_cast<double>(y.value()[9 + i]);
        return p;
    }

    // Total scalar parameter count; Siamese sharing means each tensor is
    // stored (and counted) once.
    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : named_) n += t.numel();
        return n;
    }

    std::vector<ad::Tensor<T>> params() const {
        std::vector<ad::Tensor<T>> out;
        out.reserve(named_.size());
        for (const auto& [name, t] : named_) out.push_back(t);
        return out;
    }

    const std::vector<std::pair<std::string, ad::Tensor<T>>>& named_params() const { return named_; }

    ad::Tensor<T> param(const std::string& name) const {
        for (const auto& [n, t] : named_)
            if (n == name) return t;
        throw BadConfig("no parameter named " + name);
    }

    void zero_grad() {
        for (auto& [name, t] : named_) t.zero_grad();
    }

  private:
    ad::Tensor<T> head(ad::Graph<T>& g, const ad::Tensor<T>& pooled) const {
        auto h1 = g.leaky_relu(g.linear(pooled, fc1_.w, fc1_.b), static_cast<T>(kLeakySlope));
        return g.linear(h1, fc2_.w, fc2_.b);
    }

    void check_input(const ad::Tensor<T>& x) const {
        const ad::Shape& s = x.shape();
        if (s.ndim() != 5 || s[1] != cfg_.c[0] || s[2] != cfg_.d[0] || s[3] != cfg_.h[0] ||
            s[4] != cfg_.w[0])
            throw ShapeMismatch("forward: input " + s.str() + " does not match configured size");
    }

    ad::Tensor<T> make_param(const std::string& name, ad::Shape shape, double fan_in, Rng& rng) {
        const double limit = std::sqrt(6.0 / fan_in);
        std::vector<T> v(static_cast<size_t>(shape.numel()));
        for (auto& x : v) x = static_cast<T>(rng.uniform(-limit, limit));
        auto t = ad::Tensor<T>::leaf(shape, std::move(v), true);
        named_.emplace_back(name, t);
        return t;
    }

    ConvPair<T> make_conv(const std::string& name, int cout, int cin, Rng& rng) {
        ConvPair<T> p;
        p.w = make_param(name + ".w", {cout, cin, 3, 3, 3}, static_cast<double>(cin) * 27.0, rng);
        p.b = ad::Tensor<T>::leaf({cout}, std::vector<T>(cout, T(0)), true);
        named_.emplace_back(name + ".b", p.b);
        return p;
    }

    ConvPair<T> make_fc(const std::string& name, int out, int in, Rng& rng) {
        ConvPair<T> p;
        p.w = make_param(name + ".w", {out, in}, static_cast<double>(in), rng);
        p.b = ad::Tensor<T>::leaf({out}, std::vector<T>(out, T(0)), true);
        named_.emplace_back(name + ".b", p.b);
        return p;
    }

    ArchConfig cfg_;
    std::vector<ResDownBlock<T>> enc_;
    std::vector<ad::Tensor<T>> link_w_;
    std::vector<ResUpBlock<T>> dec_;
    ConvPair<T> fc1_, fc2_;
    std::vector<std::pair<std::string, ad::Tensor<T>>> named_;
};

}  // namespace voxalign::nets
