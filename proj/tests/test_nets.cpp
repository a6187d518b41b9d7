#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "test_support.hpp"
#include "voxalign/nets.hpp"
#include "voxalign/synth.hpp"

using namespace voxalign;
using namespace voxalign::nets;
using ad::Dim;
using ad::Graph;
using ad::Shape;
using ad::Tensor;

namespace {

template <typename T>
Tensor<T> random_map(const Shape& s, Rng& rng, double scale = 0.5, bool requires_grad = false) {
    std::vector<T> v(static_cast<size_t>(s.numel()));
    for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
    return Tensor<T>::leaf(s, std::move(v), requires_grad);
}

// Brute-force MNL evaluation in doubles for feature maps stored (B=1, C, n).
struct BruteMnl {
    std::vector<double> ym2f, yf2m;
};

BruteMnl brute_mnl(const std::vector<float>& xf, const std::vector<float>& xm,
                   const std::vector<float>& w, int c, int n) {
    auto embed = [&](const std::vector<float>& x) {
        std::vector<std::vector<double>> e(n, std::vector<double>(c, 0.0));
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < c; ++i)
                for (int k = 0; k < c; ++k) e[j][i] += double(w[i * c + k]) * x[k * n + j];
        return e;
    };
    const auto U = embed(xf), V = embed(xm);
    BruteMnl out;
    const auto m2f = testsup::attention_oracle(U, V, V);  // query fixed, attend moving
    const auto f2m = testsup::attention_oracle(V, U, U);  // query moving, attend fixed
    // back to channel-major (c, n)
    out.ym2f.resize(c * n);
    out.yf2m.resize(c * n);
    for (int k = 0; k < n; ++k)
        for (int i = 0; i < c; ++i) {
            out.ym2f[i * n + k] = m2f[k * c + i];
            out.yf2m[i * n + k] = f2m[k * c + i];
        }
    return out;
}

}  // namespace

TEST_CASE("mnl_link single-voxel maps reduce to the embedding") {
    Graph<float> g;
    auto xf = Tensor<float>::leaf({1, 2, 1, 1, 1}, {1.f, -2.f});
    auto xm = Tensor<float>::leaf({1, 2, 1, 1, 1}, {0.5f, 3.f});
    auto W = Tensor<float>::leaf({2, 2}, {1.f, 2.f, -1.f, 0.5f});
    auto [ym2f, yf2m] = mnl_link(g, xf, xm, W);
    // softmax over one element is 1, so outputs are W x
    CHECK(ym2f.value()[0] == doctest::Approx(1 * 0.5 + 2 * 3));
    CHECK(ym2f.value()[1] == doctest::Approx(-1 * 0.5 + 0.5 * 3));
    CHECK(yf2m.value()[0] == doctest::Approx(1 * 1 + 2 * -2));
    CHECK(yf2m.value()[1] == doctest::Approx(-1 * 1 + 0.5 * -2));
}

TEST_CASE("mnl_link matches the worked two-position example") {
    // 1 channel, 2 positions, W = [1], Xf = [1, 0], Xm = [2, 1]
    Graph<float> g;
    auto xf = Tensor<float>::leaf({1, 1, 1, 1, 2}, {1.f, 0.f});
    auto xm = Tensor<float>::leaf({1, 1, 1, 1, 2}, {2.f, 1.f});
    auto W = Tensor<float>::leaf({1, 1}, {1.f});
    auto [ym2f, yf2m] = mnl_link(g, xf, xm, W);
    // weights e^2, e^1 for position 0, uniform for position 1
    CHECK(ym2f.value()[0] == doctest::Approx(1.7311).epsilon(1e-4));
    CHECK(ym2f.value()[1] == doctest::Approx(1.5).epsilon(1e-6));
}

TEST_CASE("mnl_link agrees with the brute-force oracle") {
    Rng rng(5);
    for (int trial = 0; trial < 8; ++trial) {
        const int c = 2 + trial % 7;  // up to 8 channels
        const int d = 1 + trial % 2, h = 2, w2 = 2 + trial % 3;
        const int n = d * h * w2;
        Graph<float> g;
        auto xf = random_map<float>({1, c, d, h, w2}, rng);
        auto xm = random_map<float>({1, c, d, h, w2}, rng);
        auto W = random_map<float>({c, c}, rng, 0.4);
        auto [ym2f, yf2m] = mnl_link(g, xf, xm, W);
        const BruteMnl want = brute_mnl(xf.value(), xm.value(), W.value(), c, n);
        for (int i = 0; i < c * n; ++i) {
            CHECK(std::abs(ym2f.value()[i] - want.ym2f[i]) < 1e-5);
            CHECK(std::abs(yf2m.value()[i] - want.yf2m[i]) < 1e-5);
        }
    }
}

TEST_CASE("mnl duality: the two score matrices are exact transposes") {
    // computing E = U^T V and E' = V^T U with the same contraction order must
    // agree bitwise under transposition
    Rng rng(6);
    const int c = 4, n = 6;
    Graph<float> g;
    auto U = random_map<float>({1, c, n}, rng);
    auto V = random_map<float>({1, c, n}, rng);
    auto E = g.matmul(g.transpose_last2(U), V);
    auto Et = g.matmul(g.transpose_last2(V), U);
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            CHECK(E.value()[k * n + j] == Et.value()[j * n + k]);
}

TEST_CASE("snl_link") {
    SUBCASE("single voxel reduces to the embedding") {
        Graph<float> g;
        auto x = Tensor<float>::leaf({1, 2, 1, 1, 1}, {2.f, -1.f});
        auto W = Tensor<float>::leaf({2, 2}, {0.5f, 1.f, 0.f, -1.f});
        auto y = snl_link(g, x, W);
        CHECK(y.value()[0] == doctest::Approx(0.5 * 2 + 1 * -1));
        CHECK(y.value()[1] == doctest::Approx(0 * 2 + -1 * -1));
    }

    SUBCASE("constant feature map gives identical outputs at every position") {
        Graph<float> g;
        std::vector<float> xv(3 * 8);
        for (int i = 0; i < 3; ++i)
            for (int p = 0; p < 8; ++p) xv[i * 8 + p] = 0.3f * (i + 1);
        auto x = Tensor<float>::leaf({1, 3, 2, 2, 2}, std::move(xv));
        Rng rng(7);
        auto W = random_map<float>({3, 3}, rng);
        auto y = snl_link(g, x, W);
        for (int i = 0; i < 3; ++i)
            for (int p = 1; p < 8; ++p)
                CHECK(y.value()[i * 8 + p] == doctest::Approx(y.value()[i * 8]).epsilon(1e-6));
    }

    SUBCASE("two-position case matches the brute-force oracle") {
        Rng rng(8);
        const int c = 3, n = 2;
        Graph<float> g;
        auto x = random_map<float>({1, c, 1, 1, 2}, rng);
        auto W = random_map<float>({c, c}, rng);
        auto y = snl_link(g, x, W);
        const BruteMnl want = brute_mnl(x.value(), x.value(), W.value(), c, n);
        for (int i = 0; i < c * n; ++i) CHECK(std::abs(y.value()[i] - want.ym2f[i]) < 1e-5);
    }
}

TEST_CASE("res_down halves space and routes through the projection") {
    ArchConfig cfg = ArchConfig::toy(ArchKind::SE);
    cfg.seed = 3;
    auto model = Model<float>::build(cfg);
    Rng rng(9);
    Graph<float> g;
    auto x = random_map<float>({2, 1, 16, 16, 16}, rng);

    // shape contract (c_i, s)->(c_{i+1}, s/2) over the encoder
    auto y = res_down(g, x, ResDownBlock<float>{/*proj=*/{model.param("enc0.proj.w"),
                                                          model.param("enc0.proj.b")},
                                                /*c1=*/{model.param("enc0.c1.w"),
                                                        model.param("enc0.c1.b")},
                                                /*c2=*/{model.param("enc0.c2.w"),
                                                        model.param("enc0.c2.b")}});
    CHECK(y.shape() == Shape{2, 8, 8, 8, 8});

    // zeroing the residual convs leaves only the projection path
    ResDownBlock<float> blk{{model.param("enc0.proj.w"), model.param("enc0.proj.b")},
                            {model.param("enc0.c1.w"), model.param("enc0.c1.b")},
                            {model.param("enc0.c2.w"), model.param("enc0.c2.b")}};
    std::fill(blk.c2.w.value().begin(), blk.c2.w.value().end(), 0.f);
    std::fill(blk.c2.b.value().begin(), blk.c2.b.value().end(), 0.f);
    Graph<float> g2;
    auto proj_only = g2.leaky_relu(g2.conv3d(x, blk.proj.w, blk.proj.b, 2),
                                   static_cast<float>(kLeakySlope));
    auto full = res_down(g2, x, blk);
    CHECK(full.value() == proj_only.value());
}

TEST_CASE("res_down gradient check on a tiny block") {
    Rng rng(10);
    auto x = Tensor<double>::leaf({1, 1, 4, 4, 4}, [&] {
        std::vector<double> v(64);
        for (auto& e : v) e = rng.normal() * 0.5;
        return v;
    }(), true);
    auto pw = Tensor<double>::leaf({2, 1, 3, 3, 3}, [&] {
        std::vector<double> v(54);
        for (auto& e : v) e = rng.normal() * 0.3;
        return v;
    }(), true);
    auto pb = Tensor<double>::leaf({2}, {0.01, -0.02}, true);
    auto c1w = Tensor<double>::leaf({2, 2, 3, 3, 3}, [&] {
        std::vector<double> v(108);
        for (auto& e : v) e = rng.normal() * 0.3;
        return v;
    }(), true);
    auto c1b = Tensor<double>::leaf({2}, {0.0, 0.01}, true);
    auto c2w = Tensor<double>::leaf({2, 2, 3, 3, 3}, [&] {
        std::vector<double> v(108);
        for (auto& e : v) e = rng.normal() * 0.3;
        return v;
    }(), true);
    auto c2b = Tensor<double>::leaf({2}, {-0.01, 0.0}, true);

    const double err = ad::grad_check(
        {x, pw, pb, c1w, c1b, c2w, c2b},
        [](Graph<double>& g, std::vector<Tensor<double>>& v) {
            ResDownBlock<double> blk{{v[1], v[2]}, {v[3], v[4]}, {v[5], v[6]}};
            auto y = res_down(g, v[0], blk);
            return g.sum(g.mul(y, y));
        },
        1e-5, 20);
    CHECK(err < 1e-4);
}

TEST_CASE("res_up shape contract and zero propagation") {
    Rng rng(11);
    Graph<float> g;
    // x (4, 2^3) + skip (6, 4^3) -> (3, 4^3)
    auto x = random_map<float>({1, 4, 2, 2, 2}, rng);
    auto skip = random_map<float>({1, 6, 4, 4, 4}, rng);
    ResUpBlock<float> blk;
    auto zeros = [](const Shape& s) { return Tensor<float>::zeros(s); };
    blk.up = {zeros({3, 4, 3, 3, 3}), zeros({3})};
    blk.fuse = {zeros({3, 9, 3, 3, 3}), zeros({3})};
    blk.c1 = {zeros({3, 3, 3, 3, 3}), zeros({3})};
    blk.c2 = {zeros({3, 3, 3, 3, 3}), zeros({3})};
    auto y = res_up(g, x, skip, blk);
    CHECK(y.shape() == Shape{1, 3, 4, 4, 4});

    // bias-free zero weights: zero x and zero skip give zero output
    auto zx = Tensor<float>::zeros({1, 4, 2, 2, 2});
    auto zskip = Tensor<float>::zeros({1, 6, 4, 4, 4});
    auto zy = res_up(g, zx, zskip, blk);
    for (float v : zy.value()) CHECK(v == 0.f);

    // mis-sized skip rejected
    CHECK_THROWS_AS((void)res_up(g, x, x, blk), ShapeMismatch);
}

TEST_CASE("res_up gradient check on a tiny block") {
    Rng rng(12);
    auto mk = [&](const Shape& s, double scale) {
        std::vector<double> v(static_cast<size_t>(s.numel()));
        for (auto& e : v) e = rng.normal() * scale;
        return Tensor<double>::leaf(s, std::move(v), true);
    };
    auto x = mk({1, 2, 2, 2, 2}, 0.5);
    auto skip = mk({1, 2, 4, 4, 4}, 0.5);
    auto upw = mk({2, 2, 3, 3, 3}, 0.3), upb = mk({2}, 0.05);
    auto fw = mk({2, 4, 3, 3, 3}, 0.3), fb = mk({2}, 0.05);
    auto c1w = mk({2, 2, 3, 3, 3}, 0.3), c1b = mk({2}, 0.05);
    auto c2w = mk({2, 2, 3, 3, 3}, 0.3), c2b = mk({2}, 0.05);
    const double err = ad::grad_check(
        {x, skip, upw, upb, fw, fb, c1w, c1b, c2w, c2b},
        [](Graph<double>& g, std::vector<Tensor<double>>& v) {
            ResUpBlock<double> blk{{v[2], v[3]}, {v[4], v[5]}, {v[6], v[7]}, {v[8], v[9]}};
            auto y = res_up(g, v[0], v[1], blk);
            return g.sum(g.mul(y, y));
        },
        1e-5, 16);
    CHECK(err < 1e-4);
}

TEST_CASE("arch config validation") {
    for (ArchKind k : {ArchKind::ME, ArchKind::SE, ArchKind::SED, ArchKind::SNL_SED, ArchKind::DNET}) {
        CHECK_NOTHROW(ArchConfig::full_scale(k).validate());
        CHECK_NOTHROW(ArchConfig::toy(k).validate());
    }

    ArchConfig bad = ArchConfig::toy(ArchKind::DNET);
    bad.d[1] = 9;  // breaks halving
    CHECK_THROWS_AS(bad.validate(), BadConfig);

    bad = ArchConfig::toy(ArchKind::DNET);
    bad.head_out = 11;
    CHECK_THROWS_AS(bad.validate(), BadConfig);

    bad = ArchConfig::toy(ArchKind::SE);
    bad.n_up = 1;
    CHECK_THROWS_AS(bad.validate(), BadConfig);

    // full-scale published sequences
    const ArchConfig full = ArchConfig::full_scale(ArchKind::DNET);
    CHECK(full.d == std::vector<int>{64, 32, 16, 8, 4, 2, 1});
    CHECK(full.c == std::vector<int>{1, 16, 32, 64, 64, 64, 64});
    CHECK(full.n_down == 6);
    CHECK(full.n_up == 4);
    CHECK(full.n_link == 4);
    const ArchConfig me = ArchConfig::full_scale(ArchKind::ME);
    CHECK(me.d == std::vector<int>{64, 32, 16, 8, 4});
    CHECK(me.c == std::vector<int>{1, 16, 32, 64, 128});
}

TEST_CASE("arch config json round-trip validates") {
    ArchConfig cfg = ArchConfig::toy(ArchKind::SNL_SED);
    cfg.seed = 99;
    const ArchConfig back = ArchConfig::from_json(cfg.to_json());
    CHECK(back.kind == cfg.kind);
    CHECK(back.d == cfg.d);
    CHECK(back.c == cfg.c);
    CHECK(back.seed == 99);

    auto j = cfg.to_json();
    j["n_down"] = 3;  // inconsistent with sequences
    CHECK_THROWS_AS((void)ArchConfig::from_json(j), BadConfig);
}

TEST_CASE("build: link parameters exist exactly for the linked levels") {
    ArchConfig cfg = ArchConfig::full_scale(ArchKind::DNET);
    auto model = Model<float>::build(cfg);
    int links = 0;
    for (const auto& [name, t] : model.named_params())
        if (name.rfind("link", 0) == 0) ++links;
    CHECK(links == 4);
    // linked levels are the latter four down blocks
    CHECK_NOTHROW((void)model.param("link2.w"));
    CHECK_NOTHROW((void)model.param("link5.w"));
    CHECK_THROWS_AS((void)model.param("link1.w"), BadConfig);

    auto sed = Model<float>::build(ArchConfig::full_scale(ArchKind::SED));
    for (const auto& [name, t] : sed.named_params()) CHECK(name.rfind("link", 0) != 0);
}

TEST_CASE("SE and SED share identical encoder parameter shapes") {
    auto se = Model<float>::build(ArchConfig::full_scale(ArchKind::SE));
    auto sed = Model<float>::build(ArchConfig::full_scale(ArchKind::SED));
    for (const auto& [name, t] : se.named_params()) {
        if (name.rfind("enc", 0) != 0) continue;
        const auto other = sed.param(name);
        CHECK(other.shape() == t.shape());
    }
}

TEST_CASE("toy config builds and runs forward to 12 outputs") {
    for (ArchKind k : {ArchKind::ME, ArchKind::SE, ArchKind::SED, ArchKind::SNL_SED, ArchKind::DNET}) {
        ArchConfig cfg = ArchConfig::toy(k);
        cfg.seed = 21;
        auto model = Model<float>::build(cfg);
        Rng rng(22);
        Graph<float> g(false);
        auto xf = random_map<float>({2, 1, 16, 16, 16}, rng);
        auto xm = random_map<float>({2, 1, 16, 16, 16}, rng);
        auto y = model.forward(g, xf, xm);
        CHECK(y.shape() == Shape{2, 12});
        for (float v : y.value()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("forward shape contract holds over randomized valid configs") {
    Rng rng(23);
    for (int trial = 0; trial < 6; ++trial) {
        ArchConfig cfg;
        cfg.kind = trial % 2 ? ArchKind::DNET : ArchKind::SED;
        const int n_down = 2 + trial % 3;
        cfg.n_down = n_down;
        int size = 1 << n_down;  // smallest valid pyramid
        for (int i = 0; i <= n_down; ++i) {
            cfg.d.push_back(size >> i);
            cfg.h.push_back(size >> i);
            cfg.w.push_back(size >> i);
            cfg.c.push_back(i == 0 ? 1 : 2 + 2 * (i % 2));
        }
        cfg.n_up = 1 + static_cast<int>(rng.uniform() * (n_down - 1));
        cfg.n_link = cfg.kind == ArchKind::SED ? 0 : 1 + static_cast<int>(rng.uniform() * n_down);
        cfg.seed = trial;
        cfg.validate();
        auto model = Model<float>::build(cfg);
        Graph<float> g(false);
        auto xf = random_map<float>({1, 1, size, size, size}, rng);
        auto xm = random_map<float>({1, 1, size, size, size}, rng);
        CHECK(model.forward(g, xf, xm).shape() == Shape{1, 12});
    }
}

TEST_CASE("predict splits outputs and is deterministic") {
    ArchConfig cfg = ArchConfig::toy(ArchKind::DNET);
    cfg.seed = 31;
    auto model = Model<float>::build(cfg);

    Rng rng(32);
    vol::Volume3 fixed = synth::gen_phantom(rng, {16, 16, 16});
    vol::Volume3 moving = synth::gen_phantom(rng, {16, 16, 16});

    const geom::TransformParams a = model.predict(fixed, moving);
    const geom::TransformParams b = model.predict(fixed, moving);
    CHECK(a.theta_r == b.theta_r);  // bit-identical across runs
    CHECK(a.theta_t == b.theta_t);

    // swapping the inputs changes the prediction but must not crash
    const geom::TransformParams swapped = model.predict(moving, fixed);
    (void)swapped;

    vol::Volume3 wrong(8, 8, 8);
    CHECK_THROWS_AS((void)model.predict(wrong, wrong), ShapeMismatch);
}

TEST_CASE("attention softmax rows sum to one at every linked level") {
    // checked through the engine op the links are built from
    Rng rng(33);
    for (int c : {4, 8}) {
        const int n = 8;
        Graph<float> g;
        auto U = random_map<float>({2, c, n}, rng, 2.0);
        auto E = g.matmul(g.transpose_last2(U), U);
        auto A = g.softmax(E, 2);
        for (int b = 0; b < 2; ++b)
            for (int k = 0; k < n; ++k) {
                double sum = 0;
                for (int j = 0; j < n; ++j) sum += A.value()[(b * n + k) * n + j];
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            }
    }
}

TEST_CASE("param_count") {
    SUBCASE("hand-counted tiny model") {
        ArchConfig cfg;
        cfg.kind = ArchKind::SE;
        cfg.d = cfg.h = cfg.w = {2, 1};
        cfg.c = {1, 2};
        cfg.n_down = 1;
        cfg.head_hidden = 4;
        cfg.validate();
        auto model = Model<float>::build(cfg);
        // enc0: proj 2*1*27+2, c1 2*2*27+2, c2 2*2*27+2 = 56 + 110 + 110 = 276
        // head: fc1 4*(2*2)+4 = 20, fc2 12*4+12 = 60
        CHECK(model.param_count() == 276 + 20 + 60);
    }

    SUBCASE("Siamese sharing counts the encoder once") {
        auto se = Model<float>::build(ArchConfig::full_scale(ArchKind::SE));
        int64_t expected = 0;
        const std::vector<int> c{1, 16, 32, 64, 64, 64, 64};
        for (int i = 0; i < 6; ++i) {
            const int64_t cin = c[i], cout = c[i + 1];
            expected += cout * cin * 27 + cout;        // proj
            expected += 2 * (cout * cout * 27 + cout); // c1, c2
        }
        expected += 128 * (2 * 64) + 128;  // fc1 on concatenated bottleneck
        expected += 12 * 128 + 12;         // fc2
        CHECK(se.param_count() == expected);
    }

    SUBCASE("full-scale D-net count is reported") {
        auto dnet = Model<float>::build(ArchConfig::full_scale(ArchKind::DNET));
        const int64_t n = dnet.param_count();
        MESSAGE("full-scale dnet parameters: ", n, " (published comparator: 4.9M)");
        CHECK(n > 1000000);
    }
}

TEST_CASE("end-to-end toy network gradient check (8^3 inputs)") {
    ArchConfig cfg;
    cfg.kind = ArchKind::DNET;
    cfg.d = cfg.h = cfg.w = {8, 4, 2, 1};
    cfg.c = {1, 2, 3, 3};
    cfg.n_down = 3;
    cfg.n_up = 1;
    cfg.n_link = 2;
    cfg.seed = 5;
    cfg.validate();
    auto model = Model<double>::build(cfg);

    Rng rng(41);
    auto xf = random_map<double>({1, 1, 8, 8, 8}, rng, 0.5);
    auto xm = random_map<double>({1, 1, 8, 8, 8}, rng, 0.5);

    std::vector<Tensor<double>> leaves = model.params();
    const double err = ad::grad_check(
        leaves,
        [&](Graph<double>& g, std::vector<Tensor<double>>&) {
            auto y = model.forward(g, xf, xm);
            return g.sum(g.mul(y, y));
        },
        1e-5, 4);
    CHECK(err < 1e-3);
}
