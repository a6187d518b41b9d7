#pragma once

// Minimal deterministic reverse-mode differentiation engine. Define-by-run:
// ops execute immediately and append a backward closure to the owning graph's
// tape; backward walks the tape in exact reverse order. All accumulation
// loops have a fixed order and workers only write outputs they own, so
// results are bit-identical regardless of the worker count.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "voxalign/errors.hpp"
#include "voxalign/parallel.hpp"
#include "voxalign/rng.hpp"

namespace voxalign::ad {

using Dim = int64_t;

class Shape {
  public:
    Shape() = default;
    Shape(std::initializer_list<Dim> dims) {
        if (dims.size() > 5) throw ShapeMismatch("shape: at most 5 dims supported");
        nd_ = static_cast<int>(dims.size());
        const Dim* src = dims.begin();
        for (int i = 0; i < 5 && i < nd_; ++i) d_[i] = src[i];
    }

    int ndim() const { return nd_; }
    Dim operator[](int i) const { return d_[i]; }

    Dim numel() const {
        Dim n = 1;
        for (int i = 0; i < nd_; ++i) n *= d_[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (nd_ != o.nd_) return false;
        for (int i = 0; i < nd_; ++i)
            if (d_[i] != o.d_[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        std::string s = "(";
        for (int i = 0; i < nd_; ++i) s += (i ? "," : "") + std::to_string(d_[i]);
        return s + ")";
    }

  private:
    std::array<Dim, 5> d_{1, 1, 1, 1, 1};
    int nd_ = 0;
};

template <typename T>
struct Storage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty when gradients are not tracked
    bool requires_grad = false;
};

template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor leaf(const Shape& shape, std::vector<T> value, bool requires_grad = false) {
        if (static_cast<Dim>(value.size()) != shape.numel())
            throw ShapeMismatch("tensor: value size does not match shape " + shape.str());
        Tensor t;
        t.s_ = std::make_shared<Storage<T>>();
        t.s_->shape = shape;
        t.s_->value = std::move(value);
        t.s_->requires_grad = requires_grad;
        if (requires_grad) t.s_->grad.assign(t.s_->value.size(), T(0));
        return t;
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return leaf(shape, std::vector<T>(static_cast<size_t>(shape.numel()), T(0)), requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    Dim numel() const { return s_->shape.numel(); }
    std::vector<T>& value() { return s_->value; }
    const std::vector<T>& value() const { return s_->value; }
    std::vector<T>& grad() { return s_->grad; }
    const std::vector<T>& grad() const { return s_->grad; }
    bool requires_grad() const { return s_->requires_grad; }
    bool tracks_grad() const { return !s_->grad.empty(); }
    void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }
    std::shared_ptr<Storage<T>> storage() const { return s_; }

  private:
    std::shared_ptr<Storage<T>> s_;
};

template <typename T>
class Graph {
  public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    void set_recording(bool r) { recording_ = r; }
    bool recording() const { return recording_; }

    // Drops the tape; parameters and their grads are untouched.
    void clear() {
        tape_.clear();
        backward_done_ = false;
    }

    size_t tape_size() const { return tape_.size(); }

    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) throw NotScalarLoss("backward: loss must be a scalar");
        if (backward_done_)
            throw std::logic_error("backward: tape already consumed; clear() the graph first");
        backward_done_ = true;
        if (!loss.tracks_grad()) return;  // nothing requires grad
        loss.storage()->grad[0] += T(1);
        for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
    }

    // ---- primitives ----

    // x: (B, Ci, D, H, W), w: (Co, Ci, kd, kh, kw) odd kernels, b: (Co).
    // Zero padding k/2, stride 1 or 2.
    Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride) {
        const Shape& xs = x.shape();
        const Shape& ws = w.shape();
        if (xs.ndim() != 5 || ws.ndim() != 5 || xs[1] != ws[1])
            throw ShapeMismatch("conv3d: bad shapes x" + xs.str() + " w" + ws.str());
        if (b.shape().ndim() != 1 || b.shape()[0] != ws[0])
            throw ShapeMismatch("conv3d: bias shape " + b.shape().str());
        if (stride != 1 && stride != 2) throw ShapeMismatch("conv3d: stride must be 1 or 2");
        const Dim B = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
        const Dim Co = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
        if (!(kd % 2 && kh % 2 && kw % 2)) throw ShapeMismatch("conv3d: kernels must be odd");
        const Dim pd = kd / 2, ph = kh / 2, pw = kw / 2;
        const Dim OD = (D + 2 * pd - kd) / stride + 1;
        const Dim OH = (H + 2 * ph - kh) / stride + 1;
        const Dim OW = (W + 2 * pw - kw) / stride + 1;

        Tensor<T> out = make_output({B, Co, OD, OH, OW},
                                    x.tracks_grad() || w.tracks_grad() || b.tracks_grad());
        conv3d_forward(x, w, b, out, stride);

        if (out.tracks_grad()) {
            record([xs_ = x.storage(), ws_ = w.storage(), bs_ = b.storage(), os_ = out.storage(),
                    stride] { conv3d_backward(xs_, ws_, bs_, os_, stride); });
        }
        return out;
    }

    // (B, C, D, H, W) -> (B, C, 2D, 2H, 2W), nearest neighbour.
    Tensor<T> upsample_nearest2(const Tensor<T>& x) {
        const Shape& xs = x.shape();
        if (xs.ndim() != 5) throw ShapeMismatch("upsample_nearest2: need 5d input");
        const Dim B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
        Tensor<T> out = make_output({B, C, 2 * D, 2 * H, 2 * W}, x.tracks_grad());

        const T* xv = x.value().data();
        T* ov = out.value().data();
        const Dim OH = 2 * H, OW = 2 * W;
        parallel_for(B * C, [&](int64_t lo, int64_t hi) {
            for (int64_t bc = lo; bc < hi; ++bc) {
                const T* xp = xv + bc * D * H * W;
                T* op = ov + bc * 8 * D * H * W;
                for (Dim od = 0; od < 2 * D; ++od)
                    for (Dim oh = 0; oh < OH; ++oh) {
                        const T* xrow = xp + ((od / 2) * H + oh / 2) * W;
                        T* orow = op + (od * OH + oh) * OW;
                        for (Dim ow = 0; ow < OW; ++ow) orow[ow] = xrow[ow / 2];
                    }
            }
        });

        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), D, H, W] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                const Dim BC = xs_->shape[0] * xs_->shape[1];
                parallel_for(BC, [&](int64_t lo, int64_t hi) {
                    for (int64_t bc = lo; bc < hi; ++bc) {
                        T* gxp = gx + bc * D * H * W;
                        const T* gyp = gy + bc * 8 * D * H * W;
                        for (Dim id = 0; id < D; ++id)
                            for (Dim ih = 0; ih < H; ++ih)
                                for (Dim iw = 0; iw < W; ++iw) {
                                    T acc = 0;
                                    for (int a = 0; a < 2; ++a)
                                        for (int b2 = 0; b2 < 2; ++b2)
                                            for (int c2 = 0; c2 < 2; ++c2)
                                                acc += gyp[((2 * id + a) * 2 * H + 2 * ih + b2) * 2 * W +
                                                           2 * iw + c2];
                                    gxp[(id * H + ih) * W + iw] += acc;
                                }
                    }
                });
            });
        }
        return out;
    }

    Tensor<T> relu(const Tensor<T>& x) { return leaky_relu(x, T(0)); }

    Tensor<T> leaky_relu(const Tensor<T>& x, T negative_slope) {
        Tensor<T> out = make_output(x.shape(), x.tracks_grad());
        const T* xv = x.value().data();
        T* ov = out.value().data();
        const Dim n = x.numel();
        for (Dim i = 0; i < n; ++i) ov[i] = xv[i] > T(0) ? xv[i] : negative_slope * xv[i];
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), negative_slope] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                const T* xv2 = xs_->value.data();
                const Dim n2 = xs_->shape.numel();
                for (Dim i = 0; i < n2; ++i) gx[i] += (xv2[i] > T(0) ? T(1) : negative_slope) * gy[i];
            });
        }
        return out;
    }

    // x: (B, In), w: (Out, In), b: (Out) -> (B, Out)
    Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
        const Shape& xs = x.shape();
        const Shape& ws = w.shape();
        if (xs.ndim() != 2 || ws.ndim() != 2 || xs[1] != ws[1])
            throw ShapeMismatch("linear: bad shapes x" + xs.str() + " w" + ws.str());
        if (b.shape().ndim() != 1 || b.shape()[0] != ws[0])
            throw ShapeMismatch("linear: bias shape " + b.shape().str());
        const Dim B = xs[0], In = xs[1], Out = ws[0];
        Tensor<T> out =
            make_output({B, Out}, x.tracks_grad() || w.tracks_grad() || b.tracks_grad());

        const T* xv = x.value().data();
        const T* wv = w.value().data();
        const T* bv = b.value().data();
        T* ov = out.value().data();
        parallel_for(B, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                for (Dim o = 0; o < Out; ++o) {
                    T acc = bv[o];
                    const T* xr = xv + i * In;
                    const T* wr = wv + o * In;
                    for (Dim k = 0; k < In; ++k) acc += xr[k] * wr[k];
                    ov[i * Out + o] = acc;
                }
        });

        if (out.tracks_grad()) {
            record([xs_ = x.storage(), ws_ = w.storage(), bs_ = b.storage(), os_ = out.storage()] {
                const Dim B2 = xs_->shape[0], In2 = xs_->shape[1], Out2 = ws_->shape[0];
                const T* gy = os_->grad.data();
                if (!xs_->grad.empty()) {
                    T* gx = xs_->grad.data();
                    const T* wv2 = ws_->value.data();
                    parallel_for(B2, [&](int64_t lo, int64_t hi) {
                        for (int64_t i = lo; i < hi; ++i)
                            for (Dim o = 0; o < Out2; ++o) {
                                const T g = gy[i * Out2 + o];
                                const T* wr = wv2 + o * In2;
                                T* gxr = gx + i * In2;
                                for (Dim k = 0; k < In2; ++k) gxr[k] += g * wr[k];
                            }
                    });
                }
                if (!ws_->grad.empty()) {
                    T* gw = ws_->grad.data();
                    const T* xv2 = xs_->value.data();
                    parallel_for(Out2, [&](int64_t lo, int64_t hi) {
                        for (int64_t o = lo; o < hi; ++o)
                            for (Dim i = 0; i < B2; ++i) {
                                const T g = gy[i * Out2 + o];
                                const T* xr = xv2 + i * In2;
                                T* gwr = gw + o * In2;
                                for (Dim k = 0; k < In2; ++k) gwr[k] += g * xr[k];
                            }
                    });
                }
                if (!bs_->grad.empty()) {
                    T* gb = bs_->grad.data();
                    for (Dim i = 0; i < B2; ++i)
                        for (Dim o = 0; o < Out2; ++o) gb[o] += gy[i * Out2 + o];
                }
            });
        }
        return out;
    }

    // Batched matrix product. (B,M,K)x(B,K,N), or a 2-d operand broadcast over
    // the other's batch dimension: (M,K)x(B,K,N), (B,M,K)x(K,N), (M,K)x(K,N).
    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
        const Shape& as = a.shape();
        const Shape& bs = b.shape();
        if (as.ndim() < 2 || as.ndim() > 3 || bs.ndim() < 2 || bs.ndim() > 3)
            throw ShapeMismatch("matmul: operands must be 2d or 3d");
        const bool a3 = as.ndim() == 3, b3 = bs.ndim() == 3;
        const Dim M = as[a3 ? 1 : 0], Ka = as[a3 ? 2 : 1];
        const Dim Kb = bs[b3 ? 1 : 0], N = bs[b3 ? 2 : 1];
        if (Ka != Kb) throw ShapeMismatch("matmul: inner dims differ a" + as.str() + " b" + bs.str());
        if (a3 && b3 && as[0] != bs[0]) throw ShapeMismatch("matmul: batch dims differ");
        const Dim Bt = a3 ? as[0] : (b3 ? bs[0] : 1);
        const Dim K = Ka;

        Shape oshape = (a3 || b3) ? Shape{Bt, M, N} : Shape{M, N};
        Tensor<T> out = make_output(oshape, a.tracks_grad() || b.tracks_grad());

        const T* av = a.value().data();
        const T* bv = b.value().data();
        T* ov = out.value().data();
        parallel_for(Bt * M, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                const Dim bt = r / M, m = r % M;
                const T* ar = av + (a3 ? bt * M * K : 0) + m * K;
                const T* bp = bv + (b3 ? bt * K * N : 0);
                T* orow = ov + r * N;
                for (Dim n = 0; n < N; ++n) orow[n] = T(0);
                for (Dim k = 0; k < K; ++k) {
                    const T s = ar[k];
                    const T* brow = bp + k * N;
                    for (Dim n = 0; n < N; ++n) orow[n] += s * brow[n];
                }
            }
        });

        if (out.tracks_grad()) {
            record([as_ = a.storage(), bs_ = b.storage(), os_ = out.storage(), a3, b3, Bt, M, K, N] {
                const T* gy = os_->grad.data();
                const T* av2 = as_->value.data();
                const T* bv2 = bs_->value.data();
                if (!as_->grad.empty()) {
                    T* ga = as_->grad.data();
                    if (a3) {
                        parallel_for(Bt * M, [&](int64_t lo, int64_t hi) {
                            for (int64_t r = lo; r < hi; ++r) {
                                const Dim bt = r / M;
                                const T* gyr = gy + r * N;
                                const T* bp = bv2 + (b3 ? bt * K * N : 0);
                                T* gar = ga + r * K;
                                for (Dim k = 0; k < K; ++k) {
                                    T acc = 0;
                                    const T* brow = bp + k * N;
                                    for (Dim n = 0; n < N; ++n) acc += gyr[n] * brow[n];
                                    gar[k] += acc;
                                }
                            }
                        });
                    } else {
                        // broadcast operand: batches accumulate in order per row
                        parallel_for(M, [&](int64_t lo, int64_t hi) {
                            for (int64_t m = lo; m < hi; ++m)
                                for (Dim bt = 0; bt < Bt; ++bt) {
                                    const T* gyr = gy + (bt * M + m) * N;
                                    const T* bp = bv2 + (b3 ? bt * K * N : 0);
                                    T* gar = ga + m * K;
                                    for (Dim k = 0; k < K; ++k) {
                                        T acc = 0;
                                        const T* brow = bp + k * N;
                                        for (Dim n = 0; n < N; ++n) acc += gyr[n] * brow[n];
                                        gar[k] += acc;
                                    }
                                }
                        });
                    }
                }
                if (!bs_->grad.empty()) {
                    T* gb = bs_->grad.data();
                    if (b3) {
                        parallel_for(Bt, [&](int64_t lo, int64_t hi) {
                            for (int64_t bt = lo; bt < hi; ++bt) {
                                const T* ap = av2 + (a3 ? bt * M * K : 0);
                                T* gbp = gb + bt * K * N;
                                for (Dim m = 0; m < M; ++m) {
                                    const T* gyr = gy + (bt * M + m) * N;
                                    const T* ar = ap + m * K;
                                    for (Dim k = 0; k < K; ++k) {
                                        const T s = ar[k];
                                        T* gbr = gbp + k * N;
                                        for (Dim n = 0; n < N; ++n) gbr[n] += s * gyr[n];
                                    }
                                }
                            }
                        });
                    } else {
                        parallel_for(K, [&](int64_t lo, int64_t hi) {
                            for (int64_t k = lo; k < hi; ++k)
                                for (Dim bt = 0; bt < Bt; ++bt) {
                                    const T* ap = av2 + (a3 ? bt * M * K : 0);
                                    for (Dim m = 0; m < M; ++m) {
                                        const T s = ap[m * K + k];
                                        const T* gyr = gy + (bt * M + m) * N;
                                        T* gbr = gb + k * N;
                                        for (Dim n = 0; n < N; ++n) gbr[n] += s * gyr[n];
                                    }
                                }
                        });
                    }
                }
            });
        }
        return out;
    }

    // Swaps the last two axes of a 2d or 3d tensor.
    Tensor<T> transpose_last2(const Tensor<T>& x) {
        const Shape& xs = x.shape();
        if (xs.ndim() < 2 || xs.ndim() > 3) throw ShapeMismatch("transpose_last2: need 2d or 3d");
        const bool x3 = xs.ndim() == 3;
        const Dim Bt = x3 ? xs[0] : 1, M = xs[x3 ? 1 : 0], N = xs[x3 ? 2 : 1];
        Shape oshape = x3 ? Shape{Bt, N, M} : Shape{N, M};
        Tensor<T> out = make_output(oshape, x.tracks_grad());
        const T* xv = x.value().data();
        T* ov = out.value().data();
        for (Dim bt = 0; bt < Bt; ++bt)
            for (Dim m = 0; m < M; ++m)
                for (Dim n = 0; n < N; ++n) ov[bt * M * N + n * M + m] = xv[bt * M * N + m * N + n];
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), Bt, M, N] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                for (Dim bt = 0; bt < Bt; ++bt)
                    for (Dim m = 0; m < M; ++m)
                        for (Dim n = 0; n < N; ++n)
                            gx[bt * M * N + m * N + n] += gy[bt * M * N + n * M + m];
            });
        }
        return out;
    }

    // Numerically-stable softmax along `axis`.
    Tensor<T> softmax(const Tensor<T>& x, int axis) {
        const Shape& xs = x.shape();
        if (axis < 0 || axis >= xs.ndim()) throw ShapeMismatch("softmax: bad axis");
        Tensor<T> out = make_output(xs, x.tracks_grad());

        Dim outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= xs[i];
        for (int i = axis + 1; i < xs.ndim(); ++i) inner *= xs[i];
        const Dim L = xs[axis];

        const T* xv = x.value().data();
        T* ov = out.value().data();
        parallel_for(outer, [&](int64_t lo, int64_t hi) {
            for (int64_t ou = lo; ou < hi; ++ou)
                for (Dim in = 0; in < inner; ++in) {
                    const T* xl = xv + ou * L * inner + in;
                    T* ol = ov + ou * L * inner + in;
                    T mx = xl[0];
                    for (Dim l = 1; l < L; ++l) mx = std::max(mx, xl[l * inner]);
                    T sum = 0;
                    for (Dim l = 0; l < L; ++l) {
                        const T e = std::exp(xl[l * inner] - mx);
                        ol[l * inner] = e;
                        sum += e;
                    }
                    const T inv = T(1) / sum;
                    for (Dim l = 0; l < L; ++l) ol[l * inner] *= inv;
                }
        });

        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), outer, inner, L] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                const T* yv = os_->value.data();
                parallel_for(outer, [&](int64_t lo, int64_t hi) {
                    for (int64_t ou = lo; ou < hi; ++ou)
                        for (Dim in = 0; in < inner; ++in) {
                            const Dim base = ou * L * inner + in;
                            T dot = 0;
                            for (Dim l = 0; l < L; ++l) dot += gy[base + l * inner] * yv[base + l * inner];
                            for (Dim l = 0; l < L; ++l)
                                gx[base + l * inner] += yv[base + l * inner] * (gy[base + l * inner] - dot);
                        }
                });
            });
        }
        return out;
    }

    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, /*mul=*/false, false); }
    Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, /*mul=*/false, true); }
    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, /*mul=*/true, false); }

    Tensor<T> scale(const Tensor<T>& x, T c) {
        Tensor<T> out = make_output(x.shape(), x.tracks_grad());
        const T* xv = x.value().data();
        T* ov = out.value().data();
        const Dim n = x.numel();
        for (Dim i = 0; i < n; ++i) ov[i] = c * xv[i];
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), c] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                const Dim n2 = xs_->shape.numel();
                for (Dim i = 0; i < n2; ++i) gx[i] += c * gy[i];
            });
        }
        return out;
    }

    // Concatenation along axis 1 (channels).
    Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
        const Shape& as = a.shape();
        const Shape& bs = b.shape();
        if (as.ndim() != bs.ndim() || as.ndim() < 2)
            throw ShapeMismatch("concat_channels: rank mismatch a" + as.str() + " b" + bs.str());
        for (int i = 0; i < as.ndim(); ++i)
            if (i != 1 && as[i] != bs[i])
                throw ShapeMismatch("concat_channels: a" + as.str() + " b" + bs.str());

        Dim inner = 1;
        for (int i = 2; i < as.ndim(); ++i) inner *= as[i];
        const Dim outer = as[0], ca = as[1], cb = bs[1];

        std::vector<Dim> dims;
        for (int i = 0; i < as.ndim(); ++i) dims.push_back(as[i]);
        dims[1] = ca + cb;
        Shape os;
        switch (as.ndim()) {
            case 2: os = {dims[0], dims[1]}; break;
            case 3: os = {dims[0], dims[1], dims[2]}; break;
            case 4: os = {dims[0], dims[1], dims[2], dims[3]}; break;
            default: os = {dims[0], dims[1], dims[2], dims[3], dims[4]}; break;
        }

        Tensor<T> out = make_output(os, a.tracks_grad() || b.tracks_grad());
        const T* avp = a.value().data();
        const T* bvp = b.value().data();
        T* ov = out.value().data();
        for (Dim o = 0; o < outer; ++o) {
            std::copy_n(avp + o * ca * inner, ca * inner, ov + o * (ca + cb) * inner);
            std::copy_n(bvp + o * cb * inner, cb * inner, ov + (o * (ca + cb) + ca) * inner);
        }

        if (out.tracks_grad()) {
            record([as_ = a.storage(), bs_ = b.storage(), os_ = out.storage(), outer, ca, cb, inner] {
                const T* gy = os_->grad.data();
                if (!as_->grad.empty()) {
                    T* ga = as_->grad.data();
                    for (Dim o = 0; o < outer; ++o)
                        for (Dim i = 0; i < ca * inner; ++i)
                            ga[o * ca * inner + i] += gy[o * (ca + cb) * inner + i];
                }
                if (!bs_->grad.empty()) {
                    T* gb = bs_->grad.data();
                    for (Dim o = 0; o < outer; ++o)
                        for (Dim i = 0; i < cb * inner; ++i)
                            gb[o * cb * inner + i] += gy[(o * (ca + cb) + ca) * inner + i];
                }
            });
        }
        return out;
    }

    // (B, C, D, H, W) -> (B, C) spatial mean.
    Tensor<T> global_avg_pool(const Tensor<T>& x) {
        const Shape& xs = x.shape();
        if (xs.ndim() != 5) throw ShapeMismatch("global_avg_pool: need 5d input");
        const Dim BC = xs[0] * xs[1], S = xs[2] * xs[3] * xs[4];
        Tensor<T> out = make_output({xs[0], xs[1]}, x.tracks_grad());
        const T* xv = x.value().data();
        T* ov = out.value().data();
        const T inv = T(1) / static_cast<T>(S);
        for (Dim bc = 0; bc < BC; ++bc) {
            T acc = 0;
            const T* xp = xv + bc * S;
            for (Dim s = 0; s < S; ++s) acc += xp[s];
            ov[bc] = acc * inv;
        }
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage(), BC, S, inv] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                for (Dim bc = 0; bc < BC; ++bc) {
                    const T g = gy[bc] * inv;
                    T* gxp = gx + bc * S;
                    for (Dim s = 0; s < S; ++s) gxp[s] += g;
                }
            });
        }
        return out;
    }

    Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
        if (shape.numel() != x.numel())
            throw ShapeMismatch("reshape: numel mismatch " + x.shape().str() + " -> " + shape.str());
        Tensor<T> out = make_output(shape, x.tracks_grad());
        out.value() = x.value();
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage()] {
                T* gx = xs_->grad.data();
                const T* gy = os_->grad.data();
                const Dim n = xs_->shape.numel();
                for (Dim i = 0; i < n; ++i) gx[i] += gy[i];
            });
        }
        return out;
    }

    // Sum of all elements -> shape {1}.
    Tensor<T> sum(const Tensor<T>& x) {
        Tensor<T> out = make_output({1}, x.tracks_grad());
        const T* xv = x.value().data();
        T acc = 0;
        const Dim n = x.numel();
        for (Dim i = 0; i < n; ++i) acc += xv[i];
        out.value()[0] = acc;
        if (out.tracks_grad()) {
            record([xs_ = x.storage(), os_ = out.storage()] {
                T* gx = xs_->grad.data();
                const T g = os_->grad[0];
                const Dim n2 = xs_->shape.numel();
                for (Dim i = 0; i < n2; ++i) gx[i] += g;
            });
        }
        return out;
    }

  private:
    Tensor<T> make_output(const Shape& shape, bool needs_grad) {
        Tensor<T> t = Tensor<T>::zeros(shape, false);
        if (recording_ && needs_grad) t.storage()->grad.assign(t.value().size(), T(0));
        return t;
    }

    void record(std::function<void()> fn) {
        if (recording_) tape_.push_back(std::move(fn));
    }

    Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, bool is_mul, bool negate_b) {
        if (a.shape() != b.shape())
            throw ShapeMismatch("elementwise: a" + a.shape().str() + " b" + b.shape().str());
        Tensor<T> out = make_output(a.shape(), a.tracks_grad() || b.tracks_grad());
        const T* av = a.value().data();
        const T* bv = b.value().data();
        T* ov = out.value().data();
        const Dim n = a.numel();
        if (is_mul)
            for (Dim i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
        else if (negate_b)
            for (Dim i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
        else
            for (Dim i = 0; i < n; ++i) ov[i] = av[i] + bv[i];

        if (out.tracks_grad()) {
            record([as_ = a.storage(), bs_ = b.storage(), os_ = out.storage(), is_mul, negate_b] {
                const T* gy = os_->grad.data();
                const Dim n2 = os_->shape.numel();
                if (!as_->grad.empty()) {
                    T* ga = as_->grad.data();
                    if (is_mul) {
                        const T* bv2 = bs_->value.data();
                        for (Dim i = 0; i < n2; ++i) ga[i] += gy[i] * bv2[i];
                    } else {
                        for (Dim i = 0; i < n2; ++i) ga[i] += gy[i];
                    }
                }
                if (!bs_->grad.empty()) {
                    T* gb = bs_->grad.data();
                    if (is_mul) {
                        const T* av2 = as_->value.data();
                        for (Dim i = 0; i < n2; ++i) gb[i] += gy[i] * av2[i];
                    } else if (negate_b) {
                        for (Dim i = 0; i < n2; ++i) gb[i] -= gy[i];
                    } else {
                        for (Dim i = 0; i < n2; ++i) gb[i] += gy[i];
                    }
                }
            });
        }
        return out;
    }

    static void conv3d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                               Tensor<T>& out, int stride) {
        const Shape& xs = x.shape();
        const Shape& ws = w.shape();
        const Shape& os = out.shape();
        const Dim B = xs[0], Ci = xs[1], D = xs[2], H = xs[3], W = xs[4];
        const Dim Co = ws[0], kd = ws[2], kh = ws[3], kw = ws[4];
        const Dim pd = kd / 2, ph = kh / 2, pw = kw / 2;
        const Dim OD = os[2], OH = os[3], OW = os[4];
        const Dim s = stride;

        const T* xv = x.value().data();
        const T* wv = w.value().data();
        const T* bv = b.value().data();
        T* ov = out.value().data();

        parallel_for(B * Co, [&](int64_t lo, int64_t hi) {
            for (int64_t bc = lo; bc < hi; ++bc) {
                const Dim bi = bc / Co, co = bc % Co;
                T* op = ov + bc * OD * OH * OW;
                const T bias = bv[co];
                for (Dim i = 0; i < OD * OH * OW; ++i) op[i] = bias;
                for (Dim ci = 0; ci < Ci; ++ci) {
                    const T* xp = xv + (bi * Ci + ci) * D * H * W;
                    const T* wp = wv + (co * Ci + ci) * kd * kh * kw;
                    for (Dim zk = 0; zk < kd; ++zk)
                        for (Dim yk = 0; yk < kh; ++yk)
                            for (Dim xk = 0; xk < kw; ++xk) {
                                const T wgt = wp[(zk * kh + yk) * kw + xk];
                                const Dim off = xk - pw;
                                const Dim lo_n = pw - xk;
                                const Dim ow_lo = lo_n <= 0 ? 0 : (lo_n + s - 1) / s;
                                const Dim hi_n = W - 1 - xk + pw;
                                if (hi_n < 0) continue;
                                const Dim ow_hi = std::min(OW - 1, hi_n / s);
                                for (Dim od = 0; od < OD; ++od) {
                                    const Dim id = od * s + zk - pd;
                                    if (id < 0 || id >= D) continue;
                                    for (Dim oh = 0; oh < OH; ++oh) {
                                        const Dim ih = oh * s + yk - ph;
                                        if (ih < 0 || ih >= H) continue;
                                        const T* xrow = xp + (id * H + ih) * W;
                                        T* orow = op + (od * OH + oh) * OW;
                                        if (s == 1) {
                                            for (Dim ow = ow_lo; ow <= ow_hi; ++ow)
                                                orow[ow] += wgt * xrow[ow + off];
                                        } else {
                                            for (Dim ow = ow_lo; ow <= ow_hi; ++ow)
                                                orow[ow] += wgt * xrow[ow * 2 + off];
                                        }
                                    }
                                }
                            }
                }
            }
        });
    }

    static void conv3d_backward(const std::shared_ptr<Storage<T>>& xs,
                                const std::shared_ptr<Storage<T>>& ws,
                                const std::shared_ptr<Storage<T>>& bs,
                                const std::shared_ptr<Storage<T>>& os, int stride) {
        const Dim B = xs->shape[0], Ci = xs->shape[1], D = xs->shape[2], H = xs->shape[3],
                  W = xs->shape[4];
        const Dim Co = ws->shape[0], kd = ws->shape[2], kh = ws->shape[3], kw = ws->shape[4];
        const Dim pd = kd / 2, ph = kh / 2, pw = kw / 2;
        const Dim OD = os->shape[2], OH = os->shape[3], OW = os->shape[4];
        const Dim s = stride;
        const T* gy = os->grad.data();

        if (!xs->grad.empty()) {
            T* gx = xs->grad.data();
            const T* wv = ws->value.data();
            parallel_for(B * Ci, [&](int64_t lo, int64_t hi) {
                for (int64_t bc = lo; bc < hi; ++bc) {
                    const Dim bi = bc / Ci, ci = bc % Ci;
                    T* gxp = gx + bc * D * H * W;
                    for (Dim co = 0; co < Co; ++co) {
                        const T* gyp = gy + (bi * Co + co) * OD * OH * OW;
                        const T* wp = wv + (co * Ci + ci) * kd * kh * kw;
                        for (Dim zk = 0; zk < kd; ++zk)
                            for (Dim yk = 0; yk < kh; ++yk)
                                for (Dim xk = 0; xk < kw; ++xk) {
                                    const T wgt = wp[(zk * kh + yk) * kw + xk];
                                    const Dim off = xk - pw;
                                    const Dim lo_n = pw - xk;
                                    const Dim ow_lo = lo_n <= 0 ? 0 : (lo_n + s - 1) / s;
                                    const Dim hi_n = W - 1 - xk + pw;
                                    if (hi_n < 0) continue;
                                    const Dim ow_hi = std::min(OW - 1, hi_n / s);
                                    for (Dim od = 0; od < OD; ++od) {
                                        const Dim id = od * s + zk - pd;
                                        if (id < 0 || id >= D) continue;
                                        for (Dim oh = 0; oh < OH; ++oh) {
                                            const Dim ih = oh * s + yk - ph;
                                            if (ih < 0 || ih >= H) continue;
                                            const T* gyrow = gyp + (od * OH + oh) * OW;
                                            T* gxrow = gxp + (id * H + ih) * W;
                                            for (Dim ow = ow_lo; ow <= ow_hi; ++ow)
                                                gxrow[ow * s + off] += wgt * gyrow[ow];
                                        }
                                    }
                                }
                    }
                }
            });
        }

        if (!ws->grad.empty()) {
            T* gw = ws->grad.data();
            const T* xv = xs->value.data();
            parallel_for(Co, [&](int64_t lo, int64_t hi) {
                for (int64_t co = lo; co < hi; ++co) {
                    for (Dim ci = 0; ci < Ci; ++ci)
                        for (Dim zk = 0; zk < kd; ++zk)
                            for (Dim yk = 0; yk < kh; ++yk)
                                for (Dim xk = 0; xk < kw; ++xk) {
                                    const Dim off = xk - pw;
                                    const Dim lo_n = pw - xk;
                                    const Dim ow_lo = lo_n <= 0 ? 0 : (lo_n + s - 1) / s;
                                    const Dim hi_n = W - 1 - xk + pw;
                                    if (hi_n < 0) continue;
                                    const Dim ow_hi = std::min(OW - 1, hi_n / s);
                                    T acc = 0;
                                    for (Dim bi = 0; bi < B; ++bi) {
                                        const T* gyp = gy + (bi * Co + co) * OD * OH * OW;
                                        const T* xp = xv + (bi * Ci + ci) * D * H * W;
                                        for (Dim od = 0; od < OD; ++od) {
                                            const Dim id = od * s + zk - pd;
                                            if (id < 0 || id >= D) continue;
                                            for (Dim oh = 0; oh < OH; ++oh) {
                                                const Dim ih = oh * s + yk - ph;
                                                if (ih < 0 || ih >= H) continue;
                                                const T* gyrow = gyp + (od * OH + oh) * OW;
                                                const T* xrow = xp + (id * H + ih) * W;
                                                for (Dim ow = ow_lo; ow <= ow_hi; ++ow)
                                                    acc += gyrow[ow] * xrow[ow * s + off];
                                            }
                                        }
                                    }
                                    gw[((co * Ci + ci) * kd * kh + zk * kh + yk) * kw + xk] += acc;
                                }
                }
            });
        }

        if (!bs->grad.empty()) {
            T* gb = bs->grad.data();
            for (Dim bi = 0; bi < B; ++bi)
                for (Dim co = 0; co < Co; ++co) {
                    const T* gyp = gy + (bi * Co + co) * OD * OH * OW;
                    T acc = 0;
                    for (Dim i = 0; i < OD * OH * OW; ++i) acc += gyp[i];
                    gb[co] += acc;
                }
        }
    }

    bool recording_;
    bool backward_done_ = false;
    std::vector<std::function<void()>> tape_;
};

// Classical momentum: v <- mu v + g, p <- p - lr v.
template <typename T>
class SgdMomentum {
  public:
    SgdMomentum(T lr, T momentum) : lr_(lr), momentum_(momentum) {}

    void step(std::span<Tensor<T>> params) {
        if (velocity_.empty()) {
            velocity_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i)
                velocity_[i].assign(params[i].value().size(), T(0));
        }
        if (velocity_.size() != params.size())
            throw ShapeMismatch("sgd: parameter count changed");
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].value();
            const auto& g = params[i].grad();
            auto& v = velocity_[i];
            if (g.size() != p.size() || v.size() != p.size())
                throw ShapeMismatch("sgd: gradient/velocity size mismatch");
            for (size_t k = 0; k < p.size(); ++k) {
                v[k] = momentum_ * v[k] + g[k];
                p[k] -= lr_ * v[k];
            }
        }
    }

    T lr() const { return lr_; }
    T momentum() const { return momentum_; }
    std::vector<std::vector<T>>& velocity() { return velocity_; }
    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

  private:
    T lr_, momentum_;
    std::vector<std::vector<T>> velocity_;
};

// Finite-difference verification harness (64-bit). Rebuilds the forward pass
// around perturbed leaf values and compares central differences against the
// analytic gradients; returns the max relative error
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8) over sampled
// coordinates.
template <typename BuildFn>
double grad_check(std::vector<Tensor<double>> leaves, BuildFn&& build, double eps = 1e-5,
                  int max_coords_per_leaf = 40, uint64_t seed = 12345) {
    for (auto& leaf : leaves)
        if (leaf.tracks_grad()) leaf.zero_grad();
    Graph<double> g;
    Tensor<double> loss = build(g, leaves);
    g.backward(loss);

    const auto eval = [&](void) -> double {
        Graph<double> fg(false);
        Tensor<double> l = build(fg, leaves);
        return l.value()[0];
    };

    Rng rng(seed);
    double max_rel = 0.0;
    for (auto& leaf : leaves) {
        const Dim n = leaf.numel();
        std::vector<int64_t> coords;
        if (n <= max_coords_per_leaf) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int i = 0; i < max_coords_per_leaf; ++i)
                coords.push_back(static_cast<int64_t>(rng.uniform() * static_cast<double>(n)) % n);
        }
        for (int64_t c : coords) {
            const double saved = leaf.value()[c];
            leaf.value()[c] = saved + eps;
            const double lp = eval();
            leaf.value()[c] = saved - eps;
            const double lm = eval();
            leaf.value()[c] = saved;
            const double numeric = (lp - lm) / (2.0 * eps);
            const double analytic = leaf.grad()[c];
            const double rel = std::abs(analytic - numeric) /
                               std::max({std::abs(analytic), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace voxalign::ad
