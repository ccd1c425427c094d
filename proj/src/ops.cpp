#include "mvb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mvb {

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// Branch-free polynomial expf (cephes-style range reduction), accurate to a
// couple of ulp on the softmax range and auto-vectorizable.
inline float fast_expf(float x) {
    x = std::min(88.0f, std::max(-87.0f, x));
    float t = x * 1.44269504088896341f;
    float n = std::floor(t + 0.5f);
    float r = x - n * 0.693359375f;         // ln2 split, high part
    r -= n * -2.12194440e-4f;               // low part
    float y = 1.9875691500e-4f;
    y = y * r + 1.3981999507e-3f;
    y = y * r + 8.3334519073e-3f;
    y = y * r + 4.1665795894e-2f;
    y = y * r + 1.6666665459e-1f;
    y = y * r + 5.0000001201e-1f;
    y = y * r * r + r + 1.0f;
    uint32_t bits = static_cast<uint32_t>(static_cast<int32_t>(n) + 127) << 23;
    float s2;
    std::memcpy(&s2, &bits, sizeof(float));
    return y * s2;
}

// f64 sum of a float array with fixed 8-lane accumulation.
inline double sumd(const float* a, int64_t n) {
    double lanes[8] = {0.0};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int l = 0; l < 8; ++l) lanes[l] += a[i + l];
    double acc = 0.0;
    for (int l = 0; l < 8; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += a[i];
    return acc;
}

// Dot product with a fixed 16-lane accumulator so the loop vectorizes under
// strict FP semantics. Association order is fixed, hence deterministic.
inline float dotf(const float* a, const float* b, int64_t n) {
    float lanes[16] = {0.0f};
    int64_t i = 0;
    for (; i + 16 <= n; i += 16)
        for (int l = 0; l < 16; ++l) lanes[l] += a[i + l] * b[i + l];
    float acc = 0.0f;
    for (int l = 0; l < 16; ++l) acc += lanes[l];
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    wire_node(out, {a, b}, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n]() {
        const float* g = oi->grad.data();
        if (ai->requires_grad) {
            float* ga = ai->grad_buf();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (bi->requires_grad) {
            float* gb = bi->grad_buf();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
    wire_node(out, {a, b}, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n]() {
        const float* g = oi->grad.data();
        if (ai->requires_grad) {
            float* ga = ai->grad_buf();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (bi->requires_grad) {
            float* gb = bi->grad_buf();
            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    wire_node(out, {a, b}, [ai = a.impl(), bi = b.impl(), oi = out.impl(), n]() {
        const float* g = oi->grad.data();
        if (ai->requires_grad) {
            float* ga = ai->grad_buf();
            const float* pb2 = bi->data.data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
        }
        if (bi->requires_grad) {
            float* gb = bi->grad_buf();
            const float* pa2 = ai->data.data();
            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
        }
    });
    return out;
}

Tensor scale(const Tensor& a, float s) {
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    float* po = out.data();
    int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
    wire_node(out, {a}, [ai = a.impl(), oi = out.impl(), s, n]() {
        if (!ai->requires_grad) return;
        const float* g = oi->grad.data();
        float* ga = ai->grad_buf();
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
    });
    return out;
}

Tensor affine(float a, const Tensor& x, float b, const Tensor& y) {
    check_same_shape(x, y, "affine");
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    const float* py = y.data();
    float* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = a * px[i] + b * py[i];
    wire_node(out, {x, y}, [xi = x.impl(), yi = y.impl(), oi = out.impl(), a, b, n]() {
        const float* g = oi->grad.data();
        if (xi->requires_grad) {
            float* gx = xi->grad_buf();
            for (int64_t i = 0; i < n; ++i) gx[i] += a * g[i];
        }
        if (yi->requires_grad) {
            float* gy = yi->grad_buf();
            for (int64_t i = 0; i < n; ++i) gy[i] += b * g[i];
        }
    });
    return out;
}

Tensor silu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    float* po = out.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * sigmoidf(px[i]);
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), n]() {
        if (!xi->requires_grad) return;
        const float* g = oi->grad.data();
        const float* px2 = xi->data.data();
        float* gx = xi->grad_buf();
        for (int64_t i = 0; i < n; ++i) {
            float s = sigmoidf(px2[i]);
            gx[i] += g[i] * s * (1.0f + px2[i] * (1.0f - s));
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor reshape(const Tensor& x, const Shape& s) {
    check(shape_numel(s) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(s) + " changes element count");
    Tensor out = Tensor::from_data(s, x.vec());
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl()]() {
        if (!xi->requires_grad) return;
        float* gx = xi->grad_buf();
        const float* g = oi->grad.data();
        for (size_t i = 0; i < oi->grad.size(); ++i) gx[i] += g[i];
    });
    return out;
}

namespace {
std::vector<int64_t> strides_of(const Shape& s) {
    std::vector<int64_t> st(s.size());
    int64_t acc = 1;
    for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[static_cast<size_t>(i)];
    }
    return st;
}

// out[i] = x[perm_index(i)]; returns the source flat index for each out index.
void permute_copy(const Shape& in_shape, const std::vector<int>& axes, const float* src, float* dst,
                  bool inverse) {
    size_t r = in_shape.size();
    Shape out_shape(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[static_cast<size_t>(axes[i])];
    auto in_st = strides_of(in_shape);
    auto out_st = strides_of(out_shape);
    int64_t n = shape_numel(in_shape);
    std::vector<int64_t> idx(r, 0);
    for (int64_t flat_out = 0; flat_out < n; ++flat_out) {
        int64_t rem = flat_out;
        int64_t src_off = 0;
        for (size_t i = 0; i < r; ++i) {
            int64_t c = rem / out_st[i];
            rem -= c * out_st[i];
            src_off += c * in_st[static_cast<size_t>(axes[i])];
        }
        if (!inverse)
            dst[flat_out] = src[src_off];
        else
            dst[src_off] += src[flat_out];
    }
}
}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
    check(static_cast<int>(axes.size()) == x.rank(), "permute: axes rank mismatch");
    Shape out_shape(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) out_shape[i] = x.shape()[static_cast<size_t>(axes[i])];
    Tensor out = Tensor::zeros(out_shape);
    permute_copy(x.shape(), axes, x.data(), out.data(), false);
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), axes]() {
        if (!xi->requires_grad) return;
        permute_copy(xi->shape, axes, oi->grad.data(), xi->grad_buf(), true);
    });
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    check(!xs.empty(), "concat: empty input list");
    const Shape& s0 = xs[0].shape();
    int r = xs[0].rank();
    if (axis < 0) axis += r;
    int64_t axis_total = 0;
    for (const auto& x : xs) {
        check(x.rank() == r, "concat: rank mismatch");
        for (int i = 0; i < r; ++i)
            if (i != axis)
                check(x.shape()[static_cast<size_t>(i)] == s0[static_cast<size_t>(i)],
                      "concat: non-axis dims differ");
        axis_total += x.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor out = Tensor::zeros(out_shape);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= s0[static_cast<size_t>(i)];

    float* po = out.data();
    int64_t out_row = axis_total * inner;
    int64_t off = 0;
    for (const auto& x : xs) {
        int64_t rows = x.dim(axis) * inner;
        const float* px = x.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(po + o * out_row + off, px + o * rows, static_cast<size_t>(rows) * sizeof(float));
        off += rows;
    }

    std::vector<Tensor> parents = xs;
    wire_node(out, parents, [parents, oi = out.impl(), outer, inner, out_row]() {
        const float* g = oi->grad.data();
        int64_t off2 = 0;
        for (const auto& x : parents) {
            int64_t prows = x.numel() / outer;
            if (x.impl()->requires_grad) {
                float* gx = x.impl()->grad_buf();
                for (int64_t o = 0; o < outer; ++o) {
                    const float* src = g + o * out_row + off2;
                    float* dst = gx + o * prows;
                    for (int64_t i = 0; i < prows; ++i) dst[i] += src[i];
                }
            }
            off2 += prows;
        }
    });
    return out;
}

Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    int r = x.rank();
    if (axis < 0) axis += r;
    check(axis >= 0 && axis < r, "slice: bad axis");
    check(start >= 0 && len >= 1 && start + len <= x.dim(axis), "slice: out of range");
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out = Tensor::zeros(out_shape);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
    int64_t in_row = x.dim(axis) * inner;
    int64_t out_rows = len * inner;

    const float* px = x.data();
    float* po = out.data();
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(po + o * out_rows, px + o * in_row + start * inner,
                    static_cast<size_t>(out_rows) * sizeof(float));

    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), outer, inner, in_row, out_rows, start]() {
        if (!xi->requires_grad) return;
        float* gx = xi->grad_buf();
        const float* g = oi->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            float* dst = gx + o * in_row + start * inner;
            const float* src = g + o * out_rows;
            for (int64_t i = 0; i < out_rows; ++i) dst[i] += src[i];
        }
    });
    return out;
}

Tensor stack0(const std::vector<Tensor>& xs) {
    check(!xs.empty(), "stack0: empty input list");
    for (const auto& x : xs) check_same_shape(xs[0], x, "stack0");
    Shape out_shape;
    out_shape.push_back(static_cast<int64_t>(xs.size()));
    for (int64_t d : xs[0].shape()) out_shape.push_back(d);
    Tensor out = Tensor::zeros(out_shape);
    int64_t m = xs[0].numel();
    float* po = out.data();
    for (size_t i = 0; i < xs.size(); ++i)
        std::memcpy(po + static_cast<int64_t>(i) * m, xs[i].data(), static_cast<size_t>(m) * sizeof(float));
    std::vector<Tensor> parents = xs;
    wire_node(out, parents, [parents, oi = out.impl(), m]() {
        const float* g = oi->grad.data();
        for (size_t i = 0; i < parents.size(); ++i) {
            if (!parents[i].impl()->requires_grad) continue;
            float* gx = parents[i].impl()->grad_buf();
            const float* src = g + static_cast<int64_t>(i) * m;
            for (int64_t j = 0; j < m; ++j) gx[j] += src[j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    check(x.rank() >= 1 && weight.rank() == 2, "linear: bad ranks");
    int64_t in = x.dim(-1);
    int64_t out_dim = weight.dim(0);
    check(weight.dim(1) == in, "linear: weight " + shape_str(weight.shape()) +
                                   " does not accept input width " + std::to_string(in));
    if (bias.defined()) check(bias.numel() == out_dim, "linear: bias length mismatch");
    int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor out = Tensor::zeros(out_shape);

    const float* px = x.data();
    const float* pw = weight.data();
    const float* pb = bias.defined() ? bias.data() : nullptr;
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * in;
        float* orow = po + r * out_dim;
        for (int64_t o = 0; o < out_dim; ++o) {
            float acc = dotf(xr, pw + o * in, in);
            orow[o] = pb ? acc + pb[o] : acc;
        }
    }

    std::vector<Tensor> parents = bias.defined() ? std::vector<Tensor>{x, weight, bias}
                                                 : std::vector<Tensor>{x, weight};
    wire_node(out, parents,
              [xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr,
               oi = out.impl(), rows, in, out_dim]() {
                  const float* g = oi->grad.data();
                  if (xi->requires_grad) {
                      float* gx = xi->grad_buf();
                      const float* pw2 = wi->data.data();
                      for (int64_t r = 0; r < rows; ++r) {
                          const float* gr = g + r * out_dim;
                          float* gxr = gx + r * in;
                          for (int64_t o = 0; o < out_dim; ++o) {
                              float go = gr[o];
                              const float* wr = pw2 + o * in;
                              for (int64_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                          }
                      }
                  }
                  if (wi->requires_grad) {
                      float* gw = wi->grad_buf();
                      const float* px2 = xi->data.data();
                      for (int64_t r = 0; r < rows; ++r) {
                          const float* xr = px2 + r * in;
                          const float* gr = g + r * out_dim;
                          for (int64_t o = 0; o < out_dim; ++o) {
                              float go = gr[o];
                              if (go == 0.0f) continue;
                              float* gwr = gw + o * in;
                              for (int64_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                          }
                      }
                  }
                  if (bi && bi->requires_grad) {
                      float* gb = bi->grad_buf();
                      for (int64_t o = 0; o < out_dim; ++o) {
                          double acc = 0.0;
                          for (int64_t r = 0; r < rows; ++r) acc += g[r * out_dim + o];
                          gb[o] += static_cast<float>(acc);
                      }
                  }
              });
    return out;
}

Tensor matmul_in_out(const Tensor& x, const Tensor& w) {
    check(w.rank() == 2, "matmul_in_out: weight must be rank 2");
    int64_t in = x.dim(-1);
    check(w.dim(0) == in, "matmul_in_out: inner dims disagree (" + std::to_string(in) + " vs " +
                              std::to_string(w.dim(0)) + ")");
    int64_t out_dim = w.dim(1);
    int64_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    Tensor out = Tensor::zeros(out_shape);

    const float* px = x.data();
    const float* pw = w.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * in;
        float* orow = po + r * out_dim;
        for (int64_t i = 0; i < in; ++i) {
            float xv = xr[i];
            if (xv == 0.0f) continue;
            const float* wrow = pw + i * out_dim;
            for (int64_t o = 0; o < out_dim; ++o) orow[o] += xv * wrow[o];
        }
    }

    wire_node(out, {x, w}, [xi = x.impl(), wi = w.impl(), oi = out.impl(), rows, in, out_dim]() {
        const float* g = oi->grad.data();
        if (xi->requires_grad) {
            float* gx = xi->grad_buf();
            const float* pw2 = wi->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* gr = g + r * out_dim;
                float* gxr = gx + r * in;
                for (int64_t i = 0; i < in; ++i)
                    gxr[i] += dotf(gr, pw2 + i * out_dim, out_dim);
            }
        }
        if (wi->requires_grad) {
            float* gw = wi->grad_buf();
            const float* px2 = xi->data.data();
            for (int64_t r = 0; r < rows; ++r) {
                const float* xr = px2 + r * in;
                const float* gr = g + r * out_dim;
                for (int64_t i = 0; i < in; ++i) {
                    float xv = xr[i];
                    if (xv == 0.0f) continue;
                    float* gwrow = gw + i * out_dim;
                    for (int64_t o = 0; o < out_dim; ++o) gwrow[o] += xv * gr[o];
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax_lastdim(const Tensor& x) {
    check(x.rank() >= 1 && x.dim(-1) >= 1, "softmax_lastdim: last axis must be non-empty");
    int64_t w = x.dim(-1);
    int64_t rows = x.numel() / w;
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    float* po = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = px + r * w;
        float* orow = po + r * w;
        float m = xr[0];
        for (int64_t i = 1; i < w; ++i) m = std::max(m, xr[i]);
        double denom = 0.0;
        for (int64_t i = 0; i < w; ++i) {
            float e = std::exp(xr[i] - m);
            orow[i] = e;
            denom += e;
        }
        float inv = static_cast<float>(1.0 / denom);
        for (int64_t i = 0; i < w; ++i) orow[i] *= inv;
    }
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), rows, w]() {
        if (!xi->requires_grad) return;
        float* gx = xi->grad_buf();
        const float* g = oi->grad.data();
        const float* y = oi->data.data();
        for (int64_t r = 0; r < rows; ++r) {
            const float* gr = g + r * w;
            const float* yr = y + r * w;
            double dot = 0.0;
            for (int64_t i = 0; i < w; ++i) dot += static_cast<double>(gr[i]) * yr[i];
            float* gxr = gx + r * w;
            float dsum = static_cast<float>(dot);
            for (int64_t i = 0; i < w; ++i) gxr[i] += yr[i] * (gr[i] - dsum);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// GroupNorm over [..., C, H, W]

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta, float eps) {
    check(x.rank() >= 3, "group_norm: input must be [..., C, H, W]");
    check(eps > 0.0f, "group_norm: eps must be positive");
    int64_t W = x.dim(-1), H = x.dim(-2), C = x.dim(-3);
    check(C % groups == 0, "group_norm: " + std::to_string(C) + " channels not divisible by " +
                               std::to_string(groups) + " groups");
    check(gamma.numel() == C && beta.numel() == C, "group_norm: affine params must be length C");
    int64_t batch = x.numel() / (C * H * W);
    int64_t gs = C / groups;       // channels per group
    int64_t plane = H * W;
    int64_t glen = gs * plane;

    Tensor out = Tensor::zeros(x.shape());
    // Saved statistics per (batch, group) for backward.
    std::vector<float> mean_v(static_cast<size_t>(batch * groups));
    std::vector<float> inv_std_v(static_cast<size_t>(batch * groups));

    const float* px = x.data();
    const float* pg = gamma.data();
    const float* pb = beta.data();
    float* po = out.data();
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t g = 0; g < groups; ++g) {
            const float* base = px + b * C * plane + g * gs * plane;
            double lane_s[8] = {0.0}, lane_s2[8] = {0.0};
            int64_t i = 0;
            for (; i + 8 <= glen; i += 8)
                for (int l = 0; l < 8; ++l) {
                    double v = base[i + l];
                    lane_s[l] += v;
                    lane_s2[l] += v * v;
                }
            double s = 0.0, s2 = 0.0;
            for (int l = 0; l < 8; ++l) {
                s += lane_s[l];
                s2 += lane_s2[l];
            }
            for (; i < glen; ++i) {
                double v = base[i];
                s += v;
                s2 += v * v;
            }
            double mean = s / static_cast<double>(glen);
            double var = s2 / static_cast<double>(glen) - mean * mean;
            if (var < 0.0) var = 0.0;
            float inv_std = static_cast<float>(1.0 / std::sqrt(var + eps));
            mean_v[static_cast<size_t>(b * groups + g)] = static_cast<float>(mean);
            inv_std_v[static_cast<size_t>(b * groups + g)] = inv_std;
            float* obase = po + b * C * plane + g * gs * plane;
            for (int64_t c = 0; c < gs; ++c) {
                float ga = pg[g * gs + c];
                float be = pb[g * gs + c];
                const float* xc = base + c * plane;
                float* oc = obase + c * plane;
                float mu = static_cast<float>(mean);
                for (int64_t i = 0; i < plane; ++i) oc[i] = ga * (xc[i] - mu) * inv_std + be;
            }
        }
    }

    wire_node(out, {x, gamma, beta},
              [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = out.impl(), batch, groups, gs,
               plane, glen, mean_v = std::move(mean_v), inv_std_v = std::move(inv_std_v)]() {
                  const float* g = oi->grad.data();
                  const float* px2 = xi->data.data();
                  const float* pg2 = gi->data.data();
                  int64_t C = gs * groups;
                  if (gi->requires_grad || bi->requires_grad) {
                      float* gga = gi->requires_grad ? gi->grad_buf() : nullptr;
                      float* gbe = bi->requires_grad ? bi->grad_buf() : nullptr;
                      for (int64_t c = 0; c < C; ++c) {
                          int64_t grp = c / gs;
                          double ag = 0.0, ab = 0.0;
                          for (int64_t b = 0; b < batch; ++b) {
                              float mu = mean_v[static_cast<size_t>(b * groups + grp)];
                              float is = inv_std_v[static_cast<size_t>(b * groups + grp)];
                              const float* xc = px2 + (b * C + c) * plane;
                              const float* gc = g + (b * C + c) * plane;
                              for (int64_t i = 0; i < plane; ++i) {
                                  ag += static_cast<double>(gc[i]) * (xc[i] - mu) * is;
                                  ab += gc[i];
                              }
                          }
                          if (gga) gga[c] += static_cast<float>(ag);
                          if (gbe) gbe[c] += static_cast<float>(ab);
                      }
                  }
                  if (xi->requires_grad) {
                      float* gx = xi->grad_buf();
                      for (int64_t b = 0; b < batch; ++b) {
                          for (int64_t grp = 0; grp < groups; ++grp) {
                              float mu = mean_v[static_cast<size_t>(b * groups + grp)];
                              float is = inv_std_v[static_cast<size_t>(b * groups + grp)];
                              const float* xb = px2 + b * C * plane + grp * gs * plane;
                              const float* gb2 = g + b * C * plane + grp * gs * plane;
                              double sum_gy = 0.0, sum_gyx = 0.0;  // sums of gamma*g and gamma*g*xhat
                              for (int64_t c = 0; c < gs; ++c) {
                                  float ga = pg2[grp * gs + c];
                                  const float* xc = xb + c * plane;
                                  const float* gc = gb2 + c * plane;
                                  for (int64_t i = 0; i < plane; ++i) {
                                      float xhat = (xc[i] - mu) * is;
                                      float gg = ga * gc[i];
                                      sum_gy += gg;
                                      sum_gyx += static_cast<double>(gg) * xhat;
                                  }
                              }
                              float m1 = static_cast<float>(sum_gy / static_cast<double>(glen));
                              float m2 = static_cast<float>(sum_gyx / static_cast<double>(glen));
                              float* gxb = gx + b * C * plane + grp * gs * plane;
                              for (int64_t c = 0; c < gs; ++c) {
                                  float ga = pg2[grp * gs + c];
                                  const float* xc = xb + c * plane;
                                  const float* gc = gb2 + c * plane;
                                  float* gxc = gxb + c * plane;
                                  for (int64_t i = 0; i < plane; ++i) {
                                      float xhat = (xc[i] - mu) * is;
                                      gxc[i] += is * (ga * gc[i] - m1 - xhat * m2);
                                  }
                              }
                          }
                      }
                  }
              });
    return out;
}

// ---------------------------------------------------------------------------
// 3x3 convolution, pad 1, stride 1 or 2. Lowered to im2col + saxpy so the
// inner loops run over the whole output plane.

namespace {

// col is [Cin*9, Ho*Wo]; row index r = ci*9 + ky*3 + kx.
void im2col_3x3(const float* x, int64_t Cin, int64_t H, int64_t W, int stride, int64_t Ho, int64_t Wo,
                float* col) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
        const float* xc = x + ci * H * W;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                float* row = col + (ci * 9 + ky * 3 + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - 1;
                    float* dst = row + oy * Wo;
                    if (iy < 0 || iy >= H) {
                        std::memset(dst, 0, static_cast<size_t>(Wo) * sizeof(float));
                        continue;
                    }
                    const float* xrow = xc + iy * W;
                    if (stride == 1) {
                        // shift by kx-1 with zero padding at the borders
                        if (kx == 0) {
                            dst[0] = 0.0f;
                            std::memcpy(dst + 1, xrow, static_cast<size_t>(W - 1) * sizeof(float));
                        } else if (kx == 1) {
                            std::memcpy(dst, xrow, static_cast<size_t>(W) * sizeof(float));
                        } else {
                            std::memcpy(dst, xrow + 1, static_cast<size_t>(W - 1) * sizeof(float));
                            dst[W - 1] = 0.0f;
                        }
                    } else {
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                            int64_t ix = ox * 2 + kx - 1;
                            dst[ox] = (ix < 0 || ix >= W) ? 0.0f : xrow[ix];
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of a col gradient back to the input layout.
void col2im_3x3(const float* col, int64_t Cin, int64_t H, int64_t W, int stride, int64_t Ho, int64_t Wo,
                float* gx) {
    for (int64_t ci = 0; ci < Cin; ++ci) {
        float* gxc = gx + ci * H * W;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const float* row = col + (ci * 9 + ky * 3 + kx) * Ho * Wo;
                for (int64_t oy = 0; oy < Ho; ++oy) {
                    int64_t iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= H) continue;
                    const float* src = row + oy * Wo;
                    float* gxrow = gxc + iy * W;
                    if (stride == 1) {
                        if (kx == 0) {
                            for (int64_t i = 0; i < W - 1; ++i) gxrow[i] += src[i + 1];
                        } else if (kx == 1) {
                            for (int64_t i = 0; i < W; ++i) gxrow[i] += src[i];
                        } else {
                            for (int64_t i = 0; i < W - 1; ++i) gxrow[i + 1] += src[i];
                        }
                    } else {
                        for (int64_t ox = 0; ox < Wo; ++ox) {
                            int64_t ix = ox * 2 + kx - 1;
                            if (ix >= 0 && ix < W) gxrow[ix] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d_3x3(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride) {
    check(x.rank() >= 3, "conv2d_3x3: input must be [..., C, H, W]");
    check(kernel.rank() == 4 && kernel.dim(2) == 3 && kernel.dim(3) == 3,
          "conv2d_3x3: kernel must be [Cout, Cin, 3, 3]");
    check(stride == 1 || stride == 2, "conv2d_3x3: stride must be 1 or 2");
    int64_t W = x.dim(-1), H = x.dim(-2), Cin = x.dim(-3);
    int64_t Cout = kernel.dim(0);
    check(kernel.dim(1) == Cin, "conv2d_3x3: kernel expects " + std::to_string(kernel.dim(1)) +
                                    " input channels, got " + std::to_string(Cin));
    if (bias.defined()) check(bias.numel() == Cout, "conv2d_3x3: bias length mismatch");
    int64_t batch = x.numel() / (Cin * H * W);
    int64_t Ho = (H - 1) / stride + 1;
    int64_t Wo = (W - 1) / stride + 1;
    int64_t plane = Ho * Wo;
    int64_t K = Cin * 9;

    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 3] = Cout;
    out_shape[out_shape.size() - 2] = Ho;
    out_shape[out_shape.size() - 1] = Wo;
    Tensor out = Tensor::zeros(out_shape);

    const float* px = x.data();
    const float* pk = kernel.data();
    const float* pb = bias.defined() ? bias.data() : nullptr;
    float* po = out.data();

    std::vector<float> col(static_cast<size_t>(K * plane));
    for (int64_t b = 0; b < batch; ++b) {
        im2col_3x3(px + b * Cin * H * W, Cin, H, W, stride, Ho, Wo, col.data());
        float* ob = po + b * Cout * plane;
        for (int64_t co = 0; co < Cout; ++co) {
            float* oc = ob + co * plane;
            if (pb) {
                float bv = pb[co];
                for (int64_t i = 0; i < plane; ++i) oc[i] = bv;
            }
            const float* kc = pk + co * K;
            for (int64_t r = 0; r < K; ++r) {
                float wv = kc[r];
                if (wv == 0.0f) continue;
                const float* crow = col.data() + r * plane;
                for (int64_t i = 0; i < plane; ++i) oc[i] += wv * crow[i];
            }
        }
    }

    std::vector<Tensor> parents = bias.defined() ? std::vector<Tensor>{x, kernel, bias}
                                                 : std::vector<Tensor>{x, kernel};
    wire_node(out, parents,
              [xi = x.impl(), ki = kernel.impl(), bi = bias.defined() ? bias.impl() : nullptr,
               oi = out.impl(), batch, Cin, Cout, H, W, Ho, Wo, stride, plane, K]() {
                  const float* g = oi->grad.data();
                  const float* px2 = xi->data.data();
                  const float* pk2 = ki->data.data();
                  bool need_x = xi->requires_grad;
                  bool need_k = ki->requires_grad;
                  float* gx = need_x ? xi->grad_buf() : nullptr;
                  float* gk = need_k ? ki->grad_buf() : nullptr;
                  std::vector<float> col(need_k ? static_cast<size_t>(K * plane) : 0);
                  std::vector<float> dcol(need_x ? static_cast<size_t>(K * plane) : 0);
                  std::vector<double> gk_acc(need_k ? static_cast<size_t>(Cout * K) : 0, 0.0);
                  for (int64_t b = 0; b < batch; ++b) {
                      const float* gb = g + b * Cout * plane;
                      if (need_k) {
                          im2col_3x3(px2 + b * Cin * H * W, Cin, H, W, stride, Ho, Wo, col.data());
                          for (int64_t co = 0; co < Cout; ++co) {
                              const float* gc = gb + co * plane;
                              for (int64_t r = 0; r < K; ++r)
                                  gk_acc[static_cast<size_t>(co * K + r)] +=
                                      dotf(gc, col.data() + r * plane, plane);
                          }
                      }
                      if (need_x) {
                          std::fill(dcol.begin(), dcol.end(), 0.0f);
                          for (int64_t co = 0; co < Cout; ++co) {
                              const float* gc = gb + co * plane;
                              const float* kc = pk2 + co * K;
                              for (int64_t r = 0; r < K; ++r) {
                                  float wv = kc[r];
                                  if (wv == 0.0f) continue;
                                  float* drow = dcol.data() + r * plane;
                                  for (int64_t i = 0; i < plane; ++i) drow[i] += wv * gc[i];
                              }
                          }
                          col2im_3x3(dcol.data(), Cin, H, W, stride, Ho, Wo, gx + b * Cin * H * W);
                      }
                  }
                  if (need_k)
                      for (int64_t i = 0; i < Cout * K; ++i)
                          gk[i] += static_cast<float>(gk_acc[static_cast<size_t>(i)]);
                  if (bi && bi->requires_grad) {
                      float* gb2 = bi->grad_buf();
                      for (int64_t co = 0; co < Cout; ++co) {
                          double acc = 0.0;
                          for (int64_t b = 0; b < batch; ++b) {
                              const float* gc = g + (b * Cout + co) * plane;
                              for (int64_t i = 0; i < plane; ++i) acc += gc[i];
                          }
                          gb2[co] += static_cast<float>(acc);
                      }
                  }
              });
    return out;
}

Tensor upsample_nearest_2x(const Tensor& x) {
    check(x.rank() >= 3, "upsample_nearest_2x: input must be [..., C, H, W]");
    int64_t W = x.dim(-1), H = x.dim(-2);
    int64_t planes = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = H * 2;
    out_shape[out_shape.size() - 1] = W * 2;
    Tensor out = Tensor::zeros(out_shape);
    const float* px = x.data();
    float* po = out.data();
    for (int64_t p = 0; p < planes; ++p) {
        const float* xp = px + p * H * W;
        float* op = po + p * 4 * H * W;
        for (int64_t y = 0; y < H; ++y) {
            for (int64_t xx = 0; xx < W; ++xx) {
                float v = xp[y * W + xx];
                float* o0 = op + (2 * y) * 2 * W + 2 * xx;
                float* o1 = o0 + 2 * W;
                o0[0] = o0[1] = o1[0] = o1[1] = v;
            }
        }
    }
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), planes, H, W]() {
        if (!xi->requires_grad) return;
        float* gx = xi->grad_buf();
        const float* g = oi->grad.data();
        for (int64_t p = 0; p < planes; ++p) {
            float* gxp = gx + p * H * W;
            const float* gp = g + p * 4 * H * W;
            for (int64_t y = 0; y < H; ++y) {
                for (int64_t xx = 0; xx < W; ++xx) {
                    const float* g0 = gp + (2 * y) * 2 * W + 2 * xx;
                    const float* g1 = g0 + 2 * W;
                    gxp[y * W + xx] += g0[0] + g0[1] + g1[0] + g1[1];
                }
            }
        }
    });
    return out;
}

Tensor avg_pool2d(const Tensor& x, int factor) {
    check(x.rank() >= 3, "avg_pool2d: input must be [..., C, H, W]");
    int64_t W = x.dim(-1), H = x.dim(-2);
    check(H % factor == 0 && W % factor == 0, "avg_pool2d: dims not divisible by factor");
    int64_t Ho = H / factor, Wo = W / factor;
    int64_t planes = x.numel() / (H * W);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = Ho;
    out_shape[out_shape.size() - 1] = Wo;
    Tensor out = Tensor::zeros(out_shape);
    const float* px = x.data();
    float* po = out.data();
    float inv = 1.0f / static_cast<float>(factor * factor);
    for (int64_t p = 0; p < planes; ++p) {
        const float* xp = px + p * H * W;
        float* op = po + p * Ho * Wo;
        for (int64_t oy = 0; oy < Ho; ++oy) {
            for (int64_t ox = 0; ox < Wo; ++ox) {
                double acc = 0.0;
                for (int dy = 0; dy < factor; ++dy)
                    for (int dx = 0; dx < factor; ++dx)
                        acc += xp[(oy * factor + dy) * W + ox * factor + dx];
                op[oy * Wo + ox] = static_cast<float>(acc) * inv;
            }
        }
    }
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), planes, H, W, Ho, Wo, factor, inv]() {
        if (!xi->requires_grad) return;
        float* gx = xi->grad_buf();
        const float* g = oi->grad.data();
        for (int64_t p = 0; p < planes; ++p) {
            float* gxp = gx + p * H * W;
            const float* gp = g + p * Ho * Wo;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    float gv = gp[oy * Wo + ox] * inv;
                    for (int dy = 0; dy < factor; ++dy)
                        for (int dx = 0; dx < factor; ++dx)
                            gxp[(oy * factor + dy) * W + ox * factor + dx] += gv;
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Temporal conv over [B, N, C, H, W]

Tensor temporal_conv3(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
    check(x.rank() == 5, "temporal_conv3: input must be [B, N, C, H, W]");
    check(kernel.rank() == 3 && kernel.dim(2) == 3, "temporal_conv3: kernel must be [Cout, Cin, 3]");
    int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2), H = x.dim(3), W = x.dim(4);
    check(kernel.dim(1) == C && kernel.dim(0) == C, "temporal_conv3: channel mismatch");
    check(bias.numel() == C, "temporal_conv3: bias length mismatch");
    int64_t plane = H * W;
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    const float* pk = kernel.data();
    const float* pb = bias.data();
    float* po = out.data();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t n = 0; n < N; ++n) {
            float* on = po + (b * N + n) * C * plane;
            for (int64_t co = 0; co < C; ++co) {
                float* oc = on + co * plane;
                float bv = pb[co];
                for (int64_t i = 0; i < plane; ++i) oc[i] = bv;
                for (int dt = -1; dt <= 1; ++dt) {
                    int64_t nn = n + dt;
                    if (nn < 0 || nn >= N) continue;
                    const float* xn = px + (b * N + nn) * C * plane;
                    for (int64_t ci = 0; ci < C; ++ci) {
                        float wv = pk[(co * C + ci) * 3 + (dt + 1)];
                        if (wv == 0.0f) continue;
                        const float* xc = xn + ci * plane;
                        for (int64_t i = 0; i < plane; ++i) oc[i] += wv * xc[i];
                    }
                }
            }
        }
    }
    wire_node(out, {x, kernel, bias},
              [xi = x.impl(), ki = kernel.impl(), bi = bias.impl(), oi = out.impl(), B, N, C, plane]() {
                  const float* g = oi->grad.data();
                  const float* px2 = xi->data.data();
                  const float* pk2 = ki->data.data();
                  if (xi->requires_grad) {
                      float* gx = xi->grad_buf();
                      for (int64_t b = 0; b < B; ++b)
                          for (int64_t n = 0; n < N; ++n)
                              for (int64_t co = 0; co < C; ++co) {
                                  const float* gc = g + ((b * N + n) * C + co) * plane;
                                  for (int dt = -1; dt <= 1; ++dt) {
                                      int64_t nn = n + dt;
                                      if (nn < 0 || nn >= N) continue;
                                      for (int64_t ci = 0; ci < C; ++ci) {
                                          float wv = pk2[(co * C + ci) * 3 + (dt + 1)];
                                          if (wv == 0.0f) continue;
                                          float* gxc = gx + ((b * N + nn) * C + ci) * plane;
                                          for (int64_t i = 0; i < plane; ++i) gxc[i] += wv * gc[i];
                                      }
                                  }
                              }
                  }
                  if (ki->requires_grad) {
                      float* gk = ki->grad_buf();
                      for (int64_t co = 0; co < C; ++co)
                          for (int64_t ci = 0; ci < C; ++ci)
                              for (int dt = -1; dt <= 1; ++dt) {
                                  double acc = 0.0;
                                  for (int64_t b = 0; b < B; ++b)
                                      for (int64_t n = 0; n < N; ++n) {
                                          int64_t nn = n + dt;
                                          if (nn < 0 || nn >= N) continue;
                                          const float* gc = g + ((b * N + n) * C + co) * plane;
                                          const float* xc = px2 + ((b * N + nn) * C + ci) * plane;
                                          acc += dotf(gc, xc, plane);
                                      }
                                  gk[(co * C + ci) * 3 + (dt + 1)] += static_cast<float>(acc);
                              }
                  }
                  if (bi->requires_grad) {
                      float* gb = bi->grad_buf();
                      for (int64_t co = 0; co < C; ++co) {
                          double acc = 0.0;
                          for (int64_t b = 0; b < B; ++b)
                              for (int64_t n = 0; n < N; ++n) {
                                  const float* gc = g + ((b * N + n) * C + co) * plane;
                                  for (int64_t i = 0; i < plane; ++i) acc += gc[i];
                              }
                          gb[co] += static_cast<float>(acc);
                      }
                  }
              });
    return out;
}

Tensor add_bias_bc(const Tensor& x, const Tensor& bias) {
    check(x.rank() == 5, "add_bias_bc: input must be [B, N, C, H, W]");
    check(bias.rank() == 2, "add_bias_bc: bias must be [B, C]");
    int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2), plane = x.dim(3) * x.dim(4);
    check(bias.dim(0) == B && bias.dim(1) == C, "add_bias_bc: bias dims mismatch");
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    const float* pb = bias.data();
    float* po = out.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                float bv = pb[b * C + c];
                const float* xc = px + ((b * N + n) * C + c) * plane;
                float* oc = po + ((b * N + n) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) oc[i] = xc[i] + bv;
            }
    wire_node(out, {x, bias}, [xi = x.impl(), bi = bias.impl(), oi = out.impl(), B, N, C, plane]() {
        const float* g = oi->grad.data();
        if (xi->requires_grad) {
            float* gx = xi->grad_buf();
            for (size_t i = 0; i < oi->grad.size(); ++i) gx[i] += g[i];
        }
        if (bi->requires_grad) {
            float* gb = bi->grad_buf();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < N; ++n) {
                        const float* gc = g + ((b * N + n) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) acc += gc[i];
                    }
                    gb[b * C + c] += static_cast<float>(acc);
                }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Attention core

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, int heads, int q_per_kv) {
    check(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention_core: inputs must be rank 3");
    int64_t Bq = q.dim(0), Tq = q.dim(1), C = q.dim(2);
    int64_t Bkv = k.dim(0), Tk = k.dim(1);
    check(k.shape() == v.shape(), "attention_core: k/v shapes differ");
    check(k.dim(2) == C, "attention_core: channel mismatch");
    check(C % heads == 0, "attention_core: channels not divisible by heads");
    check(q_per_kv >= 1 && Bq == Bkv * q_per_kv, "attention_core: batch mismatch");
    int64_t d = C / heads;
    float sc = 1.0f / std::sqrt(static_cast<float>(d));

    Tensor out = Tensor::zeros(q.shape());
    const float* pq = q.data();
    const float* pk = k.data();
    const float* pv = v.data();
    float* po = out.data();

    // Per-(batch, head) transposed K/V so the hot loops run over Tk.
    std::vector<float> kt(static_cast<size_t>(d * Tk)), vt(static_cast<size_t>(d * Tk));
    std::vector<float> row(static_cast<size_t>(Tk));
    for (int64_t bkv = 0; bkv < Bkv; ++bkv) {
        const float* kb = pk + bkv * Tk * C;
        const float* vb = pv + bkv * Tk * C;
        for (int h = 0; h < heads; ++h) {
            int64_t hd = static_cast<int64_t>(h) * d;
            for (int64_t t = 0; t < d; ++t)
                for (int64_t j = 0; j < Tk; ++j) {
                    kt[static_cast<size_t>(t * Tk + j)] = kb[j * C + hd + t];
                    vt[static_cast<size_t>(t * Tk + j)] = vb[j * C + hd + t];
                }
            for (int64_t sub = 0; sub < q_per_kv; ++sub) {
                int64_t bq = bkv * q_per_kv + sub;
                const float* qb = pq + bq * Tq * C;
                float* ob = po + bq * Tq * C;
                for (int64_t i = 0; i < Tq; ++i) {
                    const float* qi = qb + i * C + hd;
                    std::fill(row.begin(), row.end(), 0.0f);
                    for (int64_t t = 0; t < d; ++t) {
                        float qv = qi[t];
                        const float* kr = kt.data() + t * Tk;
                        for (int64_t j = 0; j < Tk; ++j) row[static_cast<size_t>(j)] += qv * kr[j];
                    }
                    float m = -1e30f;
                    for (int64_t j = 0; j < Tk; ++j) {
                        row[static_cast<size_t>(j)] *= sc;
                        m = std::max(m, row[static_cast<size_t>(j)]);
                    }
                    for (int64_t j = 0; j < Tk; ++j)
                        row[static_cast<size_t>(j)] = fast_expf(row[static_cast<size_t>(j)] - m);
                    float inv = static_cast<float>(1.0 / sumd(row.data(), Tk));
                    for (int64_t j = 0; j < Tk; ++j) row[static_cast<size_t>(j)] *= inv;
                    float* oi2 = ob + i * C + hd;
                    for (int64_t t = 0; t < d; ++t)
                        oi2[t] = dotf(row.data(), vt.data() + t * Tk, Tk);
                }
            }
        }
    }

    wire_node(out, {q, k, v},
              [qi2 = q.impl(), ki2 = k.impl(), vi2 = v.impl(), oi = out.impl(), Bkv, Tq, Tk, C, heads,
               d, sc, q_per_kv]() {
                  const float* g = oi->grad.data();
                  const float* pq2 = qi2->data.data();
                  const float* pk2 = ki2->data.data();
                  const float* pv2 = vi2->data.data();
                  float* gq = qi2->requires_grad ? qi2->grad_buf() : nullptr;
                  float* gk = ki2->requires_grad ? ki2->grad_buf() : nullptr;
                  float* gv = vi2->requires_grad ? vi2->grad_buf() : nullptr;
                  std::vector<float> kt(static_cast<size_t>(d * Tk)), vt(static_cast<size_t>(d * Tk));
                  std::vector<float> dkt(static_cast<size_t>(d * Tk)), dvt(static_cast<size_t>(d * Tk));
                  std::vector<float> arow(static_cast<size_t>(Tk)), da(static_cast<size_t>(Tk)),
                      ds(static_cast<size_t>(Tk));
                  for (int64_t bkv = 0; bkv < Bkv; ++bkv) {
                      const float* kb = pk2 + bkv * Tk * C;
                      const float* vb = pv2 + bkv * Tk * C;
                      for (int h = 0; h < heads; ++h) {
                          int64_t hd = static_cast<int64_t>(h) * d;
                          for (int64_t t = 0; t < d; ++t)
                              for (int64_t j = 0; j < Tk; ++j) {
                                  kt[static_cast<size_t>(t * Tk + j)] = kb[j * C + hd + t];
                                  vt[static_cast<size_t>(t * Tk + j)] = vb[j * C + hd + t];
                              }
                          std::fill(dkt.begin(), dkt.end(), 0.0f);
                          std::fill(dvt.begin(), dvt.end(), 0.0f);
                          for (int64_t sub = 0; sub < q_per_kv; ++sub) {
                              int64_t bq = bkv * q_per_kv + sub;
                              const float* qb = pq2 + bq * Tq * C;
                              const float* gb = g + bq * Tq * C;
                              for (int64_t i = 0; i < Tq; ++i) {
                                  const float* qi = qb + i * C + hd;
                                  // Recompute the softmax row.
                                  std::fill(arow.begin(), arow.end(), 0.0f);
                                  for (int64_t t = 0; t < d; ++t) {
                                      float qv = qi[t];
                                      const float* kr = kt.data() + t * Tk;
                                      for (int64_t j = 0; j < Tk; ++j)
                                          arow[static_cast<size_t>(j)] += qv * kr[j];
                                  }
                                  float m = -1e30f;
                                  for (int64_t j = 0; j < Tk; ++j) {
                                      arow[static_cast<size_t>(j)] *= sc;
                                      m = std::max(m, arow[static_cast<size_t>(j)]);
                                  }
                                  for (int64_t j = 0; j < Tk; ++j)
                                      arow[static_cast<size_t>(j)] =
                                          fast_expf(arow[static_cast<size_t>(j)] - m);
                                  float inv = static_cast<float>(1.0 / sumd(arow.data(), Tk));
                                  for (int64_t j = 0; j < Tk; ++j) arow[static_cast<size_t>(j)] *= inv;

                                  const float* gi = gb + i * C + hd;
                                  std::fill(da.begin(), da.end(), 0.0f);
                                  for (int64_t t = 0; t < d; ++t) {
                                      float gvv = gi[t];
                                      const float* vr = vt.data() + t * Tk;
                                      for (int64_t j = 0; j < Tk; ++j)
                                          da[static_cast<size_t>(j)] += gvv * vr[j];
                                  }
                                  double dot = 0.0;
                                  for (int64_t j = 0; j < Tk; ++j)
                                      dot += static_cast<double>(da[static_cast<size_t>(j)]) *
                                             arow[static_cast<size_t>(j)];
                                  float dsum = static_cast<float>(dot);
                                  for (int64_t j = 0; j < Tk; ++j)
                                      ds[static_cast<size_t>(j)] =
                                          arow[static_cast<size_t>(j)] *
                                          (da[static_cast<size_t>(j)] - dsum) * sc;
                                  if (gq) {
                                      float* gqi = gq + bq * Tq * C + i * C + hd;
                                      for (int64_t t = 0; t < d; ++t)
                                          gqi[t] += dotf(ds.data(), kt.data() + t * Tk, Tk);
                                  }
                                  if (gk) {
                                      for (int64_t t = 0; t < d; ++t) {
                                          float qv = qi[t];
                                          float* dkr = dkt.data() + t * Tk;
                                          for (int64_t j = 0; j < Tk; ++j)
                                              dkr[j] += qv * ds[static_cast<size_t>(j)];
                                      }
                                  }
                                  if (gv) {
                                      for (int64_t t = 0; t < d; ++t) {
                                          float gvv = gi[t];
                                          float* dvr = dvt.data() + t * Tk;
                                          for (int64_t j = 0; j < Tk; ++j)
                                              dvr[j] += gvv * arow[static_cast<size_t>(j)];
                                      }
                                  }
                              }
                          }
                          if (gk) {
                              float* gkb = gk + bkv * Tk * C;
                              for (int64_t t = 0; t < d; ++t)
                                  for (int64_t j = 0; j < Tk; ++j)
                                      gkb[j * C + hd + t] += dkt[static_cast<size_t>(t * Tk + j)];
                          }
                          if (gv) {
                              float* gvb = gv + bkv * Tk * C;
                              for (int64_t t = 0; t < d; ++t)
                                  for (int64_t j = 0; j < Tk; ++j)
                                      gvb[j * C + hd + t] += dvt[static_cast<size_t>(t * Tk + j)];
                          }
                      }
                  }
              });
    return out;
}

// ---------------------------------------------------------------------------
// Embedding

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    check(table.rank() == 2, "embedding: table must be [V, C]");
    int64_t V = table.dim(0), C = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= V)
            throw InputError("embedding: token id " + std::to_string(id) + " out of range [0," +
                             std::to_string(V) + ")");
    Tensor out = Tensor::zeros({static_cast<int64_t>(ids.size()), C});
    const float* pt = table.data();
    float* po = out.data();
    for (size_t i = 0; i < ids.size(); ++i)
        std::memcpy(po + static_cast<int64_t>(i) * C, pt + static_cast<int64_t>(ids[i]) * C,
                    static_cast<size_t>(C) * sizeof(float));
    std::vector<int> ids_copy(ids.begin(), ids.end());
    wire_node(out, {table}, [ti = table.impl(), oi = out.impl(), ids_copy = std::move(ids_copy), C]() {
        if (!ti->requires_grad) return;
        float* gt = ti->grad_buf();
        const float* g = oi->grad.data();
        for (size_t i = 0; i < ids_copy.size(); ++i) {
            float* dst = gt + static_cast<int64_t>(ids_copy[i]) * C;
            const float* src = g + static_cast<int64_t>(i) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

namespace {
Tensor make_scalar_f64(double v) {
    Tensor t = Tensor::scalar(static_cast<float>(v));
    t.impl()->has_scalar_f64 = true;
    t.impl()->scalar_f64 = v;
    return t;
}
}  // namespace

Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    const float* px = x.data();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = make_scalar_f64(acc);
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), n]() {
        if (!xi->requires_grad) return;
        float g = oi->grad[0];
        float* gx = xi->grad_buf();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

Tensor mean_all(const Tensor& x) {
    int64_t n = x.numel();
    double acc = 0.0;
    const float* px = x.data();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor out = make_scalar_f64(acc / static_cast<double>(n));
    wire_node(out, {x}, [xi = x.impl(), oi = out.impl(), n]() {
        if (!xi->requires_grad) return;
        float g = oi->grad[0] / static_cast<float>(n);
        float* gx = xi->grad_buf();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
    return out;
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse_loss");
    int64_t n = pred.numel();
    const float* pp = pred.data();
    const float* pt = target.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(pp[i]) - pt[i];
        acc += d * d;
    }
    Tensor out = make_scalar_f64(acc / static_cast<double>(n));
    wire_node(out, {pred, target}, [pi = pred.impl(), ti = target.impl(), oi = out.impl(), n]() {
        float g = oi->grad[0] * 2.0f / static_cast<float>(n);
        const float* pp2 = pi->data.data();
        const float* pt2 = ti->data.data();
        if (pi->requires_grad) {
            float* gp = pi->grad_buf();
            for (int64_t i = 0; i < n; ++i) gp[i] += g * (pp2[i] - pt2[i]);
        }
        if (ti->requires_grad) {
            float* gt = ti->grad_buf();
            for (int64_t i = 0; i < n; ++i) gt[i] -= g * (pp2[i] - pt2[i]);
        }
    });
    return out;
}

Tensor masked_frame_mse(const Tensor& pred, const Tensor& target, const Tensor& frame_weight) {
    check_same_shape(pred, target, "masked_frame_mse");
    check(pred.rank() == 5, "masked_frame_mse: inputs must be [B, N, C, H, W]");
    int64_t B = pred.dim(0), N = pred.dim(1);
    check(frame_weight.rank() == 2 && frame_weight.dim(0) == B && frame_weight.dim(1) == N,
          "masked_frame_mse: frame_weight must be [B, N]");
    int64_t frame = pred.numel() / (B * N);
    const float* pp = pred.data();
    const float* pt = target.data();
    const float* pw = frame_weight.data();
    double acc = 0.0;
    int64_t count = 0;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
            if (pw[b * N + n] == 0.0f) continue;
            const float* fp = pp + (b * N + n) * frame;
            const float* ft = pt + (b * N + n) * frame;
            for (int64_t i = 0; i < frame; ++i) {
                double d = static_cast<double>(fp[i]) - ft[i];
                acc += d * d;
            }
            count += frame;
        }
    check(count > 0, "masked_frame_mse: no frames selected");
    Tensor out = make_scalar_f64(acc / static_cast<double>(count));
    wire_node(out, {pred, target},
              [pi = pred.impl(), ti = target.impl(), wi = frame_weight.impl(), oi = out.impl(), B, N,
               frame, count]() {
                  float g = oi->grad[0] * 2.0f / static_cast<float>(count);
                  const float* pp2 = pi->data.data();
                  const float* pt2 = ti->data.data();
                  const float* pw2 = wi->data.data();
                  for (int64_t b = 0; b < B; ++b)
                      for (int64_t n = 0; n < N; ++n) {
                          if (pw2[b * N + n] == 0.0f) continue;
                          int64_t off = (b * N + n) * frame;
                          if (pi->requires_grad) {
                              float* gp = pi->grad_buf();
                              for (int64_t i = 0; i < frame; ++i)
                                  gp[off + i] += g * (pp2[off + i] - pt2[off + i]);
                          }
                          if (ti->requires_grad) {
                              float* gt = ti->grad_buf();
                              for (int64_t i = 0; i < frame; ++i)
                                  gt[off + i] -= g * (pp2[off + i] - pt2[off + i]);
                          }
                      }
              });
    return out;
}

}  // namespace mvb
