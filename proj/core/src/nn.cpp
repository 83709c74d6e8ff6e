#include "coattn/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "coattn/parallel.hpp"

namespace coattn {

int64_t conv_extent(int64_t in, int64_t k, int64_t s, int64_t p) {
    return (in + 2 * p - k) / s + 1;
}

// ---- conv3d ----

namespace {

struct ConvDims {
    int64_t B, T, H, W, Ci;
    int64_t kt, kh, kw, st, sh, sw, pt, ph, pw;
    int64_t To, Ho, Wo, Co;
};

ConvDims conv_dims(const Tensor& x, const Conv3dSpec& spec, const Tensor& w, const Tensor& b) {
    if (x.rank() != 5) throw ShapeMismatch("conv3d input must be [B,T,H,W,C], got " + shape_str(x.shape));
    if (w.rank() != 5) throw ShapeMismatch("conv3d weights must be [kt,kh,kw,Cin,Cout]");
    ConvDims d;
    d.B = x.shape[0];
    d.T = x.shape[1];
    d.H = x.shape[2];
    d.W = x.shape[3];
    d.Ci = x.shape[4];
    d.kt = spec.kernel[0];
    d.kh = spec.kernel[1];
    d.kw = spec.kernel[2];
    d.st = spec.stride[0];
    d.sh = spec.stride[1];
    d.sw = spec.stride[2];
    d.pt = spec.padding[0];
    d.ph = spec.padding[1];
    d.pw = spec.padding[2];
    d.Co = spec.out_channels;
    if (w.shape != Shape{d.kt, d.kh, d.kw, d.Ci, d.Co})
        throw ShapeMismatch("conv3d weight shape " + shape_str(w.shape) + " vs expected [" +
                            std::to_string(d.kt) + "," + std::to_string(d.kh) + "," +
                            std::to_string(d.kw) + "," + std::to_string(d.Ci) + "," +
                            std::to_string(d.Co) + "]");
    if (spec.has_bias && b.shape != Shape{d.Co})
        throw ShapeMismatch("conv3d bias shape " + shape_str(b.shape));
    d.To = conv_extent(d.T, d.kt, d.st, d.pt);
    d.Ho = conv_extent(d.H, d.kh, d.sh, d.ph);
    d.Wo = conv_extent(d.W, d.kw, d.sw, d.pw);
    if (d.To < 1 || d.Ho < 1 || d.Wo < 1)
        throw EmptyOutput("conv3d output extent < 1 for input " + shape_str(x.shape));
    return d;
}

} // namespace

Tensor conv3d(const Tensor& x, const Conv3dSpec& spec, const Tensor& weights, const Tensor& bias) {
    ConvDims d = conv_dims(x, spec, weights, bias);
    Tensor out = zeros({d.B, d.To, d.Ho, d.Wo, d.Co});

    const double* xp = x.ptr();
    const double* wp = weights.ptr();
    const double* bp = spec.has_bias ? bias.ptr() : nullptr;
    double* op = out.ptr();
    const int64_t xsT = d.H * d.W * d.Ci, xsH = d.W * d.Ci, xsW = d.Ci;
    const int64_t wsTap = d.Ci * d.Co;

    const int64_t conv_work =
        d.B * d.To * d.Ho * d.Wo * d.kt * d.kh * d.kw * d.Ci * d.Co;
    parallel_for(d.B * d.To, conv_work, [&](int64_t lo, int64_t hi) {
        for (int64_t bt = lo; bt < hi; ++bt) {
            int64_t b = bt / d.To, to = bt % d.To;
            const double* xb = xp + b * d.T * xsT;
            for (int64_t ho = 0; ho < d.Ho; ++ho) {
                for (int64_t wo = 0; wo < d.Wo; ++wo) {
                    double* acc = op + (((b * d.To + to) * d.Ho + ho) * d.Wo + wo) * d.Co;
                    if (bp)
                        std::memcpy(acc, bp, sizeof(double) * d.Co);
                    for (int64_t dt = 0; dt < d.kt; ++dt) {
                        int64_t ti = to * d.st + dt - d.pt;
                        if (ti < 0 || ti >= d.T) continue;
                        for (int64_t dh = 0; dh < d.kh; ++dh) {
                            int64_t hi2 = ho * d.sh + dh - d.ph;
                            if (hi2 < 0 || hi2 >= d.H) continue;
                            for (int64_t dw = 0; dw < d.kw; ++dw) {
                                int64_t wi = wo * d.sw + dw - d.pw;
                                if (wi < 0 || wi >= d.W) continue;
                                const double* xrow = xb + ti * xsT + hi2 * xsH + wi * xsW;
                                const double* wtap = wp + ((dt * d.kh + dh) * d.kw + dw) * wsTap;
                                for (int64_t ci = 0; ci < d.Ci; ++ci) {
                                    double xv = xrow[ci];
                                    const double* wrow = wtap + ci * d.Co;
                                    for (int64_t co = 0; co < d.Co; ++co) acc[co] += xv * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    {
        Tape* t = Tape::active();
        bool any = false;
        if (t)
            for (const Tensor* in : {&x, &weights, &bias}) {
                if (!in->data) continue;
                if (in->requires_grad ||
                    (in->tape == t && in->node >= 0 && t->needs_grad(in->node)))
                    any = true;
            }
        if (t && any) {
            int nx = t->bind(x);
            int nw = t->bind(weights);
            int nb = spec.has_bias ? t->bind(bias) : -1;
            int nc = t->add_result(out, true);
            auto xdata = x.data;
            auto wdata = weights.data;
            t->record([=](Tape& tt) {
                const std::vector<double>& gout = tt.grad_buf(nc);
                const double* gp = gout.data();
                // dx: partitioned by batch, race-free
                if (tt.needs_grad(nx)) {
                    std::vector<double>& gx = tt.grad_buf(nx);
                    double* gxp = gx.data();
                    const double* wv = wdata->data();
                    parallel_for(d.B, conv_work, [&](int64_t blo, int64_t bhi) {
                        for (int64_t b = blo; b < bhi; ++b)
                            for (int64_t to = 0; to < d.To; ++to)
                                for (int64_t ho = 0; ho < d.Ho; ++ho)
                                    for (int64_t wo = 0; wo < d.Wo; ++wo) {
                                        const double* g =
                                            gp + (((b * d.To + to) * d.Ho + ho) * d.Wo + wo) * d.Co;
                                        for (int64_t dt = 0; dt < d.kt; ++dt) {
                                            int64_t ti = to * d.st + dt - d.pt;
                                            if (ti < 0 || ti >= d.T) continue;
                                            for (int64_t dh = 0; dh < d.kh; ++dh) {
                                                int64_t hi2 = ho * d.sh + dh - d.ph;
                                                if (hi2 < 0 || hi2 >= d.H) continue;
                                                for (int64_t dw = 0; dw < d.kw; ++dw) {
                                                    int64_t wi = wo * d.sw + dw - d.pw;
                                                    if (wi < 0 || wi >= d.W) continue;
                                                    double* gxrow =
                                                        gxp + ((b * d.T + ti) * d.H + hi2) * d.W * d.Ci +
                                                        wi * d.Ci;
                                                    const double* wtap =
                                                        wv + ((dt * d.kh + dh) * d.kw + dw) * wsTap;
                                                    for (int64_t ci = 0; ci < d.Ci; ++ci) {
                                                        const double* wrow = wtap + ci * d.Co;
                                                        double acc = 0.0;
                                                        for (int64_t co = 0; co < d.Co; ++co)
                                                            acc += g[co] * wrow[co];
                                                        gxrow[ci] += acc;
                                                    }
                                                }
                                            }
                                        }
                                    }
                    });
                }
                // dw/db: per-chunk partials over batch, reduced in chunk order
                bool want_w = tt.needs_grad(nw);
                bool want_b = nb >= 0 && tt.needs_grad(nb);
                if (want_w || want_b) {
                    int chunks = parallel_chunk_count(d.B, conv_work);
                    int64_t wn = d.kt * d.kh * d.kw * d.Ci * d.Co;
                    std::vector<std::vector<double>> pw(chunks), pb(chunks);
                    for (int c = 0; c < chunks; ++c) {
                        if (want_w) pw[c].assign(wn, 0.0);
                        if (want_b) pb[c].assign(d.Co, 0.0);
                    }
                    const double* xv = xdata->data();
                    parallel_for_indexed(d.B, conv_work, [&](int chunk, int64_t blo, int64_t bhi) {
                        double* pwc = want_w ? pw[chunk].data() : nullptr;
                        double* pbc = want_b ? pb[chunk].data() : nullptr;
                        for (int64_t b = blo; b < bhi; ++b)
                            for (int64_t to = 0; to < d.To; ++to)
                                for (int64_t ho = 0; ho < d.Ho; ++ho)
                                    for (int64_t wo = 0; wo < d.Wo; ++wo) {
                                        const double* g =
                                            gp + (((b * d.To + to) * d.Ho + ho) * d.Wo + wo) * d.Co;
                                        if (pbc)
                                            for (int64_t co = 0; co < d.Co; ++co) pbc[co] += g[co];
                                        if (!pwc) continue;
                                        for (int64_t dt = 0; dt < d.kt; ++dt) {
                                            int64_t ti = to * d.st + dt - d.pt;
                                            if (ti < 0 || ti >= d.T) continue;
                                            for (int64_t dh = 0; dh < d.kh; ++dh) {
                                                int64_t hi2 = ho * d.sh + dh - d.ph;
                                                if (hi2 < 0 || hi2 >= d.H) continue;
                                                for (int64_t dw = 0; dw < d.kw; ++dw) {
                                                    int64_t wi = wo * d.sw + dw - d.pw;
                                                    if (wi < 0 || wi >= d.W) continue;
                                                    const double* xrow =
                                                        xv + ((b * d.T + ti) * d.H + hi2) * d.W * d.Ci +
                                                        wi * d.Ci;
                                                    double* wtap =
                                                        pwc + ((dt * d.kh + dh) * d.kw + dw) * wsTap;
                                                    for (int64_t ci = 0; ci < d.Ci; ++ci) {
                                                        double xvv = xrow[ci];
                                                        double* wrow = wtap + ci * d.Co;
                                                        for (int64_t co = 0; co < d.Co; ++co)
                                                            wrow[co] += xvv * g[co];
                                                    }
                                                }
                                            }
                                        }
                                    }
                    });
                    if (want_w) {
                        std::vector<double>& gw = tt.grad_buf(nw);
                        for (int c = 0; c < chunks; ++c)
                            for (int64_t i = 0; i < wn; ++i) gw[i] += pw[c][i];
                    }
                    if (want_b) {
                        std::vector<double>& gb = tt.grad_buf(nb);
                        for (int c = 0; c < chunks; ++c)
                            for (int64_t i = 0; i < d.Co; ++i) gb[i] += pb[c][i];
                    }
                }
            });
        }
    }
    return out;
}

Tensor avgpool3d(const Tensor& x, const std::array<int64_t, 3>& window,
                 const std::array<int64_t, 3>& stride) {
    if (x.rank() != 5) throw ShapeMismatch("avgpool3d input must be [B,T,H,W,C]");
    int64_t B = x.shape[0], T = x.shape[1], H = x.shape[2], W = x.shape[3], C = x.shape[4];
    int64_t kt = window[0], kh = window[1], kw = window[2];
    int64_t st = stride[0], sh = stride[1], sw = stride[2];
    int64_t To = conv_extent(T, kt, st, 0), Ho = conv_extent(H, kh, sh, 0),
            Wo = conv_extent(W, kw, sw, 0);
    if (To < 1 || Ho < 1 || Wo < 1) throw EmptyOutput("avgpool3d window does not fit");
    Tensor out = zeros({B, To, Ho, Wo, C});

    const double* xp = x.ptr();
    double* op = out.ptr();
    double inv = 1.0 / static_cast<double>(kt * kh * kw);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t to = 0; to < To; ++to)
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    double* acc = op + (((b * To + to) * Ho + ho) * Wo + wo) * C;
                    for (int64_t dt = 0; dt < kt; ++dt)
                        for (int64_t dh = 0; dh < kh; ++dh)
                            for (int64_t dw = 0; dw < kw; ++dw) {
                                const double* xrow =
                                    xp + (((b * T + to * st + dt) * H + ho * sh + dh) * W +
                                          wo * sw + dw) *
                                             C;
                                for (int64_t c = 0; c < C; ++c) acc[c] += xrow[c];
                            }
                    for (int64_t c = 0; c < C; ++c) acc[c] *= inv;
                }

    std::vector<int> ids;
    Tape* tp = Tape::active();
    if (tp && (x.requires_grad || (x.tape == tp && x.node >= 0 && tp->needs_grad(x.node)))) {
        int nx = tp->bind(x);
        int nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t b = 0; b < B; ++b)
                for (int64_t to = 0; to < To; ++to)
                    for (int64_t ho = 0; ho < Ho; ++ho)
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const double* g = gc.data() + (((b * To + to) * Ho + ho) * Wo + wo) * C;
                            for (int64_t dt = 0; dt < kt; ++dt)
                                for (int64_t dh = 0; dh < kh; ++dh)
                                    for (int64_t dw = 0; dw < kw; ++dw) {
                                        double* gxr =
                                            gx.data() +
                                            (((b * T + to * st + dt) * H + ho * sh + dh) * W +
                                             wo * sw + dw) *
                                                C;
                                        for (int64_t c = 0; c < C; ++c) gxr[c] += g[c] * inv;
                                    }
                        }
        });
    }
    return out;
}

// ---- linear ----

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1)
        throw ShapeMismatch("linear expects x [..,in], w [in,out], b [out]");
    int64_t in = w.shape[0], out_dim = w.shape[1];
    if (x.shape[x.rank() - 1] != in)
        throw ShapeMismatch("linear input width " + std::to_string(x.shape[x.rank() - 1]) +
                            " vs w " + shape_str(w.shape));
    if (b.shape[0] != out_dim) throw ShapeMismatch("linear bias width");
    int64_t rows = x.numel() / in;

    Shape out_shape = x.shape;
    out_shape[out_shape.size() - 1] = out_dim;
    Tensor out = zeros(out_shape);

    const double* xp = x.ptr();
    const double* wp = w.ptr();
    const double* bp = b.ptr();
    double* op = out.ptr();
    parallel_for(rows, rows * in * out_dim, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            double* orow = op + i * out_dim;
            std::memcpy(orow, bp, sizeof(double) * out_dim);
            const double* xrow = xp + i * in;
            for (int64_t k = 0; k < in; ++k) {
                double xv = xrow[k];
                const double* wrow = wp + k * out_dim;
                for (int64_t j = 0; j < out_dim; ++j) orow[j] += xv * wrow[j];
            }
        }
    });

    Tape* tp = Tape::active();
    bool any = false;
    if (tp)
        for (const Tensor* t : {&x, &w, &b})
            if (t->requires_grad || (t->tape == tp && t->node >= 0 && tp->needs_grad(t->node)))
                any = true;
    if (tp && any) {
        int nx = tp->bind(x), nw = tp->bind(w), nb = tp->bind(b);
        int nc = tp->add_result(out, true);
        auto xdata = x.data, wdata = w.data;
        tp->record([=](Tape& t) {
            const std::vector<double>& gc = t.grad_buf(nc);
            const double* gp = gc.data();
            if (t.needs_grad(nx)) {
                std::vector<double>& gx = t.grad_buf(nx);
                double* gxp = gx.data();
                const double* wv = wdata->data();
                parallel_for(rows, rows * in * out_dim, [&](int64_t lo, int64_t hi) {
                    for (int64_t i = lo; i < hi; ++i) {
                        const double* grow = gp + i * out_dim;
                        double* gxrow = gxp + i * in;
                        for (int64_t k = 0; k < in; ++k) {
                            const double* wrow = wv + k * out_dim;
                            double acc = 0.0;
                            for (int64_t j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                            gxrow[k] += acc;
                        }
                    }
                });
            }
            if (t.needs_grad(nw)) {
                std::vector<double>& gw = t.grad_buf(nw);
                const double* xv = xdata->data();
                for (int64_t i = 0; i < rows; ++i) {
                    const double* xrow = xv + i * in;
                    const double* grow = gp + i * out_dim;
                    for (int64_t k = 0; k < in; ++k) {
                        double xvv = xrow[k];
                        double* gwrow = gw.data() + k * out_dim;
                        for (int64_t j = 0; j < out_dim; ++j) gwrow[j] += xvv * grow[j];
                    }
                }
            }
            if (t.needs_grad(nb)) {
                std::vector<double>& gb = t.grad_buf(nb);
                for (int64_t i = 0; i < rows; ++i) {
                    const double* grow = gp + i * out_dim;
                    for (int64_t j = 0; j < out_dim; ++j) gb[j] += grow[j];
                }
            }
        });
    }
    return out;
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    int64_t d = x.shape.empty() ? 0 : x.shape[x.rank() - 1];
    if (d < 2) throw ShapeMismatch("layer_norm needs trailing dim >= 2");
    if (gamma.shape != Shape{d} || beta.shape != Shape{d})
        throw ShapeMismatch("layer_norm gamma/beta must be [d]");
    int64_t rows = x.numel() / d;

    Tensor out = zeros(x.shape);
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);

    const double* xp = x.ptr();
    const double* gp = gamma.ptr();
    const double* bp = beta.ptr();
    double* op = out.ptr();
    double invd = 1.0 / static_cast<double>(d);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xp + r * d;
        double mu = 0.0;
        for (int64_t i = 0; i < d; ++i) mu += xr[i];
        mu *= invd;
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) {
            double c = xr[i] - mu;
            var += c * c;
        }
        var *= invd;
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        double* hr = xhat->data() + r * d;
        double* orow = op + r * d;
        for (int64_t i = 0; i < d; ++i) {
            hr[i] = (xr[i] - mu) * is;
            orow[i] = gp[i] * hr[i] + bp[i];
        }
    }

    Tape* tp = Tape::active();
    bool any = false;
    if (tp)
        for (const Tensor* t : {&x, &gamma, &beta})
            if (t->requires_grad || (t->tape == tp && t->node >= 0 && tp->needs_grad(t->node)))
                any = true;
    if (tp && any) {
        int nx = tp->bind(x), ng = tp->bind(gamma), nb = tp->bind(beta);
        int nc = tp->add_result(out, true);
        auto gdata = gamma.data;
        tp->record([=](Tape& t) {
            const std::vector<double>& gy = t.grad_buf(nc);
            if (t.needs_grad(ng)) {
                std::vector<double>& gg = t.grad_buf(ng);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) gg[i] += gy[r * d + i] * (*xhat)[r * d + i];
            }
            if (t.needs_grad(nb)) {
                std::vector<double>& gb = t.grad_buf(nb);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t i = 0; i < d; ++i) gb[i] += gy[r * d + i];
            }
            if (t.needs_grad(nx)) {
                std::vector<double>& gx = t.grad_buf(nx);
                const double* gv = gdata->data();
                // dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                for (int64_t r = 0; r < rows; ++r) {
                    const double* gyr = gy.data() + r * d;
                    const double* hr = xhat->data() + r * d;
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t i = 0; i < d; ++i) {
                        double dxh = gyr[i] * gv[i];
                        m1 += dxh;
                        m2 += dxh * hr[i];
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double is = (*inv_std)[r];
                    double* gxr = gx.data() + r * d;
                    for (int64_t i = 0; i < d; ++i)
                        gxr[i] += is * (gyr[i] * gv[i] - m1 - hr[i] * m2);
                }
            }
        });
    }
    return out;
}

// ---- dropout ----

Tensor dropout(const Tensor& x, double p, Mode mode, std::mt19937_64& rng) {
    if (p < 0.0 || p >= 1.0) throw InvalidProbability("dropout p=" + std::to_string(p));
    if (mode == Mode::eval || p == 0.0) return x;

    int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<double>>(n);
    double keep_scale = 1.0 / (1.0 - p);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (int64_t i = 0; i < n; ++i) (*mask)[i] = dist(rng) < p ? 0.0 : keep_scale;

    Tensor out = zeros(x.shape);
    const double* xp = x.ptr();
    double* op = out.ptr();
    for (int64_t i = 0; i < n; ++i) op[i] = xp[i] * (*mask)[i];

    std::vector<int> dummy;
    Tape* tp = Tape::active();
    if (tp && (x.requires_grad || (x.tape == tp && x.node >= 0 && tp->needs_grad(x.node)))) {
        int nx = tp->bind(x);
        int nc = tp->add_result(out, true);
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nx)) return;
            const std::vector<double>& gc = t.grad_buf(nc);
            std::vector<double>& gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) gx[i] += gc[i] * (*mask)[i];
        });
    }
    return out;
}

// ---- cross entropy ----

Tensor cross_entropy_logits(const Tensor& logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2) throw ShapeMismatch("cross_entropy expects [B,C] logits");
    int64_t B = logits.shape[0], C = logits.shape[1];
    if (static_cast<int64_t>(labels.size()) != B)
        throw ShapeMismatch("label count " + std::to_string(labels.size()) + " vs batch " +
                            std::to_string(B));
    for (int64_t y : labels)
        if (y < 0 || y >= C) throw LabelOutOfRange("label " + std::to_string(y) + " for C=" + std::to_string(C));

    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const double* zp = logits.ptr();
    double loss_acc = 0.0;
    for (int64_t i = 0; i < B; ++i) {
        const double* zr = zp + i * C;
        double m = zr[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, zr[c]);
        double sum = 0.0;
        double* pr = probs->data() + i * C;
        for (int64_t c = 0; c < C; ++c) {
            pr[c] = std::exp(zr[c] - m);
            sum += pr[c];
        }
        for (int64_t c = 0; c < C; ++c) pr[c] /= sum;
        loss_acc += m + std::log(sum) - zr[labels[i]];
    }
    Tensor out = zeros(Shape{});
    (*out.data)[0] = loss_acc / static_cast<double>(B);

    std::vector<int> ids;
    Tape* tp = Tape::active();
    if (tp &&
        (logits.requires_grad ||
         (logits.tape == tp && logits.node >= 0 && tp->needs_grad(logits.node)))) {
        int nz = tp->bind(logits);
        int nc = tp->add_result(out, true);
        auto lab = labels;
        tp->record([=](Tape& t) {
            if (!t.needs_grad(nz)) return;
            double g = t.grad_buf(nc)[0] / static_cast<double>(B);
            std::vector<double>& gz = t.grad_buf(nz);
            for (int64_t i = 0; i < B; ++i)
                for (int64_t c = 0; c < C; ++c)
                    gz[i * C + c] += g * ((*probs)[i * C + c] - (c == lab[i] ? 1.0 : 0.0));
        });
    }
    return out;
}

// ---- parameters ----

Tensor& ParamRegistry::add(const std::string& name, Tensor t, bool decay) {
    for (const ParamEntry& e : entries_)
        if (e.name == name) throw Error("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    entries_.push_back(ParamEntry{name, std::move(t), decay});
    return entries_.back().tensor;
}

const ParamEntry* ParamRegistry::find(const std::string& name) const {
    for (const ParamEntry& e : entries_)
        if (e.name == name) return &e;
    return nullptr;
}

int64_t ParamRegistry::total_elements() const {
    int64_t n = 0;
    for (const ParamEntry& e : entries_) n += e.tensor.numel();
    return n;
}

void ParamRegistry::zero_grad() {
    for (ParamEntry& e : entries_) e.tensor.zero_grad();
}

Tensor he_normal(const Shape& shape, int64_t fan_in, std::mt19937_64& rng) {
    return randn(shape, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

Tensor xavier_uniform(const Shape& shape, int64_t fan_in, int64_t fan_out, std::mt19937_64& rng) {
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return rand_uniform(shape, rng, -limit, limit);
}

// ---- optimizer ----

void Optimizer::ensure_state(const ParamRegistry& params) {
    const auto& entries = params.entries();
    if (m1_.size() == entries.size()) {
        for (size_t i = 0; i < entries.size(); ++i)
            if (m1_[i].size() != entries[i].tensor.data->size())
                throw ShapeMismatch("optimizer state does not match parameter " + entries[i].name);
        return;
    }
    if (!m1_.empty()) throw ShapeMismatch("optimizer bound to a different parameter set");
    m1_.resize(entries.size());
    m2_.resize(entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        m1_[i].assign(entries[i].tensor.data->size(), 0.0);
        if (cfg_.kind == OptKind::adam) m2_[i].assign(entries[i].tensor.data->size(), 0.0);
    }
}

void Optimizer::step(ParamRegistry& params) {
    ensure_state(params);
    ++step_count_;
    auto& entries = params.entries();
    for (size_t pi = 0; pi < entries.size(); ++pi) {
        ParamEntry& e = entries[pi];
        if (!e.tensor.grad) throw ShapeMismatch("parameter " + e.name + " has no gradient");
        std::vector<double>& theta = *e.tensor.data;
        const std::vector<double>& g = *e.tensor.grad;
        double lambda = (e.decay || cfg_.decay_biases) ? cfg_.weight_decay : 0.0;
        int64_t n = static_cast<int64_t>(theta.size());
        if (cfg_.kind == OptKind::sgd_momentum) {
            std::vector<double>& v = m1_[pi];
            for (int64_t i = 0; i < n; ++i) {
                double geff = g[i] + lambda * theta[i];
                v[i] = cfg_.momentum * v[i] + geff;
                theta[i] -= cfg_.learning_rate * v[i];
            }
        } else {
            std::vector<double>& m = m1_[pi];
            std::vector<double>& v = m2_[pi];
            double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
            double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
            for (int64_t i = 0; i < n; ++i) {
                double geff = g[i] + lambda * theta[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * geff;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * geff * geff;
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                theta[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
            }
        }
    }
}

double grad_check_param(const std::function<Tensor()>& loss_fn, Tensor param, double eps) {
    if (!param.grad) throw DetachedGraph("grad_check_param needs a requires_grad parameter");
    param.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = loss_fn();
        if (y.numel() != 1) throw NotScalar("loss must be scalar");
        if (!std::isfinite(y.item())) throw NonFinite("loss is not finite");
        backward(y);
        analytic = *param.grad;
    }
    double max_err = 0.0;
    std::vector<double>& theta = *param.data;
    int64_t n = param.numel();
    for (int64_t i = 0; i < n; ++i) {
        double orig = theta[i];
        theta[i] = orig + eps;
        double fp = loss_fn().item();
        theta[i] = orig - eps;
        double fm = loss_fn().item();
        theta[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw NonFinite("loss not finite near theta");
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

} // namespace coattn
