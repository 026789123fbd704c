#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

// Raw-buffer compute kernels. Forward kernels are templated on the scalar
// type: the graph path runs them on float storage while numeric probing can
// run the same code on double buffers. Accumulation is always double.
namespace esegeta::detail {

// ---------------------------------------------------------------- conv2d ---

inline int conv_out_extent(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
}

template <typename S>
void conv2d_forward(const S* x, int B, int C, int H, int W,
                    const S* w, int O, int kh, int kw,
                    const S* bias, int stride, int pad,
                    S* y, int OH, int OW) {
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = bias ? static_cast<double>(bias[o]) : 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i) {
                            const int ih = oh * stride - pad + i;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int iw = ow * stride - pad + j;
                                if (iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(x[((static_cast<int64_t>(b) * C + c) * H + ih) * W + iw]) *
                                       static_cast<double>(w[((static_cast<int64_t>(o) * C + c) * kh + i) * kw + j]);
                            }
                        }
                    y[((static_cast<int64_t>(b) * O + o) * OH + oh) * OW + ow] = static_cast<S>(acc);
                }
}

inline void conv2d_backward(const float* gy, const float* x, const float* w,
                            int B, int C, int H, int W, int O, int kh, int kw,
                            int stride, int pad, int OH, int OW,
                            double* gx, double* gw, double* gb) {
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    const double g = gy[((static_cast<int64_t>(b) * O + o) * OH + oh) * OW + ow];
                    if (g == 0.0) continue;
                    if (gb) gb[o] += g;
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i) {
                            const int ih = oh * stride - pad + i;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int iw = ow * stride - pad + j;
                                if (iw < 0 || iw >= W) continue;
                                const int64_t xi = ((static_cast<int64_t>(b) * C + c) * H + ih) * W + iw;
                                const int64_t wi = ((static_cast<int64_t>(o) * C + c) * kh + i) * kw + j;
                                if (gx) gx[xi] += g * w[wi];
                                if (gw) gw[wi] += g * x[xi];
                            }
                        }
                }
}

// ---------------------------------------------------------------- conv3d ---

template <typename S>
void conv3d_forward(const S* x, int B, int C, int D, int H, int W,
                    const S* w, int O, int kd, int kh, int kw,
                    const S* bias, int stride, int pad,
                    S* y, int OD, int OH, int OW) {
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int od = 0; od < OD; ++od)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        double acc = bias ? static_cast<double>(bias[o]) : 0.0;
                        for (int c = 0; c < C; ++c)
                            for (int t = 0; t < kd; ++t) {
                                const int id = od * stride - pad + t;
                                if (id < 0 || id >= D) continue;
                                for (int i = 0; i < kh; ++i) {
                                    const int ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int j = 0; j < kw; ++j) {
                                        const int iw = ow * stride - pad + j;
                                        if (iw < 0 || iw >= W) continue;
                                        const int64_t xi =
                                            (((static_cast<int64_t>(b) * C + c) * D + id) * H + ih) * W + iw;
                                        const int64_t wi =
                                            (((static_cast<int64_t>(o) * C + c) * kd + t) * kh + i) * kw + j;
                                        acc += static_cast<double>(x[xi]) * static_cast<double>(w[wi]);
                                    }
                                }
                            }
                        y[(((static_cast<int64_t>(b) * O + o) * OD + od) * OH + oh) * OW + ow] =
                            static_cast<S>(acc);
                    }
}

inline void conv3d_backward(const float* gy, const float* x, const float* w,
                            int B, int C, int D, int H, int W, int O, int kd, int kh, int kw,
                            int stride, int pad, int OD, int OH, int OW,
                            double* gx, double* gw, double* gb) {
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o)
            for (int od = 0; od < OD; ++od)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        const double g =
                            gy[(((static_cast<int64_t>(b) * O + o) * OD + od) * OH + oh) * OW + ow];
                        if (g == 0.0) continue;
                        if (gb) gb[o] += g;
                        for (int c = 0; c < C; ++c)
                            for (int t = 0; t < kd; ++t) {
                                const int id = od * stride - pad + t;
                                if (id < 0 || id >= D) continue;
                                for (int i = 0; i < kh; ++i) {
                                    const int ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int j = 0; j < kw; ++j) {
                                        const int iw = ow * stride - pad + j;
                                        if (iw < 0 || iw >= W) continue;
                                        const int64_t xi =
                                            (((static_cast<int64_t>(b) * C + c) * D + id) * H + ih) * W + iw;
                                        const int64_t wi =
                                            (((static_cast<int64_t>(o) * C + c) * kd + t) * kh + i) * kw + j;
                                        if (gx) gx[xi] += g * w[wi];
                                        if (gw) gw[wi] += g * x[xi];
                                    }
                                }
                            }
                    }
}

// --------------------------------------------------------------- maxpool ---
// Works on [B, C, spatial...] with 2 or 3 spatial dims; ties resolve to the
// first maximal element in scan order and the winner index is recorded.

template <typename S>
void maxpool_forward(const S* x, int BC, const int* in_sp, const int* out_sp, int rank,
                     int window, int stride, S* y, int* argmax) {
    int64_t in_plane = 1, out_plane = 1;
    for (int r = 0; r < rank; ++r) {
        in_plane *= in_sp[r];
        out_plane *= out_sp[r];
    }
    std::vector<int> oc(rank, 0);
    for (int bc = 0; bc < BC; ++bc) {
        const S* xp = x + bc * in_plane;
        for (int64_t of = 0; of < out_plane; ++of) {
            int64_t rem = of;
            for (int r = rank - 1; r >= 0; --r) {
                oc[r] = static_cast<int>(rem % out_sp[r]);
                rem /= out_sp[r];
            }
            S best{};
            int64_t best_idx = -1;
            std::vector<int> kc(rank, 0);
            const int64_t win_cells = [&] {
                int64_t n = 1;
                for (int r = 0; r < rank; ++r) n *= window;
                return n;
            }();
            for (int64_t kf = 0; kf < win_cells; ++kf) {
                int64_t krem = kf;
                for (int r = rank - 1; r >= 0; --r) {
                    kc[r] = static_cast<int>(krem % window);
                    krem /= window;
                }
                int64_t flat = 0;
                bool ok = true;
                for (int r = 0; r < rank; ++r) {
                    const int pos = oc[r] * stride + kc[r];
                    if (pos >= in_sp[r]) {
                        ok = false;
                        break;
                    }
                    flat = flat * in_sp[r] + pos;
                }
                if (!ok) continue;
                if (best_idx < 0 || xp[flat] > best) {
                    best = xp[flat];
                    best_idx = flat;
                }
            }
            y[bc * out_plane + of] = best;
            if (argmax) argmax[bc * out_plane + of] = static_cast<int>(bc * in_plane + best_idx);
        }
    }
}

// -------------------------------------------------------------- upsample ---
// Integer factor, [B, C, spatial...]; nearest picks floor(o / f).

template <typename S>
void upsample_nearest_forward(const S* x, int BC, const int* in_sp, int rank, int factor, S* y) {
    int64_t in_plane = 1, out_plane = 1;
    std::vector<int> out_sp(rank);
    for (int r = 0; r < rank; ++r) {
        out_sp[r] = in_sp[r] * factor;
        in_plane *= in_sp[r];
        out_plane *= out_sp[r];
    }
    std::vector<int> oc(rank);
    for (int bc = 0; bc < BC; ++bc) {
        for (int64_t of = 0; of < out_plane; ++of) {
            int64_t rem = of;
            for (int r = rank - 1; r >= 0; --r) {
                oc[r] = static_cast<int>(rem % out_sp[r]);
                rem /= out_sp[r];
            }
            int64_t flat = 0;
            for (int r = 0; r < rank; ++r) flat = flat * in_sp[r] + oc[r] / factor;
            y[bc * out_plane + of] = x[bc * in_plane + flat];
        }
    }
}

// Linear interpolation with half-pixel centers: src = (o + 0.5)/f - 0.5,
// clamped at the borders (matches the usual align_corners=false convention).
// visit() receives (output flat offset within plane, input flat offset within
// plane, weight); shared by forward and backward.
template <typename Fn>
void upsample_linear_visit(const int* in_sp, int rank, int factor, Fn&& visit) {
    std::vector<int> out_sp(rank);
    int64_t out_plane = 1;
    for (int r = 0; r < rank; ++r) {
        out_sp[r] = in_sp[r] * factor;
        out_plane *= out_sp[r];
    }
    std::vector<int> oc(rank), lo(rank);
    std::vector<double> frac(rank);
    for (int64_t of = 0; of < out_plane; ++of) {
        int64_t rem = of;
        for (int r = rank - 1; r >= 0; --r) {
            oc[r] = static_cast<int>(rem % out_sp[r]);
            rem /= out_sp[r];
        }
        for (int r = 0; r < rank; ++r) {
            const double src = (oc[r] + 0.5) / factor - 0.5;
            double fl = std::floor(src);
            double fr = src - fl;
            int l = static_cast<int>(fl);
            if (l < 0) {
                l = 0;
                fr = 0.0;
            }
            if (l >= in_sp[r] - 1) {
                l = in_sp[r] - 1;
                fr = 0.0;
            }
            lo[r] = l;
            frac[r] = fr;
        }
        const int corners = 1 << rank;
        for (int m = 0; m < corners; ++m) {
            double wgt = 1.0;
            int64_t flat = 0;
            for (int r = 0; r < rank; ++r) {
                const bool hi = (m >> r) & 1;
                const int pos = std::min(lo[r] + (hi ? 1 : 0), in_sp[r] - 1);
                wgt *= hi ? frac[r] : 1.0 - frac[r];
                flat = flat * in_sp[r] + pos;
            }
            if (wgt != 0.0) visit(of, flat, wgt);
        }
    }
}

template <typename S>
void upsample_linear_forward(const S* x, int BC, const int* in_sp, int rank, int factor, S* y) {
    int64_t in_plane = 1, out_plane = 1;
    for (int r = 0; r < rank; ++r) {
        in_plane *= in_sp[r];
        out_plane *= static_cast<int64_t>(in_sp[r]) * factor;
    }
    std::vector<double> acc(static_cast<size_t>(out_plane));
    for (int bc = 0; bc < BC; ++bc) {
        std::fill(acc.begin(), acc.end(), 0.0);
        const S* xp = x + bc * in_plane;
        upsample_linear_visit(in_sp, rank, factor, [&](int64_t of, int64_t inf, double wgt) {
            acc[static_cast<size_t>(of)] += wgt * static_cast<double>(xp[inf]);
        });
        for (int64_t of = 0; of < out_plane; ++of)
            y[bc * out_plane + of] = static_cast<S>(acc[static_cast<size_t>(of)]);
    }
}

// ---------------------------------------------------------------- linear ---

template <typename S>
void linear_forward(const S* x, int B, int F, const S* w, int O, const S* bias, S* y) {
    for (int b = 0; b < B; ++b)
        for (int o = 0; o < O; ++o) {
            double acc = bias ? static_cast<double>(bias[o]) : 0.0;
            for (int f = 0; f < F; ++f)
                acc += static_cast<double>(x[static_cast<int64_t>(b) * F + f]) *
                       static_cast<double>(w[static_cast<int64_t>(o) * F + f]);
            y[static_cast<int64_t>(b) * O + o] = static_cast<S>(acc);
        }
}

// --------------------------------------------------------------- softmax ---
// Over the channel dimension of [B, C, spatial...].

template <typename S>
void softmax_forward(const S* x, int B, int C, int64_t plane, S* y) {
    std::vector<double> e(static_cast<size_t>(C));
    for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < plane; ++p) {
            double mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, static_cast<double>(x[(static_cast<int64_t>(b) * C + c) * plane + p]));
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                e[c] = std::exp(static_cast<double>(x[(static_cast<int64_t>(b) * C + c) * plane + p]) - mx);
                sum += e[c];
            }
            for (int c = 0; c < C; ++c)
                y[(static_cast<int64_t>(b) * C + c) * plane + p] = static_cast<S>(e[c] / sum);
        }
}

}  // namespace esegeta::detail
