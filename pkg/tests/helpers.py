"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (nested loops, explicit
padding arithmetic) on purpose: these functions must not share code paths
with the kernels they check.
"""

import math

import numpy as np


def same_pads(n, k, stride, dilation=1):
    eff = (k - 1) * dilation + 1
    out = math.ceil(n / stride)
    total = max((out - 1) * stride + eff - n, 0)
    return out, total // 2


def conv2d_loops(x, w, b=None, stride=1, dilation=1):
    """Six-nested-loop same-padded convolution."""
    n, cin, h, w_ = x.shape
    cout, _, kh, kw = w.shape
    oh, pt = same_pads(h, kh, stride, dilation)
    ow, pl = same_pads(w_, kw, stride, dilation)
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                hh = i * stride + u * dilation - pt
                                ww = j * stride + v * dilation - pl
                                if 0 <= hh < h and 0 <= ww < w_:
                                    acc += x[ni, ci, hh, ww] * w[co, ci, u, v]
                    out[ni, co, i, j] = acc + (b[co] if b is not None else 0.0)
    return out


def depthwise_loops(x, w, stride=1):
    n, c, h, w_ = x.shape
    _, _, kh, kw = w.shape
    oh, pt = same_pads(h, kh, stride)
    ow, pl = same_pads(w_, kw, stride)
    out = np.zeros((n, c, oh, ow))
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for u in range(kh):
                        for v in range(kw):
                            hh = i * stride + u - pt
                            ww = j * stride + v - pl
                            if 0 <= hh < h and 0 <= ww < w_:
                                acc += x[ni, ci, hh, ww] * w[ci, 0, u, v]
                    out[ni, ci, i, j] = acc
    return out


def conv_transpose_zero_insertion(y, w, stride):
    """Insert stride-1 zeros between samples, then correlate with the
    flipped kernel at the offsets implied by the adjoint definition."""
    n, cout, h, w_ = y.shape
    _, cin, kh, kw = w.shape
    out_h, out_w = stride * h, stride * w_
    _, pt = same_pads(out_h, kh, stride)
    _, pl = same_pads(out_w, kw, stride)
    out = np.zeros((n, cin, out_h, out_w))
    for ni in range(n):
        for ci in range(cin):
            for i in range(h):
                for j in range(w_):
                    for co in range(cout):
                        for u in range(kh):
                            for v in range(kw):
                                hh = i * stride + u - pt
                                ww = j * stride + v - pl
                                if 0 <= hh < out_h and 0 <= ww < out_w:
                                    out[ni, ci, hh, ww] += (
                                        y[ni, co, i, j] * w[co, ci, u, v]
                                    )
    return out


def avgpool3_loops(x):
    n, c, h, w_ = x.shape
    out = np.zeros_like(x)
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w_):
                    acc, cnt = 0.0, 0
                    for du in (-1, 0, 1):
                        for dv in (-1, 0, 1):
                            if 0 <= i + du < h and 0 <= j + dv < w_:
                                acc += x[ni, ci, i + du, j + dv]
                                cnt += 1
                    out[ni, ci, i, j] = acc / cnt
    return out


def bilinear_loops(x, out_h, out_w):
    n, c, h, w_ = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        ty = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w_ / out_w - 0.5, 0.0), w_ - 1.0)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w_ - 1)
            tx = sx - x0
            out[:, :, i, j] = (
                (1 - ty) * (1 - tx) * x[:, :, y0, x0]
                + (1 - ty) * tx * x[:, :, y0, x1]
                + ty * (1 - tx) * x[:, :, y1, x0]
                + ty * tx * x[:, :, y1, x1]
            )
    return out


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of a scalar-valued f over every entry."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        keep = flat[k]
        flat[k] = keep + h
        fp = f()
        flat[k] = keep - h
        fm = f()
        flat[k] = keep
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Per-entry |a - n| <= atol + rtol * max(|a|, |n|)."""
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    return bool(np.all(np.abs(analytic - numeric) <= bound))
