"""JIT-compiled grouped 2-D convolution kernels.

Same contracts as numpy_backend; loops are explicit and accumulate in
float64 locals, compiled once per signature and cached on disk.
"""

import numba
import numpy as np

NAME = "numba"


@numba.njit(cache=True)
def _forward(xp, w, out, stride, groups):
    n = xp.shape[0]
    cout, cing, k, _ = w.shape
    ho, wo = out.shape[2], out.shape[3]
    cog = cout // groups
    for i in range(n):
        for oc in range(cout):
            base = (oc // cog) * cing
            for oh in range(ho):
                ih0 = oh * stride
                for ow in range(wo):
                    iw0 = ow * stride
                    acc = 0.0
                    for icl in range(cing):
                        ic = base + icl
                        for kh in range(k):
                            for kw in range(k):
                                acc += xp[i, ic, ih0 + kh, iw0 + kw] * w[oc, icl, kh, kw]
                    out[i, oc, oh, ow] = acc


@numba.njit(cache=True)
def _backward(xp, w, dy, dxp, dw, stride, groups, need_dx, need_dw):
    n = xp.shape[0]
    cout, cing, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    cog = cout // groups
    for i in range(n):
        for oc in range(cout):
            base = (oc // cog) * cing
            for oh in range(ho):
                ih0 = oh * stride
                for ow in range(wo):
                    g = dy[i, oc, oh, ow]
                    iw0 = ow * stride
                    for icl in range(cing):
                        ic = base + icl
                        for kh in range(k):
                            for kw in range(k):
                                if need_dx:
                                    dxp[i, ic, ih0 + kh, iw0 + kw] += w[oc, icl, kh, kw] * g
                                if need_dw:
                                    dw[oc, icl, kh, kw] += xp[i, ic, ih0 + kh, iw0 + kw] * g


def conv2d_forward(xp, w, stride, groups):
    n, cin, hp, wp = xp.shape
    cout, cing, k, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    out = np.empty((n, cout, ho, wo), dtype=np.result_type(xp, w))
    _forward(xp, w, out, stride, groups)
    return out


def conv2d_backward(xp, w, dy, stride, groups, need_dx=True, need_dw=True):
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    _backward(xp, w, dy, dxp, dw, stride, groups, need_dx, need_dw)
    return (dxp if need_dx else None), (dw if need_dw else None)
