"""Pure-numpy grouped 2-D convolution kernels.

Reference backend: always available, vectorized over the kernel window.
Inputs arrive pre-padded; wrappers in the tensor layer handle padding.
"""

import numpy as np

NAME = "numpy"


def conv2d_forward(xp, w, stride, groups):
    """Grouped cross-correlation.

    xp: [N, C_in, Hp, Wp] pre-padded input.
    w:  [C_out, C_in // groups, k, k].
    Returns [N, C_out, Ho, Wo] with Ho = (Hp - k) // stride + 1.
    """
    n, cin, hp, wp = xp.shape
    cout, cing, k, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    xg = xp.reshape(n, groups, cing, hp, wp)
    wg = w.reshape(groups, cout // groups, cing, k, k)
    out = np.zeros((n, groups, cout // groups, ho, wo), dtype=np.result_type(xp, w))
    for kh in range(k):
        for kw in range(k):
            patch = xg[:, :, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride]
            out += np.einsum("ngihw,goi->ngohw", patch, wg[:, :, :, kh, kw], optimize=True)
    return out.reshape(n, cout, ho, wo)


def conv2d_backward(xp, w, dy, stride, groups, need_dx=True, need_dw=True):
    """Gradients of conv2d_forward w.r.t. the padded input and the weights.

    dy: [N, C_out, Ho, Wo]. Returns (dxp, dw); entries not requested are None.
    """
    n, cin, hp, wp = xp.shape
    cout, cing, k, _ = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    xg = xp.reshape(n, groups, cing, hp, wp)
    wg = w.reshape(groups, cout // groups, cing, k, k)
    dyg = dy.reshape(n, groups, cout // groups, ho, wo)
    dxg = np.zeros_like(xg) if need_dx else None
    dwg = np.zeros_like(wg) if need_dw else None
    for kh in range(k):
        for kw in range(k):
            if need_dw:
                patch = xg[:, :, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride]
                dwg[:, :, :, kh, kw] = np.einsum("ngihw,ngohw->goi", patch, dyg, optimize=True)
            if need_dx:
                dxg[:, :, :, kh:kh + stride * ho:stride, kw:kw + stride * wo:stride] += np.einsum(
                    "ngohw,goi->ngihw", dyg, wg[:, :, :, kh, kw], optimize=True)
    dxp = dxg.reshape(n, cin, hp, wp) if need_dx else None
    dw = dwg.reshape(cout, cing, k, k) if need_dw else None
    return dxp, dw
