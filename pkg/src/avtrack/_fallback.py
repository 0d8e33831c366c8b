"""Pure-numpy fixed-order kernels.

Same signatures and bit-identical results as the compiled extension.  Each
output element is built by a sequence of elementwise ``acc += x * w`` updates,
one per (tap, input channel) pair, so numpy never gets to choose a reduction
order.  Slow for wide layers, but exact.
"""

import numpy as np

NAME = "python"


def conv1d_forward(x, kernel, bias, out):
    B, T, Cin = x.shape
    K, _, Cout = kernel.shape
    pad = K // 2
    acc = np.zeros((B, T, Cout), dtype=out.dtype)
    for k in range(K):
        shift = k - pad
        lo, hi = max(0, -shift), min(T, T - shift)
        if lo >= hi:
            continue
        dst = acc[:, lo:hi, :]
        src = x[:, lo + shift:hi + shift, :]
        for ci in range(Cin):
            dst += src[:, :, ci, None] * kernel[k, ci]
    np.add(acc, bias, out=out)


def conv3d_forward(x, kernel, bias, stride, out):
    B, T, H, W, Cin = x.shape
    KT, KH, KW, _, Cout = kernel.shape
    Ho, Wo = out.shape[2], out.shape[3]
    pad = KT // 2
    acc = np.zeros((B, T, Ho, Wo, Cout), dtype=out.dtype)
    hspan = (Ho - 1) * stride + 1
    wspan = (Wo - 1) * stride + 1
    for kt in range(KT):
        shift = kt - pad
        lo, hi = max(0, -shift), min(T, T - shift)
        if lo >= hi:
            continue
        dst = acc[:, lo:hi]
        for kh in range(KH):
            for kw in range(KW):
                src = x[:, lo + shift:hi + shift,
                        kh:kh + hspan:stride, kw:kw + wspan:stride, :]
                for ci in range(Cin):
                    dst += src[..., ci, None] * kernel[kt, kh, kw, ci]
    np.add(acc, bias, out=out)


def bilinear_forward(q, w_t, v, proj, out):
    N, T, Dv = v.shape
    proj[...] = 0
    for m in range(Dv):
        proj += w_t[m] * v[:, :, m, None]
    B, _, Dq = q.shape
    acc = np.zeros((B, T, N), dtype=out.dtype)
    # acc[i, j, k] += q[i, j, l] * proj[k, j, l], l ascending
    pt = proj.transpose(1, 0, 2)  # [T, N, Dq]
    for l in range(Dq):
        acc += q[:, :, l, None] * pt[None, :, :, l]
    out[...] = acc


def adam_update(value, grad, m, v, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
