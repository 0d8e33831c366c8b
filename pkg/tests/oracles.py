"""Reference implementations written as plain Python loops over Python floats.

They share no code with the package.  The convolution and bilinear loops add
products in the documented order, so on IEEE doubles they are bit-comparable
with the library kernels.
"""

import math
from fractions import Fraction

import numpy as np

# Worked values, each computed once by hand or by the oracle noted beside it.
CONV1D_ONES_123 = [3.0, 6.0, 5.0]  # sliding window of [1,1,1] over [1,2,3], zero padded
SOFTMAX_0_LN3 = [0.25, 0.75]  # e^0 / (e^0 + 3)
ENTROPY_QUARTER = -(0.25 * math.log(0.25) + 0.75 * math.log(0.75))  # 0.5623351446188083
CE_DIAG_QUARTER = (-math.log(0.25) - math.log(0.75)) / 2  # 0.8369882167858358
GATE_HALF = 3.5  # 0.25 * 2 + 0.75 * 4
BILINEAR_HAND = {"Q": [[[1.0, 0.0]], [[0.0, 1.0]]], "V": [[[1.0, 2.0]], [[3.0, 4.0]]],
                 "S0": [1.0, 3.0], "S1": [2.0, 4.0]}
SPATIAL_PLAN_128 = [128, 63, 31, 29, 14, 12, 6, 4, 2, 1]
RESAMPLE_F3_25FPS_T4 = [1, 2, 2, 3]  # 1-based
UNIFORM4_PIXEL = 64  # floor(255/4 + 1/2)


def conv1d(x, w, b):
    B, T, Cin = len(x), len(x[0]), len(x[0][0])
    K, Cout = len(w), len(w[0][0])
    pad = K // 2
    out = np.zeros((B, T, Cout))
    for bb in range(B):
        for t in range(T):
            for co in range(Cout):
                acc = 0.0
                for k in range(K):
                    src = t + k - pad
                    if src < 0 or src >= T:
                        continue
                    for ci in range(Cin):
                        acc += float(x[bb][src][ci]) * float(w[k][ci][co])
                out[bb, t, co] = acc + float(b[co])
    return out


def conv3d(x, w, b, stride):
    B, T, H, W, Cin = x.shape
    KT, KH, KW, _, Cout = w.shape
    pad = KT // 2
    Ho, Wo = (H - KH) // stride + 1, (W - KW) // stride + 1
    out = np.zeros((B, T, Ho, Wo, Cout))
    xl, wl = x.tolist(), w.tolist()
    for bb in range(B):
        for t in range(T):
            for i in range(Ho):
                for j in range(Wo):
                    for co in range(Cout):
                        acc = 0.0
                        for kt in range(KT):
                            src = t + kt - pad
                            if src < 0 or src >= T:
                                continue
                            for kh in range(KH):
                                for kw in range(KW):
                                    for ci in range(Cin):
                                        acc += (xl[bb][src][i * stride + kh][j * stride + kw][ci]
                                                * wl[kt][kh][kw][ci][co])
                        out[bb, t, i, j, co] = acc + float(b[co])
    return out


def bilinear(Q, W, V):
    B, T, Dq = Q.shape
    N, _, Dv = V.shape
    Ql, Wl, Vl = Q.tolist(), W.tolist(), V.tolist()
    proj = [[[0.0] * Dq for _ in range(T)] for _ in range(N)]
    for k in range(N):
        for j in range(T):
            for l in range(Dq):
                acc = 0.0
                for m in range(Dv):
                    acc += Wl[l][m] * Vl[k][j][m]
                proj[k][j][l] = acc
    S = np.zeros((B, T, N))
    for i in range(B):
        for j in range(T):
            for k in range(N):
                acc = 0.0
                for l in range(Dq):
                    acc += Ql[i][j][l] * proj[k][j][l]
                S[i, j, k] = acc
    return S


def maxpool(x):
    B, T, H, W, C = x.shape
    out = np.empty((B, T, H // 2, W // 2, C))
    for i in range(H // 2):
        for j in range(W // 2):
            out[:, :, i, j] = np.maximum(np.maximum(x[:, :, 2 * i, 2 * j], x[:, :, 2 * i, 2 * j + 1]),
                                         np.maximum(x[:, :, 2 * i + 1, 2 * j], x[:, :, 2 * i + 1, 2 * j + 1]))
    return out


def group_norm_stats(x, groups):
    """Per (b, t, g) mean and biased variance by direct summation."""
    B, T = x.shape[:2]
    C = x.shape[-1]
    size = C // groups
    means = np.zeros((B, T, groups))
    vars_ = np.zeros((B, T, groups))
    for b in range(B):
        for t in range(T):
            for g in range(groups):
                vals = x[b, t, ..., g * size:(g + 1) * size].ravel().tolist()
                mu = math.fsum(vals) / len(vals)
                means[b, t, g] = mu
                vars_[b, t, g] = math.fsum((v - mu) ** 2 for v in vals) / len(vals)
    return means, vars_


def sync_index(i_a, v_fps, a_fps=Fraction(100, 3), n_frames=None):
    """Round-half-up of an exact rational, via floor(x + 1/2)."""
    x = Fraction(i_a) * Fraction(str(v_fps)) / Fraction(a_fps)
    idx = math.floor(x + Fraction(1, 2))
    idx = max(1, idx)
    return idx if n_frames is None else min(idx, n_frames)


def spatial_plan(size, strides, pools):
    plan = [size]
    for layer, s in enumerate(strides, start=1):
        if size < 3:
            return None
        size = (size - 3) // s + 1
        plan.append(size)
        if layer in pools:
            if size < 2:
                return None
            size = size // 2
            plan.append(size)
    return plan


def hard_argmax(row):
    best = 0
    for k in range(1, len(row)):
        if row[k] > row[best]:
            best = k
    return best


def dft_power(frame, n_fft):
    """|DFT|^2 of a zero-padded frame for bins 0..n_fft/2, by direct summation."""
    x = list(frame) + [0.0] * (n_fft - len(frame))
    out = []
    for k in range(n_fft // 2 + 1):
        re = math.fsum(x[n] * math.cos(2 * math.pi * k * n / n_fft) for n in range(n_fft))
        im = math.fsum(-x[n] * math.sin(2 * math.pi * k * n / n_fft) for n in range(n_fft))
        out.append(re * re + im * im)
    return out


def rank_correlation(xs, ys):
    """Spearman correlation with average ranks for ties."""
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        r = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                r[order[k]] = (i + j) / 2.0
            i = j + 1
        return r
    rx, ry = ranks(xs), ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    if vx == 0 or vy == 0:
        return 0.0
    return cov / math.sqrt(vx * vy)
