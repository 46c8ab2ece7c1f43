"""Independent straight-line reference implementations used as test oracles.

Nothing here imports the package under test. Each function is written from the
textbook definition with explicit loops so it shares no vectorised code path with
the implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np

C1 = 0.01 ** 2
C2 = 0.03 ** 2


def gauss_kernel(size=11, sigma=1.5):
    half = (size - 1) / 2
    k = [[math.exp(-((r - half) ** 2 + (c - half) ** 2) / (2 * sigma * sigma)) for c in range(size)]
         for r in range(size)]
    s = sum(sum(row) for row in k)
    return [[v / s for v in row] for row in k]


def ssim(a, b, size=11, sigma=1.5):
    a, b = np.asarray(a, dtype=float).tolist(), np.asarray(b, dtype=float).tolist()
    w = gauss_kernel(size, sigma)
    H, W = len(a), len(a[0])
    vals = []
    for r in range(H - size + 1):
        for c in range(W - size + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(size):
                for j in range(size):
                    x, y, k = a[r + i][c + j], b[r + i][c + j], w[i][j]
                    ma += k * x
                    mb += k * y
                    saa += k * x * x
                    sbb += k * y * y
                    sab += k * x * y
            va, vb, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            vals.append(((2 * ma * mb + C1) * (2 * cov + C2)) /
                        ((ma * ma + mb * mb + C1) * (va + vb + C2)))
    return sum(vals) / len(vals)


def pearson(a, b):
    a, b = list(np.ravel(a).astype(float)), list(np.ravel(b).astype(float))
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def cc(f, i, v):
    return 0.5 * (pearson(f, i) + pearson(f, v))


def mse(a, b):
    a, b = np.ravel(a).astype(float).tolist(), np.ravel(b).astype(float).tolist()
    return sum((x - y) ** 2 for x, y in zip(a, b)) / len(a)


def psnr(f, i, v, cap=100.0):
    m = 0.5 * (mse(f, i) + mse(f, v))
    if m == 0:
        return cap
    return min(cap, 10 * math.log10(1 / m))


def miou(pred, truth, n):
    pred, truth = np.ravel(pred).tolist(), np.ravel(truth).tolist()
    ious = {}
    for c in range(n):
        inter = sum(1 for p, t in zip(pred, truth) if p == c and t == c)
        union = sum(1 for p, t in zip(pred, truth) if p == c or t == c)
        if union:
            ious[c] = inter / union
    return ious, sum(ious.values()) / len(ious)


def lsgan(pred, target):
    vals = np.ravel(pred).astype(float).tolist()
    return sum((x - target) ** 2 for x in vals) / len(vals)


def cross_entropy_ohem(probs, label, thresh=0.7, min_divisor=16):
    """probs (B, n, H, W) normalised class probabilities, label (B, H, W)."""
    probs = np.asarray(probs, dtype=float)
    label = np.asarray(label)
    B, n, H, W = probs.shape
    picked = []
    for b in range(B):
        for r in range(H):
            for c in range(W):
                picked.append(probs[b, label[b, r, c], r, c])
    losses = [-math.log(p) for p in picked]
    k = max(1, len(picked) // min_divisor)
    hard = [l for p, l in zip(picked, losses) if p < thresh]
    if len(hard) < k:
        hard = sorted(losses, reverse=True)[:k]
    return sum(hard) / len(hard)


def geo(fused, vis_y, ir, mu=100.0, rho=50.0, eta=40.0):
    return mu * (1 - ssim(fused, vis_y)) + rho * mse(fused, vis_y) + eta * mse(fused, ir)


def mask(label_map, thermal=(4, 8, 9, 10, 11, 12)):
    out = []
    for row in np.asarray(label_map).tolist():
        out.append([0 if x in thermal else 255 for x in row])
    return np.array(out, dtype=np.uint8)


def blend(f_ir, f_vi, thermal, omega, gamma):
    so = 1 / (1 + math.exp(-omega))
    sg = 1 / (1 + math.exp(-gamma))
    f_ir, f_vi, thermal = (np.asarray(x).tolist() for x in (f_ir, f_vi, thermal))
    out = []
    for a_row, b_row, t_row in zip(f_ir, f_vi, thermal):
        row = []
        for a, b, t in zip(a_row, b_row, t_row):
            row.append(so * a + (1 - so) * b if t else (1 - sg) * a + sg * b)
        out.append(row)
    return np.array(out)
