"""Independent reference implementations the package is checked against."""
import math

import numpy as np


def z_oracle(x, y, z, bits):
    key = 0
    for i in range(bits):
        key |= ((x >> i) & 1) << (3 * i)
        key |= ((y >> i) & 1) << (3 * i + 1)
        key |= ((z >> i) & 1) << (3 * i + 2)
    return key


def loop_oracle(x, params, proj):
    """Scalar loops straight from the ZOH + selective definitions."""
    L, D = x.shape
    S = params.A.shape[1]
    h = [[0.0] * S for _ in range(D)]
    y = np.zeros((L, D))
    for t in range(L):
        B = [sum(x[t, i] * proj.W_B[i, n] for i in range(D)) for n in range(S)]
        C = [sum(x[t, i] * proj.W_C[i, n] for i in range(D)) for n in range(S)]
        for d in range(D):
            pre = sum(x[t, i] * proj.W_delta[i, d] for i in range(D)) + proj.b_delta[d]
            dt = math.log1p(math.exp(pre)) if pre < 30 else pre
            for n in range(S):
                a = params.A[d, n]
                h[d][n] = math.exp(dt * a) * h[d][n] + (math.exp(dt * a) - 1) / a * B[n] * x[t, d]
                y[t, d] += C[n] * h[d][n]
    return y


def dense_oracle(coords, feats, w, b, side):
    """Zero-filled dense grid, 3x3x3 correlation, read back at the active sites."""
    grid = np.zeros((side + 2,) * 3 + (feats.shape[1],))
    c = coords + 1
    grid[c[:, 0], c[:, 1], c[:, 2]] = feats
    out = np.zeros((len(coords), w.shape[-1]))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                nb = grid[c[:, 0] + i - 1, c[:, 1] + j - 1, c[:, 2] + k - 1]
                out += nb @ w[i, j, k]
    return out + b


def jaccard_loss(mistakes: set, gt: set) -> float:
    union = gt | mistakes
    if not union:
        return 0.0
    return 1.0 - len(gt - mistakes) / len(union)


def lovasz_level_set_oracle(probs, labels):
    """Lovasz extension as the integral of the set function over error level sets."""
    keep = labels >= 0
    probs, labels = probs[keep], labels[keep]
    vals = []
    for c in np.unique(labels):
        gt = set(np.nonzero(labels == c)[0].tolist())
        err = np.where(labels == c, 1 - probs[:, c], probs[:, c])
        total, prev = 0.0, 0.0
        for t in np.unique(err):
            if t <= 0:
                continue
            level = set(np.nonzero(err >= t)[0].tolist())
            total += (t - prev) * jaccard_loss(level, gt)
            prev = t
        vals.append(total)
    return float(np.mean(vals))


def ce_oracle(logits, labels):
    out = []
    for z, y in zip(logits, labels):
        if y < 0:
            continue
        m = max(z)
        out.append(-(z[y] - m - math.log(sum(math.exp(v - m) for v in z))))
    return sum(out) / len(out)


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)
