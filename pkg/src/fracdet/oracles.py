"""Slow reference implementations used to cross-check the vectorised paths.

Everything here is written with explicit loops over plain numpy arrays and
shares no code with the operators it checks.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loops(x, kernel, bias=None, stride=1, pads=(0, 0, 0, 0)):
    n, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    top, bottom, left, right = pads
    hp, wp = h + top + bottom, w + left + right
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ch in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                y, z = i * stride + u - top, j * stride + v - left
                                if 0 <= y < h and 0 <= z < w:
                                    acc += x[b, ch, y, z] * kernel[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out


def same_pads(kh, kw):
    return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2, (kw - 1) // 2, kw - 1 - (kw - 1) // 2)


def depthwise_loops(x, kernel, bias=None):
    n, c, h, w = x.shape
    _, kh, kw = kernel.shape
    top, _, left, _ = same_pads(kh, kw)
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0 if bias is None else float(bias[ch])
                    for u in range(kh):
                        for v in range(kw):
                            y, z = i + u - top, j + v - left
                            if 0 <= y < h and 0 <= z < w:
                                acc += x[b, ch, y, z] * kernel[ch, u, v]
                    out[b, ch, i, j] = acc
    return out


def pool2d_loops(x, mode, k, s):
    n, c, h, w = x.shape
    ho = max(math.ceil((h - k) / s), 0) + 1
    wo = max(math.ceil((w - k) / s), 0) + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    win = [x[b, ch, y, z]
                           for y in range(i * s, min(i * s + k, h))
                           for z in range(j * s, min(j * s + k, w))]
                    out[b, ch, i, j] = max(win) if mode == "max" else sum(win) / len(win)
    return out


def softmax_list(values):
    m = max(values)
    e = [math.exp(v - m) for v in values]
    t = sum(e)
    return [v / t for v in e]


def gelu_scalar(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def mlp_scalar(r, w1, b1, w2, b2):
    """Bias MLP at one offset; returns a vector with one entry per head."""
    hidden = [max(0.0, w1[k, 0] * r[0] + w1[k, 1] * r[1] + b1[k]) for k in range(w1.shape[0])]
    return [sum(w2[hd, k] * hidden[k] for k in range(len(hidden))) + b2[hd] for hd in range(w2.shape[0])]


def _unit(v, eps):
    n = math.sqrt(sum(t * t for t in v))
    d = max(n, eps)
    return [t / d for t in v]


def global_downsample_steps(x, p, r, ln_eps):
    """Linear, GELU, truncated-window average pool, channel LayerNorm; step by step."""
    n, c, h, w = x.shape
    lin = np.einsum("oc,nchw->nohw", p.pre_w.data, x) + p.pre_b.data[None, :, None, None]
    act = np.vectorize(gelu_scalar)(lin)
    pooled = pool2d_loops(act, "avg", r, r)
    out = np.zeros_like(pooled)
    for b in range(n):
        for i in range(pooled.shape[2]):
            for j in range(pooled.shape[3]):
                v = pooled[b, :, i, j]
                mu = v.mean()
                var = ((v - mu) ** 2).mean()
                out[b, :, i, j] = (v - mu) / math.sqrt(var + ln_eps) * p.ln_gamma.data + p.ln_beta.data
    return out


def dfa_attend_loops(x, p, cfg):
    """Per-query, per-key evaluation of both attention branches."""
    n, c, h, w = x.shape
    heads, dh = cfg.heads, c // cfg.heads

    def proj(wt, bt, t):
        return np.einsum("oc,nchw->nohw", wt.data, t) + bt.data[None, :, None, None]

    q = proj(p.q_w, p.q_b, x)
    kl, vl = proj(p.k_local_w, p.k_local_b, x), proj(p.v_local_w, p.v_local_b, x)
    xg = global_downsample_steps(x, p, cfg.pool_ratio, cfg.ln_eps)
    kg, vg = proj(p.k_global_w, p.k_global_b, xg), proj(p.v_global_w, p.v_global_b, xg)
    hg, wg = xg.shape[2], xg.shape[3]
    wh, ww = min(cfg.window, h), min(cfg.window, w)
    sy = 0.0 if h == 1 else 1.0 / (h - 1)
    sx = 0.0 if w == 1 else 1.0 / (w - 1)

    def center(idx, size):
        return min(max((idx + 0.5) * cfg.pool_ratio - 0.5, 0.0), size - 1.0)

    lm, gm = p.local_mlp, p.global_mlp
    out_l = np.zeros_like(x, dtype=np.float64)
    out_g = np.zeros_like(x, dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                y0, x0 = (i // wh) * wh, (j // ww) * ww
                keys = [(k, l) for k in range(y0, min(y0 + wh, h)) for l in range(x0, min(x0 + ww, w))]
                for hd in range(heads):
                    ch = slice(hd * dh, (hd + 1) * dh)
                    qh = _unit(q[b, ch, i, j], cfg.eps)
                    scores = []
                    for k, l in keys:
                        kh_ = _unit(kl[b, ch, k, l], cfg.eps)
                        bias = mlp_scalar(((i - k) * sy, (j - l) * sx), lm.w1.data, lm.b1.data, lm.w2.data, lm.b2.data)
                        scores.append(sum(a * bb for a, bb in zip(qh, kh_)) + bias[hd])
                    att = softmax_list(scores)
                    for a, (k, l) in zip(att, keys):
                        out_l[b, ch, i, j] += a * vl[b, ch, k, l]
                    scores = []
                    cells = [(k, l) for k in range(hg) for l in range(wg)]
                    for k, l in cells:
                        kh_ = _unit(kg[b, ch, k, l], cfg.eps)
                        off = ((i - center(k, h)) * sy, (j - center(l, w)) * sx)
                        bias = mlp_scalar(off, gm.w1.data, gm.b1.data, gm.w2.data, gm.b2.data)
                        scores.append(sum(a * bb for a, bb in zip(qh, kh_)) + bias[hd])
                    att = softmax_list(scores)
                    for a, (k, l) in zip(att, cells):
                        out_g[b, ch, i, j] += a * vg[b, ch, k, l]
    return out_l, out_g


def channel_attention_steps(x, p):
    n, c = x.shape[:2]

    def gate(v):
        hidden = np.maximum(p.ca_w1.data @ v + p.ca_b1.data, 0.0)
        z = p.ca_w2.data @ hidden + p.ca_b2.data
        return np.array([1.0 / (1.0 + math.exp(-t)) for t in z])

    avg = np.stack([gate(x[b].reshape(c, -1).mean(axis=1)) for b in range(n)])
    mx = np.stack([gate(x[b].reshape(c, -1).max(axis=1)) for b in range(n)])
    return avg, mx


def spatial_fuse_steps(x0, x_init, x1, x2, x3, p):
    total = x_init + x1 + x2 + x3
    attn = np.einsum("oc,nchw->nohw", p.fuse_w.data, total) + p.fuse_b.data[None, :, None, None]
    return np.einsum("oc,nchw->nohw", p.out_w.data, x0 * attn) + p.out_b.data[None, :, None, None]


# ---------------------------------------------------------------------------
# detection metrics


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def ap_by_enumeration(predictions, ground_truth, threshold):
    """AP with the matching chosen by exhaustive search.

    Every injective prediction-to-ground-truth assignment (same image, IoU at
    least ``threshold``) is enumerated. The chosen one is the assignment whose
    IoU sequence, read in descending confidence order with -1 for unmatched,
    is lexicographically largest; that is the one-to-one greedy rule stated
    as a global optimum. AP is then the area under the upper envelope of the
    precision-recall points.
    """
    ranked = sorted(
        ((conf, img, k, box) for img, preds in enumerate(predictions) for k, (box, conf) in enumerate(preds)),
        key=lambda r: (-r[0], r[1], r[2]),
    )
    gts = [(img, j, box) for img, boxes in enumerate(ground_truth) for j, box in enumerate(boxes)]
    n_gt = len(gts)
    if n_gt == 0:
        return 1.0 if not ranked else 0.0
    options = []
    for _, img, _, box in ranked:
        opts = [None] + [g for g, (gi, _, gb) in enumerate(gts) if gi == img and _iou(box, gb) >= threshold]
        options.append(opts)
    best_key, best = None, None
    for choice in itertools.product(*options):
        used = [g for g in choice if g is not None]
        if len(used) != len(set(used)):
            continue
        # per position: larger IoU first, then the lower ground-truth index
        key = tuple((-1.0, 1) if g is None else (_iou(ranked[i][3], gts[g][2]), -g) for i, g in enumerate(choice))
        if best_key is None or key > best_key:
            best_key, best = key, choice
    tp = 0
    points = []
    for k, g in enumerate(best, start=1):
        tp += g is not None
        points.append((tp / n_gt, tp / k))
    ap, prev_recall = 0.0, 0.0
    for idx, (rec, _) in enumerate(points):
        envelope = max(pr for _, pr in points[idx:])
        ap += (rec - prev_recall) * envelope
        prev_recall = rec
    return ap
