"""Dual-focus attention: windowed local and pooled global self-attention.

Both branches share one query projection. Queries and keys are L2-normalised
per head, so similarities are cosines plus a relative-position bias produced by
a small MLP from normalised coordinate offsets. The two branch outputs are
concatenated along channels, projected back to C channels, passed through
dropout and added to the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core import ops
from .core.rng import ones, uniform_init, zeros
from .core.tensor import Tensor


@dataclass
class DfaConfig:
    channels: int
    heads: int = 1
    window: int = 8
    pool_ratio: int = 4
    mlp_hidden: int = 32
    dropout: float = 0.1
    eps: float = 1e-12
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be a positive multiple of heads ({self.heads})")
        if self.window < 1 or self.pool_ratio < 1 or self.mlp_hidden < 1:
            raise ValueError("window, pool_ratio and mlp_hidden must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


@dataclass
class BiasMlp:
    w1: Tensor  # hidden x 2
    b1: Tensor
    w2: Tensor  # heads x hidden
    b2: Tensor


@dataclass
class DfaParams:
    q_w: Tensor
    q_b: Tensor
    k_local_w: Tensor
    k_local_b: Tensor
    v_local_w: Tensor
    v_local_b: Tensor
    k_global_w: Tensor
    k_global_b: Tensor
    v_global_w: Tensor
    v_global_b: Tensor
    pre_w: Tensor
    pre_b: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    local_mlp: BiasMlp
    global_mlp: BiasMlp
    proj_w: Tensor  # C x 2C
    proj_b: Tensor

    @classmethod
    def init(cls, config: DfaConfig, rng: np.random.Generator) -> "DfaParams":
        """Fan-in uniform weights, zero biases, and a zero output projection."""
        c, h, d = config.channels, config.heads, config.mlp_hidden

        def lin(out_dim, in_dim):
            return uniform_init(rng, (out_dim, in_dim), in_dim), zeros((out_dim,))

        q = lin(c, c)
        kl, vl = lin(c, c), lin(c, c)
        kg, vg = lin(c, c), lin(c, c)
        pre = lin(c, c)
        mlps = []
        for _ in range(2):
            w1, b1 = lin(d, 2)
            w2, b2 = lin(h, d)
            mlps.append(BiasMlp(w1, b1, w2, b2))
        return cls(
            *q, *kl, *vl, *kg, *vg, *pre,
            ln_gamma=ones((c,)), ln_beta=zeros((c,)),
            local_mlp=mlps[0], global_mlp=mlps[1],
            proj_w=zeros((c, 2 * c)), proj_b=zeros((c,)),
        )


def param_count_formula(config: DfaConfig) -> int:
    c, h, d = config.channels, config.heads, config.mlp_hidden
    projections = 6 * (c * c + c)
    layer_norm = 2 * c
    mlps = 2 * (2 * d + d + h * d + h)
    proj = 2 * c * c + c
    return projections + layer_norm + mlps + proj


# ---------------------------------------------------------------------------
# relative positions


@dataclass(frozen=True)
class RelPosTable:
    """Normalised (row, col) offsets query - key, shape (queries, keys, 2)."""

    branch: str
    height: int
    width: int
    offsets: np.ndarray = field(repr=False)


def normalize_offsets(r: np.ndarray) -> np.ndarray:
    # Components already lie in [-1, 1]; kept as the single swap point for another scheme.
    return r


def _axis_scale(n: int) -> float:
    return 0.0 if n <= 1 else 1.0 / (n - 1)


def window_extent(h: int, w: int, window: int) -> tuple[int, int]:
    return min(window, h), min(window, w)


def pooled_centers(n: int, r: int) -> np.ndarray:
    """Input-space coordinate of each pooled cell centre, clamped to [0, n-1]."""
    cells = -(-n // r)
    return np.clip((np.arange(cells) + 0.5) * r - 0.5, 0.0, n - 1.0)


@lru_cache(maxsize=64)
def _rel_pos(h: int, w: int, branch: str, window: int, pool_ratio: int) -> RelPosTable:
    sy, sx = _axis_scale(h), _axis_scale(w)
    if branch == "local":
        wh, ww = window_extent(h, w, window)
        qy, qx = np.divmod(np.arange(wh * ww), ww)
        ky, kx = qy, qx
    elif branch == "global":
        qy, qx = np.divmod(np.arange(h * w), w)
        cy, cx = pooled_centers(h, pool_ratio), pooled_centers(w, pool_ratio)
        ky = np.repeat(cy, len(cx))
        kx = np.tile(cx, len(cy))
    else:
        raise ValueError(f"branch must be 'local' or 'global', got {branch!r}")
    dy = (qy[:, None] - ky[None, :]) * sy
    dx = (qx[:, None] - kx[None, :]) * sx
    offsets = normalize_offsets(np.stack([dy, dx], axis=-1).astype(np.float64))
    offsets.setflags(write=False)
    return RelPosTable(branch, h, w, offsets)


def build_rel_pos(h: int, w: int, branch: str, config: DfaConfig) -> RelPosTable:
    """Offsets for every (query, key) pair a branch compares.

    Local tables are indexed by position inside one window (offsets are
    translation invariant, so every window shares the table). Global tables map
    all H*W query positions to the pooled key cells.
    """
    if h < 1 or w < 1:
        raise ValueError("H and W must be >= 1")
    return _rel_pos(h, w, branch, config.window, config.pool_ratio)


def bias_from_mlp(table: RelPosTable, mlp: BiasMlp) -> Tensor:
    """W2 relu(W1 r + b1) + b2 per pair; returns heads x Q x K."""
    r = Tensor(table.offsets)
    hidden = ops.relu(ops.linear(r, mlp.w1, mlp.b1))
    out = ops.linear(hidden, mlp.w2, mlp.b2)
    return ops.transpose(out, (2, 0, 1))


# ---------------------------------------------------------------------------
# forward


def pointwise(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """1x1 convolution with an (out, in) weight matrix."""
    kernel = ops.reshape(w, (w.shape[0], w.shape[1], 1, 1))
    return ops.conv2d(x, kernel, b, padding=0)


def channel_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float) -> Tensor:
    y = ops.layer_norm(ops.transpose(x, (0, 2, 3, 1)), gamma, beta, eps)
    return ops.transpose(y, (0, 3, 1, 2))


def global_downsample(x: Tensor, params: DfaParams, config: DfaConfig) -> Tensor:
    """Linear -> GELU -> AvgPool(r, stride r) -> LayerNorm over channels."""
    y = ops.gelu(pointwise(x, params.pre_w, params.pre_b))
    r = config.pool_ratio
    y = ops.pool2d(y, "avg", (r, r), (r, r))
    return channel_layer_norm(y, params.ln_gamma, params.ln_beta, config.ln_eps)


def _to_windows(t: Tensor, heads: int, wh: int, ww: int) -> Tensor:
    n, c, hp, wp = t.shape
    nh, nw = hp // wh, wp // ww
    t = ops.reshape(t, (n, heads, c // heads, nh, wh, nw, ww))
    t = ops.transpose(t, (0, 3, 5, 1, 4, 6, 2))
    return ops.reshape(t, (n, nh * nw, heads, wh * ww, c // heads))


def _from_windows(t: Tensor, shape: tuple[int, int, int, int], wh: int, ww: int) -> Tensor:
    n, c, hp, wp = shape
    nh, nw = hp // wh, wp // ww
    heads = t.shape[2]
    t = ops.reshape(t, (n, nh, nw, heads, wh, ww, c // heads))
    t = ops.transpose(t, (0, 3, 6, 1, 4, 2, 5))
    return ops.reshape(t, (n, c, hp, wp))


def _to_tokens(t: Tensor, heads: int) -> Tensor:
    n, c, h, w = t.shape
    t = ops.reshape(t, (n, heads, c // heads, h * w))
    return ops.transpose(t, (0, 1, 3, 2))


def _from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    n, heads, _, d = t.shape
    t = ops.transpose(t, (0, 1, 3, 2))
    return ops.reshape(t, (n, heads * d, h, w))


def local_key_mask(h: int, w: int, wh: int, ww: int) -> np.ndarray:
    """True for real (unpadded) tokens; shape (1, windows, 1, 1, wh*ww)."""
    hp, wp = -(-h // wh) * wh, -(-w // ww) * ww
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    nh, nw = hp // wh, wp // ww
    valid = valid.reshape(nh, wh, nw, ww).transpose(0, 2, 1, 3).reshape(1, nh * nw, 1, 1, wh * ww)
    return valid


def dfa_attend(x: Tensor, params: DfaParams, config: DfaConfig, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Local and global attention outputs, each N x C x H x W.

    Pass a dict as ``trace`` to receive the intermediate normalised queries,
    keys, similarity and attention tensors.
    """
    if x.ndim != 4 or x.shape[1] != config.channels:
        raise ValueError(f"expected N x {config.channels} x H x W input, got {x.shape}")
    n, c, h, w = x.shape
    heads, eps = config.heads, config.eps

    q = pointwise(x, params.q_w, params.q_b)

    # local branch: non-overlapping windows, ragged edges padded and masked
    wh, ww = window_extent(h, w, config.window)
    hp, wp = -(-h // wh) * wh, -(-w // ww) * ww
    k_l = pointwise(x, params.k_local_w, params.k_local_b)
    v_l = pointwise(x, params.v_local_w, params.v_local_b)
    padding = ((0, 0), (0, 0), (0, hp - h), (0, wp - w))
    if hp != h or wp != w:
        q_p, k_l, v_l = (ops.pad(t, padding) for t in (q, k_l, v_l))
    else:
        q_p = q
    qw = ops.l2_normalize(_to_windows(q_p, heads, wh, ww), -1, eps)
    kw = ops.l2_normalize(_to_windows(k_l, heads, wh, ww), -1, eps)
    vw = _to_windows(v_l, heads, wh, ww)
    b_local = bias_from_mlp(build_rel_pos(h, w, "local", config), params.local_mlp)
    s_local = ops.add(ops.matmul(qw, ops.transpose(kw, (0, 1, 2, 4, 3))), b_local)
    mask = local_key_mask(h, w, wh, ww) if (hp != h or wp != w) else None
    a_local = ops.softmax(s_local, -1, mask)
    out_local = _from_windows(ops.matmul(a_local, vw), (n, c, hp, wp), wh, ww)
    if hp != h or wp != w:
        out_local = ops.crop(out_local, (slice(None), slice(None), slice(0, h), slice(0, w)))

    # global branch: every query against the pooled map
    xg = global_downsample(x, params, config)
    hg, wg = xg.shape[2], xg.shape[3]
    k_g = pointwise(xg, params.k_global_w, params.k_global_b)
    v_g = pointwise(xg, params.v_global_w, params.v_global_b)
    qt = ops.l2_normalize(_to_tokens(q, heads), -1, eps)
    kt = ops.l2_normalize(_to_tokens(k_g, heads), -1, eps)
    vt = _to_tokens(v_g, heads)
    b_global = bias_from_mlp(build_rel_pos(h, w, "global", config), params.global_mlp)
    s_global = ops.add(ops.matmul(qt, ops.transpose(kt, (0, 1, 3, 2))), b_global)
    a_global = ops.softmax(s_global, -1)
    out_global = _from_tokens(ops.matmul(a_global, vt), h, w)

    if trace is not None:
        trace.update(
            q_hat_local=qw, k_hat_local=kw, s_local=s_local, a_local=a_local, local_mask=mask,
            q_hat_global=qt, k_hat_global=kt, s_global=s_global, a_global=a_global,
            x_global=xg, window=(wh, ww), pooled=(hg, wg),
        )
    return out_local, out_global


def dfa_forward(
    x: Tensor,
    params: DfaParams,
    config: DfaConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``x + dropout(proj(concat(local, global)))``; same shape as ``x``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    v_local, v_global = dfa_attend(x, params, config)
    fused = pointwise(ops.concat([v_local, v_global], axis=1), params.proj_w, params.proj_b)
    fused = ops.dropout(fused, config.dropout, rng, training=(mode == "train"))
    return ops.add(x, fused)


def attention_macs(config: DfaConfig, shape: tuple[int, int, int, int]) -> dict[str, int]:
    """Multiply-accumulates of the similarity and aggregation products, real tokens only."""
    n, c, h, w = shape
    wh, ww = window_extent(h, w, config.window)
    local = 0
    for rows in _split(h, wh):
        for cols in _split(w, ww):
            t = rows * cols
            local += t * t * c
    hg, wg = math.ceil(h / config.pool_ratio), math.ceil(w / config.pool_ratio)
    glob = h * w * hg * wg * c
    return {"local_qk": n * local, "local_av": n * local, "global_qk": n * glob, "global_av": n * glob}


def _split(n: int, size: int) -> list[int]:
    return [min(size, n - i) for i in range(0, n, size)]
