"""Multi-scale calibration head.

Channel gates from global average and max pooling (shared bottleneck), a
channel reweighting of the input, four depthwise branches (an init branch and
three small-kernel + axial large-kernel stacks) and a fused spatial map that
multiplies the reweighted features before a final 1x1 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ops
from .core.rng import uniform_init, zeros
from .core.tensor import Tensor
from .dfa import pointwise

BRANCHES: tuple[tuple[int, int], ...] = ((3, 7), (5, 11), (7, 21))
INIT_KERNEL = 5


@dataclass
class McConfig:
    channels: int
    reduction: int = 16
    min_hidden: int = 8
    branches: tuple[tuple[int, int], ...] = field(default=BRANCHES)

    def __post_init__(self):
        if self.channels < 1 or self.reduction < 1:
            raise ValueError("channels and reduction must be >= 1")

    @property
    def hidden(self) -> int:
        return max(self.channels // self.reduction, self.min_hidden)


@dataclass
class AxialBranch:
    pre: Tensor  # C x k x k
    pre_b: Tensor
    row: Tensor  # C x 1 x n
    row_b: Tensor
    col: Tensor  # C x n x 1
    col_b: Tensor


@dataclass
class McParams:
    ca_w1: Tensor  # hidden x C, shared by the avg and max paths
    ca_b1: Tensor
    ca_w2: Tensor  # C x hidden
    ca_b2: Tensor
    init_pw: Tensor  # C x C
    init_pw_b: Tensor
    init_dw: Tensor  # C x 5 x 5
    init_dw_b: Tensor
    branches: list[AxialBranch]
    fuse_w: Tensor  # C x C, inner
    fuse_b: Tensor
    out_w: Tensor  # C x C, outer
    out_b: Tensor

    @classmethod
    def init(cls, config: McConfig, rng: np.random.Generator) -> "McParams":
        c, hid = config.channels, config.hidden

        def dw(kh, kw):
            return uniform_init(rng, (c, kh, kw), kh * kw), zeros((c,))

        ca_w1, ca_b1 = uniform_init(rng, (hid, c), c), zeros((hid,))
        ca_w2 = uniform_init(rng, (c, hid), hid)
        ca_b2 = zeros((c,))
        init_pw, init_pw_b = uniform_init(rng, (c, c), c), zeros((c,))
        init_dw, init_dw_b = dw(INIT_KERNEL, INIT_KERNEL)
        branches = []
        for k, n in config.branches:
            branches.append(AxialBranch(*dw(k, k), *dw(1, n), *dw(n, 1)))
        fuse_w, fuse_b = uniform_init(rng, (c, c), c), zeros((c,))
        out_w, out_b = uniform_init(rng, (c, c), c), zeros((c,))
        return cls(ca_w1, ca_b1, ca_w2, ca_b2, init_pw, init_pw_b, init_dw, init_dw_b,
                   branches, fuse_w, fuse_b, out_w, out_b)

    @classmethod
    def identity(cls, config: McConfig) -> "McParams":
        """Parameters for which the whole head is the identity map.

        Zero channel-attention weights give gates 0.5 + 0.5 = 1, every
        depthwise kernel is a delta, the inner fusion conv outputs ones and the
        outer conv is the identity matrix.
        """
        c, hid = config.channels, config.hidden

        def delta(kh, kw):
            k = np.zeros((c, kh, kw))
            k[:, kh // 2, kw // 2] = 1.0
            return Tensor(k, requires_grad=True), zeros((c,))

        eye = lambda: Tensor(np.eye(c), requires_grad=True)  # noqa: E731
        return cls(
            zeros((hid, c)), zeros((hid,)), zeros((c, hid)), zeros((c,)),
            eye(), zeros((c,)), *delta(INIT_KERNEL, INIT_KERNEL),
            [AxialBranch(*delta(k, k), *delta(1, n), *delta(n, 1)) for k, n in config.branches],
            zeros((c, c)), Tensor(np.ones(c), requires_grad=True),
            eye(), zeros((c,)),
        )


def param_count_formula(config: McConfig) -> int:
    c, hid = config.channels, config.hidden
    attention = (hid * c + hid) + (c * hid + c)
    init = (c * c + c) + (INIT_KERNEL * INIT_KERNEL * c + c)
    axial = sum((k * k * c + c) + 2 * (n * c + c) for k, n in config.branches)
    fusion = 2 * (c * c + c)
    return attention + init + axial + fusion


def _gate(pooled: Tensor, params: McParams) -> Tensor:
    h = ops.relu(pointwise(pooled, params.ca_w1, params.ca_b1))
    return ops.sigmoid(pointwise(h, params.ca_w2, params.ca_b2))


def channel_attention(x: Tensor, params: McParams, config: McConfig) -> tuple[Tensor, Tensor]:
    """sigmoid(conv(relu(conv(pool(x))))) for global avg and max pooling; each N x C."""
    n, c = x.shape[:2]
    if c != config.channels:
        raise ValueError(f"expected {config.channels} channels, got input {x.shape}")
    x_avg = _gate(ops.pool2d(x, "avg", "global"), params)
    x_max = _gate(ops.pool2d(x, "max", "global"), params)
    return ops.reshape(x_avg, (n, c)), ops.reshape(x_max, (n, c))


def channel_reweight(x: Tensor, x_avg: Tensor, x_max: Tensor) -> Tensor:
    n, c = x.shape[:2]
    if x_avg.shape != (n, c) or x_max.shape != (n, c):
        raise ValueError(f"gate shapes {x_avg.shape}/{x_max.shape} do not fit input {x.shape}")
    weights = ops.reshape(ops.add(x_avg, x_max), (n, c, 1, 1))
    return ops.mul(x, weights)


def multiscale_branches(x0: Tensor, params: McParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """(init, branch1, branch2, branch3); axial stacks run 1 x n before n x 1."""
    x_init = ops.depthwise_conv2d(pointwise(x0, params.init_pw, params.init_pw_b), params.init_dw, params.init_dw_b)
    outs = []
    for b in params.branches:
        y = ops.depthwise_conv2d(x0, b.pre, b.pre_b)
        y = ops.depthwise_conv2d(y, b.row, b.row_b)
        y = ops.depthwise_conv2d(y, b.col, b.col_b)
        outs.append(y)
    return (x_init, *outs)


def spatial_fuse(x0: Tensor, x_init: Tensor, x1: Tensor, x2: Tensor, x3: Tensor, params: McParams) -> Tensor:
    shapes = {t.shape for t in (x0, x_init, x1, x2, x3)}
    if len(shapes) != 1:
        raise ValueError(f"spatial_fuse inputs differ in shape: {sorted(shapes)}")
    total = ops.add(ops.add(ops.add(x_init, x1), x2), x3)
    attn = pointwise(total, params.fuse_w, params.fuse_b)
    return pointwise(ops.mul(x0, attn), params.out_w, params.out_b)


def mc_forward(x: Tensor, params: McParams, config: McConfig) -> Tensor:
    x_avg, x_max = channel_attention(x, params, config)
    x0 = channel_reweight(x, x_avg, x_max)
    return spatial_fuse(x0, *multiscale_branches(x0, params), params)
