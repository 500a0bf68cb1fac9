"""Toy anchor-free detector: conv backbone, optional DFA neck block, optional MC head block."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import params as P
from ..core import ops
from ..core.rng import make_rng, uniform_init, zeros
from ..core.tensor import Tensor
from ..dfa import DfaConfig, DfaParams, dfa_forward
from ..mc import BRANCHES, McConfig, McParams, mc_forward

HEAD_CHANNELS = 5  # objectness logit + (left, top, right, bottom) offsets


@dataclass
class DetectorConfig:
    widths: tuple[int, ...] = (8, 16, 32)
    with_dfa: bool = True
    with_mc: bool = True
    in_channels: int = 1
    dfa_heads: int = 1
    dfa_window: int = 8
    dfa_pool_ratio: int = 4
    dfa_mlp_hidden: int = 32
    dfa_dropout: float = 0.1
    dfa_eps: float = 1e-12
    dfa_ln_eps: float = 1e-5
    mc_reduction: int = 16
    mc_min_hidden: int = 8
    mc_branches: tuple[tuple[int, int], ...] = BRANCHES

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.mc_branches = tuple((int(k), int(n)) for k, n in self.mc_branches)
        if not self.widths or min(self.widths) < 1:
            raise ValueError("backbone widths must be positive")

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def feature_channels(self) -> int:
        return self.widths[-1]

    def dfa_config(self) -> DfaConfig:
        return DfaConfig(
            self.feature_channels, heads=self.dfa_heads, window=self.dfa_window,
            pool_ratio=self.dfa_pool_ratio, mlp_hidden=self.dfa_mlp_hidden, dropout=self.dfa_dropout,
            eps=self.dfa_eps, ln_eps=self.dfa_ln_eps,
        )

    def mc_config(self) -> McConfig:
        return McConfig(
            self.feature_channels, reduction=self.mc_reduction, min_hidden=self.mc_min_hidden, branches=self.mc_branches
        )


@dataclass
class ConvStage:
    down_w: Tensor  # 3x3, stride 2
    down_b: Tensor
    conv_w: Tensor  # 3x3, stride 1
    conv_b: Tensor


@dataclass
class Detector:
    config: DetectorConfig = field(metadata={"static": True})
    backbone: list[ConvStage]
    dfa: DfaParams | None
    mc: McParams | None
    head_w: Tensor
    head_b: Tensor

    def parameters(self) -> list[Tensor]:
        return P.parameters(self)

    def features(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Feature map fed to the 1x1 head, N x C x H/stride x W/stride."""
        for stage in self.backbone:
            x = ops.relu(ops.conv2d(x, stage.down_w, stage.down_b, stride=2, padding="same"))
            x = ops.relu(ops.conv2d(x, stage.conv_w, stage.conv_b, padding="same"))
        if self.dfa is not None:
            x = dfa_forward(x, self.dfa, self.config.dfa_config(), mode=mode, rng=rng)
        if self.mc is not None:
            x = mc_forward(x, self.mc, self.config.mc_config())
        return x

    def head(self, feats: Tensor) -> Tensor:
        return ops.conv2d(feats, self.head_w, self.head_b, padding=0)

    def __call__(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        return self.head(self.features(x, mode, rng))


def _conv(rng, cin, cout, k, gain=math.sqrt(2.0)):
    return uniform_init(rng, (cout, cin, k, k), cin * k * k, gain), zeros((cout,))


def build_model(config: DetectorConfig, rng: np.random.Generator | int) -> Detector:
    """Fresh detector; each component is initialised from its own child seed.

    Toggling DFA or MC therefore leaves the backbone and head weights unchanged.
    """
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(int(rng))
    seeds = rng.integers(0, 2**63 - 1, size=4)
    r_backbone, r_dfa, r_mc, r_head = (make_rng(int(s)) for s in seeds)
    stages = []
    cin = config.in_channels
    for width in config.widths:
        stages.append(ConvStage(*_conv(r_backbone, cin, width, 3), *_conv(r_backbone, width, width, 3)))
        cin = width
    dfa = DfaParams.init(config.dfa_config(), r_dfa) if config.with_dfa else None
    mc = McParams.init(config.mc_config(), r_mc) if config.with_mc else None
    head_w, head_b = _conv(r_head, cin, HEAD_CHANNELS, 1, gain=1.0)
    return Detector(config, stages, dfa, mc, head_w, head_b)


def base_param_formula(config: DetectorConfig) -> int:
    """Backbone plus head parameter count."""
    total, cin = 0, config.in_channels
    for w in config.widths:
        total += (9 * cin * w + w) + (9 * w * w + w)
        cin = w
    return total + cin * HEAD_CHANNELS + HEAD_CHANNELS
