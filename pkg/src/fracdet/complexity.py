"""Exact parameter and multiply-accumulate accounting.

Convention: one MAC per kernel element per output element. Bias additions,
activations, pooling, normalisation and softmax cost nothing. Attention
products count one MAC per (query, key, channel) triple over real tokens, and
each bias MLP counts its two matrix products once per (query, key) pair of its
offset table.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

from . import params as P
from .dfa import DfaConfig, attention_macs, window_extent
from .detector.model import HEAD_CHANNELS, Detector, DetectorConfig
from .mc import INIT_KERNEL, McConfig


@dataclass
class CostRow:
    module: str
    operator: str
    params: int
    macs: int


@dataclass
class CostReport:
    input_shape: tuple[int, ...]
    rows: list[CostRow] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def extend(self, other: "CostReport") -> None:
        self.rows.extend(other.rows)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "rows": [vars(r) for r in self.rows],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["module", "operator", "params", "macs"])
        for r in self.rows:
            writer.writerow([r.module, r.operator, r.params, r.macs])
        return buf.getvalue()


def count_params(module) -> int:
    return P.count_params(module)


def conv_macs(n: int, cin: int, cout: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return n * cout * ho * wo * cin * kh * kw


def depthwise_macs(kernel_shape: tuple[int, int, int], input_shape: tuple[int, int, int, int]) -> int:
    """MACs of a same-padded depthwise conv with a C x kh x kw kernel."""
    c, kh, kw = kernel_shape
    n, ci, h, w = input_shape
    if c != ci:
        raise ValueError(f"kernel channels {c} vs input channels {ci}")
    return n * c * h * w * kh * kw


def _check_shape(shape) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ValueError(f"shape must be four positive extents N,C,H,W, got {shape}")
    return shape


def dfa_cost(config: DfaConfig, shape) -> CostReport:
    n, c, h, w = _check_shape(shape)
    if c != config.channels:
        raise ValueError(f"shape has {c} channels, config expects {config.channels}")
    hg, wg = math.ceil(h / config.pool_ratio), math.ceil(w / config.pool_ratio)
    d, heads = config.mlp_hidden, config.heads
    lin = c * c + c
    rep = CostReport((n, c, h, w))
    add = lambda op, p, m: rep.rows.append(CostRow("dfa", op, p, m))  # noqa: E731
    add("q_proj", lin, n * h * w * c * c)
    add("k_local_proj", lin, n * h * w * c * c)
    add("v_local_proj", lin, n * h * w * c * c)
    add("global_pre_linear", lin, n * h * w * c * c)
    add("global_layer_norm", 2 * c, 0)
    add("k_global_proj", lin, n * hg * wg * c * c)
    add("v_global_proj", lin, n * hg * wg * c * c)
    mlp_params = (2 * d + d) + (heads * d + heads)
    wh, ww = window_extent(h, w, config.window)
    local_pairs = (wh * ww) ** 2
    global_pairs = h * w * hg * wg
    add("local_bias_mlp", mlp_params, local_pairs * (2 * d + d * heads))
    add("global_bias_mlp", mlp_params, global_pairs * (2 * d + d * heads))
    att = attention_macs(config, (n, c, h, w))
    add("local_attention", 0, att["local_qk"] + att["local_av"])
    add("global_attention", 0, att["global_qk"] + att["global_av"])
    add("proj", 2 * c * c + c, n * h * w * 2 * c * c)
    return rep


def mc_cost(config: McConfig, shape) -> CostReport:
    n, c, h, w = _check_shape(shape)
    if c != config.channels:
        raise ValueError(f"shape has {c} channels, config expects {config.channels}")
    hid = config.hidden
    rep = CostReport((n, c, h, w))
    add = lambda op, p, m: rep.rows.append(CostRow("mc", op, p, m))  # noqa: E731
    # the bottleneck is shared, but applied to both pooled vectors
    add("channel_fc1", c * hid + hid, 2 * n * c * hid)
    add("channel_fc2", hid * c + c, 2 * n * hid * c)
    add("init_pointwise", c * c + c, n * h * w * c * c)
    add(f"init_dw{INIT_KERNEL}x{INIT_KERNEL}", INIT_KERNEL**2 * c + c,
        depthwise_macs((c, INIT_KERNEL, INIT_KERNEL), (n, c, h, w)))
    for i, (k, m) in enumerate(config.branches, start=1):
        add(f"branch{i}_dw{k}x{k}", k * k * c + c, depthwise_macs((c, k, k), (n, c, h, w)))
        add(f"branch{i}_dw1x{m}", m * c + c, depthwise_macs((c, 1, m), (n, c, h, w)))
        add(f"branch{i}_dw{m}x1", m * c + c, depthwise_macs((c, m, 1), (n, c, h, w)))
    add("fuse_pointwise", c * c + c, n * h * w * c * c)
    add("out_pointwise", c * c + c, n * h * w * c * c)
    return rep


def detector_cost(config: DetectorConfig, shape) -> CostReport:
    n, cin, h, w = _check_shape(shape)
    if cin != config.in_channels:
        raise ValueError(f"shape has {cin} channels, detector expects {config.in_channels}")
    rep = CostReport((n, cin, h, w))
    for i, cout in enumerate(config.widths, start=1):
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        rep.rows.append(CostRow("backbone", f"stage{i}_down3x3", 9 * cin * cout + cout, conv_macs(n, cin, cout, 3, 3, h, w)))
        rep.rows.append(CostRow("backbone", f"stage{i}_conv3x3", 9 * cout * cout + cout, conv_macs(n, cout, cout, 3, 3, h, w)))
        cin = cout
    feat = (n, cin, h, w)
    if config.with_dfa:
        rep.extend(dfa_cost(config.dfa_config(), feat))
    if config.with_mc:
        rep.extend(mc_cost(config.mc_config(), feat))
    rep.rows.append(CostRow("head", "head1x1", cin * HEAD_CHANNELS + HEAD_CHANNELS, conv_macs(n, cin, HEAD_CHANNELS, 1, 1, h, w)))
    return rep


def cost_report(module, shape) -> CostReport:
    """Cost table for a DfaConfig, McConfig, DetectorConfig or Detector."""
    if isinstance(module, Detector):
        module = module.config
    if isinstance(module, DfaConfig):
        return dfa_cost(module, shape)
    if isinstance(module, McConfig):
        return mc_cost(module, shape)
    if isinstance(module, DetectorConfig):
        return detector_cost(module, shape)
    raise TypeError(f"no cost model for {type(module).__name__}")


def count_macs(module, shape) -> int:
    return cost_report(module, shape).total_macs


def dense_vs_axial_macs(k: int, c: int, h: int = 1, w: int = 1, n: int = 1) -> tuple[int, int]:
    """MACs of a dense k x k depthwise kernel and of the (1 x k, k x 1) pair replacing it."""
    shape = (n, c, h, w)
    dense = depthwise_macs((c, k, k), shape)
    axial = depthwise_macs((c, 1, k), shape) + depthwise_macs((c, k, 1), shape)
    return dense, axial


def axial_savings(k: int, c: int) -> float:
    """Dense-to-axial cost ratio k^2 C / 2kC = k / 2."""
    if k < 1 or c < 1:
        raise ValueError("k and C must be >= 1")
    dense, axial = dense_vs_axial_macs(k, c)
    ratio = Fraction(dense, axial)
    if ratio != Fraction(k, 2):
        raise AssertionError(f"MAC count ratio {ratio} disagrees with k/2 for k={k}")
    return float(ratio)
