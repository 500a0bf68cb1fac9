"""Verification suites: invariant and oracle checks for every module."""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Callable

import numpy as np

from . import __version__, oracles
from . import params as P
from .complexity import cost_report, count_params, dense_vs_axial_macs, axial_savings
from .core import ops
from .core.gradcheck import CheckEntry, VerificationReport, grad_check
from .core.rng import make_rng
from .core.tensor import Tensor
from .dfa import (
    DfaConfig, DfaParams, bias_from_mlp, build_rel_pos, dfa_attend, dfa_forward, global_downsample,
    param_count_formula as dfa_formula,
)
from .detector.metrics import average_precision, evaluate_map, iou, match_detections
from .detector.model import DetectorConfig, base_param_formula, build_model
from .detector.scenes import generate_scene
from .detector.train import gradcam, heatmap
from .mc import (
    McConfig, McParams, channel_attention, channel_reweight, mc_forward, multiscale_branches, spatial_fuse,
    param_count_formula as mc_formula,
)

SUITES = ("tensor", "dfa", "mc", "flops", "detector")

DEFAULT_TOLERANCES = {
    "grad_step": 1e-5,
    "grad_tol": 1e-4,
    "grad_seeds": 10,
    "oracle_tol": 1e-12,
    "attention_oracle_tol": 1e-10,
    "softmax_tol": 1e-12,
    "norm_tol": 1e-10,
    "separability_tol": 1e-10,
}


def _entry(id_, description, measured, tol, passed, **details) -> CheckEntry:
    return CheckEntry(id_, description, float(measured), float(tol), bool(passed), details)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def _randomize(params, rng, scale=0.5):
    """Give every tensor of a parameter tree non-trivial random values."""
    for t in P.parameters(params):
        t.data = rng.uniform(-scale, scale, size=t.shape)
    return params


def maxpool_tie_mask(x: np.ndarray, k: int, s: int, radius: float = 1e-3) -> np.ndarray:
    """Flag elements of windows whose two largest values are within ``radius``.

    Central differences across such near-ties straddle the switch of the
    argmax, so those coordinates are excluded from gradient probes.
    """
    n, c, h, w = x.shape
    ho, wo = ops.pool_output_size(h, k, s), ops.pool_output_size(w, k, s)
    mask = np.zeros(x.shape, dtype=bool)
    for i in range(ho):
        for j in range(wo):
            win = x[:, :, i * s : i * s + k, j * s : j * s + k]
            flat = np.sort(win.reshape(n, c, -1), axis=-1)
            if flat.shape[-1] < 2:
                continue
            tied = (flat[..., -1] - flat[..., -2]) < radius
            mask[:, :, i * s : i * s + k, j * s : j * s + k] |= tied[:, :, None, None]
    return mask


# ---------------------------------------------------------------------------
# tensor core


def tensor_gradient_cases(seed: int) -> list[tuple[str, Callable, np.ndarray, dict]]:
    """(name, scalar function of one tensor, probe point, grad_check kwargs) per operator input."""
    rng = make_rng(seed)
    nrm = rng.normal
    cases = []

    def weighted(fn, shape_out):
        r = nrm(size=shape_out)
        return lambda t: ops.sum(ops.mul(fn(t), r))

    a, b = nrm(size=(3, 4)), nrm(size=(1, 4))
    cases += [
        ("add.lhs", weighted(lambda t: ops.add(t, Tensor(b)), (3, 4)), a, {}),
        ("add.rhs_broadcast", weighted(lambda t: ops.add(Tensor(a), t), (3, 4)), b, {}),
        ("sub.rhs", weighted(lambda t: ops.sub(Tensor(a), t), (3, 4)), b, {}),
        ("mul.lhs", weighted(lambda t: ops.mul(t, Tensor(b)), (3, 4)), a, {}),
        ("mul.rhs_broadcast", weighted(lambda t: ops.mul(Tensor(a), t), (3, 4)), b, {}),
        ("div.lhs", weighted(lambda t: ops.div(t, Tensor(b * b + 1.0)), (3, 4)), a, {}),
        ("div.rhs", weighted(lambda t: ops.div(Tensor(a), t), (3, 4)), b * b + 1.0, {}),
        ("neg", weighted(ops.neg, (3, 4)), a, {}),
        ("abs", weighted(ops.abs, (3, 4)), a, {"kinks": (0.0,)}),
        ("sum.axis", weighted(lambda t: ops.sum(t, axis=1), (3,)), a, {}),
        ("mean.axis", weighted(lambda t: ops.mean(t, axis=0, keepdims=True), (1, 4)), a, {}),
        ("reshape", weighted(lambda t: ops.reshape(t, (2, 6)), (2, 6)), a, {}),
        ("transpose", weighted(lambda t: ops.transpose(t, (1, 0)), (4, 3)), a, {}),
        ("concat", weighted(lambda t: ops.concat([t, Tensor(a)], axis=0), (6, 4)), a, {}),
        ("pad", weighted(lambda t: ops.pad(t, ((1, 0), (0, 2))), (4, 6)), a, {}),
        ("crop", weighted(lambda t: ops.crop(t, (slice(1, 3), slice(0, 4, 2))), (2, 2)), a, {}),
    ]
    m1, m2, lb = nrm(size=(2, 3, 4)), nrm(size=(4, 5)), nrm(size=5)
    cases += [
        ("matmul.lhs", weighted(lambda t: ops.matmul(t, Tensor(m2)), (2, 3, 5)), m1, {}),
        ("matmul.rhs_broadcast", weighted(lambda t: ops.matmul(Tensor(m1), t), (2, 3, 5)), m2, {}),
        ("linear.weight", weighted(lambda t: ops.linear(Tensor(m1), t, Tensor(lb)), (2, 3, 5)),
         nrm(size=(5, 4)), {}),
    ]
    x = nrm(size=(2, 3, 6, 5))
    k, kb = nrm(size=(4, 3, 3, 3)), nrm(size=4)
    cases += [
        ("conv2d.input_same", weighted(lambda t: ops.conv2d(t, Tensor(k), Tensor(kb)), (2, 4, 6, 5)), x, {}),
        ("conv2d.input_stride2", weighted(lambda t: ops.conv2d(t, Tensor(k), None, 2, "same"), (2, 4, 3, 3)), x, {}),
        ("conv2d.kernel", weighted(lambda t: ops.conv2d(Tensor(x), t, Tensor(kb), 2, 1), (2, 4, 3, 3)), k, {}),
        ("conv2d.bias", weighted(lambda t: ops.conv2d(Tensor(x), Tensor(k), t), (2, 4, 6, 5)), kb, {}),
        ("conv2d.pointwise", weighted(lambda t: ops.conv2d(t, Tensor(k[:, :, :1, :1]), None, 1, 0), (2, 4, 6, 5)), x, {}),
    ]
    dk, db = nrm(size=(3, 3, 5)), nrm(size=3)
    cases += [
        ("depthwise.input", weighted(lambda t: ops.depthwise_conv2d(t, Tensor(dk), Tensor(db)), x.shape), x, {}),
        ("depthwise.kernel", weighted(lambda t: ops.depthwise_conv2d(Tensor(x), t, None), x.shape), dk, {}),
        ("depthwise.bias", weighted(lambda t: ops.depthwise_conv2d(Tensor(x), Tensor(dk), t), x.shape), db, {}),
    ]
    cases += [
        ("avg_pool.2x2", weighted(lambda t: ops.pool2d(t, "avg", 2, 2), (2, 3, 3, 3)), x, {}),
        ("avg_pool.3s2_truncated", weighted(lambda t: ops.pool2d(t, "avg", 3, 2), (2, 3, 3, 2)), x, {}),
        ("avg_pool.global", weighted(lambda t: ops.pool2d(t, "avg", "global"), (2, 3, 1, 1)), x, {}),
        ("max_pool.2x2", weighted(lambda t: ops.pool2d(t, "max", 2, 2), (2, 3, 3, 3)), x,
         {"skip": maxpool_tie_mask(x, 2, 2)}),
        ("max_pool.global", weighted(lambda t: ops.pool2d(t, "max", "global"), (2, 3, 1, 1)), x,
         {"skip": maxpool_tie_mask(x, 6, 6)}),
    ]
    s = nrm(size=(3, 5)) * 2
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    gamma, beta = nrm(size=5), nrm(size=5)
    target = (rng.random((3, 5)) < 0.5).astype(float)
    cases += [
        ("softmax", weighted(lambda t: ops.softmax(t, -1), (3, 5)), s, {}),
        ("softmax.axis0_masked", weighted(lambda t: ops.softmax(t, 0, mask), (3, 5)), s, {}),
        ("layer_norm.input", weighted(lambda t: ops.layer_norm(t, Tensor(gamma), Tensor(beta)), (3, 5)), s, {}),
        ("layer_norm.gamma", weighted(lambda t: ops.layer_norm(Tensor(s), t, Tensor(beta)), (3, 5)), gamma, {}),
        ("layer_norm.beta", weighted(lambda t: ops.layer_norm(Tensor(s), Tensor(gamma), t), (3, 5)), beta, {}),
        ("relu", weighted(ops.relu, (3, 5)), s, {"kinks": (0.0,)}),
        # deep in the left tail gelu' ~ 1e-12 sits below the finite-difference noise floor
        ("gelu", weighted(ops.gelu, (3, 5)), rng.uniform(-4.0, 4.0, size=(3, 5)), {}),
        ("sigmoid", weighted(ops.sigmoid, (3, 5)), s, {}),
        ("l2_normalize", weighted(lambda t: ops.l2_normalize(t, -1), (3, 5)), s, {}),
        ("l2_normalize.axis0", weighted(lambda t: ops.l2_normalize(t, 0), (3, 5)), s, {}),
        ("dropout.train", weighted(lambda t: ops.dropout(t, 0.3, make_rng(seed), True), (3, 5)), s, {}),
        ("bce_with_logits", weighted(lambda t: ops.bce_with_logits(t, target), (3, 5)), s, {}),
    ]
    return cases


def suite_tensor(tol: dict) -> VerificationReport:
    rep = VerificationReport("tensor")
    seeds = range(int(tol["grad_seeds"]))
    worst: dict[str, float] = {}
    failures: dict[str, int] = {}
    for seed in seeds:
        for name, f, x, kw in tensor_gradient_cases(seed):
            e = grad_check(f, x, tol["grad_step"], tol["grad_tol"], name=name, **kw)
            worst[name] = max(worst.get(name, 0.0), e.measured)
            failures[name] = failures.get(name, 0) + (not e.passed)
    for name in worst:
        rep.add(_entry(f"grad.{name}", "max relative gradient error over seeds", worst[name], tol["grad_tol"],
                       failures[name] == 0, seeds=len(seeds)))

    rng = make_rng(1234)
    x, k, bias = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    d = _max_abs(ops.conv2d(Tensor(x), Tensor(k), Tensor(bias)).data, oracles.conv2d_loops(x, k, bias, 1, (1, 1, 1, 1)))
    rep.add(_entry("oracle.conv2d_same", "conv2d vs nested loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))
    d = _max_abs(ops.conv2d(Tensor(x), Tensor(k), None, 2, "same").data, oracles.conv2d_loops(x, k, None, 2, (1, 1, 1, 1)))
    rep.add(_entry("oracle.conv2d_stride2", "strided conv2d vs nested loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))
    p = rng.normal(size=(2, 3, 4, 4))
    d = _max_abs(ops.pool2d(Tensor(p), "avg", 2, 2).data, oracles.pool2d_loops(p, "avg", 2, 2))
    rep.add(_entry("oracle.avg_pool", "avg pool vs window loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))
    d = _max_abs(ops.pool2d(Tensor(p), "max", 2, 2).data, oracles.pool2d_loops(p, "max", 2, 2))
    rep.add(_entry("oracle.max_pool", "max pool vs window loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))
    p5 = rng.normal(size=(1, 2, 5, 7))
    d = _max_abs(ops.pool2d(Tensor(p5), "avg", 3, 2).data, oracles.pool2d_loops(p5, "avg", 3, 2))
    rep.add(_entry("oracle.avg_pool_truncated", "truncated-window avg pool vs loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))

    xi = rng.normal(size=(2, 3, 6, 6))
    delta = np.zeros((3, 3, 3, 3))
    for c in range(3):
        delta[c, c, 1, 1] = 1.0
    d = _max_abs(ops.conv2d(Tensor(xi), Tensor(delta)).data, xi)
    rep.add(_entry("identity.conv2d", "delta kernel conv2d is exact identity", d, 0.0, d == 0.0))
    dd = np.zeros((3, 5, 5))
    dd[:, 2, 2] = 1.0
    d = _max_abs(ops.depthwise_conv2d(Tensor(xi), Tensor(dd)).data, xi)
    rep.add(_entry("identity.depthwise", "delta kernel depthwise conv is exact identity", d, 0.0, d == 0.0))
    dk = rng.normal(size=(3, 3, 3))
    block = np.zeros((3, 3, 3, 3))
    for c in range(3):
        block[c, c] = dk[c]
    d = _max_abs(ops.depthwise_conv2d(Tensor(xi), Tensor(dk)).data, ops.conv2d(Tensor(xi), Tensor(block)).data)
    rep.add(_entry("oracle.depthwise_grouped", "depthwise vs block-diagonal conv2d", d, tol["oracle_tol"], d < tol["oracle_tol"]))

    logits = rng.normal(size=(50, 17)) * 5
    sm = ops.softmax(Tensor(logits), -1).data
    d = float(np.abs(sm.sum(-1) - 1).max())
    rep.add(_entry("softmax.rows", "softmax rows sum to 1, entries in (0,1)", d, tol["softmax_tol"],
                   d < tol["softmax_tol"] and bool(((sm > 0) & (sm < 1)).all())))

    a1 = ops.dropout(Tensor(xi), 0.5, make_rng(7)).data
    a2 = ops.dropout(Tensor(xi), 0.5, make_rng(7)).data
    rep.add(_entry("determinism.dropout", "same seed gives bit-identical dropout", _max_abs(a1, a2), 0.0,
                   np.array_equal(a1, a2)))
    return rep


# ---------------------------------------------------------------------------
# DFA


def _dfa_with_random_proj(cfg: DfaConfig, seed: int) -> DfaParams:
    rng = make_rng(seed)
    p = DfaParams.init(cfg, rng)
    p.proj_w.data = rng.uniform(-0.5, 0.5, size=p.proj_w.shape)
    p.proj_b.data = rng.uniform(-0.1, 0.1, size=p.proj_b.shape)
    for mlp in (p.local_mlp, p.global_mlp):
        mlp.b1.data = rng.uniform(-0.5, 0.5, size=mlp.b1.shape)
        mlp.b2.data = rng.uniform(-0.5, 0.5, size=mlp.b2.shape)
    return p


def suite_dfa(tol: dict, base: DfaConfig | None = None) -> VerificationReport:
    rep = VerificationReport("dfa")
    base = base or DfaConfig(8)
    rng = make_rng(99)

    cfg = replace(base, channels=8, window=3, pool_ratio=3)
    p = _dfa_with_random_proj(cfg, 3)
    x = rng.normal(size=(2, 8, 7, 5))
    trace: dict = {}
    dfa_attend(Tensor(x), p, cfg, trace)
    a_l, a_g, m = trace["a_local"].data, trace["a_global"].data, trace["local_mask"]
    row_err = max(float(np.abs(a_l.sum(-1) - 1).max()), float(np.abs(a_g.sum(-1) - 1).max()))
    valid = np.broadcast_to(m, a_l.shape) if m is not None else np.ones_like(a_l, dtype=bool)
    inside = bool(((a_l[valid] > 0) & (a_l[valid] < 1)).all() and ((a_g > 0) & (a_g < 1)).all())
    rep.add(_entry("attention.rows", "every attention row sums to 1 with entries in (0,1)", row_err,
                   tol["softmax_tol"], row_err < tol["softmax_tol"] and inside))

    norms = []
    for key in ("q_hat_local", "k_hat_local", "q_hat_global", "k_hat_global"):
        v = np.linalg.norm(trace[key].data, axis=-1)
        if key.endswith("local") and m is not None:
            v = v[np.broadcast_to(m.reshape(1, m.shape[1], 1, m.shape[-1]), v.shape)]
        norms.append(float(np.abs(v - 1).max()))
    d = max(norms)
    rep.add(_entry("attention.unit_norms", "normalised query/key vectors have norm 1", d, tol["norm_tol"], d < tol["norm_tol"]))

    cfg0 = replace(base, channels=8)
    p0 = DfaParams.init(cfg0, make_rng(5))
    x0 = rng.normal(size=(1, 8, 6, 6))
    out = dfa_forward(Tensor(x0), p0, cfg0, mode="eval").data
    rep.add(_entry("residual.identity_at_init", "zero-initialised projection gives X_out == X", _max_abs(out, x0), 0.0,
                   np.array_equal(out, x0)))

    # locality: outputs in window (0,0) ignore a token in another window
    cfg_loc = replace(base, channels=8, window=3, pool_ratio=2)
    pl = _dfa_with_random_proj(cfg_loc, 11)
    pl.proj_w.data[:, 8:] = 0.0
    xa = rng.normal(size=(1, 8, 6, 6))
    xb = xa.copy()
    xb[0, :, 4, 5] += 3.0
    la, _ = dfa_attend(Tensor(xa), pl, cfg_loc)
    lb, _ = dfa_attend(Tensor(xb), pl, cfg_loc)
    oa = dfa_forward(Tensor(xa), pl, cfg_loc).data
    ob = dfa_forward(Tensor(xb), pl, cfg_loc).data
    d = max(_max_abs(la.data[..., :3, :3], lb.data[..., :3, :3]), _max_abs(oa[..., :3, :3], ob[..., :3, :3]))
    rep.add(_entry("locality", "perturbing another window leaves local output unchanged", d, 0.0, d == 0.0))

    # scale invariance of the local similarity with bias-free projections
    ps = _dfa_with_random_proj(cfg_loc, 12)
    for t in (ps.q_b, ps.k_local_b):
        t.data = np.zeros_like(t.data)
    t1, t2 = {}, {}
    dfa_attend(Tensor(xa), ps, cfg_loc, t1)
    dfa_attend(Tensor(2.0 * xa), ps, cfg_loc, t2)
    d = max(_max_abs(t1["s_local"].data, t2["s_local"].data), _max_abs(t1["a_local"].data, t2["a_local"].data),
            _max_abs(t1["q_hat_global"].data, t2["q_hat_global"].data))
    rep.add(_entry("scale_invariance", "S and A of the local branch are unchanged by X -> 2X", d, 0.0, d == 0.0))

    cfg_o = replace(base, channels=8, window=3, pool_ratio=3)
    po = _dfa_with_random_proj(cfg_o, 13)
    xo = rng.normal(size=(1, 8, 6, 6))
    fl, fg = dfa_attend(Tensor(xo), po, cfg_o)
    ol, og = oracles.dfa_attend_loops(xo, po, cfg_o)
    d = max(_max_abs(fl.data, ol), _max_abs(fg.data, og))
    rep.add(_entry("oracle.attend", "both branches vs per-pair loops", d, tol["attention_oracle_tol"],
                   d < tol["attention_oracle_tol"]))
    cfg_h = replace(cfg_o, heads=2, window=4)
    ph = _dfa_with_random_proj(cfg_h, 14)
    xh = rng.normal(size=(1, 8, 5, 7))
    fl, fg = dfa_attend(Tensor(xh), ph, cfg_h)
    ol, og = oracles.dfa_attend_loops(xh, ph, cfg_h)
    d = max(_max_abs(fl.data, ol), _max_abs(fg.data, og))
    rep.add(_entry("oracle.attend_two_heads", "two heads, ragged windows vs loops", d, tol["attention_oracle_tol"],
                   d < tol["attention_oracle_tol"]))

    xg = rng.normal(size=(1, 8, 8, 8))
    cfg_g = replace(base, channels=8, pool_ratio=3)
    pg = _randomize(DfaParams.init(cfg_g, make_rng(15)), make_rng(16))
    d = _max_abs(global_downsample(Tensor(xg), pg, cfg_g).data,
                 oracles.global_downsample_steps(xg, pg, cfg_g.pool_ratio, cfg_g.ln_eps))
    rep.add(_entry("oracle.global_downsample", "Linear-GELU-AvgPool-LayerNorm vs step-by-step", d, tol["oracle_tol"],
                   d < tol["oracle_tol"]))

    table = build_rel_pos(3, 3, "local", replace(base, channels=8, heads=2, window=3))
    mlp = _randomize(DfaParams.init(replace(base, channels=8, heads=2), make_rng(17)), make_rng(18)).local_mlp
    got = bias_from_mlp(table, mlp).data
    want = np.zeros_like(got)
    for qi in range(table.offsets.shape[0]):
        for ki in range(table.offsets.shape[1]):
            want[:, qi, ki] = oracles.mlp_scalar(table.offsets[qi, ki], mlp.w1.data, mlp.b1.data, mlp.w2.data, mlp.b2.data)
    d = _max_abs(got, want)
    rep.add(_entry("oracle.bias_mlp", "bias MLP vs per-pair evaluation", d, tol["oracle_tol"], d < tol["oracle_tol"]))

    worst, fails = 0.0, 0
    for seed in range(int(tol["grad_seeds"])):
        pd = _dfa_with_random_proj(cfg0, 100 + seed)
        r = make_rng(200 + seed)
        xs, wt = r.normal(size=(1, 8, 6, 6)), r.normal(size=(1, 8, 6, 6))
        e = grad_check(lambda t: ops.sum(ops.mul(dfa_forward(t, pd, cfg0), wt)), xs, tol["grad_step"], tol["grad_tol"])
        worst, fails = max(worst, e.measured), fails + (not e.passed)
    rep.add(_entry("grad.dfa_forward", "full DFA forward on 1x8x6x6 vs central differences", worst, tol["grad_tol"],
                   fails == 0, seeds=int(tol["grad_seeds"])))

    bad = []
    for h, w, win, r in [(1, 1, 1, 1), (1, 5, 2, 3), (7, 3, 4, 2), (9, 9, 8, 4), (4, 6, 8, 8)]:
        c = replace(base, channels=8, window=win, pool_ratio=r)
        pr = _dfa_with_random_proj(c, 19)
        if dfa_forward(Tensor(rng.normal(size=(2, 8, h, w))), pr, c).shape != (2, 8, h, w):
            bad.append((h, w, win, r))
    rep.add(_entry("shape_preservation", "output shape equals input shape", len(bad), 0, not bad, failures=bad))

    ptr = _dfa_with_random_proj(replace(base, channels=8, dropout=0.3), 20)
    ctr = replace(base, channels=8, dropout=0.3)
    y1 = dfa_forward(Tensor(x0), ptr, ctr, "train", make_rng(21)).data
    y2 = dfa_forward(Tensor(x0), ptr, ctr, "train", make_rng(21)).data
    rep.add(_entry("determinism.train_mode", "fixed seed gives bit-identical train-mode output", _max_abs(y1, y2), 0.0,
                   np.array_equal(y1, y2)))
    rep.add(_entry("params.closed_form", "parameter count equals closed form",
                   abs(count_params(p0) - dfa_formula(cfg0)), 0, count_params(p0) == dfa_formula(cfg0)))
    return rep


# ---------------------------------------------------------------------------
# MC


def separability_error(n: int, rng: np.random.Generator, channels: int = 3, size: int = 25) -> float:
    """Max difference between the 1 x n -> n x 1 axial pair and the dense n x n rank-1 kernel."""
    u, v = rng.normal(size=(channels, n)), rng.normal(size=(channels, n))
    x = Tensor(rng.normal(size=(2, channels, size, size + 3)))
    axial = ops.depthwise_conv2d(ops.depthwise_conv2d(x, Tensor(v[:, None, :])), Tensor(u[:, :, None]))
    dense = ops.depthwise_conv2d(x, Tensor(u[:, :, None] * v[:, None, :]))
    return _max_abs(axial.data, dense.data)


def suite_mc(tol: dict, base: McConfig | None = None) -> VerificationReport:
    rep = VerificationReport("mc")
    base = base or McConfig(8)
    rng = make_rng(7)
    for n in (7, 11, 21):
        d = separability_error(n, rng)
        rep.add(_entry(f"separability.n{n}", f"axial 1x{n} then {n}x1 equals dense {n}x{n} rank-1 kernel", d,
                       tol["separability_tol"], d < tol["separability_tol"]))

    cfg = replace(base, channels=8)
    p = _randomize(McParams.init(cfg, make_rng(8)), make_rng(9), scale=1.0)
    x = rng.normal(size=(3, 8, 9, 11))
    xa, xm = channel_attention(Tensor(x), p, cfg)
    ok = bool(((xa.data > 0) & (xa.data < 1) & (xm.data > 0) & (xm.data < 1)).all())
    rep.add(_entry("gates.open_interval", "channel gates lie in (0,1)", float(min(xa.data.min(), xm.data.min())), 0.0, ok))
    oa, om = oracles.channel_attention_steps(x, p)
    d = max(_max_abs(xa.data, oa), _max_abs(xm.data, om))
    rep.add(_entry("oracle.channel_attention", "gates vs step-by-step evaluation", d, tol["oracle_tol"], d < tol["oracle_tol"]))

    x0 = channel_reweight(Tensor(x), xa, xm)
    branches = multiscale_branches(x0, p)
    got = spatial_fuse(x0, *branches, p).data
    want = oracles.spatial_fuse_steps(x0.data, *(b.data for b in branches), p)
    d = _max_abs(got, want)
    rep.add(_entry("oracle.spatial_fuse", "fusion vs step-by-step evaluation", d, tol["oracle_tol"], d < tol["oracle_tol"]))
    want_b1 = oracles.depthwise_loops(
        oracles.depthwise_loops(oracles.depthwise_loops(x0.data, p.branches[0].pre.data, p.branches[0].pre_b.data),
                                p.branches[0].row.data, p.branches[0].row_b.data),
        p.branches[0].col.data, p.branches[0].col_b.data)
    d = _max_abs(branches[1].data, want_b1)
    rep.add(_entry("oracle.branch1", "3x3 -> 1x7 -> 7x1 branch vs loops", d, tol["oracle_tol"], d < tol["oracle_tol"]))

    ident = McParams.identity(cfg)
    xi = rng.normal(size=(2, 8, 12, 12))
    out = mc_forward(Tensor(xi), ident, cfg).data
    rep.add(_entry("identity.composed", "identity-configured head returns its input", _max_abs(out, xi), 0.0,
                   np.array_equal(out, xi)))

    pz = McParams.init(cfg, make_rng(10))
    xz = xi.copy()
    xz[:, 3] = 0.0
    zero_bad = 0
    for b in pz.branches:
        y = ops.depthwise_conv2d(Tensor(xz), b.pre)
        y = ops.depthwise_conv2d(ops.depthwise_conv2d(y, b.row), b.col)
        zero_bad += int(np.any(y.data[:, 3] != 0))
    rep.add(_entry("channel_independence", "zeroed channel stays zero through bias-free depthwise stacks",
                   zero_bad, 0, zero_bad == 0))

    impulse = np.zeros((1, 1, 31, 31))
    impulse[0, 0, 15, 15] = 1.0
    supports = []
    for k, n in base.branches:
        pre = np.zeros((1, k, k))
        pre[0, k // 2, k // 2] = 1.0
        y = ops.depthwise_conv2d(Tensor(impulse), Tensor(pre))
        y = ops.depthwise_conv2d(ops.depthwise_conv2d(y, Tensor(np.ones((1, 1, n)))), Tensor(np.ones((1, n, 1))))
        rows, cols = np.nonzero(y.data[0, 0])
        supports.append((int(rows.max() - rows.min() + 1), int(cols.max() - cols.min() + 1)))
    want = [(min(n, 31), min(n, 31)) for _, n in base.branches]
    rep.add(_entry("receptive_field", "impulse response support of each axial stack is n x n", 0 if supports == want else 1,
                   0, supports == want, supports=supports))

    worst, fails = 0.0, 0
    for seed in range(int(tol["grad_seeds"])):
        r = make_rng(300 + seed)
        pm = McParams.init(cfg, r)
        for t in P.parameters(pm):
            if not t.data.any():
                t.data = r.uniform(-0.2, 0.2, size=t.shape)
        xs, wt = r.normal(size=(1, 8, 12, 12)), r.normal(size=(1, 8, 12, 12))
        e = grad_check(lambda t: ops.sum(ops.mul(mc_forward(t, pm, cfg), wt)), xs, tol["grad_step"], tol["grad_tol"])
        worst, fails = max(worst, e.measured), fails + (not e.passed)
    rep.add(_entry("grad.mc_forward", "full MC forward on 1x8x12x12 vs central differences", worst, tol["grad_tol"],
                   fails == 0, seeds=int(tol["grad_seeds"])))

    y1 = mc_forward(Tensor(xi), pz, cfg).data
    y2 = mc_forward(Tensor(xi), McParams.init(cfg, make_rng(10)), cfg).data
    rep.add(_entry("determinism", "same seed gives bit-identical output", _max_abs(y1, y2), 0.0, np.array_equal(y1, y2)))
    rep.add(_entry("params.closed_form", "parameter count equals closed form", abs(count_params(pz) - mc_formula(cfg)), 0,
                   count_params(pz) == mc_formula(cfg)))
    return rep


# ---------------------------------------------------------------------------
# complexity


def suite_flops(tol: dict, dfa_base: DfaConfig | None = None, mc_base: McConfig | None = None,
                det_base: DetectorConfig | None = None) -> VerificationReport:
    rep = VerificationReport("flops")
    dfa_base = dfa_base or DfaConfig(64)
    mc_base = mc_base or McConfig(64)
    det_base = det_base or DetectorConfig()
    for k in (7, 11, 21):
        ratio = axial_savings(k, 64)
        rep.add(_entry(f"axial_ratio.k{k}", f"dense/axial MAC ratio for k={k} equals k/2", ratio, 0.0, ratio == k / 2,
                       expected=k / 2))
    bad = []
    for k in (1, 2, 3, 7, 11, 21):
        for c, h, w in ((1, 1, 1), (64, 32, 32), (5, 7, 3)):
            dense, axial = dense_vs_axial_macs(k, c, h, w)
            if axial * k != 2 * dense:
                bad.append((k, c, h, w))
    rep.add(_entry("axial_pair_identity", "axial MACs equal (2k/k^2) * dense MACs exactly", len(bad), 0, not bad))

    d64 = dfa_base if dfa_base.channels == 64 else replace(dfa_base, channels=64)
    m64 = mc_base if mc_base.channels == 64 else replace(mc_base, channels=64)
    for name, cfg, init in (("dfa", d64, DfaParams.init), ("mc", m64, McParams.init)):
        counts = {cost_report(cfg, (1, 64, s, s)).total_params for s in (16, 32, 13)}
        actual = count_params(init(cfg, make_rng(0)))
        blob_count = len(P.parse(P.dumps(init(cfg, make_rng(1))))[1])
        ok = counts == {actual} and blob_count == actual
        rep.add(_entry(f"params_invariant.{name}", f"{name} parameter count is independent of H, W", actual, 0, ok,
                       cost_totals=sorted(counts), serialized=blob_count))

    conv = cost_report(m64, (1, 64, 32, 32))
    dw7 = next(r for r in conv.rows if r.operator == "branch1_dw1x7")
    rep.add(_entry("closed_form.dw1x7", "1x7 depthwise on 1x64x32x32 costs 7*64*32*32 MACs", dw7.macs, 0,
                   dw7.macs == 7 * 64 * 32 * 32))

    # per-module parameter deltas must be the same for every backbone
    deltas = set()
    for widths in ((8, 16, 32), (4, 8, 32), (16, 16, 32), (8, 32)):
        counts = {}
        for dfa_on in (False, True):
            for mc_on in (False, True):
                cfg = replace(det_base, widths=widths, with_dfa=dfa_on, with_mc=mc_on)
                counts[dfa_on, mc_on] = count_params(build_model(cfg, 0))
        deltas.add((counts[True, False] - counts[False, False], counts[False, True] - counts[False, False],
                    counts[True, True] - counts[False, False]))
    det_dfa = count_params(DfaParams.init(det_base.dfa_config(), make_rng(0)))
    det_mc = count_params(McParams.init(det_base.mc_config(), make_rng(0)))
    ok = deltas == {(det_dfa, det_mc, det_dfa + det_mc)}
    rep.add(_entry("ablation.additive_deltas", "DFA/MC deltas are constant across backbones and additive", len(deltas), 1,
                   ok, deltas=sorted(deltas), dfa=det_dfa, mc=det_mc))
    base = base_param_formula(replace(det_base, with_dfa=False, with_mc=False))
    plain = count_params(build_model(replace(det_base, with_dfa=False, with_mc=False), 0))
    rep.add(_entry("detector.base_closed_form", "backbone+head count equals closed form", abs(plain - base), 0, plain == base))
    return rep


# ---------------------------------------------------------------------------
# detector


def suite_detector(tol: dict, det_base: DetectorConfig | None = None) -> VerificationReport:
    rep = VerificationReport("detector")
    det_base = det_base or DetectorConfig()
    cases = [
        ("iou.identical", iou((0, 0, 2, 2), (0, 0, 2, 2)), 1.0),
        ("iou.offset", iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7),
        ("iou.disjoint", iou((0, 0, 1, 1), (2, 2, 3, 3)), 0.0),
    ]
    for name, got, want in cases:
        rep.add(_entry(name, "IoU example", abs(got - want), 1e-12, abs(got - want) < 1e-12))

    gt = [[(0.0, 0.0, 10.0, 10.0)]]
    hit = [[((0.0, 0.0, 10.0, 6.0), 0.9)]]  # IoU 0.6
    miss = [[((0.0, 0.0, 10.0, 4.0), 0.9)]]  # IoU 0.4
    ap_hit = evaluate_map(hit, gt).ap50
    ap_miss = evaluate_map(miss, gt).ap50
    rep.add(_entry("ap.single_match", "IoU 0.6 prediction gives AP50 = 1", abs(ap_hit - 1), 1e-12, ap_hit == 1.0))
    rep.add(_entry("ap.below_threshold", "IoU 0.4 prediction gives AP50 = 0", ap_miss, 1e-12, ap_miss == 0.0))
    ap = average_precision([True, False, True], 2)
    rep.add(_entry("ap.tp_fp_tp", "ranked TP/FP/TP over two GT gives 5/6", abs(ap - 5 / 6), 1e-12, abs(ap - 5 / 6) < 1e-12))
    ap_empty = evaluate_map([[]], [[]]).ap50
    rep.add(_entry("ap.empty", "no GT and no predictions gives AP 1", abs(ap_empty - 1), 0.0, ap_empty == 1.0))

    rng = make_rng(41)
    worst, n_inst = 0.0, 60
    for _ in range(n_inst):
        preds, gts = _random_instance(rng)
        for t in (0.5, 0.75):
            flags, n_gt = match_detections(preds, gts, t)
            d = abs(average_precision(flags, n_gt) - oracles.ap_by_enumeration(preds, gts, t))
            worst = max(worst, d)
    rep.add(_entry("ap.enumeration_oracle", "AP equals exhaustive-assignment oracle on <=3-box instances", worst, 1e-12,
                   worst < 1e-12, instances=n_inst))

    mono_bad = 0
    for _ in range(40):
        preds, gts = _random_instance(rng)
        base_flags, n_gt = match_detections(preds, gts, 0.5)
        before = average_precision(base_flags, n_gt)
        tps = [(i, k) for i, ps in enumerate(preds) for k, _ in enumerate(ps)]
        if not tps:
            continue
        i, k = tps[int(rng.integers(len(tps)))]
        box, conf = preds[i][k]
        dup = [list(p) for p in preds]
        dup[i].append((box, conf * 0.5))
        after = average_precision(*match_detections(dup, gts, 0.5))
        mono_bad += after > before + 1e-15
    rep.add(_entry("ap.duplicate_monotone", "adding a lower-confidence duplicate never raises AP", mono_bad, 0, mono_bad == 0))

    s1, s2 = generate_scene(5), generate_scene(5)
    same = np.array_equal(s1.image, s2.image) and s1.boxes == s2.boxes
    rep.add(_entry("scenes.determinism", "same seed gives identical scenes", 0 if same else 1, 0, same))
    frac = float(np.mean([bool(generate_scene(s).boxes) for s in range(200)]))
    rep.add(_entry("scenes.fracture_rate", "share of seeds 0..199 with a box lies in [0.7, 0.9]", frac, 0.1,
                   0.7 <= frac <= 0.9))

    x = Tensor(generate_scene(3).image[None])
    with_dfa = build_model(replace(det_base, with_dfa=True, with_mc=False), 4)
    without = build_model(replace(det_base, with_dfa=False, with_mc=False), 4)
    d = _max_abs(with_dfa(x).data, without(x).data)
    rep.add(_entry("model.residual_identity", "zero-init DFA leaves detector output unchanged", d, 0.0, d == 0.0))

    model = build_model(det_base, 6)
    hm = heatmap(model, generate_scene(8).image)
    ok = bool(hm.min() >= 0 and hm.max() <= 1)
    rep.add(_entry("heatmap.range", "heatmap lies in [0, 1]", float(hm.max()), 1.0, ok))
    zero = gradcam(np.ones((4, 8, 8)), np.zeros((4, 8, 8)))
    rep.add(_entry("heatmap.zero_gradient", "zero gradients give an all-zero heatmap", float(np.abs(zero).max()), 0.0,
                   not zero.any()))
    return rep


def _random_instance(rng, max_boxes: int = 3):
    n_img = int(rng.integers(1, 3))
    preds, gts = [[] for _ in range(n_img)], [[] for _ in range(n_img)]
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        img = int(rng.integers(n_img))
        x0, y0 = rng.uniform(0, 20, size=2)
        gts[img].append((float(x0), float(y0), float(x0 + rng.uniform(4, 10)), float(y0 + rng.uniform(4, 10))))
    for _ in range(int(rng.integers(0, max_boxes + 1))):
        img = int(rng.integers(n_img))
        if gts[img] and rng.random() < 0.7:
            g = gts[img][int(rng.integers(len(gts[img])))]
            jitter = rng.uniform(-2, 2, size=4)
            box = tuple(float(v) for v in (g[0] + jitter[0], g[1] + jitter[1], g[2] + abs(jitter[2]) + 0.5, g[3] + abs(jitter[3]) + 0.5))
        else:
            x0, y0 = rng.uniform(0, 20, size=2)
            box = (float(x0), float(y0), float(x0 + 6), float(y0 + 6))
        preds[img].append((box, float(rng.uniform(0.05, 1.0))))
    return preds, gts


def run_suite(name: str, tol: dict | None = None, **configs) -> VerificationReport:
    tol = {**DEFAULT_TOLERANCES, **(tol or {})}
    if name == "tensor":
        rep = suite_tensor(tol)
    elif name == "dfa":
        rep = suite_dfa(tol, configs.get("dfa"))
    elif name == "mc":
        rep = suite_mc(tol, configs.get("mc"))
    elif name == "flops":
        rep = suite_flops(tol, configs.get("dfa"), configs.get("mc"), configs.get("detector"))
    elif name == "detector":
        rep = suite_detector(tol, configs.get("detector"))
    elif name == "all":
        rep = VerificationReport("all")
        for sub in SUITES:
            part = run_suite(sub, tol, **configs)
            for e in part.entries:
                e.id = f"{sub}.{e.id}"
                rep.add(e)
    else:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES + ('all',))}")
    rep.version = __version__
    return rep
