"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .tensor import Graph, NonFiniteError, Tensor

KINK_RADIUS = 1e-3


@dataclass
class CheckEntry:
    id: str
    description: str
    measured: float
    tolerance: float
    passed: bool
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class VerificationReport:
    suite: str
    entries: list[CheckEntry] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    version: str = ""

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def add(self, entry: CheckEntry) -> CheckEntry:
        self.entries.append(entry)
        return entry

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "version": self.version,
            "passed": self.passed,
            "entries": [e.to_dict() for e in self.entries],
            "config": self.config,
        }


def nudge_kinks(x: np.ndarray, kinks=(0.0,), radius: float = KINK_RADIUS) -> tuple[np.ndarray, int]:
    """Move coordinates lying within ``radius`` of a kink to exactly ``radius`` away.

    Returns the adjusted copy and how many coordinates were moved.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    moved = 0
    for k in kinks:
        close = np.abs(x - k) < radius
        if close.any():
            moved += int(close.sum())
            x[close] = k + np.where(x[close] >= k, radius, -radius)
    return x, moved


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(x)
    probe = x.copy()
    flat = probe.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(probe)).item()
        flat[i] = orig - step
        fm = f(Tensor(probe)).item()
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    leaf = Tensor(x.copy(), requires_grad=True)
    with Graph() as g:
        loss = f(leaf)
    grads = g.backward(loss)
    return grads.get(leaf, np.zeros_like(x))


def grad_check(
    f: Callable[[Tensor], Tensor],
    at: Tensor | np.ndarray,
    step: float = 1e-5,
    tol: float = 1e-4,
    name: str = "grad_check",
    kinks: tuple[float, ...] | None = None,
    skip: np.ndarray | None = None,
) -> CheckEntry:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``kinks`` lists input values where ``f`` is not differentiable (0.0 for
    relu); probe coordinates within 1e-3 of one are moved 1e-3 away first.
    Coordinates flagged in ``skip`` are left out of the comparison. A
    non-finite gradient is reported as a failed entry rather than raised.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64, copy=True)
    nudged = 0
    if kinks:
        x, nudged = nudge_kinks(x, kinks)
    details: dict = {"step": step, "nudged": nudged, "elements": int(x.size)}
    try:
        a = analytic_gradient(f, x)
        n = numeric_gradient(f, x, step)
    except (NonFiniteError, FloatingPointError) as exc:
        details["error"] = str(exc)
        return CheckEntry(name, "non-finite evaluation", float("inf"), tol, False, details)
    if not (np.isfinite(a).all() and np.isfinite(n).all()):
        details["error"] = "non-finite gradient"
        return CheckEntry(name, "non-finite gradient", float("inf"), tol, False, details)
    err = relative_error(a, n)
    if skip is not None:
        details["skipped"] = int(np.count_nonzero(skip))
        err = np.where(skip, 0.0, err)
    worst = float(err.max()) if err.size else 0.0
    return CheckEntry(name, "max relative error vs central differences", worst, tol, worst < tol, details)
