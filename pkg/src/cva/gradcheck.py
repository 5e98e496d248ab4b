"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    nonsmooth: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and all(e <= self.tolerance for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    def summary(self) -> str:
        parts = [f"{k}={v:.2e}" for k, v in self.max_rel_err.items()]
        status = "PASS" if self.passed else "FAIL"
        extra = f" nonsmooth_excluded={len(self.nonsmooth)}" if self.nonsmooth else ""
        fails = f" failures={self.failures}" if self.failures else ""
        return f"{status} tol={self.tolerance:g} " + " ".join(parts) + extra + fails


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    kink_ratio: float = 0.1,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f(**inputs)`` with central differences.

    ``f`` receives one :class:`Tensor` per named input and must return a scalar.
    With ``max_entries`` only a random subset of coordinates per input is probed.
    A coordinate whose one-sided differences disagree by more than
    ``kink_ratio * max(1, |central|)`` is treated as a non-smooth point and
    excluded from the error statistics.
    """
    report = GradCheckReport(tolerance=tolerance)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    for k, v in arrays.items():
        if not np.all(np.isfinite(v)):
            report.failures.append(f"{k}: non-finite input")
    if report.failures:
        return report

    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    out = f(**leaves)
    f0 = out.item()
    grads = backward(out)

    def evaluate(name: str, arr: np.ndarray) -> float:
        args = {k: Tensor(arr if k == name else v) for k, v in arrays.items()}
        return f(**args).item()

    rng = np.random.default_rng(seed)
    for name, base in arrays.items():
        analytic = grads[leaves[name]].data if leaves[name] in grads else np.zeros_like(base)
        if not np.all(np.isfinite(analytic)):
            loc = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            report.failures.append(f"{name}{list(loc)}: non-finite analytic gradient")
            continue
        flat_idx = np.arange(base.size)
        if max_entries is not None and base.size > max_entries:
            flat_idx = np.sort(rng.choice(base.size, size=max_entries, replace=False))
        worst = 0.0
        n_checked = 0
        for fi in flat_idx:
            loc = np.unravel_index(fi, base.shape)
            x = base.copy()
            x[loc] = base[loc] + step
            fp = evaluate(name, x)
            x[loc] = base[loc] - step
            fm = evaluate(name, x)
            num = (fp - fm) / (2 * step)
            if not np.isfinite(num):
                report.failures.append(f"{name}{[int(i) for i in loc]}: non-finite numeric gradient")
                continue
            fwd, bwd = (fp - f0) / step, (f0 - fm) / step
            if abs(fwd - bwd) > kink_ratio * max(1.0, abs(num)):
                report.nonsmooth.append((name, tuple(int(i) for i in loc)))
                continue
            err = float(relative_error(np.float64(analytic[loc]), np.float64(num)))
            worst = max(worst, err)
            n_checked += 1
        report.max_rel_err[name] = worst
        report.checked[name] = n_checked
    return report
