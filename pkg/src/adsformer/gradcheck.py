"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, ...]
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def failures(self) -> list[ParamCheck]:
        return [p for p in self.params if not p.passed]

    def __str__(self) -> str:
        lines = [f"grad check: {'PASS' if self.passed else 'FAIL'} (tol {self.tol:g})"]
        for p in self.params:
            lines.append(f"  {p.name:<28} rel={p.max_rel_error:.2e} abs={p.max_abs_error:.2e} "
                         f"n={p.n_checked} {'ok' if p.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, atol: float = 1e-9, floor: float = 1e-8,
               names: Sequence[str] | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None,
               analytic: Callable[[], Sequence[np.ndarray]] | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``. A
    coordinate passes when that is below ``tol`` or the absolute gap is
    below ``atol`` (finite differences cannot resolve gradients that are
    zero up to rounding). ``max_coords`` samples coordinates of large
    parameters. ``analytic`` overrides autograd, for negative controls.
    """
    if analytic is None:
        for p in params:
            p.zero_grad()
        backward(f())
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    else:
        grads = [np.asarray(g, dtype=float) for g in analytic()]

    report = GradCheckReport(tol=tol)
    for k, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(k)
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        worst_rel, worst_abs, worst_idx, ok = 0.0, 0.0, 0, True
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = g.reshape(-1)[i]
            gap = abs(a - numeric)
            rel = gap / max(abs(a), abs(numeric), floor)
            if rel >= tol and gap >= atol:
                ok = False
            if rel > worst_rel:
                worst_rel, worst_idx = rel, int(i)
            worst_abs = max(worst_abs, gap)
        name = (names[k] if names else None) or p.name or f"param{k}"
        report.params.append(ParamCheck(name, worst_rel, worst_abs,
                                        np.unravel_index(worst_idx, p.shape) if p.shape else (),
                                        len(coords), ok))
    return report
