"""Central finite differences against the autodiff gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple  # (param name, flat index, autodiff, finite diff)
    checked: int
    per_param: dict = field(default_factory=dict)

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def rel_error(a, f):
    a = np.asarray(a, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def _loss_value(loss_fn, where: str) -> float:
    val = float(np.asarray(loss_fn().data))
    if not np.isfinite(val):
        raise NonFiniteError(f"non-finite loss while perturbing {where}")
    return val


def finite_diff_check(loss_fn, params, eps: float = 1e-6, tolerance: float = 1e-4,
                      max_per_param: int | None = None, rng=None) -> GradCheckReport:
    """Compare autodiff gradients with central differences.

    ``loss_fn`` takes no arguments and returns a scalar Tensor built from
    ``params`` (a mapping name -> Parameter, all float64). When
    ``max_per_param`` is set, each tensor contributes its largest-|grad|
    entries plus an equal number of random ones instead of every entry.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = dict(params)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise TypeError(f"{name} is {p.data.dtype}; gradient checks need float64")
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("non-finite loss at the unperturbed point")
    loss.backward()
    rng = np.random.default_rng(0) if rng is None else rng

    worst = (None, -1, 0.0, 0.0)
    max_err = 0.0
    checked = 0
    per_param = {}
    for name, p in params.items():
        auto = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        size = flat.size
        if max_per_param is None or size <= 2 * max_per_param:
            idx = np.arange(size)
        else:
            top = np.argsort(-np.abs(auto.reshape(-1)), kind="stable")[:max_per_param]
            rest = np.setdiff1d(np.arange(size), top)
            idx = np.concatenate([top, rng.choice(rest, size=max_per_param, replace=False)])
        perr = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            lp = _loss_value(loss_fn, f"{name}[{i}] (+eps)")
            flat[i] = orig - eps
            lm = _loss_value(loss_fn, f"{name}[{i}] (-eps)")
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            a = auto.reshape(-1)[i]
            err = float(rel_error(a, fd))
            checked += 1
            perr = max(perr, err)
            if err > max_err:
                max_err = err
                worst = (name, int(i), float(a), float(fd))
        per_param[name] = perr
    return GradCheckReport(max_err, worst, checked, per_param)
