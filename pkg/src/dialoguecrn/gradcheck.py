"""Central finite-difference checks against tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ProbeError
from .tensor import Tape, Tensor, backward, no_grad


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor).

    Central differences at eps=1e-6 carry roughly 1e-10 * |f| of rounding
    noise, so gradients below ``floor`` cannot be resolved in relative
    terms; the floor turns those into an absolute comparison. The checkers
    below scale it by ``max(1, |f|)`` for that reason.
    """
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tolerance: float
    names: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self):
        return bool(np.all(self.rel_err < self.tolerance))

    def worst(self):
        i = int(self.rel_err.argmax())
        label = self.names[i] if self.names else i
        return label, float(self.analytic[i]), float(self.numeric[i])


def _probe(f, args):
    with no_grad():
        val = f(*args)
    val = float(val.data.reshape(-1)[0]) if isinstance(val, Tensor) else float(val)
    if not np.isfinite(val):
        raise ProbeError("function is not finite at a probe point")
    return val


def grad_check(f, point, eps=1e-6, tolerance=1e-4, floor=1e-6):
    """Compare d f / d point from the tape with central differences.

    ``f`` maps one Tensor to a scalar Tensor; ``point`` is array-like.
    """
    x0 = np.array(point, dtype=float)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape():
        y = f(x)
        backward(y)
    floor = floor * max(1.0, abs(float(y.data.reshape(-1)[0])))
    analytic = np.zeros_like(x0) if x.grad is None else np.array(x.grad, dtype=float)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        plus, minus = x0.copy(), x0.copy()
        plus.reshape(-1)[i] += eps
        minus.reshape(-1)[i] -= eps
        flat[i] = (_probe(f, [Tensor(plus)]) - _probe(f, [Tensor(minus)])) / (2 * eps)
    return GradCheckReport(analytic.reshape(-1), flat.copy(),
                           relative_error(analytic.reshape(-1), flat, floor), tolerance)


def check_params(loss_fn, params, eps=1e-6, tolerance=1e-3, floor=1e-6,
                 max_coords=None, rng=None):
    """Finite-difference check of ``loss_fn()`` w.r.t. every tensor in ``params``.

    Parameters are perturbed in place and restored. ``max_coords`` caps the
    number of probed coordinates per tensor (sampled with ``rng``); ``None``
    probes them all.
    """
    for p in params.values():
        p.grad = None
    with Tape():
        loss = loss_fn()
        backward(loss)
    floor = floor * max(1.0, abs(loss.item()))

    names, analytic, numeric = [], [], []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
        coords = np.arange(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(p.size, max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = _probe(loss_fn, [])
            flat[i] = orig - eps
            down = _probe(loss_fn, [])
            flat[i] = orig
            names.append(f"{name}[{i}]")
            analytic.append(grad[i])
            numeric.append((up - down) / (2 * eps))
    analytic, numeric = np.array(analytic), np.array(numeric)
    return GradCheckReport(analytic, numeric, relative_error(analytic, numeric, floor), tolerance, names)
