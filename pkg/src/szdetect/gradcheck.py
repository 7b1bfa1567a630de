"""Central finite-difference verification of reverse-mode gradients.

Checks run in float64 with a small step (default 1e-5): the difference
quotient loses half its significand to cancellation, which float32 cannot
absorb, and larger steps trip over relu/maxpool kinks in deep composites.
Callers build their graphs from float64 tensors; the 1e-3 relative
tolerance then has orders of magnitude of headroom.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class GradCheckReport:
    ok: bool
    max_rel_error: float
    probes: list[tuple[str, tuple[int, ...], float, float, float]] = field(
        default_factory=list)
    """Each probe: (tensor name, flat index as multi-index, analytic,
    numeric, relative error)."""


def _rel_error(analytic: float, numeric: float) -> float:
    scale = max(abs(analytic), abs(numeric))
    if scale < 1e-9:
        return 0.0
    return abs(analytic - numeric) / scale


def gradcheck(fn, tensors: dict[str, Tensor], n_probes: int = 10,
              eps: float = 1e-5, tol: float = 1e-3,
              rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare autodiff gradients of ``fn(tensors) -> scalar Tensor`` against
    central differences at ``n_probes`` random coordinates per tensor.

    Tensors should hold float64 data and requires_grad=True.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    for t in tensors.values():
        t.grad = None
    loss = fn(tensors)
    loss.backward()
    analytic = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
                for name, t in tensors.items()}

    probes = []
    max_rel = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        size = flat.shape[0]
        count = min(n_probes, size)
        picks = rng.choice(size, size=count, replace=False)
        for j in picks:
            j = int(j)
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = fn(tensors).item()
            flat[j] = orig - eps
            f_minus = fn(tensors).item()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[j])
            rel = _rel_error(a, numeric)
            max_rel = max(max_rel, rel)
            probes.append((name, np.unravel_index(j, t.data.shape), a,
                           numeric, rel))

    return GradCheckReport(ok=max_rel <= tol, max_rel_error=max_rel,
                           probes=probes)
