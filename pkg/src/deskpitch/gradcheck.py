"""Central finite-difference checks for reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward

STEP = 1e-6
RTOL = 1e-5
ATOL = 1e-8


@dataclass
class GradReport:
    name: str
    n: int
    max_abs_err: float
    max_rel_err: float
    n_bad: int

    @property
    def ok(self) -> bool:
        return self.n_bad == 0


def close(analytic: np.ndarray, numeric: np.ndarray, rtol: float = RTOL,
          atol: float = ATOL) -> np.ndarray:
    """Elementwise pass mask: relative error within ``rtol`` or absolute within ``atol``."""
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return (err <= rtol * scale) | (err <= atol)


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, step: float = STEP) -> np.ndarray:
    out = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(loss_fn().data)
        flat[i] = orig - step
        lo = float(loss_fn().data)
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
                    step: float = STEP, rtol: float = RTOL,
                    atol: float = ATOL) -> list[GradReport]:
    """Compare ``backward`` against central differences for every tensor in ``params``.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    each call.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic_grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                      for name, p in params.items()}
    # probes only need the loss value, so skip graph recording
    flags = {name: p.requires_grad for name, p in params.items()}
    for p in params.values():
        p.requires_grad = False
    try:
        numeric_grads = {name: numeric_grad(loss_fn, p, step) for name, p in params.items()}
    finally:
        for name, p in params.items():
            p.requires_grad = flags[name]
    reports = []
    for name, p in params.items():
        analytic, numeric = analytic_grads[name], numeric_grads[name]
        err = np.abs(analytic - numeric)
        rel = err / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
        bad = ~close(analytic, numeric, rtol, atol)
        reports.append(GradReport(name, p.data.size, float(err.max(initial=0.0)),
                                  float(np.where(err > atol, rel, 0.0).max(initial=0.0)),
                                  int(bad.sum())))
    return reports
