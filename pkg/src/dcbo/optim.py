"""Sampling designs and bounded multistart maximization.

All objective callables used here are batched: ``f(X)`` takes an (m, d)
array and returns an (m,) array of values. Gradients, when not supplied,
are estimated by central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import OptimizationError

__all__ = [
    "Box",
    "SearchMethod",
    "MultistartConfig",
    "lhs_sample",
    "sobol_sample",
    "maximize",
]


@dataclass(frozen=True)
class Box:
    """Axis-aligned search domain with lower[i] < upper[i]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-d arrays of equal length")
        if not np.all(lo < hi):
            raise ValueError("box requires lower < upper in every dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def from_unit(self, u: np.ndarray) -> np.ndarray:
        """Map points in [0,1)^d onto the box."""
        return self.lower + np.asarray(u, dtype=float) * self.width

    def contains(self, x: np.ndarray, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


class SearchMethod(Enum):
    QUASI_NEWTON_BOUNDED = "quasi-newton-bounded"
    ADAM_PROJECTED = "adam-projected"


@dataclass(frozen=True)
class MultistartConfig:
    """Effort knobs for :func:`maximize`.

    ``num_restarts`` may be 0 to skip local refinement entirely, which turns
    the search into an argmax over the raw samples and ``seed_points`` (used
    for discretized inner maximization in tests and oracles).
    """

    num_restarts: int
    raw_samples: int
    method: SearchMethod = SearchMethod.QUASI_NEWTON_BOUNDED
    max_iters: int = 100
    seed_points: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.num_restarts < 0 or self.raw_samples < 0:
            raise ValueError("num_restarts and raw_samples must be non-negative")
        if self.raw_samples + len(self.seed_points) < 1:
            raise ValueError("need at least one candidate point")
        if self.num_restarts > self.raw_samples + len(self.seed_points):
            raise ValueError("num_restarts exceeds available candidate points")

    def with_seeds(self, *points: np.ndarray) -> "MultistartConfig":
        """Return a copy with extra multistart seed points appended."""
        extra = tuple(np.asarray(p, dtype=float) for p in points)
        return MultistartConfig(
            num_restarts=self.num_restarts,
            raw_samples=self.raw_samples,
            method=self.method,
            max_iters=self.max_iters,
            seed_points=self.seed_points + extra,
        )


def lhs_sample(box: Box, n: int, seed: int) -> np.ndarray:
    """Latin hypercube design: one point per axis-aligned stratum of width 1/n."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sampler = qmc.LatinHypercube(d=box.dim, seed=seed)
    return box.from_unit(sampler.random(n))


def sobol_sample(dim: int, n: int, seed: int | None = None) -> np.ndarray:
    """Sobol points in [0,1)^dim.

    With ``seed=None`` the sequence is unscrambled and the all-zeros origin
    is skipped, so the first point is (0.5, ..., 0.5). With an integer seed
    the sequence is Owen-scrambled deterministically.
    """
    if dim < 1 or n < 1:
        raise ValueError("dim and n must be >= 1")
    if seed is None:
        sampler = qmc.Sobol(d=dim, scramble=False)
        sampler.fast_forward(1)
    else:
        sampler = qmc.Sobol(d=dim, scramble=True, seed=seed)
    return sampler.random(n)


def _finite_diff_grad(f, X: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched values and central-difference gradients at rows of X."""
    m, d = X.shape
    pts = np.empty((m * (2 * d + 1), d))
    pts[:m] = X
    for i in range(d):
        up = X.copy()
        up[:, i] += h[i]
        dn = X.copy()
        dn[:, i] -= h[i]
        pts[m * (1 + 2 * i): m * (2 + 2 * i)] = up
        pts[m * (2 + 2 * i): m * (3 + 2 * i)] = dn
    vals = np.asarray(f(pts), dtype=float)
    base = vals[:m]
    grad = np.empty((m, d))
    for i in range(d):
        up = vals[m * (1 + 2 * i): m * (2 + 2 * i)]
        dn = vals[m * (2 + 2 * i): m * (3 + 2 * i)]
        grad[:, i] = (up - dn) / (2.0 * h[i])
    return base, grad


def _refine_quasi_newton(f, grad, box: Box, starts: np.ndarray, max_iters: int):
    h = 1e-6 * box.width
    bounds = list(zip(box.lower, box.upper))
    results = []
    for x0 in starts:
        if grad is not None:
            def neg(x):
                xx = x[None, :]
                return -float(f(xx)[0]), -np.asarray(grad(xx), dtype=float)[0]
        else:
            def neg(x):
                v, g = _finite_diff_grad(f, x[None, :], h)
                return -float(v[0]), -g[0]
        res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": max_iters})
        x_ref = box.clip(res.x)
        v_ref = float(f(x_ref[None, :])[0])
        if np.isfinite(v_ref):
            results.append((x_ref, v_ref))
    return results


def _refine_adam(f, box: Box, starts: np.ndarray, max_iters: int):
    # Projected Adam, all restarts advanced in lockstep as one batch.
    h = 1e-6 * box.width
    lr = 0.05 * box.width
    b1, b2, eps = 0.9, 0.999, 1e-8
    x = starts.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    best_x = starts.copy()
    base = np.asarray(f(x), dtype=float)
    best_v = base.copy()
    for t in range(1, max_iters + 1):
        base, g = _finite_diff_grad(f, x, h)
        improved = base > best_v
        best_v = np.where(improved, base, best_v)
        best_x = np.where(improved[:, None], x, best_x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = box.clip(x + lr * mhat / (np.sqrt(vhat) + eps))
    final = np.asarray(f(x), dtype=float)
    improved = final > best_v
    best_v = np.where(improved, final, best_v)
    best_x = np.where(improved[:, None], x, best_x)
    results = []
    for i in range(len(starts)):
        if np.isfinite(best_v[i]):
            results.append((box.clip(best_x[i]), float(best_v[i])))
    return results


def maximize(f, box: Box, cfg: MultistartConfig, seed: int = 0, grad=None):
    """Multistart bounded maximization of a batched objective.

    Evaluates ``f`` at ``cfg.raw_samples`` scrambled Sobol points plus any
    ``cfg.seed_points``, locally refines the ``cfg.num_restarts`` best
    candidates, and returns ``(x_best, f_best)``. The result never falls
    below the best raw evaluation, lies inside the box, and is a
    deterministic function of (f, box, cfg, seed).
    """
    cands = []
    if cfg.raw_samples > 0:
        cands.append(box.from_unit(sobol_sample(box.dim, cfg.raw_samples, seed=seed)))
    if cfg.seed_points:
        cands.append(box.clip(np.stack([np.asarray(p, float) for p in cfg.seed_points])))
    X = np.concatenate(cands, axis=0)
    vals = np.asarray(f(X), dtype=float)
    vals = np.where(np.isfinite(vals), vals, -np.inf)
    if not np.any(np.isfinite(vals)):
        raise OptimizationError("objective non-finite at every candidate point")

    order = np.argsort(-vals, kind="stable")
    inc_x, inc_v = X[order[0]], float(vals[order[0]])
    n_start = min(cfg.num_restarts, len(X))
    if n_start == 0 or cfg.max_iters == 0:
        return box.clip(inc_x), inc_v

    starts = X[order[:n_start]]
    if cfg.method is SearchMethod.ADAM_PROJECTED:
        refined = _refine_adam(f, box, starts, cfg.max_iters)
    else:
        refined = _refine_quasi_newton(f, grad, box, starts, cfg.max_iters)
    if not refined and not np.isfinite(inc_v):
        raise OptimizationError("all restarts failed")

    best_x, best_v = inc_x, inc_v
    for x_r, v_r in refined:
        if v_r > best_v:
            best_x, best_v = x_r, v_r
    return box.clip(best_x), best_v
