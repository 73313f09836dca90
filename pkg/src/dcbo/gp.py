"""Gaussian-process regression with Matern-5/2 or squared-exponential kernels.

Each task (objective or constraint) gets an independent zero-mean GP; the
training-data mean is subtracted before fitting and added back to posterior
means. Hyperparameters are chosen by multistart maximum likelihood with
analytic gradients in log space.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

from .errors import NumericalError
from .optim import Box, lhs_sample

__all__ = [
    "JITTER_FLOOR",
    "KernelFamily",
    "KernelParams",
    "GpModel",
    "FantasyModel",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "fit",
    "condition_on_fantasy",
]

# Noise floor keeping factorizations stable on noiseless data; escalated
# tenfold per retry up to JITTER_MAX before giving up.
JITTER_FLOOR = 1e-4
JITTER_MAX = 1e-1

_SQRT5 = np.sqrt(5.0)


class KernelFamily(Enum):
    MATERN52 = "matern52"
    SQUARED_EXPONENTIAL = "squared-exponential"


@dataclass(frozen=True)
class KernelParams:
    """Stationary-kernel hyperparameters with per-dimension lengthscales."""

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0
    family: KernelFamily = KernelFamily.MATERN52

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.all(ls > 0):
            raise ValueError("lengthscales must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal_variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


def _scaled_sqdist(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    As = A / ls
    Bs = B / ls
    d2 = (
        np.sum(As * As, axis=1)[:, None]
        + np.sum(Bs * Bs, axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    return np.maximum(d2, 0.0)


def kernel_matrix(params: KernelParams, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Cross-covariance matrix k(A, B), shape (len(A), len(B)), noise excluded."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != params.dim or B.shape[1] != params.dim:
        raise ValueError("input dimension does not match lengthscale count")
    d2 = _scaled_sqdist(A, B, params.lengthscales)
    if params.family is KernelFamily.SQUARED_EXPONENTIAL:
        return params.signal_variance * np.exp(-0.5 * d2)
    r = np.sqrt(d2)
    return params.signal_variance * (1.0 + _SQRT5 * r + (5.0 / 3.0) * d2) * np.exp(-_SQRT5 * r)


def kernel_eval(params: KernelParams, a: np.ndarray, b: np.ndarray) -> float:
    """Kernel value k(a, b) for two points."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape or a.shape[0] != params.dim:
        raise ValueError("point dimensions must match the lengthscale count")
    return float(kernel_matrix(params, a[None, :], b[None, :])[0, 0])


def _factorize(K: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    """Cholesky of K + noise*I with jitter escalation; returns (L, noise used)."""
    eff = max(noise, JITTER_FLOOR)
    n = K.shape[0]
    while True:
        try:
            L = cholesky(K + eff * np.eye(n), lower=True)
            return L, eff
        except np.linalg.LinAlgError:
            eff *= 10.0
            if eff > JITTER_MAX:
                raise NumericalError(
                    "covariance factorization failed even at maximum jitter"
                ) from None


class GpModel:
    """Fitted GP with cached Cholesky factor of K_XX + noise*I.

    Immutable once constructed; posterior queries are safe to issue
    concurrently. ``mean_offset`` is the constant subtracted from the
    targets before the zero-mean algebra (the training mean for fitted
    models, 0.0 for directly constructed ones).
    """

    def __init__(self, params: KernelParams, train_x: np.ndarray, train_y: np.ndarray,
                 mean_offset: float = 0.0):
        self.params = params
        self.train_x = np.atleast_2d(np.asarray(train_x, dtype=float))
        self.train_y = np.atleast_1d(np.asarray(train_y, dtype=float))
        if self.train_x.shape[0] != self.train_y.shape[0]:
            raise ValueError("train_x and train_y lengths differ")
        if not np.all(np.isfinite(self.train_y)) or not np.all(np.isfinite(self.train_x)):
            raise ValueError("training data must be finite")
        self.mean_offset = float(mean_offset)
        K = kernel_matrix(params, self.train_x, self.train_x)
        self.cov_factor, self.effective_noise = _factorize(K, params.noise_variance)
        yc = self.train_y - self.mean_offset
        self.alpha = cho_solve((self.cov_factor, True), yc)

    @property
    def n_train(self) -> int:
        return self.train_x.shape[0]

    def _clamp_var(self, var: np.ndarray) -> np.ndarray:
        sv = self.params.signal_variance
        floor = -1e-8 * max(1.0, sv)
        if np.any(var < floor):
            raise NumericalError(f"posterior variance fell below {floor}")
        return np.clip(var, 0.0, sv)

    def posterior_many(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance at each row of an (m, d) query array."""
        Q = np.atleast_2d(np.asarray(query, dtype=float))
        Kq = kernel_matrix(self.params, Q, self.train_x)
        mean = Kq @ self.alpha + self.mean_offset
        A = solve_triangular(self.cov_factor, Kq.T, lower=True)
        var = self.params.signal_variance - np.sum(A * A, axis=0)
        return mean, self._clamp_var(var)

    def posterior(self, query: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance at a single d-vector."""
        mean, var = self.posterior_many(np.atleast_1d(query)[None, :])
        return float(mean[0]), float(var[0])


class FantasyModel:
    """GP conditioned on one hypothetical observation at ``fantasy_x``.

    Equivalent to refitting on the augmented dataset with frozen
    hyperparameters, implemented through the rank-one posterior update
    so no new factorization is needed.
    """

    def __init__(self, base: GpModel, fantasy_x: np.ndarray, fantasy_y: float):
        self.base = base
        self.fantasy_x = np.atleast_1d(np.asarray(fantasy_x, dtype=float))
        self.fantasy_y = float(fantasy_y)
        xh = self.fantasy_x[None, :]
        k_hx = kernel_matrix(base.params, xh, base.train_x)
        c = solve_triangular(base.cov_factor, k_hx.T, lower=True)[:, 0]
        var_hat = max(base.params.signal_variance - float(c @ c), 0.0)
        self._w = solve_triangular(base.cov_factor.T, c, lower=False)
        self._mean_hat = float(k_hx @ base.alpha) + base.mean_offset
        # Observation-noise term keeps the update defined when fantasy_x
        # duplicates a training row.
        self._denom = var_hat + base.effective_noise
        self._resid = self.fantasy_y - self._mean_hat

    def posterior_many(self, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        Q = np.atleast_2d(np.asarray(query, dtype=float))
        base = self.base
        Kq = kernel_matrix(base.params, Q, base.train_x)
        mean0 = Kq @ base.alpha + base.mean_offset
        A = solve_triangular(base.cov_factor, Kq.T, lower=True)
        var0 = base.params.signal_variance - np.sum(A * A, axis=0)
        k_qh = kernel_matrix(base.params, Q, self.fantasy_x[None, :])[:, 0]
        cov = k_qh - Kq @ self._w
        mean = mean0 + cov * (self._resid / self._denom)
        var = var0 - cov * cov / self._denom
        return mean, base._clamp_var(var)

    def posterior(self, query: np.ndarray) -> tuple[float, float]:
        mean, var = self.posterior_many(np.atleast_1d(query)[None, :])
        return float(mean[0]), float(var[0])


def condition_on_fantasy(model: GpModel, x: np.ndarray, y: float) -> FantasyModel:
    """One-step lookahead model after hypothetically observing y at x."""
    return FantasyModel(model, x, y)


def _grad_matrices(params: KernelParams, X: np.ndarray):
    """K without noise plus its derivatives w.r.t. log signal variance and log lengthscales."""
    ls = params.lengthscales
    d2 = _scaled_sqdist(X, X, ls)
    per_dim = [
        ((X[:, i][:, None] - X[:, i][None, :]) / ls[i]) ** 2
        for i in range(params.dim)
    ]
    if params.family is KernelFamily.SQUARED_EXPONENTIAL:
        K = params.signal_variance * np.exp(-0.5 * d2)
        dK_ls = [K * Di for Di in per_dim]
    else:
        r = np.sqrt(d2)
        e = np.exp(-_SQRT5 * r)
        K = params.signal_variance * (1.0 + _SQRT5 * r + (5.0 / 3.0) * d2) * e
        base = (5.0 / 3.0) * params.signal_variance * (1.0 + _SQRT5 * r) * e
        dK_ls = [base * Di for Di in per_dim]
    return K, dK_ls


def log_marginal_likelihood(params: KernelParams, train_x: np.ndarray,
                            train_y: np.ndarray) -> tuple[float, np.ndarray]:
    """Log marginal likelihood of the data and its gradient.

    The gradient is taken with respect to the log-hyperparameters in the
    order [log signal_variance, log lengthscale_1..d, log noise_variance],
    with the noise entry using the effective (floored) noise.
    """
    X = np.atleast_2d(np.asarray(train_x, dtype=float))
    y = np.atleast_1d(np.asarray(train_y, dtype=float))
    n = y.shape[0]
    if n < 1:
        raise ValueError("need at least one observation")
    K, dK_ls = _grad_matrices(params, X)
    L, eff = _factorize(K, params.noise_variance)
    alpha = cho_solve((L, True), y)
    value = (
        -0.5 * float(y @ alpha)
        - float(np.sum(np.log(np.diag(L))))
        - 0.5 * n * np.log(2.0 * np.pi)
    )
    Kinv = cho_solve((L, True), np.eye(n))

    def dterm(dK):
        return 0.5 * (float(alpha @ dK @ alpha) - float(np.sum(Kinv * dK)))

    grad = np.empty(params.dim + 2)
    grad[0] = dterm(K)
    for i, dKi in enumerate(dK_ls):
        grad[1 + i] = dterm(dKi)
    grad[-1] = dterm(eff * np.eye(n))
    return value, grad


def fit(train_x: np.ndarray, train_y: np.ndarray,
        family: KernelFamily = KernelFamily.MATERN52,
        noise_mode: str = "jitter_only",
        box: Box | None = None,
        seed: int = 0,
        n_starts: int = 10) -> GpModel:
    """Fit a GP by multistart maximum likelihood.

    Lengthscales are searched in [1e-2, 10] x (domain width per dimension),
    signal variance in [1e-3, 1e3] x var(y), all in log space, starting
    from a Latin hypercube over the log-bound box. With
    ``noise_mode="jitter_only"`` the noise stays at the jitter floor;
    ``"learned"`` adds it to the search.
    """
    X = np.atleast_2d(np.asarray(train_x, dtype=float))
    y = np.atleast_1d(np.asarray(train_y, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two observations to fit")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("training data must be finite")
    if noise_mode not in ("jitter_only", "learned"):
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    d = X.shape[1]

    offset = float(np.mean(y))
    yc = y - offset
    widths = box.width if box is not None else np.maximum(np.ptp(X, axis=0), 1e-6)
    yvar = max(float(np.var(yc)), 1e-9)

    lo = np.concatenate([[np.log(1e-3 * yvar)], np.log(1e-2 * widths)])
    hi = np.concatenate([[np.log(1e3 * yvar)], np.log(10.0 * widths)])
    learned = noise_mode == "learned"
    if learned:
        lo = np.append(lo, np.log(JITTER_FLOOR))
        hi = np.append(hi, np.log(max(yvar, 1e3 * JITTER_FLOOR)))

    def unpack(theta: np.ndarray) -> KernelParams:
        noise = np.exp(theta[d + 1]) if learned else JITTER_FLOOR
        return KernelParams(
            signal_variance=float(np.exp(theta[0])),
            lengthscales=np.exp(theta[1: d + 1]),
            noise_variance=float(noise),
            family=family,
        )

    def neg_lml(theta: np.ndarray):
        try:
            value, grad = log_marginal_likelihood(unpack(theta), X, yc)
        except NumericalError:
            return np.inf, np.zeros_like(theta)
        g = grad if learned else grad[:-1]
        return -value, -g

    log_box = Box(lo, hi)
    starts = lhs_sample(log_box, n_starts, seed=seed)
    best_theta, best_val = None, np.inf
    for theta0 in starts:
        res = minimize(neg_lml, theta0, jac=True, method="L-BFGS-B",
                       bounds=list(zip(lo, hi)), options={"maxiter": 200})
        if np.isfinite(res.fun) and res.fun < best_val:
            best_theta, best_val = res.x, float(res.fun)
    if best_theta is None:
        raise NumericalError("likelihood optimization failed from every start")
    return GpModel(unpack(best_theta), X, y, mean_offset=offset)
