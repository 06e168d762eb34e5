"""Gaussian-process activation functions over trainable control points.

An activation is the zero-mean GP posterior mean of a handful of noisy
control points under a rational quadratic kernel. Everything here is
univariate and sized for n of order 10, so plain dense linear algebra is
used throughout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from kstgp.errors import FactorizationFailure, InvalidConfig

logger = logging.getLogger(__name__)

NOISE_FLOOR = 1e-6
JITTER_START = 1e-8
JITTER_MAX = 1e-4
DEFAULT_FIT_BUDGET = 50

# Box for the log-space optimizer, order (sigma2, length_scale, alpha, noise_var).
_LOG_LOWER = np.log([1e-6, 1e-3, 1e-3, NOISE_FLOOR])
_LOG_UPPER = np.log([1e4, 1e3, 1e6, 1e2])

# With a handful of freshly randomised points the marginal likelihood prefers
# to explain everything as noise (or as independent spikes), which flattens the
# activation and stalls training. Fits are therefore kept to noise_var/sigma2 <=
# MAX_NOISE_RATIO and length_scale >= MIN_LENGTH_FRACTION * mean point spacing.
MAX_NOISE_RATIO = 0.1
MIN_LENGTH_FRACTION = 0.5


@dataclass(frozen=True)
class Hyperparameters:
    """RQ kernel parameters plus the observation-noise variance."""

    sigma2: float = 1.0
    length_scale: float = 0.5
    alpha: float = 1.0
    noise_var: float = 0.01

    def __post_init__(self):
        vals = (self.sigma2, self.length_scale, self.alpha, self.noise_var)
        if not all(np.isfinite(v) and v > 0 for v in vals):
            raise InvalidConfig(f"hyperparameters must be finite and positive: {self}")
        if self.noise_var < NOISE_FLOOR:
            object.__setattr__(self, "noise_var", NOISE_FLOOR)

    def to_log(self) -> np.ndarray:
        return np.log([self.sigma2, self.length_scale, self.alpha, self.noise_var])

    @classmethod
    def from_log(cls, p) -> Hyperparameters:
        s2, l, a, nv = np.exp(np.asarray(p, dtype=float))
        return cls(float(s2), float(l), float(a), max(float(nv), NOISE_FLOOR))

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "length_scale": self.length_scale,
            "alpha": self.alpha,
            "noise_var": self.noise_var,
        }


DEFAULT_HYPER = Hyperparameters()


@dataclass(frozen=True)
class ControlPointSet:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float).reshape(-1)
        ys = np.array(self.ys, dtype=float).reshape(-1)
        if xs.shape != ys.shape:
            raise InvalidConfig(f"xs and ys differ in length: {xs.size} vs {ys.size}")
        if xs.size < 1:
            raise InvalidConfig("need at least one control point")
        if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
            raise InvalidConfig("control points must be finite")
        xs.flags.writeable = False
        ys.flags.writeable = False
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)

    @property
    def n(self) -> int:
        return self.xs.size


def rq_kernel(xi, xj, hyper: Hyperparameters):
    """sigma2 * (1 + (xi - xj)^2 / (2 alpha l^2))^-alpha, broadcasting over arrays."""
    d = np.subtract(xi, xj)
    u = d * d / (2.0 * hyper.alpha * hyper.length_scale**2)
    # log1p keeps the large-alpha (squared-exponential) limit accurate
    return hyper.sigma2 * np.exp(-hyper.alpha * np.log1p(u))


def rq_kernel_dx(x_star, xi, hyper: Hyperparameters):
    """Analytic d k(xi, x*) / d x*. Used as a test oracle only."""
    d = np.subtract(xi, x_star)
    l2 = hyper.length_scale**2
    base = 1.0 + d * d / (2.0 * hyper.alpha * l2)
    return hyper.sigma2 * d / l2 * base ** (-hyper.alpha - 1.0)


def _kernel_matrix(xs, hyper):
    return rq_kernel(xs[:, None], xs[None, :], hyper)


def _factorize(xs, hyper):
    """Return (L, C) with C = K + (noise + jitter) I, escalating jitter on failure."""
    base = _kernel_matrix(xs, hyper)
    base[np.diag_indices_from(base)] += hyper.noise_var
    jitter = JITTER_START
    while jitter <= JITTER_MAX * (1 + 1e-9):
        c = base.copy()
        c[np.diag_indices_from(c)] += jitter * hyper.sigma2
        try:
            return np.linalg.cholesky(c), c, jitter * hyper.sigma2
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise FactorizationFailure(f"covariance not positive definite for {hyper}")


def build_covariance(points: ControlPointSet, hyper: Hyperparameters) -> np.ndarray:
    """Covariance of the noisy control ordinates, with whatever jitter factorization needed."""
    return _factorize(points.xs, hyper)[1]


def _solve(L, b):
    z = np.linalg.solve(L, b)
    return np.linalg.solve(L.T, z)


def neg_log_marginal_likelihood(points: ControlPointSet, hyper: Hyperparameters) -> float:
    L, _, _ = _factorize(points.xs, hyper)
    z = np.linalg.solve(L, points.ys)
    return float(z @ z + 2.0 * np.sum(np.log(np.diag(L))))


def _cost_and_grad(xs, ys, p):
    """Cost y'C^-1y + log|C| and its gradient with respect to the log parameters."""
    hyper = Hyperparameters.from_log(p)
    L, _, jitter = _factorize(xs, hyper)
    a = _solve(L, ys)
    cost = float(ys @ a + 2.0 * np.sum(np.log(np.diag(L))))

    d = xs[:, None] - xs[None, :]
    r2 = d * d
    l2 = hyper.length_scale**2
    u = r2 / (2.0 * hyper.alpha * l2)
    k = hyper.sigma2 * np.exp(-hyper.alpha * np.log1p(u))
    eye = np.eye(xs.size)
    dC = (
        k + jitter * eye,
        k / (1.0 + u) * r2 / l2,
        k * hyper.alpha * (u / (1.0 + u) - np.log1p(u)),
        hyper.noise_var * eye,
    )
    Cinv = _solve(L, eye)
    grad = np.array([np.sum(Cinv * g) - a @ g @ a for g in dC])
    return cost, grad


def fit_hyperparameters(
    points: ControlPointSet,
    init: Hyperparameters = DEFAULT_HYPER,
    budget: int = DEFAULT_FIT_BUDGET,
    max_noise_ratio: float | None = MAX_NOISE_RATIO,
    min_length_fraction: float = MIN_LENGTH_FRACTION,
) -> Hyperparameters:
    """Minimise y'C^-1y + log|C| by projected gradient descent in log space.

    ``max_noise_ratio=None`` and ``min_length_fraction=0`` leave only the
    fixed box and the noise floor.

    Each step uses a backtracking (Armijo) line search, so the returned cost
    never exceeds the cost at ``init``. The step length carries over between
    iterations and is allowed to grow after a success.
    """
    if budget <= 0:
        return init
    xs, ys = points.xs, points.ys
    project = _projector(xs, max_noise_ratio, min_length_fraction)
    start = init.to_log()
    p = project(start)
    try:
        cost, grad = _cost_and_grad(xs, ys, p)
    except FactorizationFailure:
        logger.warning("hyperparameter fit: initial factorization failed, keeping init")
        return init
    moved = not np.array_equal(p, start)
    step = 1.0
    for _ in range(budget):
        gnorm2 = float(grad @ grad)
        if not np.isfinite(gnorm2) or gnorm2 < 1e-24:
            break
        accepted = False
        for _ in range(40):
            trial = project(p - step * grad)
            if np.array_equal(trial, p):
                break
            try:
                tcost, tgrad = _cost_and_grad(xs, ys, trial)
            except FactorizationFailure:
                step *= 0.5
                continue
            if tcost <= cost + 1e-4 * float(grad @ (trial - p)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = cost - tcost
        p, cost, grad = trial, tcost, tgrad
        moved = True
        step = min(step * 2.0, 10.0)
        if improvement <= 1e-13 * (1.0 + abs(cost)):
            break
    if not moved:
        return init
    fitted = Hyperparameters.from_log(p)
    if not np.array_equal(project(start), start):
        # init lay outside the feasible region; never hand back something worse
        try:
            if neg_log_marginal_likelihood(points, init) < neg_log_marginal_likelihood(points, fitted):
                return init
        except FactorizationFailure:
            pass
    return fitted


def _projector(xs, max_noise_ratio, min_length_fraction):
    lower = _LOG_LOWER.copy()
    if min_length_fraction > 0 and xs.size > 1:
        spacing = (xs.max() - xs.min()) / (xs.size - 1)
        if spacing > 0:
            lower[1] = min(max(lower[1], np.log(min_length_fraction * spacing)), _LOG_UPPER[1])
    log_ratio = None if max_noise_ratio is None else np.log(max_noise_ratio)

    def project(p):
        q = np.clip(p, lower, _LOG_UPPER)
        if log_ratio is not None and q[3] - q[0] > log_ratio:
            # pull the noise down to the cap; if that hits the floor, lift sigma2
            q[3] = max(q[0] + log_ratio, _LOG_LOWER[3])
            q[0] = max(q[0], q[3] - log_ratio)
        return q

    return project


class GPActivation:
    """One trainable activation: control points, kernel hyperparameters, cached solve.

    The Cholesky factor and weight vector C^-1 y are cached and rebuilt lazily
    after any change to points or hyperparameters.
    """

    def __init__(self, xs, ys, hyper: Hyperparameters = DEFAULT_HYPER):
        self._points = ControlPointSet(xs, ys)
        self._hyper = hyper
        self._cache = None

    @property
    def points(self) -> ControlPointSet:
        return self._points

    @points.setter
    def points(self, value: ControlPointSet):
        self._points = value
        self._cache = None

    @property
    def hyper(self) -> Hyperparameters:
        return self._hyper

    @hyper.setter
    def hyper(self, value: Hyperparameters):
        self._hyper = value
        self._cache = None

    @property
    def xs(self) -> np.ndarray:
        return self._points.xs

    @property
    def ys(self) -> np.ndarray:
        return self._points.ys

    @property
    def n(self) -> int:
        return self._points.n

    def set_points(self, xs, ys):
        self.points = ControlPointSet(xs, ys)

    def copy(self) -> GPActivation:
        other = GPActivation(self.xs, self.ys, self.hyper)
        other._cache = self._cache
        return other

    def factor_full(self):
        """(L, weights, jitter) with L L' = C, weights = C^-1 y and the diagonal jitter used."""
        cache = self._cache
        if cache is None:
            L, _, jitter = _factorize(self.xs, self.hyper)
            cache = (L, _solve(L, self.ys), jitter)
            self._cache = cache
        return cache

    def factor(self):
        """(L, weights) with L L' = C and weights = C^-1 y."""
        L, w, _ = self.factor_full()
        return L, w

    def weights(self) -> np.ndarray:
        return self.factor()[1]

    def mean(self, x_star):
        _, w = self.factor()
        x = np.asarray(x_star, dtype=float)
        return rq_kernel(x[..., None], self.xs, self.hyper) @ w

    def variance(self, x_star):
        L, _ = self.factor()
        x = np.asarray(x_star, dtype=float)
        kx = rq_kernel(x[..., None], self.xs, self.hyper)
        v = np.linalg.solve(L, kx.reshape(-1, self.n).T)
        var = self.hyper.sigma2 - np.sum(v * v, axis=0)
        var = np.where((var < 0) & (var >= -1e-10), 0.0, var)
        return var.reshape(x.shape) if x.ndim else float(var[0])

    def slope(self, x_star, h=None):
        x = np.asarray(x_star, dtype=float)
        if h is None:
            h = fd_step(x)
        return (self.mean(x + h) - self.mean(x - h)) / (2.0 * h)

    def control_point_gradients(self, x_star, h=None):
        """Central differences of the posterior mean w.r.t. each control coordinate.

        Hyperparameters stay fixed. Returns ``(d_dx, d_dy)``, each shaped
        ``x_star.shape + (n,)``.
        """
        x = np.asarray(x_star, dtype=float)
        flat = x.reshape(-1)
        n, hyper = self.n, self.hyper
        _, _, jitter = self.factor_full()
        eye = np.eye(n)
        signs = np.repeat([[1.0], [-1.0]], n, axis=0)  # (2n, 1): +h block then -h block

        # abscissae: one refactorisation per perturbed copy, all stacked
        hx = fd_step(self.xs) if h is None else np.full(n, float(h))
        xs_p = np.tile(self.xs, (2 * n, 1)) + signs * np.tile(eye * hx, (2, 1))
        c = rq_kernel(xs_p[:, :, None], xs_p[:, None, :], hyper)
        c += (hyper.noise_var + jitter) * eye
        w = np.linalg.solve(c, np.broadcast_to(self.ys, (2 * n, n))[..., None])[..., 0]
        k = rq_kernel(flat[None, :, None], xs_p[:, None, :], hyper)
        m = np.einsum("pqk,pk->pq", k, w)
        d_dx = ((m[:n] - m[n:]) / (2.0 * hx[:, None])).T

        # ordinates: covariance unchanged, only the right-hand side moves
        hy = fd_step(self.ys) if h is None else np.full(n, float(h))
        ys_p = np.tile(self.ys, (2 * n, 1)) + signs * np.tile(eye * hy, (2, 1))
        L, _ = self.factor()
        w = _solve(L, ys_p.T)
        m = rq_kernel(flat[:, None], self.xs, hyper) @ w
        d_dy = (m[:, :n] - m[:, n:]) / (2.0 * hy)
        return d_dx.reshape(x.shape + (n,)), d_dy.reshape(x.shape + (n,))

    def refit(self, budget: int = DEFAULT_FIT_BUDGET, **bounds):
        self.hyper = fit_hyperparameters(self.points, self.hyper, budget, **bounds)


def fd_step(x):
    return 1e-4 * np.maximum(1.0, np.abs(x))


def posterior_mean(af: GPActivation, x_star):
    return af.mean(x_star)


def posterior_variance(af: GPActivation, x_star):
    return af.variance(x_star)


def slope(af: GPActivation, x_star, h=None):
    return af.slope(x_star, h)


def control_point_gradients(af: GPActivation, x_star, h=None):
    return af.control_point_gradients(x_star, h)


def with_hyper(af: GPActivation, **changes) -> GPActivation:
    return GPActivation(af.xs, af.ys, replace(af.hyper, **changes))
