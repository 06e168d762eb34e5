"""Two-layer superposition network: F(lam) = sum_r Phi_r(sum_d phi_rd(lam_d)).

Layer 1 holds the inner activations phi_rd, one per (unit, input dimension);
layer 2 holds one outer activation Phi_r per unit. Gradients for every
control point come from the chain rule with finite-difference slopes and
control-point sensitivities supplied by each activation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from kstgp.errors import FactorizationFailure, InvalidConfig, ShapeMismatch
from kstgp.gp import DEFAULT_HYPER, GPActivation, Hyperparameters

logger = logging.getLogger(__name__)

INNER = 1
OUTER = 2


@dataclass(frozen=True)
class InitSpec:
    inner_span: tuple[float, float] = (-1.0, 1.0)
    outer_half_width_per_dim: float = 0.5
    ordinate_sd: float = 0.3
    hyper: Hyperparameters = DEFAULT_HYPER


@dataclass
class Unit:
    inner: list[GPActivation]
    outer: GPActivation


@dataclass
class Network:
    dims: int
    repetition: int
    units: list[Unit]

    def __post_init__(self):
        if len(self.units) != self.repetition + 1:
            raise InvalidConfig(f"expected {self.repetition + 1} units, got {len(self.units)}")
        counts = {af.n for _, af in self.activations()}
        if len(counts) != 1:
            raise InvalidConfig(f"all activations must share one control-point count, got {sorted(counts)}")
        for unit in self.units:
            if len(unit.inner) != self.dims:
                raise InvalidConfig(f"unit has {len(unit.inner)} inner activations, expected {self.dims}")

    @property
    def n_units(self) -> int:
        return self.repetition + 1

    @property
    def n_points(self) -> int:
        return self.units[0].outer.n

    def activations(self):
        """Yield ``((layer, r, d), af)`` for every activation, inner before outer per unit."""
        for r, unit in enumerate(self.units):
            for d, af in enumerate(unit.inner):
                yield (INNER, r, d), af
            yield (OUTER, r, 0), unit.outer

    def get(self, af_id) -> GPActivation:
        layer, r, d = af_id
        if not 0 <= r < self.n_units:
            raise KeyError(af_id)
        if layer == INNER and 0 <= d < self.dims:
            return self.units[r].inner[d]
        if layer == OUTER and d == 0:
            return self.units[r].outer
        raise KeyError(af_id)

    def copy(self) -> Network:
        return Network(
            self.dims,
            self.repetition,
            [Unit([af.copy() for af in u.inner], u.outer.copy()) for u in self.units],
        )

    def refit(self, budget: int):
        """Refit every activation's kernel; fall back to defaults if one becomes singular."""
        if budget <= 0:
            return
        for af_id, af in self.activations():
            try:
                af.refit(budget)
                af.factor()
            except FactorizationFailure:
                logger.warning("refit of %s failed, resetting hyperparameters", af_id)
                af.hyper = DEFAULT_HYPER


def new_network(D: int, R: int, n: int, seed: int = 0, init: InitSpec = InitSpec()) -> Network:
    """Random network: inner abscissae uniform on ``inner_span``, outer on +-D/2."""
    if D < 1 or R < 0 or n < 2:
        raise InvalidConfig(f"need D >= 1, R >= 0, n >= 2 (got D={D}, R={R}, n={n})")
    rng = np.random.default_rng(seed)
    lo, hi = init.inner_span
    half = init.outer_half_width_per_dim * D
    units = []
    for _ in range(R + 1):
        inner = [
            GPActivation(rng.uniform(lo, hi, n), rng.normal(0.0, init.ordinate_sd, n), init.hyper)
            for _ in range(D)
        ]
        outer = GPActivation(rng.uniform(-half, half, n), rng.normal(0.0, init.ordinate_sd, n), init.hyper)
        units.append(Unit(inner, outer))
    return Network(D, R, units)


@dataclass
class ForwardTrace:
    """Intermediates of a forward pass.

    Arrays carry an optional leading batch axis: ``inner_outputs`` is
    ``(..., R+1, D)``, ``unit_sums`` and ``unit_outputs`` are ``(..., R+1)``.
    """

    input: np.ndarray
    inner_outputs: np.ndarray
    unit_sums: np.ndarray
    unit_outputs: np.ndarray
    output: np.ndarray | float

    def __len__(self):
        return 1 if self.input.ndim == 1 else self.input.shape[0]

    def instance(self, i: int) -> ForwardTrace:
        if self.input.ndim == 1:
            return self
        return ForwardTrace(
            self.input[i],
            self.inner_outputs[i],
            self.unit_sums[i],
            self.unit_outputs[i],
            float(self.output[i]),
        )

    @classmethod
    def stack(cls, traces) -> ForwardTrace:
        traces = list(traces)
        return cls(
            np.stack([np.atleast_2d(t.input) for t in traces]).reshape(-1, traces[0].input.shape[-1]),
            np.concatenate([t.inner_outputs.reshape((-1,) + t.inner_outputs.shape[-2:]) for t in traces]),
            np.concatenate([t.unit_sums.reshape(-1, t.unit_sums.shape[-1]) for t in traces]),
            np.concatenate([t.unit_outputs.reshape(-1, t.unit_outputs.shape[-1]) for t in traces]),
            np.concatenate([np.atleast_1d(t.output) for t in traces]),
        )


def _guarded(af_id, fn, *args):
    try:
        return fn(*args)
    except FactorizationFailure as exc:
        raise FactorizationFailure("factorization failed", af_id=af_id) from exc


def forward(net: Network, lam) -> ForwardTrace:
    """Evaluate the network on one input (shape ``(D,)``) or a batch (``(N, D)``)."""
    x = np.asarray(lam, dtype=float)
    if x.shape[-1] != net.dims or x.ndim not in (1, 2):
        raise ShapeMismatch(f"input shape {x.shape} does not match D={net.dims}")
    if not np.all(np.isfinite(x)):
        raise InvalidConfig("input contains non-finite values")
    batch = x.shape[:-1]
    inner = np.empty(batch + (net.n_units, net.dims))
    outer = np.empty(batch + (net.n_units,))
    for r, unit in enumerate(net.units):
        for d, af in enumerate(unit.inner):
            inner[..., r, d] = _guarded((INNER, r, d), af.mean, x[..., d])
    sums = inner.sum(axis=-1)
    for r, unit in enumerate(net.units):
        outer[..., r] = _guarded((OUTER, r, 0), unit.outer.mean, sums[..., r])
    out = outer.sum(axis=-1)
    return ForwardTrace(x, inner, sums, outer, float(out) if x.ndim == 1 else out)


@dataclass
class GradientSet:
    """Loss gradients for every control coordinate, laid out like the network."""

    inner_dx: np.ndarray  # (R+1, D, n)
    inner_dy: np.ndarray
    outer_dx: np.ndarray  # (R+1, n)
    outer_dy: np.ndarray

    @classmethod
    def zeros(cls, net: Network) -> GradientSet:
        u, d, n = net.n_units, net.dims, net.n_points
        return cls(np.zeros((u, d, n)), np.zeros((u, d, n)), np.zeros((u, n)), np.zeros((u, n)))

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.arrays())))

    def arrays(self):
        return (self.inner_dx, self.inner_dy, self.outer_dx, self.outer_dy)


def backward(net: Network, traces: ForwardTrace, dL_dy) -> GradientSet:
    """Chain-rule gradients of the loss, summed over the traced batch.

    ``dL_dy`` holds dL/d(output) for each trace. Outer activations see
    dL/dy * d Phi_r / d theta at the unit sum; inner activations additionally
    pick up the outer slope at that sum.
    """
    if not isinstance(traces, ForwardTrace):
        traces = ForwardTrace.stack(traces)
    g = np.atleast_1d(np.asarray(dL_dy, dtype=float))
    sums = traces.unit_sums.reshape(-1, net.n_units)
    lam = traces.input.reshape(-1, net.dims)
    if g.shape[0] != sums.shape[0]:
        raise ShapeMismatch(f"{g.shape[0]} loss gradients for {sums.shape[0]} traces")
    grads = GradientSet.zeros(net)
    for r, unit in enumerate(net.units):
        s = sums[:, r]
        dx, dy = _guarded((OUTER, r, 0), unit.outer.control_point_gradients, s)
        grads.outer_dx[r] = g @ dx
        grads.outer_dy[r] = g @ dy
        kappa = _guarded((OUTER, r, 0), unit.outer.slope, s)
        gk = g * kappa
        for d, af in enumerate(unit.inner):
            dx, dy = _guarded((INNER, r, d), af.control_point_gradients, lam[:, d])
            grads.inner_dx[r, d] = gk @ dx
            grads.inner_dy[r, d] = gk @ dy
    return grads


def apply_update(net: Network, grads: GradientSet, eta_inner: float, eta_outer: float) -> int:
    """Gradient step on every control coordinate in place.

    Coordinates whose update is non-finite keep their old value. Returns the
    number of coordinates skipped that way.
    """
    expected = GradientSet.zeros(net)
    for got, want in zip(grads.arrays(), expected.arrays()):
        if got.shape != want.shape:
            raise ShapeMismatch(f"gradient shape {got.shape} does not match network {want.shape}")
    skipped = 0
    for (layer, r, d), af in net.activations():
        if layer == INNER:
            gx, gy, eta = grads.inner_dx[r, d], grads.inner_dy[r, d], eta_inner
        else:
            gx, gy, eta = grads.outer_dx[r], grads.outer_dy[r], eta_outer
        if eta == 0 or not (np.any(gx) or np.any(gy)):
            continue
        new = []
        for old, grad in ((af.xs, gx), (af.ys, gy)):
            with np.errstate(all="ignore"):
                cand = old - eta * grad
            bad = ~np.isfinite(cand)
            if bad.any():
                skipped += int(bad.sum())
                logger.warning("skipping %d non-finite updates in %s", int(bad.sum()), (layer, r, d))
                cand = np.where(bad, old, cand)
            new.append(cand)
        af.set_points(*new)
    return skipped
