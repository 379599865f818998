"""Diffusion problems of the form dX = b(X) dt + sqrt(eps) sigma dB with a terminal observable.

All user-supplied callables are vectorised over leading axes: ``drift`` maps
``(..., d) -> (..., d)``, ``drift_jacobian`` maps ``(..., d) -> (..., d, d)`` with
``J[..., i, j] = d b_i / d x_j``, ``f`` maps ``(..., d) -> (...)`` and so on.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

Array = np.ndarray

FD_RTOL = 1e-5
FD_ATOL = 1e-8


class ModelError(ValueError):
    """Raised when a model or observable fails its construction checks."""


def _default_probes(dim: int, n: int = 20, lo: float = -3.0, hi: float = 3.0) -> Array:
    s = np.linspace(lo, hi, n)
    pts = np.repeat(s[:, None], dim, axis=1)
    if dim > 1:
        # break the diagonal symmetry so off-diagonal derivatives are exercised
        pts = pts + 0.37 * np.sin(np.arange(dim)[None, :] + 1.3 * s[:, None])
    return pts


def _fd_step(x: Array) -> Array:
    return 1e-5 * np.maximum(1.0, np.abs(x))


def _fd_gradient(fun: Callable, x: Array) -> Array:
    """Central differences of ``fun`` at a single point ``x``; appends the derivative axis last."""
    d = x.shape[-1]
    h = _fd_step(x)
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = h[j]
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2.0 * h[j]))
    return np.stack(cols, axis=-1)


def _check_close(name: str, analytic: Array, numeric: Array) -> None:
    if not np.allclose(analytic, numeric, rtol=FD_RTOL, atol=FD_ATOL):
        err = np.max(np.abs(np.asarray(analytic) - np.asarray(numeric)))
        raise ModelError(f"{name} disagrees with finite differences (max abs error {err:.3e})")


@dataclass(frozen=True, eq=False)
class DiffusionModel:
    """Drift ``b`` and constant noise matrix ``sigma`` of a small-noise diffusion."""

    drift: Callable[[Array], Array]
    drift_jacobian: Callable[[Array], Array]
    drift_hessian_contract: Callable[[Array, Array], Array]
    sigma: Array
    name: str = "custom"
    probes: Array | None = None
    cov: Array = field(init=False, repr=False)
    lambda_max: float = field(init=False)

    def __post_init__(self):
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        cov = sigma @ sigma.T
        object.__setattr__(self, "cov", cov)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0.0:
            raise ModelError(f"sigma sigma^T is not positive definite (smallest eigenvalue {eig[0]:.3e})")
        object.__setattr__(self, "lambda_max", float(eig[-1]))
        self.validate_derivatives()

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.sigma.shape[1]

    def validate_derivatives(self, probes: Array | None = None) -> None:
        if probes is None:
            probes = self.probes if self.probes is not None else _default_probes(self.dim)
        probes = np.atleast_2d(np.asarray(probes, dtype=float))
        theta = np.linspace(0.5, 1.5, self.dim)
        for x in probes:
            jac = np.asarray(self.drift_jacobian(x))
            _check_close("drift_jacobian", jac, _fd_gradient(self.drift, x))
            hc = np.asarray(self.drift_hessian_contract(x, theta))
            if not np.allclose(hc, hc.T, rtol=1e-12, atol=1e-12):
                raise ModelError("drift_hessian_contract is not symmetric")
            num = _fd_gradient(lambda y: theta @ np.asarray(self.drift_jacobian(y)), x)
            _check_close("drift_hessian_contract", hc, num)


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    """Terminal observable ``f`` together with start point, horizon and noise level."""

    f: Callable[[Array], Array]
    grad_f: Callable[[Array], Array]
    hess_f: Callable[[Array], Array]
    x0: Array
    horizon_T: float
    epsilon: float = 1.0
    probes: Array | None = None
    check: bool = True

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if not self.horizon_T > 0:
            raise ModelError("horizon_T must be positive")
        if not self.epsilon > 0:
            raise ModelError("epsilon must be positive")
        if self.check:
            self.validate_derivatives()

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def with_epsilon(self, epsilon: float) -> "ObservableSpec":
        return dataclasses.replace(self, epsilon=float(epsilon), check=False)

    def validate_derivatives(self, probes: Array | None = None) -> None:
        if probes is None:
            probes = self.probes if self.probes is not None else _default_probes(self.dim)
        probes = np.atleast_2d(np.asarray(probes, dtype=float))
        for x in probes:
            _check_close("grad_f", np.asarray(self.grad_f(x)), _fd_gradient(self.f, x))
            _check_close("hess_f", np.asarray(self.hess_f(x)), _fd_gradient(self.grad_f, x))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T]; ``dt`` is reset to ``T / n_steps`` after validation."""

    horizon_T: float
    dt: float

    def __post_init__(self):
        if not (self.horizon_T > 0 and self.dt > 0):
            raise ModelError("horizon_T and dt must be positive")
        n = int(round(self.horizon_T / self.dt))
        if n < 2:
            raise ModelError("time grid needs at least two steps")
        if abs(n * self.dt - self.horizon_T) > 1e-12 * self.horizon_T:
            raise ModelError(f"dt={self.dt!r} does not divide T={self.horizon_T!r}")
        object.__setattr__(self, "dt", self.horizon_T / n)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T / self.dt))

    @property
    def times(self) -> Array:
        return np.linspace(0.0, self.horizon_T, self.n_steps + 1)


# ---------------------------------------------------------------------------
# shipped problems


def _linear_model(a: float, name: str) -> DiffusionModel:
    return DiffusionModel(
        drift=lambda x: -a * np.asarray(x, dtype=float),
        drift_jacobian=lambda x: np.broadcast_to(
            np.array([[-a]]), np.shape(x)[:-1] + (1, 1)
        ).copy(),
        drift_hessian_contract=lambda x, th: np.zeros(np.broadcast_shapes(np.shape(x), np.shape(th))[:-1] + (1, 1)),
        sigma=np.eye(1),
        name=name,
    )


def make_ou_quartic(epsilon: float = 1.0) -> tuple[DiffusionModel, ObservableSpec]:
    """Ornstein-Uhlenbeck drift b(x) = -x with observable f(x) = -(x - 2)^4 / 4, x0 = -1, T = 5."""
    model = _linear_model(1.0, "ou_quartic")
    obs = ObservableSpec(
        f=lambda x: -((np.asarray(x)[..., 0] - 2.0) ** 4) / 4.0,
        grad_f=lambda x: -((np.asarray(x) - 2.0) ** 3),
        hess_f=lambda x: (-3.0 * (np.asarray(x) - 2.0) ** 2)[..., None],
        x0=np.array([-1.0]),
        horizon_T=5.0,
        epsilon=epsilon,
    )
    return model, obs


LQ_CENTER = 2.0


def make_lq_case(a: float, q: float, epsilon: float = 1.0) -> tuple[DiffusionModel, ObservableSpec]:
    """Linear drift b(x) = -a x with concave quadratic f(x) = -q (x - 2)^2 / 2; exactly solvable."""
    if q < 0:
        raise ModelError("q must be nonnegative")
    a = float(a)
    q = float(q)
    c = LQ_CENTER
    model = _linear_model(a, "lq")
    obs = ObservableSpec(
        f=lambda x: -q * (np.asarray(x)[..., 0] - c) ** 2 / 2.0,
        grad_f=lambda x: -q * (np.asarray(x, dtype=float) - c),
        hess_f=lambda x: np.broadcast_to(np.array([[-q]]), np.shape(x)[:-1] + (1, 1)).copy(),
        x0=np.array([-1.0]),
        horizon_T=5.0,
        epsilon=epsilon,
    )
    return model, obs


MODELS = {
    "ou_quartic": lambda **kw: make_ou_quartic(),
    "lq": lambda a=1.0, q=1.0, **kw: make_lq_case(a, q),
}


def get_model(name: str, **params) -> tuple[DiffusionModel, ObservableSpec]:
    try:
        factory = MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# sufficient conditions for the order-1 instanton control


@dataclass(frozen=True)
class ConditionReport:
    delta_f: float
    delta_b: float
    c_lip: float
    c_T: float
    lambda_max: float
    bound: float
    holds: bool


def _box_probes(lo: Array, hi: Array, n_probes: int) -> Array:
    d = lo.shape[0]
    per_axis = max(2, int(np.ceil(n_probes ** (1.0 / d))))
    axes = [np.linspace(lo[k], hi[k], per_axis) for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _polished_sup(fun, probes: Array, lo: Array, hi: Array, n_starts: int = 3) -> float:
    """Max of ``fun`` over probes, refined by bounded local search from the best few."""
    vals = np.array([fun(p) for p in probes])
    best = float(np.max(vals))
    for idx in np.argsort(vals)[::-1][:n_starts]:
        res = minimize(lambda y: -fun(y), probes[idx], method="L-BFGS-B", bounds=list(zip(lo, hi)))
        if res.success or np.isfinite(res.fun):
            best = max(best, float(-res.fun))
    return best


def check_theorem_conditions(model: DiffusionModel, obs: ObservableSpec, instanton, probe_box,
                             n_probes: int = 200) -> ConditionReport:
    """Probe-based estimates of the Hessian bounds behind first-order log-efficiency.

    The suprema are taken over a grid of ``n_probes`` points in ``probe_box`` (refined
    by a local search), so the result is a diagnostic, not a proof.
    """
    if n_probes < 1:
        raise ModelError("empty probe set")
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=float)) for v in probe_box)
    probes = _box_probes(lo, hi, n_probes)
    if probes.size == 0:
        raise ModelError("empty probe set")

    def top_eig_f(x):
        return float(np.linalg.eigvalsh(np.atleast_2d(obs.hess_f(x)))[-1])

    delta_f = max(0.0, _polished_sup(top_eig_f, probes, lo, hi))

    thetas = np.asarray(instanton.theta)
    hc = np.asarray(model.drift_hessian_contract(probes[:, None, :], thetas[None, :, :]))
    hc = np.broadcast_to(hc, (probes.shape[0], thetas.shape[0], model.dim, model.dim))
    top = np.linalg.eigvalsh(hc)[..., -1]
    delta_b = float(np.max(top))
    if delta_b > 0:
        i_best = np.unravel_index(np.argmax(top), top.shape)[1]
        th = thetas[i_best]
        delta_b = _polished_sup(
            lambda x: float(np.linalg.eigvalsh(np.atleast_2d(model.drift_hessian_contract(x, th)))[-1]),
            probes, lo, hi)
    delta_b = max(0.0, delta_b)

    jac = np.asarray(model.drift_jacobian(probes))
    jac = np.broadcast_to(jac, (probes.shape[0], model.dim, model.dim))
    c_lip = float(np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1))))
    T = obs.horizon_T
    c_T = float(np.exp(T * c_lip))
    lam = model.lambda_max
    bound = 1.0 / (lam * T * c_T ** 2)
    return ConditionReport(delta_f, delta_b, c_lip, c_T, lam, bound, bool(delta_f + delta_b * T < bound))
