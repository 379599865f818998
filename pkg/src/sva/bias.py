"""Importance-sampling controls g(t, x) used to tilt the diffusion.

Controls follow the scikit-learn estimator conventions: hyper-parameters go to
``__init__`` and are exposed through ``get_params``; ``fit(model, obs)`` solves
whatever deterministic problem the control needs and stores the results in
attributes with a trailing underscore.
"""
from __future__ import annotations

import copy

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import DiffusionModel, ObservableSpec, TimeGrid
from .odesolve import _riccati_rhs, solve_instanton, solve_riccati


def _cumulative_from_end(values: np.ndarray, dt: float) -> np.ndarray:
    """Trapezoid table of int_{t_i}^T values ds on the grid."""
    seg = 0.5 * dt * (values[1:] + values[:-1])
    out = np.zeros_like(values)
    out[:-1] = np.cumsum(seg[::-1])[::-1]
    return out


class BiasControl(BaseEstimator):
    """Common interface. ``order`` is the expected SVA order (0 for no tilt)."""

    kind = "custom"
    order = 0

    def fit(self, model: DiffusionModel, obs: ObservableSpec):
        self.epsilon_ = float(obs.epsilon)
        self.dim_ = obs.dim
        return self

    def with_epsilon(self, epsilon: float):
        """Shallow copy re-targeted at another noise level (paths are shared)."""
        other = copy.copy(self)
        other.epsilon_ = float(epsilon)
        return other

    # evaluation on grid nodes is what the simulator uses
    def gradient_at(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_at(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian_at(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def time_derivative_at(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value(self, t: float, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, t: float, x) -> np.ndarray:
        raise NotImplementedError

    def value_at_start(self) -> float:
        raise NotImplementedError

    def hjb_residual_at(self, model: DiffusionModel, i: int, x: np.ndarray) -> np.ndarray:
        """(d/dt g + H^eps g)(t_i, x) for a batch of points ``x`` of shape (n, d)."""
        eps = self.epsilon_
        grad = self.gradient_at(i, x)
        sig_g = grad @ model.sigma
        hess = self.hessian_at(i, x)
        diff = 0.5 * eps * np.einsum("ij,...ij->...", model.cov, hess)
        return (self.time_derivative_at(i, x) + np.einsum("...i,...i->...", model.drift(x), grad)
                + diff + 0.5 * np.einsum("...i,...i->...", sig_g, sig_g))


class ZeroControl(BiasControl):
    """No tilting: the plain Monte Carlo estimator."""

    kind = "none"
    order = 0

    def __init__(self):
        pass

    def gradient_at(self, i, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def value_at(self, i, x):
        return np.zeros(np.shape(x)[:-1])

    def hessian_at(self, i, x):
        return np.zeros(np.shape(x) + (np.shape(x)[-1],))

    def time_derivative_at(self, i, x):
        return np.zeros(np.shape(x)[:-1])

    def value(self, t, x):
        return self.value_at(0, np.atleast_1d(np.asarray(x, dtype=float)))

    def gradient(self, t, x):
        return self.gradient_at(0, np.atleast_1d(np.asarray(x, dtype=float)))

    def value_at_start(self):
        return 0.0


class InstantonControl(BiasControl):
    """Polynomial expansion of the optimal control around the instanton path.

    ``order=1`` keeps the linear term (bias force theta_t), ``order=2`` adds the
    Riccati curvature K_t and its O(eps) time correction.

    Parameters
    ----------
    order : {1, 2}
    dt : float
        Time step of the grid the instanton and Riccati paths are solved on.
    relax, max_iter, tol :
        Settings of the instanton fixed-point iteration.
    riccati_method : {"rk4", "euler"}
    """

    def __init__(self, order=1, dt=5e-3, relax=0.5, max_iter=500, tol=1e-10, riccati_method="rk4"):
        self.order = order
        self.dt = dt
        self.relax = relax
        self.max_iter = max_iter
        self.tol = tol
        self.riccati_method = riccati_method

    @property
    def kind(self):
        return f"order{self.order}"

    def fit(self, model: DiffusionModel, obs: ObservableSpec):
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        super().fit(model, obs)
        self.grid_ = TimeGrid(obs.horizon_T, self.dt)
        path = solve_instanton(model, obs, self.grid_, self.relax, self.max_iter, self.tol)
        if not path.converged:
            raise ArithmeticError(
                f"instanton iteration did not converge in {path.iterations} iterations "
                f"(residual {path.final_residual:.3e})")
        self.instanton_ = path
        dt = self.grid_.dt
        D = model.cov
        phi, theta = path.phi, path.theta
        self.f_end_ = float(obs.f(phi[-1]))
        self.cum_theta_D_theta_ = _cumulative_from_end(np.einsum("ni,ij,nj->n", theta, D, theta), dt)
        self.phi_dot_ = model.drift(phi) + theta @ D.T
        self.theta_dot_ = -np.einsum("nij,ni->nj", model.drift_jacobian(phi), theta)
        if self.order == 2:
            self.riccati_ = solve_riccati(model, obs, path, method=self.riccati_method)
            K = self.riccati_.K
            self.cum_trace_DK_ = _cumulative_from_end(np.einsum("ij,nij->n", D, K), dt)
            J = model.drift_jacobian(phi)
            H = model.drift_hessian_contract(phi, theta)
            self.K_dot_ = np.stack([_riccati_rhs(J[i], H[i], K[i], D) for i in range(len(K))])
            self.trace_DK_ = np.einsum("ij,nij->n", D, K)
        self.theta_D_theta_ = np.einsum("ni,ij,nj->n", theta, D, theta)
        return self

    # -- grid-node evaluation -------------------------------------------------

    def gradient_at(self, i, x):
        th = self.instanton_.theta[i]
        if self.order == 1:
            return np.broadcast_to(th, np.shape(x)).copy()
        dx = x - self.instanton_.phi[i]
        return th + dx @ self.riccati_.K[i].T

    def value_at(self, i, x):
        dx = x - self.instanton_.phi[i]
        v = self.f_end_ - 0.5 * self.cum_theta_D_theta_[i] + dx @ self.instanton_.theta[i]
        if self.order == 2:
            v = v + 0.5 * self.epsilon_ * self.cum_trace_DK_[i]
            v = v + 0.5 * np.einsum("...i,ij,...j->...", dx, self.riccati_.K[i], dx)
        return v

    def hessian_at(self, i, x):
        shape = np.shape(x)[:-1] + (self.dim_, self.dim_)
        if self.order == 1:
            return np.zeros(shape)
        return np.broadcast_to(self.riccati_.K[i], shape)

    def time_derivative_at(self, i, x):
        dx = x - self.instanton_.phi[i]
        th = self.instanton_.theta[i]
        phid = self.phi_dot_[i]
        out = 0.5 * self.theta_D_theta_[i] + dx @ self.theta_dot_[i] - th @ phid
        if self.order == 2:
            K = self.riccati_.K[i]
            out = out - 0.5 * self.epsilon_ * self.trace_DK_[i]
            out = out + 0.5 * np.einsum("...i,ij,...j->...", dx, self.K_dot_[i], dx)
            out = out - dx @ (K @ phid)
        return out

    # -- continuous-time evaluation -------------------------------------------

    def _locate(self, t):
        check_is_fitted(self, "instanton_")
        T = self.grid_.horizon_T
        if not (0.0 <= t <= T):
            raise ValueError(f"t={t} outside [0, {T}]")
        s = t / self.grid_.dt
        i = min(int(np.floor(s)), self.grid_.n_steps - 1)
        w = s - i
        return i, w

    def _interp(self, table, t):
        i, w = self._locate(t)
        return (1.0 - w) * table[i] + w * table[i + 1]

    def value(self, t, x):
        x = np.asarray(x, dtype=float)
        phi = self._interp(self.instanton_.phi, t)
        th = self._interp(self.instanton_.theta, t)
        dx = x - phi
        v = self.f_end_ - 0.5 * self._interp(self.cum_theta_D_theta_, t) + dx @ th
        if self.order == 2:
            K = self._interp(self.riccati_.K, t)
            v = v + 0.5 * self.epsilon_ * self._interp(self.cum_trace_DK_, t)
            v = v + 0.5 * np.einsum("...i,ij,...j->...", dx, K, dx)
        return v

    def gradient(self, t, x):
        x = np.asarray(x, dtype=float)
        th = self._interp(self.instanton_.theta, t)
        if self.order == 1:
            return np.broadcast_to(th, x.shape).copy()
        phi = self._interp(self.instanton_.phi, t)
        K = self._interp(self.riccati_.K, t)
        return th + (x - phi) @ K.T

    def value_at_start(self):
        check_is_fitted(self, "instanton_")
        v = self.f_end_ - 0.5 * self.cum_theta_D_theta_[0]
        if self.order == 2:
            v += 0.5 * self.epsilon_ * self.cum_trace_DK_[0]
        return float(v)


class CustomControl(BiasControl):
    """User-supplied control. Novikov's condition is the caller's responsibility.

    ``value_fn(t, x)`` and ``gradient_fn(t, x)`` must accept batches ``x`` of shape
    (n, d). ``hessian_fn`` and ``time_derivative_fn`` are only needed for the
    residual diagnostic.
    """

    kind = "custom"

    def __init__(self, value_fn=None, gradient_fn=None, start_value=0.0, order=1,
                 hessian_fn=None, time_derivative_fn=None):
        self.value_fn = value_fn
        self.gradient_fn = gradient_fn
        self.start_value = start_value
        self.order = order
        self.hessian_fn = hessian_fn
        self.time_derivative_fn = time_derivative_fn

    def fit(self, model, obs, grid: TimeGrid | None = None):
        super().fit(model, obs)
        if self.value_fn is None or self.gradient_fn is None:
            raise ValueError("custom controls need value_fn and gradient_fn")
        self.grid_ = grid
        return self

    def _t(self, i):
        return i * self.grid_.dt

    def gradient_at(self, i, x):
        return np.asarray(self.gradient_fn(self._t(i), x), dtype=float)

    def value_at(self, i, x):
        return np.asarray(self.value_fn(self._t(i), x), dtype=float)

    def hessian_at(self, i, x):
        if self.hessian_fn is None:
            raise ValueError("residual diagnostic needs hessian_fn")
        return np.asarray(self.hessian_fn(self._t(i), x), dtype=float)

    def time_derivative_at(self, i, x):
        if self.time_derivative_fn is None:
            raise ValueError("residual diagnostic needs time_derivative_fn")
        return np.asarray(self.time_derivative_fn(self._t(i), x), dtype=float)

    def value(self, t, x):
        return self.value_fn(t, x)

    def gradient(self, t, x):
        return self.gradient_fn(t, x)

    def value_at_start(self):
        return float(self.start_value)


def make_control(name: str, **params) -> BiasControl:
    """Control by CLI name: ``"none"``, ``"order1"`` or ``"order2"``."""
    if name == "none":
        return ZeroControl()
    if name == "order1":
        return InstantonControl(order=1, **params)
    if name == "order2":
        return InstantonControl(order=2, **params)
    raise ValueError(f"unknown control {name!r}")
