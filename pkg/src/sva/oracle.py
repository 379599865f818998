"""Reference values for Z = eps log E[exp(f(X_T)/eps)] that do not use Monte Carlo."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import logsumexp

from .model import DiffusionModel, ObservableSpec


class OracleError(ArithmeticError):
    pass


@dataclass(frozen=True)
class PdeGrid:
    x_min: float
    x_max: float
    n_x: int
    dt_pde: float
    boundary: str = "dirichlet"
    theta: float = 0.5  # 0 explicit, 0.5 Crank-Nicolson, 1 backward Euler

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if self.n_x < 5:
            raise ValueError("n_x must be at least 5")
        if self.boundary not in ("dirichlet", "zero-flux"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    def refined(self, factor: int = 2) -> "PdeGrid":
        return PdeGrid(self.x_min, self.x_max, factor * (self.n_x - 1) + 1, self.dt_pde / factor,
                       self.boundary, self.theta)

    def widened(self, factor: float = 1.5) -> "PdeGrid":
        c = 0.5 * (self.x_min + self.x_max)
        h = 0.5 * factor * (self.x_max - self.x_min)
        n = int(round(factor * (self.n_x - 1))) + 1
        return PdeGrid(c - h, c + h, n, self.dt_pde, self.boundary, self.theta)


def default_pde_grid(model: DiffusionModel, obs: ObservableSpec, anchors=(), dx: float | None = None,
                     dt_pde: float | None = None) -> PdeGrid:
    """Box around x0 and ``anchors`` (e.g. instanton points) padded by several noise widths."""
    pts = np.concatenate([obs.x0.ravel(), np.ravel(anchors)]) if len(np.ravel(anchors)) else obs.x0.ravel()
    pad = 2.0 + 6.0 * math.sqrt(obs.epsilon * model.lambda_max * min(obs.horizon_T, 2.0))
    lo, hi = float(pts.min()) - pad, float(pts.max()) + pad
    if dx is None:
        dx = min(2e-3, 0.05 * obs.epsilon)
    n_x = int(math.ceil((hi - lo) / dx)) + 1
    if dt_pde is None:
        dt_pde = obs.horizon_T / 2000
    return PdeGrid(lo, hi, n_x, dt_pde)


@dataclass(frozen=True, eq=False)
class PdeSolution:
    Z: float
    x: np.ndarray
    h0: np.ndarray  # eps log u(0, x); -inf where u underflowed

    def __iter__(self):
        return iter((self.Z, self.h0))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "h0"])
            for x, h in zip(self.x, self.h0):
                w.writerow([repr(float(x)), repr(float(h))])


def _drift_flow(b: Callable, x: np.ndarray, s: float, n_sub: int) -> np.ndarray:
    """Flow of x' = b(x) over time s (RK4)."""
    h = s / n_sub
    y = np.array(x, dtype=float)
    for _ in range(n_sub):
        k1 = b(y)
        k2 = b(y + 0.5 * h * k1)
        k3 = b(y + 0.5 * h * k2)
        k4 = b(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def solve_feynman_kac_1d(model: DiffusionModel, obs: ObservableSpec, grid: PdeGrid) -> PdeSolution:
    """Solve d_t u + b u_x + (eps/2) D u_xx = 0 backward from u(T) = exp(f/eps) on a 1D box.

    u is carried as ``exp(logscale) * v`` with v renormalised to max 1 after every
    step, so the scheme is linear in v while h = eps log u stays finite for small
    eps. Drift is discretised by central differences where the cell Peclet number
    allows a monotone stencil and by upwinding elsewhere. Dirichlet boundary
    values are the terminal data transported by the drift-only flow.
    """
    if model.dim != 1 or obs.dim != 1:
        raise OracleError("the PDE oracle handles one-dimensional problems only")
    eps = obs.epsilon
    x = grid.x
    dx = grid.dx
    n = grid.n_x
    T = obs.horizon_T
    n_t = int(math.ceil(T / grid.dt_pde - 1e-9))
    dt = T / n_t
    kappa = 0.5 * eps * float(model.cov[0, 0])
    if grid.theta < 0.5 and kappa * dt / dx ** 2 > 0.45:
        raise OracleError("explicit stepping violates eps*dt/dx^2 stability bound")
    x0 = float(obs.x0[0])
    if not grid.x_min < x0 < grid.x_max:
        raise OracleError("x0 must lie strictly inside the PDE box")

    bx = np.asarray(model.drift(x[:, None]), dtype=float)[:, 0]
    # L v_j = lo_j v_{j-1} + di_j v_j + up_j v_{j+1}
    diff = kappa / dx ** 2
    central = np.abs(bx) * dx <= 2.0 * kappa
    lo = np.where(central, diff - bx / (2 * dx), diff + np.where(bx < 0, -bx / dx, 0.0))
    up = np.where(central, diff + bx / (2 * dx), diff + np.where(bx > 0, bx / dx, 0.0))
    di = -(lo + up)

    f_T = np.asarray(obs.f(x[:, None]), dtype=float)
    logscale = float(np.max(f_T)) / eps
    v = np.exp(f_T / eps - logscale)
    xb = x[[0, -1]]
    zero_flux = grid.boundary == "zero-flux"

    def apply_L(w):
        out = di * w
        out[1:] += lo[1:] * w[:-1]
        out[:-1] += up[:-1] * w[1:]
        return out

    def banded(th_dt):
        ab = np.zeros((3, n))
        ab[0, 1:] = -th_dt * up[:-1]
        ab[1, :] = 1.0 - th_dt * di
        ab[2, :-1] = -th_dt * lo[1:]
        if zero_flux:
            # mirror ghost node: v_{-1} = v_1, v_{n} = v_{n-2}
            ab[0, 1] = -th_dt * (up[0] + lo[0])
            ab[2, n - 2] = -th_dt * (lo[-1] + up[-1])
        else:
            ab[1, 0] = ab[1, -1] = 1.0
            ab[0, 1] = 0.0
            ab[2, n - 2] = 0.0
        return ab

    def step(v, theta, t_new):
        rhs = v + (1.0 - theta) * dt * apply_L(v) if theta < 1.0 else v.copy()
        if zero_flux:
            if theta < 1.0:
                rhs[0] = v[0] + (1 - theta) * dt * (di[0] * v[0] + (lo[0] + up[0]) * v[1])
                rhs[-1] = v[-1] + (1 - theta) * dt * (di[-1] * v[-1] + (lo[-1] + up[-1]) * v[-2])
        else:
            hb = np.asarray(obs.f(_drift_flow(model.drift, xb[:, None], T - t_new, 4)[:, :]), dtype=float)
            rhs[[0, -1]] = np.exp(hb / eps - logscale)
        if theta == 0.0:
            return rhs
        return solve_banded((1, 1), ab_cache[theta], rhs)

    ab_cache = {grid.theta: banded(grid.theta * dt), 1.0: banded(dt)}
    n_rannacher = 2 if 0.0 < grid.theta < 1.0 else 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        for k in range(n_t):
            t_new = T - (k + 1) * dt
            th = 1.0 if k < n_rannacher else grid.theta
            v = step(v, th, t_new)
            np.maximum(v, 0.0, out=v)
            vmax = float(np.max(v))
            if not (math.isfinite(vmax) and vmax > 0.0):
                raise OracleError(f"PDE solve became unstable at t={t_new:.4g}")
            v /= vmax
            logscale += math.log(vmax)
        h0 = eps * (logscale + np.log(v))
    j = int(np.searchsorted(x, x0))
    w = (x0 - x[j - 1]) / dx
    # interpolate in v (linear scheme variable) around x0, then take logs
    vz = (1.0 - w) * v[j - 1] + w * v[j]
    Z = eps * (logscale + math.log(vz))
    if not math.isfinite(Z):
        raise OracleError("non-finite free energy at x0")
    return PdeSolution(Z, x, h0)


def pde_self_convergence(model, obs, grid: PdeGrid) -> tuple[float, float]:
    """(Z on ``grid``, |Z(grid) - Z(grid refined twice)|)."""
    z1 = solve_feynman_kac_1d(model, obs, grid).Z
    z2 = solve_feynman_kac_1d(model, obs, grid.refined(2)).Z
    return z2, abs(z2 - z1)


# ---------------------------------------------------------------------------
# linear-drift references


def gaussian_terminal_free_energy(a: float, obs: ObservableSpec, n_quad: int = 20001,
                                  dt: float | None = None) -> float:
    """Z for b(x) = -a x, sigma = 1 in 1D by quadrature against the Gaussian law of X_T.

    With ``dt`` the law is that of the Euler-Maruyama chain instead of the diffusion.
    """
    x0 = float(obs.x0[0])
    T = obs.horizon_T
    eps = obs.epsilon
    if dt is None:
        mean = x0 * math.exp(-a * T)
        var = eps * (T if a == 0 else -math.expm1(-2 * a * T) / (2 * a))
    else:
        n = int(round(T / dt))
        r = 1.0 - a * dt
        mean = x0 * r ** n
        var = eps * dt * (n if r * r == 1.0 else (1 - r ** (2 * n)) / (1 - r * r))
    sd = math.sqrt(var)
    # f/eps concentrates the integrand away from the mean; cover both regions
    lo = min(mean - 12 * sd, -10.0)
    hi = max(mean + 12 * sd, 10.0)
    xs = np.linspace(lo, hi, n_quad)
    logdens = -0.5 * (xs - mean) ** 2 / var - 0.5 * math.log(2 * math.pi * var)
    integrand = np.asarray(obs.f(xs[:, None]), dtype=float) / eps + logdens
    wts = np.full(n_quad, xs[1] - xs[0])
    wts[[0, -1]] *= 0.5
    return eps * float(logsumexp(integrand, b=wts))


@dataclass(frozen=True)
class LQSolution:
    K: Callable[[float], float]
    m: Callable[[float], float]
    z0: float
    g: Callable[[float, float], float]
    alpha: Callable[[float], float]


def lq_solution(a: float, q: float, c: float, T: float, epsilon: float, x0: float = -1.0) -> LQSolution:
    """Closed-form solution of the HJB problem for b(x) = -a x, sigma = 1, f(x) = -q (x - c)^2 / 2.

    g(t, x) = K(t) x^2 / 2 + m(t) x + alpha(t) with K' = 2 a K - K^2, K(T) = -q,
    m' = (a - K) m, m(T) = q c and alpha' = -(eps/2) K - m^2/2, alpha(T) = -q c^2 / 2.
    """
    if q < 0:
        raise ValueError("q must be nonnegative")
    a = float(a)
    q = float(q)
    if q == 0.0:
        zero = lambda t: 0.0  # noqa: E731
        return LQSolution(zero, zero, 0.0, lambda t, x: 0.0 * x, zero)

    # u = 1/K solves u' = -2 a u + 1 (in t); written in time-to-go s = T - t
    def u(s):
        if a == 0.0:
            return -1.0 / q - s
        return 1.0 / (2 * a) + (-1.0 / q - 1.0 / (2 * a)) * math.exp(2 * a * s)

    def K(t):
        s = T - t
        us = u(s)
        if us == 0.0 or not math.isfinite(us):
            raise ArithmeticError(f"Riccati blow-up at t={t}")
        return 1.0 / us

    def int_K(s):
        # int_{T-s}^{T} K = 2 a s - log(u(s) / u(0))
        return 2 * a * s - math.log(u(s) / u(0.0))

    def m(t):
        s = T - t
        return q * c * math.exp(-a * s + int_K(s))

    def int_m2(t):
        s = T - t
        if abs(2 * a + q) < 1e-14:
            return (q * c) ** 2 * (s if a == 0 else math.expm1(2 * a * s) / (2 * a))
        return c * c * q * (q + K(t)) / (2 * a + q)

    def alpha(t):
        s = T - t
        return -q * c * c / 2 + 0.5 * epsilon * int_K(s) + 0.5 * int_m2(t)

    def g(t, x):
        return 0.5 * K(t) * x * x + m(t) * x + alpha(t)

    for s in (0.0, T):
        if not u(s) < 0:
            raise ArithmeticError("Riccati solution leaves the negative half-line")
    return LQSolution(K, m, g(0.0, x0), g, alpha)


def pde_free_energy(model: DiffusionModel, obs: ObservableSpec, anchors=(), grid: PdeGrid | None = None,
                    richardson: bool = True) -> tuple[float, float]:
    """Z from the PDE oracle and an error estimate from one grid halving.

    With ``richardson`` the two second-order solves are extrapolated.
    """
    if grid is None:
        grid = default_pde_grid(model, obs, anchors)
    z1 = solve_feynman_kac_1d(model, obs, grid).Z
    z2 = solve_feynman_kac_1d(model, obs, grid.refined(2)).Z
    if richardson:
        return (4.0 * z2 - z1) / 3.0, abs(z2 - z1) / 3.0
    return z2, abs(z2 - z1)
