"""Instanton (forward-backward) and Riccati solvers on a uniform time grid."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import DiffusionModel, ObservableSpec, TimeGrid


class InstantonDivergence(ArithmeticError):
    def __init__(self, iteration: int, msg: str = "non-finite state in instanton iteration"):
        super().__init__(f"{msg} (iteration {iteration})")
        self.iteration = iteration


class RiccatiBlowup(ArithmeticError):
    def __init__(self, time: float):
        super().__init__(f"Riccati solution became non-finite at t={time:.6g}")
        self.time = time


@dataclass(frozen=True, eq=False)
class InstantonPath:
    grid: TimeGrid
    phi: np.ndarray  # (n_steps + 1, d)
    theta: np.ndarray  # (n_steps + 1, d)
    converged: bool
    iterations: int
    final_residual: float

    def residuals(self, model: DiffusionModel) -> tuple[np.ndarray, np.ndarray]:
        """Midpoint finite-difference defects of both instanton equations, per step."""
        dt = self.grid.dt
        phi_mid = 0.5 * (self.phi[1:] + self.phi[:-1])
        theta_mid = 0.5 * (self.theta[1:] + self.theta[:-1])
        rhs_phi = model.drift(phi_mid) + theta_mid @ model.cov.T
        jac = model.drift_jacobian(phi_mid)
        rhs_theta = -np.einsum("nij,ni->nj", jac, theta_mid)
        r_phi = (self.phi[1:] - self.phi[:-1]) / dt - rhs_phi
        r_theta = (self.theta[1:] - self.theta[:-1]) / dt - rhs_theta
        return r_phi, r_theta


@dataclass(frozen=True, eq=False)
class RiccatiPath:
    grid: TimeGrid
    K: np.ndarray  # (n_steps + 1, d, d)


def _forward_phi(model: DiffusionModel, x0, theta, dt) -> np.ndarray:
    n = theta.shape[0] - 1
    D = model.cov
    b = model.drift
    phi = np.empty_like(theta)
    phi[0] = x0
    dth = theta @ D.T
    for i in range(n):
        y = phi[i]
        f0 = dth[i]
        f1 = dth[i + 1]
        fm = 0.5 * (f0 + f1)
        k1 = b(y) + f0
        k2 = b(y + 0.5 * dt * k1) + fm
        k3 = b(y + 0.5 * dt * k2) + fm
        k4 = b(y + dt * k3) + f1
        phi[i + 1] = y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return phi


def _backward_theta(model: DiffusionModel, obs: ObservableSpec, phi, dt) -> np.ndarray:
    n = phi.shape[0] - 1
    # theta' = -J(phi)^T theta is linear along frozen phi: tabulate J^T at nodes and midpoints
    jt = np.swapaxes(model.drift_jacobian(phi), -1, -2)
    jt_mid = np.swapaxes(model.drift_jacobian(0.5 * (phi[1:] + phi[:-1])), -1, -2)
    # the RK4 step of a linear ODE is a matrix; build all n of them at once
    h = -dt
    eye = np.eye(phi.shape[1])
    A1, Am, A0 = -jt[1:], -jt_mid, -jt[:-1]
    K1 = A1
    K2 = Am @ (eye + 0.5 * h * K1)
    K3 = Am @ (eye + 0.5 * h * K2)
    K4 = A0 @ (eye + h * K3)
    P = eye + h / 6.0 * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
    theta = np.empty_like(phi)
    theta[n] = obs.grad_f(phi[n])
    for i in range(n, 0, -1):
        theta[i - 1] = P[i - 1] @ theta[i]
    return theta


def solve_instanton(model: DiffusionModel, obs: ObservableSpec, grid: TimeGrid, relax: float = 0.5,
                    max_iter: int = 500, tol: float = 1e-10) -> InstantonPath:
    """Relaxed fixed-point iteration on the forward-backward instanton system.

    Starting from ``theta = 0``: integrate ``phi' = b(phi) + D theta`` forward from x0,
    integrate ``theta' = -grad b(phi)^T theta`` backward from ``grad f(phi_T)``, and
    damp the momentum update with ``relax``. Both sweeps use RK4 with linear
    interpolation between grid nodes. Stops when the sup-norm fixed-point
    residual of ``theta`` drops below ``tol``.
    """
    if not 0.0 < relax <= 1.0:
        raise ValueError("relax must lie in (0, 1]")
    if max_iter < 1:
        raise ValueError("max_iter must be positive")
    dt = grid.dt
    theta = np.zeros((grid.n_steps + 1, obs.dim))
    residual = np.inf
    converged = False
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for it in range(1, max_iter + 1):
            phi = _forward_phi(model, obs.x0, theta, dt)
            theta_new = _backward_theta(model, obs, phi, dt)
            if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(theta_new))):
                raise InstantonDivergence(it)
            residual = float(np.max(np.abs(theta_new - theta)))
            theta = (1.0 - relax) * theta + relax * theta_new
            if residual < tol:
                converged = True
                break
        phi = _forward_phi(model, obs.x0, theta, dt)
    if not np.all(np.isfinite(phi)):
        raise InstantonDivergence(it)
    return InstantonPath(grid, phi, theta, converged, it, residual)


def _riccati_rhs(J, H, K, D):
    """dK/dt; ``J`` is grad b, ``H`` is theta . grad^2 b."""
    JtK = J.T @ K
    return -(JtK + JtK.T + H + K.T @ D @ K)


def solve_riccati(model: DiffusionModel, obs: ObservableSpec, instanton: InstantonPath,
                  method: str = "rk4") -> RiccatiPath:
    """Integrate the Riccati flow of the quadratic control backward from ``hess f(phi_T)``.

    ``method="euler"`` is the plain explicit Euler scheme (first order);
    ``"rk4"`` evaluates the instanton at midpoints by linear interpolation.
    K is symmetrised after every step.
    """
    if not instanton.converged:
        raise ValueError("instanton did not converge; refusing to build the Riccati path")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}")
    grid = instanton.grid
    dt = grid.dt
    n = grid.n_steps
    phi, theta = instanton.phi, instanton.theta
    D = model.cov
    J = model.drift_jacobian(phi)
    H = model.drift_hessian_contract(phi, theta)
    if method == "rk4":
        phi_m = 0.5 * (phi[1:] + phi[:-1])
        theta_m = 0.5 * (theta[1:] + theta[:-1])
        J_m = model.drift_jacobian(phi_m)
        H_m = model.drift_hessian_contract(phi_m, theta_m)
    K = np.empty((n + 1, obs.dim, obs.dim))
    KT = np.atleast_2d(obs.hess_f(phi[n]))
    K[n] = 0.5 * (KT + KT.T)
    times = grid.times
    h = -dt
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n, 0, -1):
            Y = K[i]
            if method == "euler":
                Kn = Y + h * _riccati_rhs(J[i], H[i], Y, D)
            else:
                k1 = _riccati_rhs(J[i], H[i], Y, D)
                k2 = _riccati_rhs(J_m[i - 1], H_m[i - 1], Y + 0.5 * h * k1, D)
                k3 = _riccati_rhs(J_m[i - 1], H_m[i - 1], Y + 0.5 * h * k2, D)
                k4 = _riccati_rhs(J[i - 1], H[i - 1], Y + h * k3, D)
                Kn = Y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(Kn)):
                raise RiccatiBlowup(times[i - 1])
            K[i - 1] = 0.5 * (Kn + Kn.T)
    return RiccatiPath(grid, K)


def riccati_defect(model: DiffusionModel, instanton: InstantonPath, riccati: RiccatiPath) -> np.ndarray:
    """Per-step defect of the Riccati equation against the trapezoidal average of its right-hand side."""
    dt = riccati.grid.dt
    J = model.drift_jacobian(instanton.phi)
    H = model.drift_hessian_contract(instanton.phi, instanton.theta)
    K = riccati.K
    rhs = np.stack([_riccati_rhs(J[i], H[i], K[i], model.cov) for i in range(len(K))])
    return (K[1:] - K[:-1]) / dt - 0.5 * (rhs[1:] + rhs[:-1])


def write_path_csv(path, instanton: InstantonPath, riccati: RiccatiPath | None = None) -> None:
    """CSV with columns t, phi_*, theta_*, and K_ij (row-major) when a Riccati path is given."""
    d = instanton.phi.shape[1]
    header = ["t"] + [f"phi_{k}" for k in range(d)] + [f"theta_{k}" for k in range(d)]
    if riccati is not None:
        header += [f"K_{i}{j}" for i in range(d) for j in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(instanton.grid.times):
            row = [t, *instanton.phi[i], *instanton.theta[i]]
            if riccati is not None:
                row += list(riccati.K[i].ravel())
            w.writerow([repr(float(v)) for v in row])
