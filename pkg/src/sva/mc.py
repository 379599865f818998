"""Euler-Maruyama simulation of tilted paths with Girsanov reweighting.

Random numbers are counter based: trajectories are grouped into fixed blocks of
``BLOCK_SIZE`` and block ``b`` draws from a Philox generator keyed by
``(seed, b)``. The normals of trajectory ``i`` therefore depend only on
``(seed, i)``, never on the number of workers or on ``n_traj``.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator

from .bias import BiasControl, ZeroControl
from .model import DiffusionModel, ObservableSpec, TimeGrid

BLOCK_SIZE = 8192
_TIME_CHUNK = 256
MAX_INVALID_FRACTION = 1e-3


class SimulationError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_traj: int
    grid: TimeGrid
    seed: int = 0
    record_deviation: bool = False
    record_residual: bool = False
    n_workers: int = 1

    def __post_init__(self):
        if int(self.n_traj) < 1:
            raise ValueError("n_traj must be at least 1")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if int(self.n_workers) < 1:
            raise ValueError("n_workers must be at least 1")


@dataclass(frozen=True)
class TrajectorySample:
    log_weight: float
    terminal_x: np.ndarray
    log_payoff: float
    sup_deviation: float | None = None
    residual: float | None = None


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Per-trajectory outputs of a batch, in trajectory-index order."""

    log_weight: np.ndarray
    terminal_x: np.ndarray
    log_payoff: np.ndarray
    sup_deviation: np.ndarray | None
    residual: np.ndarray | None
    valid: np.ndarray
    order: float
    seed: int

    def __len__(self):
        return len(self.log_payoff)

    def __getitem__(self, i) -> TrajectorySample:
        return TrajectorySample(
            float(self.log_weight[i]), self.terminal_x[i], float(self.log_payoff[i]),
            None if self.sup_deviation is None else float(self.sup_deviation[i]),
            None if self.residual is None else float(self.residual[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_invalid(self) -> int:
        return int(np.count_nonzero(~self.valid))

    @property
    def valid_log_payoff(self) -> np.ndarray:
        return self.log_payoff[self.valid]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "log_weight", "log_payoff", "sup_deviation", "residual"])
            for i in range(len(self)):
                dev = "" if self.sup_deviation is None else repr(float(self.sup_deviation[i]))
                res = "" if self.residual is None else repr(float(self.residual[i]))
                w.writerow([i, repr(float(self.log_weight[i])), repr(float(self.log_payoff[i])), dev, res])


def block_generator(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) | (int(block) << 64)))


def _block_noise(seed: int, block: int, n_steps: int, m: int):
    """Yield (step_start, normals[chunk, BLOCK_SIZE, m]) in time order."""
    gen = block_generator(seed, block)
    for start in range(0, n_steps, _TIME_CHUNK):
        stop = min(start + _TIME_CHUNK, n_steps)
        yield start, gen.standard_normal((stop - start, BLOCK_SIZE, m))


def trajectory_noise(seed: int, index: int, n_steps: int, m: int) -> np.ndarray:
    """The (n_steps, m) standard normals that drive trajectory ``index``."""
    block, col = divmod(int(index), BLOCK_SIZE)
    return np.concatenate([z[:, col, :] for _, z in _block_noise(seed, block, n_steps, m)])


def _simulate(model, obs, control, grid, noise_chunks, n, record_deviation, record_residual):
    """Vectorised Euler-Maruyama over ``n`` trajectories; see ``simulate_one``."""
    eps = obs.epsilon
    dt = grid.dt
    N = grid.n_steps
    sigma = model.sigma
    D = model.cov
    zero = isinstance(control, ZeroControl)
    noise_scale = math.sqrt(eps * dt)
    w_scale = math.sqrt(dt / eps)
    k = control.order

    X = np.tile(obs.x0, (n, 1))
    logw = np.zeros(n)
    dev = np.zeros(n) if record_deviation else None
    phi = None
    if record_deviation:
        path = getattr(control, "instanton_", None)
        if path is None:
            raise ValueError("sup-deviation needs a control built on an instanton")
        phi = path.phi
    Q = np.zeros(n) if record_residual else None
    if record_residual and k <= 0:
        raise ValueError("residual diagnostic needs a control of positive order")

    with np.errstate(over="ignore", invalid="ignore"):
        for start, z in noise_chunks:
            for j in range(z.shape[0]):
                i = start + j
                xi = z[j, :n]
                drift = model.drift(X)
                if not zero:
                    grad = control.gradient_at(i, X)
                    u = grad @ sigma
                    logw -= w_scale * np.einsum("ij,ij->i", u, xi) + (0.5 * dt / eps) * np.einsum("ij,ij->i", u, u)
                    drift = drift + grad @ D.T
                    if record_residual:
                        Q += control.hjb_residual_at(model, i, X) * dt
                X = X + drift * dt + noise_scale * (xi @ sigma.T)
                if record_deviation:
                    np.maximum(dev, np.linalg.norm(X - phi[i + 1], axis=1), out=dev)
        fX = np.asarray(obs.f(X), dtype=float)
        log_payoff = fX / eps + logw
        if record_residual:
            Q = (fX - control.value_at(N, X) + Q) / eps ** k
    return logw, X, log_payoff, dev, Q


def simulate_one(model: DiffusionModel, obs: ObservableSpec, control: BiasControl, grid: TimeGrid,
                 noise, record_deviation: bool = False, record_residual: bool = False) -> TrajectorySample:
    """One tilted Euler-Maruyama path.

    ``noise`` is the (n_steps, m) array of standard normals of this path, e.g.
    ``trajectory_noise(seed, index, ...)``. The state moves by
    ``[b + D grad g] dt + sqrt(eps dt) sigma xi`` and the log-weight accumulates
    ``-u.xi sqrt(dt/eps) - |u|^2 dt / (2 eps)`` with ``u = sigma^T grad g`` evaluated
    before the step, using the same ``xi``.
    """
    noise = np.asarray(noise, dtype=float).reshape(grid.n_steps, 1, model.noise_dim)
    logw, X, lp, dev, Q = _simulate(model, obs, control, grid, [(0, noise)], 1,
                                    record_deviation, record_residual)
    return TrajectorySample(float(logw[0]), X[0], float(lp[0]),
                            None if dev is None else float(dev[0]),
                            None if Q is None else float(Q[0]))


def simulate_batch(model: DiffusionModel, obs: ObservableSpec, control: BiasControl,
                   config: SimConfig) -> SampleBatch:
    """Simulate ``config.n_traj`` independent tilted paths.

    Invalid (non-finite) paths are flagged; more than 0.1% of them aborts the run.
    """
    n_traj = int(config.n_traj)
    grid = config.grid
    m = model.noise_dim
    n_blocks = -(-n_traj // BLOCK_SIZE)

    def run_block(b):
        n = min(BLOCK_SIZE, n_traj - b * BLOCK_SIZE)
        chunks = _block_noise(config.seed, b, grid.n_steps, m)
        return _simulate(model, obs, control, grid, chunks, n,
                         config.record_deviation, config.record_residual)

    if config.n_workers == 1:
        parts = [run_block(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=config.n_workers) as pool:
            parts = list(pool.map(run_block, range(n_blocks)))

    logw = np.concatenate([p[0] for p in parts])
    X = np.concatenate([p[1] for p in parts])
    lp = np.concatenate([p[2] for p in parts])
    dev = np.concatenate([p[3] for p in parts]) if config.record_deviation else None
    Q = np.concatenate([p[4] for p in parts]) if config.record_residual else None
    valid = np.isfinite(lp) & np.all(np.isfinite(X), axis=1)
    batch = SampleBatch(logw, X, lp, dev, Q, valid, control.order, int(config.seed))
    if batch.n_invalid > MAX_INVALID_FRACTION * n_traj:
        raise SimulationError(f"{batch.n_invalid} of {n_traj} trajectories became non-finite")
    return batch


def residual_mgf_check(samples: SampleBatch, k: float) -> float:
    """Empirical log E[exp(2 Q)] of the scaled HJB residual along tilted paths."""
    if k <= 0:
        raise ValueError("residual diagnostic is undefined for order k <= 0")
    if samples.residual is None:
        raise ValueError("no residuals recorded in this batch")
    if samples.order != k:
        raise ValueError(f"residuals were recorded for order {samples.order}, not {k}")
    q = samples.residual[samples.valid]
    return float(logsumexp(2.0 * q) - np.log(q.size))


class ImportanceSampler(BaseEstimator):
    """Estimate A = E[exp(f(X_T)/eps)] by tilted sampling.

    ``fit(model, obs)`` fits the control (unless ``refit_control=False`` and it is
    already fitted), simulates, and stores ``samples_``, ``moments_`` and
    ``report_``.
    """

    def __init__(self, control=None, n_traj=10_000, dt=5e-3, seed=0, n_workers=1,
                 record_deviation=False, record_residual=False, n_bootstrap=200,
                 refit_control=True):
        self.control = control
        self.n_traj = n_traj
        self.dt = dt
        self.seed = seed
        self.n_workers = n_workers
        self.record_deviation = record_deviation
        self.record_residual = record_residual
        self.n_bootstrap = n_bootstrap
        self.refit_control = refit_control

    def fit(self, model: DiffusionModel, obs: ObservableSpec):
        from . import stats

        control = ZeroControl() if self.control is None else self.control
        if self.refit_control or not hasattr(control, "epsilon_"):
            control.fit(model, obs)
        else:
            control = control.with_epsilon(obs.epsilon)
        self.control_ = control
        config = SimConfig(self.n_traj, TimeGrid(obs.horizon_T, self.dt), self.seed,
                           self.record_deviation, self.record_residual, self.n_workers)
        self.samples_ = simulate_batch(model, obs, control, config)
        lp = self.samples_.valid_log_payoff
        self.moments_ = stats.accumulate(lp)
        ci = stats.bootstrap_ci(lp, obs.epsilon, self.n_bootstrap, self.seed) if self.n_bootstrap else None
        self.report_ = stats.report(self.moments_, obs.epsilon, control.kind, seed=self.seed, ci=ci)
        return self

    @property
    def free_energy_(self) -> float:
        return self.report_.Z_hat
