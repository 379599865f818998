"""Efficiency sweeps over eps and comparisons against the deterministic oracles."""
from __future__ import annotations

import datetime as _dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats
from .bias import BiasControl, make_control
from .config import ExperimentConfig
from .mc import SimConfig, residual_mgf_check, simulate_batch
from .model import TimeGrid, get_model
from .odesolve import write_path_csv
from .oracle import pde_free_energy

log = logging.getLogger(__name__)

_CONTROL_SALT = {"none": 0, "order1": 1, "order2": 2}


@dataclass
class ExperimentArtifacts:
    output_dir: Path
    reports: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    start_values: dict = field(default_factory=dict)
    oracle_Z: dict = field(default_factory=dict)
    deviation_medians: dict = field(default_factory=dict)
    deviation_fit: stats.DecayFit | None = None
    residual_mgf: dict = field(default_factory=dict)
    instanton_path: Path | None = None
    efficiency_path: Path | None = None
    summary_path: Path | None = None


def _cell_seed(config: ExperimentConfig, control: str) -> int:
    if config.common_random_numbers:
        return config.seed
    return (config.seed + 0x9E3779B97F4A7C15 * _CONTROL_SALT[control]) % 2 ** 64


def fit_controls(config: ExperimentConfig, model, obs) -> dict[str, BiasControl]:
    params = dict(dt=config.dt, relax=config.relax, tol=config.tol, max_iter=config.max_iter)
    out = {}
    for name in config.controls:
        out[name] = make_control(name, **params) if name != "none" else make_control(name)
        out[name].fit(model, obs)
    return out


def _instanton_control(config, model, obs):
    ctl = make_control("order2", dt=config.dt, relax=config.relax, tol=config.tol, max_iter=config.max_iter)
    return ctl.fit(model, obs)


def run_experiment(config: ExperimentConfig) -> ExperimentArtifacts:
    """Solve the instanton and Riccati paths, run the eps sweep, and write the CSV/summary files."""
    model, obs = get_model(config.model_name, **config.model_params)
    grid = TimeGrid(obs.horizon_T, config.dt)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = ExperimentArtifacts(out)

    controls = fit_controls(config, model, obs)
    ref = controls["order2"] if "order2" in controls else _instanton_control(config, model, obs)
    art.instanton_path = out / "instanton.csv"
    write_path_csv(art.instanton_path, ref.instanton_, ref.riccati_)
    art.efficiency_path = out / "efficiency.csv"
    comment = f"generated {_dt.datetime.now().isoformat(timespec='seconds')}" if config.timestamp else None

    for eps in config.epsilon_list:
        obs_e = obs.with_epsilon(eps)
        reference = None
        if config.two_run_rho:
            ref_seed = (config.seed ^ 0x5EED5EED5EED5EED) % 2 ** 64
            ref_batch = simulate_batch(model, obs_e, make_control("none").fit(model, obs_e),
                                       SimConfig(config.n_traj, grid, ref_seed, n_workers=config.n_workers))
            reference = stats.accumulate(ref_batch.valid_log_payoff)
        for name in config.controls:
            ctl = controls[name].with_epsilon(eps)
            seed = _cell_seed(config, name)
            instanton_based = name != "none"
            sim = SimConfig(config.n_traj, grid, seed,
                            record_deviation=config.record_deviation and name == "order1",
                            record_residual=config.record_residual and instanton_based,
                            n_workers=config.n_workers)
            batch = simulate_batch(model, obs_e, ctl, sim)
            if batch.n_invalid:
                log.warning("eps=%g control=%s: %d invalid trajectories dropped", eps, name, batch.n_invalid)
            lp = batch.valid_log_payoff
            ci = stats.bootstrap_ci(lp, eps, config.n_bootstrap, seed) if config.n_bootstrap else None
            rep = stats.report(stats.accumulate(lp), eps, name, seed=seed, ci=ci, reference=reference)
            art.reports.append(rep)
            if instanton_based:
                art.start_values[(eps, name)] = ctl.value_at_start()
            if sim.record_deviation:
                art.deviation_medians[eps] = float(np.median(batch.sup_deviation[batch.valid]))
            if sim.record_residual:
                art.residual_mgf[(eps, name)] = residual_mgf_check(batch, ctl.order)
            if config.dump_samples:
                batch.to_csv(out / f"samples_{name}_eps{eps!r}.csv")
            # flush after every cell so partial sweeps survive a failure
            stats.write_reports_csv(art.efficiency_path, art.reports, comment)
            log.info("eps=%g %s: Z=%.6f R=%.4g", eps, name, rep.Z_hat, rep.R_hat)
        if config.oracle and obs.dim == 1:
            art.oracle_Z[eps], _ = pde_free_energy(model, obs_e, anchors=ref.instanton_.phi.ravel())

    for name in config.controls:
        try:
            art.fits[name] = stats.fit_decay_order(art.reports, name)
        except ValueError as exc:
            log.info("no decay fit for %s: %s", name, exc)
    if len(art.deviation_medians) >= 2:
        e = sorted(art.deviation_medians)
        art.deviation_fit = stats.loglog_slope(e, [art.deviation_medians[k] for k in e])

    art.summary_path = out / "summary.txt"
    art.summary_path.write_text(_summary_text(config, art, comment))
    return art


def _summary_text(config: ExperimentConfig, art: ExperimentArtifacts, comment) -> str:
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"model: {config.model_name}  n_traj: {config.n_traj}  dt: {config.dt!r}  seed: {config.seed}")
    lines.append("")
    lines.append("decay order of R(eps) (log-log least squares)")
    for name, fit in art.fits.items():
        extra = f"  excluded eps: {list(fit.excluded)}" if fit.excluded else ""
        lines.append(f"  {name:7s} slope = {fit.slope!r}  stderr = {fit.stderr!r}{extra}")
    if art.deviation_fit is not None:
        lines.append(f"  median sup|X - phi| vs eps (order1): slope = {art.deviation_fit.slope!r}")
    if art.residual_mgf:
        lines.append("")
        lines.append("log E[exp(2 Q)] of the scaled HJB residual")
        for (eps, name), v in sorted(art.residual_mgf.items()):
            lines.append(f"  eps={eps!r:10s} {name}: {v!r}")
    lines.append("")
    header = ["epsilon"] + [f"Z_hat[{c}]" for c in config.controls]
    header += [f"g_start[{c}]" for c in config.controls if c != "none"]
    if art.oracle_Z:
        header.append("Z_oracle")
    lines.append("\t".join(header))
    for eps in config.epsilon_list:
        row = [repr(eps)]
        row += [repr(r.Z_hat) for c in config.controls for r in art.reports
                if r.epsilon == eps and r.control_kind == c]
        row += [repr(art.start_values[(eps, c)]) for c in config.controls if c != "none"]
        if art.oracle_Z:
            row.append(repr(art.oracle_Z.get(eps, math.nan)))
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


@dataclass
class ValidationReport:
    rows: list = field(default_factory=list)
    g1_error_ratios: list = field(default_factory=list)
    g2_error_ratios: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        keys = list(self.rows[0].keys()) if self.rows else []
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")


def _ratios(errs: list[float]) -> list[float]:
    return [errs[i] / errs[i + 1] if errs[i + 1] != 0 else math.inf for i in range(len(errs) - 1)]


def validate_against_oracle(config: ExperimentConfig, run_mc: bool = True) -> ValidationReport:
    """Compare g_k(0, x0) and Monte Carlo Z against the PDE free energy for every eps.

    The error ratios compare consecutive entries of ``epsilon_list`` in the order given.
    """
    model, obs = get_model(config.model_name, **config.model_params)
    if obs.dim != 1:
        raise ValueError("oracle validation needs a one-dimensional model")
    grid = TimeGrid(obs.horizon_T, config.dt)
    c1 = make_control("order1", dt=config.dt, relax=config.relax, tol=config.tol,
                      max_iter=config.max_iter).fit(model, obs)
    c2 = make_control("order2", dt=config.dt, relax=config.relax, tol=config.tol,
                      max_iter=config.max_iter).fit(model, obs)
    mc_controls = fit_controls(config, model, obs) if run_mc else {}
    rep = ValidationReport()
    e1, e2 = [], []
    for eps in config.epsilon_list:
        obs_e = obs.with_epsilon(eps)
        z, z_err = pde_free_energy(model, obs_e, anchors=c1.instanton_.phi.ravel())
        g1 = c1.with_epsilon(eps).value_at_start()
        g2 = c2.with_epsilon(eps).value_at_start()
        row = {"epsilon": eps, "Z_oracle": z, "oracle_err": z_err, "g1_start": g1, "g2_start": g2,
               "g1_error": abs(g1 - z), "g2_error": abs(g2 - z)}
        for name, ctl in mc_controls.items():
            batch = simulate_batch(model, obs_e, ctl.with_epsilon(eps),
                                   SimConfig(config.n_traj, grid, _cell_seed(config, name),
                                             n_workers=config.n_workers))
            r = stats.report(stats.accumulate(batch.valid_log_payoff), eps, name)
            row[f"Z_mc_{name}"] = r.Z_hat
            row[f"se_mc_{name}"] = r.se_Z
        rep.rows.append(row)
        e1.append(row["g1_error"])
        e2.append(row["g2_error"])
    rep.g1_error_ratios = _ratios(e1)
    rep.g2_error_ratios = _ratios(e2)
    return rep
