"""Traces, rate fits, and the invariant battery.

Everything here reads runs; nothing mutates them. The battery re-derives its
quantities through the public step functions rather than the run engine, so
it doubles as an independent cross-check of the engine path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from . import linops, subspaces
from .errors import DimensionMismatch, NonPositiveValues, ValidationError

QUANTITIES = ("P_theta", "Q_theta", "N_theta", "P_omega", "Q_omega", "N_omega")

_FLOOR = 1e-14


@dataclass(frozen=True)
class RunTrace:
    """Per-iteration, per-particle projected norms plus eigenvalue snapshots.

    norms maps each quantity name to a (records, J) array; eigenvalues is
    (records, r) holding the populated pencil values. records = steps + 1
    because the initial state is recorded too.
    """

    variant: str
    iterations: np.ndarray
    norms: dict
    eigenvalues: np.ndarray

    @property
    def n_records(self) -> int:
        return len(self.iterations)

    @property
    def n_particles(self) -> int:
        return self.norms[QUANTITIES[0]].shape[1]

    def quantity(self, name: str) -> np.ndarray:
        if name not in self.norms:
            raise ValidationError(f"unknown trace quantity {name!r}")
        return self.norms[name]

    def particle_max(self, name: str) -> np.ndarray:
        return self.quantity(name).max(axis=1)

    def record(self, i: int) -> dict:
        """All recorded values at iteration index i, as plain floats/lists."""
        row = {"iter": int(self.iterations[i]), "variant": self.variant}
        for name in QUANTITIES:
            row[name] = self.norms[name][i].tolist()
        row["eigenvalues"] = self.eigenvalues[i].tolist()
        return row


@dataclass(frozen=True)
class RateFit:
    """OLS fit of log(value) against log(iteration)."""

    slope: float
    intercept: float
    i_range: tuple
    r_squared: float


def record_step(ens, obs, y, vstar, projs_obs, projs_state) -> dict:
    """Projected norms for one ensemble state; reference for trace rows."""
    V = ens.particles if hasattr(ens, "particles") else np.asarray(ens, dtype=float)
    y = np.asarray(y, dtype=float)
    if V.shape[0] != obs.d or y.shape != (obs.n,):
        raise DimensionMismatch("ensemble/observer/data dimensions disagree")
    theta = obs.H @ V - y[:, None]
    omega = V - np.asarray(vstar, dtype=float)[:, None]

    def cn(X):
        return np.sqrt(np.einsum("ij,ij->j", X, X))

    return {
        "P_theta": cn(projs_obs.P @ theta),
        "Q_theta": cn(projs_obs.Q @ theta),
        "N_theta": cn(projs_obs.N @ theta),
        "P_omega": cn(projs_state.P @ omega),
        "Q_omega": cn(projs_state.Q @ omega),
        "N_omega": cn(projs_state.N @ omega),
    }


def fit_rate(trace: RunTrace, quantity: str, i_range) -> RateFit:
    """Fit the particle-max of a trace quantity on a log-log window.

    Iterations outside [i_range[0], i_range[1]], iteration 0, and values at
    or below the 1e-14 floor are excluded. Raises NonPositiveValues if fewer
    than two points survive.
    """
    lo, hi = int(i_range[0]), int(i_range[1])
    if lo < 1 or hi < lo:
        raise ValidationError(f"bad fit window [{lo}, {hi}]")
    it = np.asarray(trace.iterations)
    vals = trace.particle_max(quantity)
    mask = (it >= lo) & (it <= hi) & (vals > _FLOOR)
    if mask.sum() < 2:
        raise NonPositiveValues(
            f"{quantity}: only {int(mask.sum())} usable positive values in [{lo}, {hi}]"
        )
    x = np.log(it[mask].astype(float))
    z = np.log(vals[mask])
    xm, zm = x.mean(), z.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = float(((x - xm) * (z - zm)).sum() / sxx)
    intercept = float(zm - slope * xm)
    resid = z - (slope * x + intercept)
    sstot = ((z - zm) ** 2).sum()
    if sstot == 0.0:
        r2 = 1.0 if np.allclose(resid, 0.0) else 0.0
    else:
        r2 = float(1.0 - (resid**2).sum() / sstot)
    return RateFit(slope=slope, intercept=intercept, i_range=(lo, hi), r_squared=r2)


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    asserted: bool = True
    note: str = ""


@dataclass(frozen=True)
class BatteryReport:
    variant: str
    iterations: int
    checks: list

    @property
    def all_pass(self) -> bool:
        return all(c.passed for c in self.checks if c.asserted)

    def to_json(self) -> list:
        out = []
        for c in self.checks:
            entry = {
                "check_name": c.name,
                "measured": float(c.measured),
                "tolerance": float(c.tolerance) if np.isfinite(c.tolerance) else None,
                "pass": bool(c.passed),
                "asserted": bool(c.asserted),
            }
            if c.note:
                entry["note"] = c.note
            out.append(entry)
        return out


def projector_algebra_checks(projs: subspaces.ProjectorSet, tol: float = 1e-9) -> list:
    """Idempotency, mutual annihilation, and complementarity residuals."""
    P, Q, N = projs.P, projs.Q, projs.N
    tag = projs.space
    idem = max(
        np.linalg.norm(P @ P - P), np.linalg.norm(Q @ Q - Q), np.linalg.norm(N @ N - N)
    )
    annih = max(
        np.linalg.norm(P @ Q), np.linalg.norm(Q @ P),
        np.linalg.norm(P @ N), np.linalg.norm(N @ P),
        np.linalg.norm(Q @ N), np.linalg.norm(N @ Q),
    )
    comp = np.linalg.norm(P + Q + N - np.eye(P.shape[0]))
    return [
        CheckResult(f"{tag}_idempotent", float(idem), tol, bool(idem <= tol)),
        CheckResult(f"{tag}_mutual_annihilation", float(annih), tol, bool(annih <= tol)),
        CheckResult(f"{tag}_complementarity", float(comp), tol, bool(comp <= tol)),
    ]


def _span_residual(cols: np.ndarray, basis: np.ndarray) -> float:
    """Largest relative leftover after projecting cols onto span(basis)."""
    if cols.shape[1] == 0:
        return 0.0
    if basis.shape[1] == 0:
        return float(np.linalg.norm(cols))
    Qb, _ = np.linalg.qr(basis)
    resid = cols - Qb @ (Qb.T @ cols)
    return float(
        max(
            np.linalg.norm(resid[:, j]) / np.linalg.norm(cols[:, j])
            for j in range(cols.shape[1])
        )
    )


def _range_basis(M: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    U, s, _ = np.linalg.svd(M)
    if s.size == 0 or s[0] == 0.0:
        return U[:, :0]
    return U[:, : int(np.count_nonzero(s > rel_tol * s[0]))]


def invariant_battery(
    problem,
    variant: str = "deterministic",
    iters: int = 100,
    rng_seed: int = 0,
    tol_override: float | None = None,
) -> BatteryReport:
    """Run every structural check on one problem and variant.

    Steps the ensemble `iters` times through the public step functions,
    rebuilding bases and maps as needed. Checks that cannot hold for a
    stochastic path (eigenvector constancy, monotonicity, N-constancy) are
    reported informationally there instead of asserted.
    """
    from . import ensemble as ens_mod
    from . import idealized as ideal_mod

    if variant not in ("deterministic", "stochastic"):
        raise ValidationError(f"unknown variant {variant!r}")
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    obs, y, ens0 = problem.obs, problem.y, problem.ens0
    det = variant == "deterministic"
    checks: list[CheckResult] = []

    def tol(x: float) -> float:
        return float(tol_override) if tol_override is not None else x

    def add(name, measured, tolerance, asserted=True, note=""):
        tolerance = tol(tolerance)
        checks.append(
            CheckResult(name, float(measured), tolerance, float(measured) <= tolerance,
                        asserted, note)
        )

    def skip(name, note):
        checks.append(CheckResult(name, 0.0, 0.0, True, False, note))

    stats0 = ens_mod.empirical_stats(ens0, obs)
    obasis = subspaces.build_observation_basis(stats0, obs)
    sbasis = subspaces.build_state_basis(obasis, stats0, obs)
    pobs = subspaces.observation_projectors(obasis, obs.sigma)
    pst = subspaces.state_projectors(sbasis, obs)
    vstar = linops.weighted_pseudoinverse_apply(obs, y)
    Se, L = obs.sigma.entries, obs.sigma.factor
    Hw = sla.solve_triangular(L, obs.H, lower=True)
    Sform = Hw.T @ Hw
    W, U, r, h = obasis.W, sbasis.U, obasis.r, obasis.h

    checks.extend(
        c if tol_override is None else CheckResult(c.name, c.measured, tol(c.tolerance),
                                                   c.measured <= tol(c.tolerance))
        for c in projector_algebra_checks(pobs) + projector_algebra_checks(pst)
    )

    add("obs_basis_weighted_orthonormal", np.linalg.norm(W.T @ Se @ W - np.eye(obs.n)), 1e-10)
    add("obs_basis_populated_span",
        _span_residual(W[:, :r], _range_basis(obs.sigma.solve(stats0.obs_cov))), 1e-8)
    add("obs_basis_observable_span",
        _span_residual(W[:, :h], _range_basis(obs.sigma.solve(obs.H))), 1e-8)
    add("obs_basis_kernel_alignment",
        np.linalg.norm(obs.H.T @ W[:, h:]) / np.linalg.norm(obs.H), 1e-8)
    add("state_basis_normalized", np.linalg.norm(U.T @ Sform @ U - np.eye(h)), 1e-10)
    link = obs.sigma.solve(obs.H @ U) - W[:, :h]
    add("state_basis_link",
        max((np.linalg.norm(link[:, j]) for j in range(h)), default=0.0), 1e-8)
    add("state_kernel_alignment",
        np.linalg.norm(obs.H @ pst.N) / np.linalg.norm(obs.H), 1e-9)

    ens1 = ens_mod.eki_step_deterministic(ens0, obs, y)
    theta0 = obs.H @ ens0.particles - y[:, None]
    theta1 = obs.H @ ens1.particles - y[:, None]
    M0 = ens_mod.misfit_map(stats0, obs)
    add("misfit_map_identity", np.abs(theta1 - M0 @ theta0).max(), 1e-10)
    omega0 = ens0.particles - vstar[:, None]
    omega1 = ens1.particles - vstar[:, None]
    R0 = ens_mod.residual_map(stats0, obs)
    add("residual_map_identity", np.abs(omega1 - R0 @ omega0).max(), 1e-8)
    K0 = ens_mod.kalman_gain(stats0, obs)
    add("gain_annihilates_unobservable",
        np.linalg.norm(K0 @ (Se @ W[:, h:])), 1e-10)
    add("misfit_map_commutes",
        max(np.linalg.norm(M0 @ A - A @ M0) for A in (pobs.P, pobs.Q, pobs.N)), 1e-9)
    add("residual_map_commutes",
        max(np.linalg.norm(R0 @ A - A @ R0) for A in (pst.P, pst.Q, pst.N)), 1e-9)

    # walk the chosen variant, keeping covariance snapshots at spaced indices
    sample_at = sorted({1, 2, 5, 10, iters // 2, iters} - {0})
    sample_at = [s for s in sample_at if s <= iters]
    stream = ens_mod.NoiseStream(rng_seed, obs.sigma, ens0.n_particles)
    ens = ens0
    rows = {name: [] for name in QUANTITIES}
    snapshots = {}
    span_v0 = np.linalg.qr(ens0.particles)[0]
    off_span = 0.0
    prev_basis = _range_basis(stats0.cov)
    nesting = 0.0
    for i in range(iters + 1):
        rec = record_step(ens, obs, y, vstar, pobs, pst)
        for name in QUANTITIES:
            rows[name].append(rec[name])
        V = ens.particles
        resid = V - span_v0 @ (span_v0.T @ V)
        scale = np.sqrt(np.einsum("ij,ij->j", V, V))
        off_span = max(off_span, float((np.sqrt(np.einsum("ij,ij->j", resid, resid))
                                        / np.maximum(scale, 1e-300)).max()))
        if i in sample_at:
            st = ens_mod.empirical_stats(ens, obs)
            snapshots[i] = st
            cur = _range_basis(st.cov)
            if prev_basis.shape[1]:
                leak = cur - prev_basis @ (prev_basis.T @ cur)
                nesting = max(nesting, float(np.linalg.norm(leak)))
            prev_basis = cur
        if i == iters:
            break
        if det:
            ens = ens_mod.eki_step_deterministic(ens, obs, y)
        else:
            ens = ens_mod.eki_step_stochastic(ens, obs, y, stream.draw())
    for name in QUANTITIES:
        rows[name] = np.array(rows[name])

    add("particles_stay_in_initial_span", off_span, 1e-8)
    add("covariance_range_nesting", nesting, 1e-8)

    def drift(name):
        base = rows[name][0]
        dev = np.abs(rows[name] - base[None, :]).max()
        return dev / max(base.max(), _FLOOR)

    add("q_theta_constant", drift("Q_theta"), 1e-7)
    add("q_omega_constant", drift("Q_omega"), 1e-7)
    if det:
        add("n_theta_constant", drift("N_theta"), 1e-7)
        add("n_omega_constant", drift("N_omega"), 1e-7)
        inc = np.diff(rows["P_theta"], axis=0).max() if iters else 0.0
        add("p_theta_nonincreasing", max(inc, 0.0), 1e-12)
        inc_o = np.diff(rows["P_omega"], axis=0).max() if iters else 0.0
        add("p_omega_nonincreasing", max(inc_o, 0.0), 1e-12)
    else:
        add("n_theta_constant", drift("N_theta"), np.inf, asserted=False,
            note="reported only: stochastic forcing may drift N components")
        add("n_omega_constant", drift("N_omega"), np.inf, asserted=False,
            note="reported only: stochastic forcing may drift N components")
        skip("p_theta_nonincreasing", "not applicable (stochastic)")
        skip("p_omega_nonincreasing", "not applicable (stochastic)")

    if det and r:
        ang = 0.0
        eig_dev = 0.0
        for i, st in snapshots.items():
            ge = linops.gen_eig_pencil(st.obs_cov, obs.sigma, obs.rank_tol)
            ang = max(ang, float(sla.subspace_angles(W[:, :r], ge.vectors[:, :r]).max()))
            # branches can swap order on the very first step (the recurrence
            # map peaks at delta = 1), so compare spectra sorted
            pred = np.sort(subspaces.predict_eigenvalues_deterministic(obasis.delta0[:r], i))[::-1]
            eig_dev = max(eig_dev, float(np.abs(ge.values[:r] - pred).max() / pred.max()))
        add("eigenvector_constancy", ang, 1e-6)
        add("eigenvalue_recurrence", eig_dev, 1e-8)
    elif det:
        skip("eigenvector_constancy", "no populated directions")
        skip("eigenvalue_recurrence", "no populated directions")
    else:
        skip("eigenvector_constancy", "not applicable (stochastic)")
        skip("eigenvalue_recurrence", "not applicable (stochastic)")

    cov = ideal_mod.IdealizedCov.from_stats(stats0)
    consist = 0.0
    eig_cf = 0.0
    for i in range(1, 51):
        cov = ideal_mod.idealized_cov_step(cov, obs)
        consist = max(
            consist,
            float(np.linalg.norm(cov.C - obs.H @ cov.G @ obs.H.T)
                  / (1.0 + np.linalg.norm(cov.C))),
        )
        if r and i in (1, 5, 25, 50):
            ge = linops.gen_eig_pencil(cov.C, obs.sigma, obs.rank_tol)
            pred = subspaces.predict_eigenvalues_stochastic(obasis.delta0[:r], i)
            eig_cf = max(eig_cf, float(np.abs(ge.values[:r] - pred).max() / pred.max()))
    add("idealized_cov_consistency", consist, 1e-9)
    if r:
        add("idealized_eigenvalue_closed_form", eig_cf, 1e-10)

    return BatteryReport(variant=variant, iterations=iters, checks=checks)
