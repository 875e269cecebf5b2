"""Reproducible synthetic inverse problems and their file format.

generate() draws a well-conditioned SPD noise covariance, a forward map with
an exact prescribed rank, a ground truth, data (optionally noisy), and an
initial ensemble -- in that fixed order, so instances sharing a seed but
differing in ensemble size share everything except the ensemble. Instances
round-trip through a checksummed JSON file with decimal float serialization.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import ensemble, linops, subspaces
from .errors import (
    ChecksumMismatch,
    GenerationFailed,
    IoFailure,
    RankDeficiencyInconsistent,
    SchemaVersionMismatch,
    ValidationError,
)

SCHEMA_VERSION = 1
_MAX_ATTEMPTS = 10


@dataclass(frozen=True)
class ProblemSpec:
    """Dimensions and seed describing a problem family member."""

    n: int = 8
    d: int = 12
    target_h: int = 6
    J: int = 5
    seed: int = 0
    noise_on_data: bool = True

    def validate(self):
        if self.n < 1 or self.d < 1:
            raise ValidationError(f"need n, d >= 1, got n={self.n}, d={self.d}")
        if not 1 <= self.target_h <= min(self.n, self.d):
            raise ValidationError(
                f"target_h must lie in [1, {min(self.n, self.d)}], got {self.target_h}"
            )
        if self.J < 2:
            raise ValidationError(f"need at least 2 particles, got J={self.J}")


@dataclass(frozen=True)
class ProblemInstance:
    """A concrete problem: observer, data, initial ensemble, references."""

    spec: ProblemSpec
    obs: linops.LinearObserver
    y: np.ndarray
    ens0: ensemble.Ensemble
    vstar: np.ndarray
    ground_truth: np.ndarray


def _draw_instance(spec: ProblemSpec, attempt: int) -> ProblemInstance:
    n, d, h, J = spec.n, spec.d, spec.target_h, spec.J
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=spec.seed, spawn_key=(attempt,))
    )
    A = rng.standard_normal((n, n))
    sigma = linops.spd_from_dense((A @ A.T + n * np.eye(n)) / n)
    Qu, _ = np.linalg.qr(rng.standard_normal((n, n)))
    Qv, _ = np.linalg.qr(rng.standard_normal((d, d)))
    sv = np.sort(np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=h)))[::-1]
    H = (Qu[:, :h] * sv) @ Qv[:, :h].T
    gt = rng.standard_normal(d)
    y = H @ gt
    if spec.noise_on_data:
        y = y + sigma.factor @ rng.standard_normal(n)
    V0 = rng.standard_normal((d, J))
    obs = linops.make_observer(H, sigma)
    vstar = linops.weighted_pseudoinverse_apply(obs, y)
    return ProblemInstance(
        spec=spec, obs=obs, y=y, ens0=ensemble.Ensemble(V0), vstar=vstar, ground_truth=gt
    )


def _instance_ok(inst: ProblemInstance) -> bool:
    spec, obs = inst.spec, inst.obs
    h = spec.target_h
    if obs.rank_h != h:
        return False
    stats = ensemble.empirical_stats(inst.ens0, obs)
    try:
        basis = subspaces.build_observation_basis(stats, obs)
    except RankDeficiencyInconsistent:
        return False
    if basis.r != min(spec.J - 1, h):
        return False
    if spec.J - 1 < h and spec.J < spec.d:
        # the ensemble span must not cover the whole row space of H; with
        # J >= d it necessarily does, so the check only applies below that
        B = np.linalg.svd(obs.H.T, full_matrices=False)[0][:, :h]
        Qv, _ = np.linalg.qr(inst.ens0.particles)
        leftover = B - Qv @ (Qv.T @ B)
        if np.linalg.norm(leftover, ord=2) < 1e-6:
            return False
    return True


def generate(spec: ProblemSpec) -> ProblemInstance:
    """Draw an instance satisfying the structural invariants, retrying a
    degenerate draw up to 10 times before raising GenerationFailed."""
    spec.validate()
    for attempt in range(_MAX_ATTEMPTS):
        inst = _draw_instance(spec, attempt)
        if _instance_ok(inst):
            return inst
    raise GenerationFailed(
        f"no valid instance for {spec} within {_MAX_ATTEMPTS} attempts"
    )


def _fmt(x: float) -> float:
    # round-trip through 17 significant decimal digits (exact for float64)
    return float(format(float(x), ".17g"))


def _matrix(M) -> list:
    return [[_fmt(v) for v in row] for row in np.asarray(M, dtype=float)]


def _vector(v) -> list:
    return [_fmt(x) for x in np.asarray(v, dtype=float)]


def _payload(inst: ProblemInstance) -> dict:
    spec = inst.spec
    return {
        "version": SCHEMA_VERSION,
        "n": spec.n,
        "d": spec.d,
        "h": spec.target_h,
        "J": spec.J,
        "seed": spec.seed,
        "noise_on_data": spec.noise_on_data,
        "sigma": _matrix(inst.obs.sigma.entries),
        "H": _matrix(inst.obs.H),
        "y": _vector(inst.y),
        "V0": _matrix(inst.ens0.particles),
        "ground_truth": _vector(inst.ground_truth),
    }


def _checksum(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()


def save(inst: ProblemInstance, path) -> None:
    payload = _payload(inst)
    payload["checksum"] = _checksum({k: v for k, v in payload.items()})
    try:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from None


_REQUIRED = ("version", "n", "d", "h", "J", "seed", "noise_on_data",
             "sigma", "H", "y", "V0", "ground_truth", "checksum")


def load(path) -> ProblemInstance:
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaVersionMismatch(f"{path} is not a valid problem file: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaVersionMismatch(f"{path}: top-level JSON object expected")
    missing = [k for k in _REQUIRED if k not in doc]
    if missing:
        raise SchemaVersionMismatch(f"{path}: missing fields {missing}")
    if doc["version"] != SCHEMA_VERSION:
        raise SchemaVersionMismatch(
            f"{path}: schema version {doc['version']}, expected {SCHEMA_VERSION}"
        )
    stored = doc["checksum"]
    recomputed = _checksum({k: doc[k] for k in _REQUIRED if k != "checksum"})
    if stored != recomputed:
        raise ChecksumMismatch(f"{path}: stored {stored[:12]}.. != {recomputed[:12]}..")
    spec = ProblemSpec(
        n=int(doc["n"]), d=int(doc["d"]), target_h=int(doc["h"]), J=int(doc["J"]),
        seed=int(doc["seed"]), noise_on_data=bool(doc["noise_on_data"]),
    )
    spec.validate()
    sigma = linops.spd_from_dense(np.array(doc["sigma"], dtype=float))
    obs = linops.make_observer(np.array(doc["H"], dtype=float), sigma)
    if obs.rank_h != spec.target_h:
        raise SchemaVersionMismatch(
            f"{path}: stored h={spec.target_h} but H has numerical rank {obs.rank_h}"
        )
    y = np.array(doc["y"], dtype=float)
    if y.shape != (spec.n,):
        raise SchemaVersionMismatch(f"{path}: y has shape {y.shape}")
    V0 = np.array(doc["V0"], dtype=float)
    if V0.shape != (spec.d, spec.J):
        raise SchemaVersionMismatch(f"{path}: V0 has shape {V0.shape}")
    vstar = linops.weighted_pseudoinverse_apply(obs, y)
    return ProblemInstance(
        spec=spec, obs=obs, y=y, ens0=ensemble.Ensemble(V0), vstar=vstar,
        ground_truth=np.array(doc["ground_truth"], dtype=float),
    )
