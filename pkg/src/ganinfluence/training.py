"""Adversarial gradient descent with deterministic, replayable schedules.

Full-batch runs keep the dataset's latent set fixed for every step.
Minibatch runs draw batches without replacement inside an epoch (reshuffled
per epoch, trailing remainder dropped) and a fresh latent batch per step; the
batch indices are stored on the trajectory and the latents are re-derived
from ``(seed, step)``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models
from .errors import Diverged, MissingCheckpoint, ScheduleMismatch
from .models import Dataset, GameSpec

DIVERGENCE_GUARD = 1e8
CHUNK = 4096


@dataclass(frozen=True)
class RemovalSet:
    indices: tuple[int, ...] = ()
    eps: float = 1.0

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise ValueError("removal indices must be unique")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError("eps must lie in [0, 1]")
        object.__setattr__(self, "indices", idx)

    def validate(self, n):
        if any(i < 0 or i >= n for i in self.indices):
            raise ValueError(f"removal index out of range for {n} instances")

    def weights(self, n):
        w = np.ones(n)
        if self.indices:
            w[list(self.indices)] = 1.0 - self.eps
        return w


@dataclass
class Trajectory:
    spec: GameSpec
    checkpoints: np.ndarray
    eta: float
    seed: int
    batch_size: int | None = None
    batches: np.ndarray | None = None
    latent_batch: int | None = None
    removal: RemovalSet | None = None
    renormalize: bool = False
    start: int = 0
    fixed_latents: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return len(self.checkpoints) - 1

    @property
    def theta0(self) -> np.ndarray:
        return self.checkpoints[0]

    @property
    def final(self) -> np.ndarray:
        return self.checkpoints[-1]

    @property
    def minibatch(self) -> bool:
        return self.batches is not None

    def __getitem__(self, t) -> np.ndarray:
        if not 0 <= t <= self.T:
            raise MissingCheckpoint(f"checkpoint {t} not stored (T={self.T})")
        return self.checkpoints[t]

    def step_batch(self, data: Dataset, t: int):
        """Data indices and latents used at absolute step ``t``."""
        if self.batches is None:
            return np.arange(data.n_x), data.Z
        idx = self.batches[t]
        if self.fixed_latents:
            return idx, data.Z
        rng = np.random.default_rng([self.seed, t, 1])
        Z = rng.normal(size=(self.latent_batch, self.spec.latent_dim))
        return idx, Z

    def schedule_digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.seed}|{self.batch_size}|{self.latent_batch}|{int(self.fixed_latents)}".encode())
        if self.batches is not None:
            h.update(np.ascontiguousarray(self.batches, dtype="<i8").tobytes())
        return h.hexdigest()

    def digest(self) -> str:
        h = hashlib.sha256(self.schedule_digest().encode())
        h.update(np.ascontiguousarray(self.checkpoints, dtype="<f8").tobytes())
        return h.hexdigest()

    # -- persistence: little-endian f64 chunks plus a JSON sidecar ---------------
    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        chunks = []
        for k, lo in enumerate(range(0, len(self.checkpoints), CHUNK)):
            name = f"theta_{k:05d}.bin"
            block = np.ascontiguousarray(self.checkpoints[lo : lo + CHUNK], dtype="<f8")
            (path / name).write_bytes(block.tobytes())
            chunks.append({"file": name, "rows": len(block)})
        if self.batches is not None:
            (path / "schedule.bin").write_bytes(np.ascontiguousarray(self.batches, dtype="<i8").tobytes())
        sidecar = {
            "T": self.T,
            "eta": self.eta,
            "seed": self.seed,
            "d_theta": int(self.checkpoints.shape[1]),
            "dims": list(models.param_dims(self.spec)),
            "spec": self.spec.to_dict(),
            "batch_size": self.batch_size,
            "latent_batch": self.latent_batch,
            "batch_shape": None if self.batches is None else list(self.batches.shape),
            "removal": None
            if self.removal is None
            else {"indices": list(self.removal.indices), "eps": self.removal.eps},
            "renormalize": self.renormalize,
            "start": self.start,
            "fixed_latents": self.fixed_latents,
            "chunks": chunks,
            "schedule_digest": self.schedule_digest(),
            "digest": self.digest(),
            "meta": self.meta,
        }
        (path / "trajectory.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Trajectory":
        path = Path(path)
        side = json.loads((path / "trajectory.json").read_text())
        d = side["d_theta"]
        blocks = []
        for ch in side["chunks"]:
            f = path / ch["file"]
            if not f.exists():
                raise MissingCheckpoint(f"missing checkpoint chunk {f}")
            blocks.append(np.frombuffer(f.read_bytes(), dtype="<f8").reshape(ch["rows"], d))
        batches = None
        if side["batch_shape"] is not None:
            batches = np.frombuffer((path / "schedule.bin").read_bytes(), dtype="<i8").reshape(side["batch_shape"])
            batches = batches.astype(np.int64)
        removal = None
        if side["removal"] is not None:
            removal = RemovalSet(tuple(side["removal"]["indices"]), side["removal"]["eps"])
        traj = cls(
            spec=GameSpec.from_dict(side["spec"]),
            checkpoints=np.concatenate(blocks).astype(np.float64),
            eta=side["eta"],
            seed=side["seed"],
            batch_size=side["batch_size"],
            batches=batches,
            latent_batch=side["latent_batch"],
            removal=removal,
            renormalize=side["renormalize"],
            start=side["start"],
            fixed_latents=side.get("fixed_latents", False),
            meta=side.get("meta", {}),
        )
        if traj.digest() != side["digest"]:
            raise ScheduleMismatch(f"trajectory digest mismatch in {path}")
        return traj


# --- gradient backends ---------------------------------------------------------

def _use_analytic(spec, backend):
    if backend == "auto":
        return spec.model == models.LQGAN
    return backend == "analytic"


def step_gradient(spec, theta, X, Z, weights, denom, backend="auto"):
    if _use_analytic(spec, backend):
        return models.lqgan_gradient(spec, theta, X, Z, weights, denom)
    return models.game_gradient(spec, theta, X, Z, weights, denom)


def _batch_weights(removal_w, idx, renormalize):
    w = removal_w[idx]
    denom = w.sum() if renormalize else float(len(idx))
    return w, denom


def _schedule(n, T, batch_size, seed):
    per_epoch = n // batch_size
    rng = np.random.default_rng([seed, 0xBA7C])
    out = np.empty((T, batch_size), dtype=np.int64)
    t = 0
    while t < T:
        perm = rng.permutation(n)
        for b in range(per_epoch):
            if t >= T:
                break
            out[t] = perm[b * batch_size : (b + 1) * batch_size]
            t += 1
    return out


def _initial(spec, seed, theta0):
    if theta0 is None:
        return models.init_params(spec, np.random.default_rng(seed))
    theta0 = np.array(theta0, dtype=np.float64)
    if theta0.size != sum(models.param_dims(spec)):
        raise ValueError("theta0 has the wrong dimension for this spec")
    return theta0


def _run(traj: Trajectory, data: Dataset, start_theta, start, stop, removal, renormalize, guard, backend):
    spec = traj.spec
    w_all = np.ones(data.n_x) if removal is None else removal.weights(data.n_x)
    out = np.empty((stop - start + 1, start_theta.size))
    out[0] = start_theta
    theta = start_theta.copy()
    for k, t in enumerate(range(start, stop)):
        idx, Z = traj.step_batch(data, t)
        w, denom = _batch_weights(w_all, idx, renormalize)
        theta = theta - traj.eta * step_gradient(spec, theta, data.X[idx], Z, w, denom, backend)
        norm = float(np.linalg.norm(theta))
        if not np.isfinite(norm) or norm > guard:
            raise Diverged(t + 1, norm, guard)
        out[k + 1] = theta
    return out


def run_agd(spec: GameSpec, data: Dataset, T: int, eta: float, seed: int, theta0=None,
            guard=DIVERGENCE_GUARD, backend="auto") -> Trajectory:
    """Full-batch simultaneous adversarial gradient descent for ``T`` steps."""
    if T < 0 or eta <= 0:
        raise ValueError("need T >= 0 and eta > 0")
    theta0 = _initial(spec, seed, theta0)
    traj = Trajectory(spec, theta0[None, :].copy(), float(eta), int(seed))
    traj.checkpoints = _run(traj, data, theta0, 0, T, None, False, guard, backend)
    return traj


def run_asgd(spec: GameSpec, data: Dataset, T: int, eta: float, batch_size: int, seed: int,
             theta0=None, latent_batch=None, guard=DIVERGENCE_GUARD, backend="auto",
             fixed_latents=False) -> Trajectory:
    """Minibatch adversarial SGD with a seeded epoch schedule.

    Latents are redrawn every step unless ``fixed_latents``, which reuses
    ``data.Z`` (the full-batch policy).
    """
    if not 1 <= batch_size <= data.n_x:
        raise ValueError("batch_size must lie in [1, N_x]")
    if T < 0 or eta <= 0:
        raise ValueError("need T >= 0 and eta > 0")
    theta0 = _initial(spec, seed, theta0)
    traj = Trajectory(
        spec, theta0[None, :].copy(), float(eta), int(seed),
        batch_size=batch_size,
        batches=_schedule(data.n_x, T, batch_size, seed),
        latent_batch=latent_batch or batch_size,
        fixed_latents=fixed_latents,
    )
    traj.checkpoints = _run(traj, data, theta0, 0, T, None, False, guard, backend)
    return traj


def run_counterfactual_agd(spec: GameSpec, data: Dataset, removal: RemovalSet, T: int, eta: float,
                           seed: int, theta0, factual: Trajectory | None = None, renormalize=False,
                           guard=DIVERGENCE_GUARD, backend="auto") -> Trajectory:
    """Counterfactual AGD from the factual run's ``theta0`` with the removal applied every step."""
    removal.validate(data.n_x)
    theta0 = np.array(theta0, dtype=np.float64)
    if factual is not None:
        if factual.seed != seed or not np.array_equal(factual.theta0, theta0):
            raise ScheduleMismatch("counterfactual run must reuse the factual seed and theta0")
        template = factual
    else:
        template = Trajectory(spec, theta0[None, :], float(eta), int(seed))
    return replay(template, data, removal, start=0, stop=T, renormalize=renormalize,
                  guard=guard, backend=backend)


def replay(traj: Trajectory, data: Dataset, removal: RemovalSet | None, start=0, stop=None,
           renormalize=False, guard=DIVERGENCE_GUARD, backend="auto") -> Trajectory:
    """Re-run ``traj``'s schedule from checkpoint ``start`` with ``removal`` applied.

    ``start > 0`` gives the one-epoch retraining that resumes from a late
    factual checkpoint.
    """
    stop = traj.T if stop is None else stop
    if traj.minibatch and stop > len(traj.batches):
        raise ScheduleMismatch("replay extends beyond the recorded schedule")
    if removal is not None:
        removal.validate(data.n_x)
    theta_start = traj.checkpoints[start] if start <= traj.T else None
    if theta_start is None:
        raise MissingCheckpoint(f"no checkpoint at step {start}")
    out = Trajectory(
        traj.spec, theta_start[None, :].copy(), traj.eta, traj.seed,
        batch_size=traj.batch_size, batches=traj.batches, latent_batch=traj.latent_batch,
        removal=removal, renormalize=renormalize, start=start, fixed_latents=traj.fixed_latents,
    )
    out.checkpoints = _run(out, data, theta_start.copy(), start, stop, removal, renormalize, guard, backend)
    return out


def replay_many(traj: Trajectory, data: Dataset, removals, start=0, stop=None, renormalize=False,
                guard=DIVERGENCE_GUARD, backend="auto"):
    """Final parameters of one replay per removal set, plus a factual replay.

    Returns ``(finals, factual_final, diverged)`` where ``finals`` has one
    row per removal and ``diverged`` flags rows that crossed the guard.  For
    LQGAN all replays advance together in one vectorized loop; the factual
    row goes through the same arithmetic so differences are consistent.
    """
    stop = traj.T if stop is None else stop
    spec = traj.spec
    removals = list(removals)
    for r in removals:
        r.validate(data.n_x)
    weights = np.stack([np.ones(data.n_x)] + [r.weights(data.n_x) for r in removals])
    theta = np.repeat(traj.checkpoints[start][None, :], len(weights), axis=0)
    diverged = np.zeros(len(weights), dtype=bool)
    if _use_analytic(spec, backend):
        for t in range(start, stop):
            idx, Z = traj.step_batch(data, t)
            w = weights[:, idx]
            denom = w.sum(axis=1, keepdims=True) if renormalize else float(len(idx))
            step = models.lqgan_gradient(spec, theta, data.X[idx], Z, w, denom)
            step[diverged] = 0.0
            theta = theta - traj.eta * step
            norms = np.linalg.norm(theta, axis=1)
            bad = ~np.isfinite(norms) | (norms > guard)
            if bad.any():
                diverged |= bad
                theta[bad] = traj.checkpoints[start]
    else:
        for row, w_all in enumerate(weights):
            removal = None if row == 0 else removals[row - 1]
            try:
                theta[row] = _run(traj, data, theta[row].copy(), start, stop, removal,
                                  renormalize, guard, backend)[-1]
            except Diverged:
                diverged[row] = True
    if diverged[0]:
        raise Diverged(stop, float("inf"), guard)
    return theta[1:], theta[0], diverged[1:]
