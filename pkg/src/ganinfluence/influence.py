"""Influence of training instances on a differentiable metric of the generator.

Two estimators share the per-instance removal direction
``dv_j(theta) = -(eta/|X_t|) (0, grad_psi f(D(psi, x_j)))``:

* ``itd_eigem`` sweeps the stored trajectory backwards, carrying the adjoint
  ``u <- u - eta (J + gamma I)^T u`` and accumulating ``dv_j^T u``;
* ``aid_eigem`` runs a truncated Neumann series at the final parameters,
  ``w <- w - eta (J + gamma I)^T w + grad E``, and scores ``dv_j^T w``.

The adjoint recursion does not depend on ``j``, so every instance in a step's
batch is scored in the same sweep and targets are selected at the end.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import models
from .errors import AdjointBlewUp, NonFiniteValue
from .metrics import MetricGradient
from .models import Dataset, GameSpec
from .training import Trajectory

ADJOINT_GUARD = 1e12


@dataclass
class InfluenceReport:
    indices: np.ndarray
    scores: np.ndarray
    estimator: str
    metric: str
    direction: str
    hyper: dict = field(default_factory=dict)
    telemetry: dict = field(default_factory=dict)
    diverged: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)

    def as_dict(self):
        return {int(i): float(s) for i, s in zip(self.indices, self.scores)}

    def harm(self):
        return mt.harm_score(self.scores, self.direction)

    def ranks(self):
        """1 for the most harmful instance."""
        order = np.argsort(-self.harm(), kind="stable")
        r = np.empty(len(order), dtype=np.int64)
        r[order] = np.arange(1, len(order) + 1)
        return r

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "score", "rank"])
            for i, s, r in zip(self.indices, self.scores, self.ranks()):
                w.writerow([int(i), repr(float(s)), int(r)])

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    def summary(self):
        return {
            "estimator": self.estimator,
            "metric": self.metric,
            "direction": self.direction,
            "hyper": self.hyper,
            "telemetry": self.telemetry,
            "diverged": self.diverged,
            "scores": {str(int(i)): float(s) for i, s in zip(self.indices, self.scores)},
        }


# --- per-step linear algebra ----------------------------------------------------

class _Ops:
    """``J^T u`` and per-instance removal products for one spec and backend."""

    def __init__(self, spec: GameSpec, backend: str):
        if backend not in ("autodiff", "analytic", "auto"):
            raise ValueError(f"unknown backend {backend!r}")
        if backend == "analytic" and spec.model != models.LQGAN:
            raise ValueError("analytic backend is only available for LQGAN")
        self.spec = spec
        # "auto" picks the closed forms whenever the game has them
        self.analytic = backend == "analytic" or (backend == "auto" and spec.model == models.LQGAN)

    def jtu(self, theta, u, X, Z):
        if self.analytic:
            return models.lqgan_jacobian_t_vector(self.spec, theta, u, X, Z)
        return models.jacobian_t_vector(self.spec, theta, u, X, Z)

    def dots(self, theta, u, X_items, eta, batch_size):
        if self.analytic:
            return models.lqgan_removal_dots(self.spec, theta, u, X_items, eta, batch_size)
        return models.removal_dots(self.spec, theta, u, X_items, eta, batch_size)

    def jacobian(self, theta, X, Z):
        d = np.size(theta)
        if self.analytic:
            return models.lqgan_jacobian_t_vector(self.spec, theta, np.eye(d), X, Z)
        return np.stack([self.jtu(theta, e, X, Z) for e in np.eye(d)])


def _targets(targets, n):
    if targets is None:
        return np.arange(n)
    t = np.asarray(list(targets), dtype=np.int64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError("target index out of range")
    return t


def _grad_vector(grad_e, d):
    vec = grad_e.vector if isinstance(grad_e, MetricGradient) else np.asarray(grad_e, dtype=np.float64)
    if vec.shape != (d,):
        raise ValueError(f"metric gradient has shape {vec.shape}, expected ({d},)")
    return vec


def _name(grad_e):
    return grad_e.metric if isinstance(grad_e, MetricGradient) else "custom"


def itd_eigem(traj: Trajectory, data: Dataset, grad_e, targets=None, gamma: float = 0.0,
              window: int | None = None, guard: float = ADJOINT_GUARD, backend: str = "autodiff",
              direction: str = mt.HIGHER, allow_disc_block: bool = False) -> InfluenceReport:
    """Backward-sweep estimate of each target's influence on the metric.

    ``window`` restricts the sweep to the last ``window`` steps (one-epoch
    scoring).  Minibatch trajectories contribute only at steps whose batch
    contains the instance, normalized by that batch's size.
    """
    spec = traj.spec
    d_phi, d_psi = models.param_dims(spec)
    u = _grad_vector(grad_e, d_phi + d_psi).copy()
    if not allow_disc_block and np.any(u[d_phi:] != 0.0):
        raise ValueError("metric gradient must have a zero discriminator block")
    tgt = _targets(targets, data.n_x)
    ops = _Ops(spec, backend)
    eta = traj.eta
    lo = 0 if window is None else max(0, traj.T - int(window))
    acc = np.zeros(data.n_x)
    t0 = time.perf_counter()
    for t in range(traj.T - 1, lo - 1, -1):
        theta = traj[t]
        idx, Z = traj.step_batch(data, t)
        acc[idx] += ops.dots(theta, u, data.X[idx], eta, len(idx))
        ju = ops.jtu(theta, u, data.X[idx], Z)
        u = u - eta * (ju + gamma * u) if gamma else u - eta * ju
        norm = float(np.linalg.norm(u))
        if not np.isfinite(norm) or norm > guard:
            raise AdjointBlewUp(t, norm, guard)
    return InfluenceReport(
        tgt, acc[tgt], "itd", _name(grad_e), direction,
        hyper={"T": traj.T, "eta": eta, "gamma": gamma, "window": window,
               "minibatch": traj.minibatch, "backend": backend},
        telemetry={"seconds": time.perf_counter() - t0, "steps": traj.T - lo},
    )


def aid_eigem(theta_T, spec: GameSpec, data: Dataset, grad_e, targets=None, M: int = 100,
              eta: float = 0.01, gamma: float = 0.0, guard: float = ADJOINT_GUARD,
              backend: str = "autodiff", direction: str = mt.HIGHER,
              allow_disc_block: bool = False) -> InfluenceReport:
    """Truncated-Neumann estimate at the final parameters.

    ``w`` accumulates ``sum_{m<M} (Z^T)^m grad E`` with ``Z = I - eta (J + gamma I)``,
    so ``M = 1`` scores with ``grad E`` itself.
    """
    if M < 1 or eta <= 0:
        raise ValueError("need M >= 1 and eta > 0")
    d_phi, d_psi = models.param_dims(spec)
    ge = _grad_vector(grad_e, d_phi + d_psi)
    if not allow_disc_block and np.any(ge[d_phi:] != 0.0):
        raise ValueError("metric gradient must have a zero discriminator block")
    theta_T = np.asarray(theta_T, dtype=np.float64)
    tgt = _targets(targets, data.n_x)
    ops = _Ops(spec, backend)
    w = ge.copy()
    t0 = time.perf_counter()
    for m in range(M - 1):
        jw = ops.jtu(theta_T, w, data.X, data.Z)
        w = (w - eta * (jw + gamma * w) if gamma else w - eta * jw) + ge
        norm = float(np.linalg.norm(w))
        if not np.isfinite(norm) or norm > guard:
            raise AdjointBlewUp(m, norm, guard)
    scores = ops.dots(theta_T, w, data.X, eta, data.n_x)
    if not np.isfinite(scores).all():
        raise NonFiniteValue("non-finite AID scores")
    return InfluenceReport(
        tgt, scores[tgt], "aid", _name(grad_e), direction,
        hyper={"M": M, "eta": eta, "gamma": gamma, "backend": backend},
        telemetry={"seconds": time.perf_counter() - t0, "steps": M - 1},
    )


def itd_eigem_minibatch(traj: Trajectory, data: Dataset, grad_e, targets=None, gamma=0.0, **kw):
    if not traj.minibatch:
        raise ValueError("trajectory carries no minibatch schedule")
    return itd_eigem(traj, data, grad_e, targets, gamma, **kw)


def influence_on_disc_loss(traj: Trajectory, data: Dataset, val_X, targets=None, estimator="itd",
                           latent_seed: int = 777, n_latent: int | None = None, M: int = 100,
                           eta: float | None = None, gamma: float = 0.0, window=None,
                           backend="autodiff") -> InfluenceReport:
    """Influence on the discriminator's validation loss; negative scores mark harm."""
    if len(val_X) == 0:
        raise ValueError("validation data must be non-empty")
    ge = mt.disc_loss_gradient(traj.spec, traj.final, val_X, latent_seed, n_latent)
    if estimator == "itd":
        return itd_eigem(traj, data, ge, targets, gamma, window=window, backend=backend,
                         direction=mt.LOWER, allow_disc_block=True)
    return aid_eigem(traj.final, traj.spec, data, ge, targets, M, eta or traj.eta, gamma,
                     backend=backend, direction=mt.LOWER, allow_disc_block=True)


# --- parameter-space estimates (used by the verification probes) --------------------

def itd_parameter_influence(traj: Trajectory, data: Dataset, targets, gamma=0.0, backend="autodiff"):
    """Forward recursion ``d <- (I - eta (J + gamma I)) d + dv_j``; rows follow ``targets``."""
    spec = traj.spec
    ops = _Ops(spec, backend)
    tgt = _targets(targets, data.n_x)
    d = np.zeros((len(tgt), traj.checkpoints.shape[1]))
    eta = traj.eta
    for t in range(traj.T):
        theta = traj[t]
        idx, Z = traj.step_batch(data, t)
        J = ops.jacobian(theta, data.X[idx], Z)
        d = d - eta * (d @ J.T + gamma * d)
        d = d + _removal_vectors(spec, theta, data, idx, tgt, eta, ops)
    return d


def aid_parameter_influence(theta_T, spec, data: Dataset, targets, M, eta, gamma=0.0, backend="autodiff"):
    ops = _Ops(spec, backend)
    tgt = _targets(targets, data.n_x)
    J = ops.jacobian(theta_T, data.X, data.Z)
    Zm = np.eye(J.shape[0]) - eta * (J + gamma * np.eye(J.shape[0]))
    dv = _removal_vectors(spec, theta_T, data, np.arange(data.n_x), tgt, eta, ops)
    acc, term = dv.copy(), dv.copy()
    for _ in range(M - 1):
        term = term @ Zm.T
        acc = acc + term
    return acc


def _removal_vectors(spec, theta, data, idx, tgt, eta, ops=None):
    """Rows ``dv_j(theta)`` for ``tgt``; zero for targets outside the batch ``idx``.

    Built from removal dot products against the discriminator's unit
    vectors, which keeps the generator block exactly zero.
    """
    ops = ops or _Ops(spec, "autodiff")
    d = np.size(theta)
    d_phi, _ = models.param_dims(spec)
    out = np.zeros((len(tgt), d))
    mask = np.isin(tgt, idx)
    if mask.any():
        items = data.X[tgt[mask]]
        for k in range(d_phi, d):
            e = np.zeros(d)
            e[k] = 1.0
            out[mask, k] = ops.dots(theta, e, items, eta, len(idx))
    return out


def z_matrix(spec, theta, X, Z, eta, gamma=0.0, backend="autodiff"):
    J = _Ops(spec, backend).jacobian(theta, X, Z)
    n = J.shape[0]
    return np.eye(n) - eta * (J + gamma * np.eye(n))


def dense_aid_solution(spec, theta, data: Dataset, grad_e, eta, gamma=0.0, backend="autodiff"):
    """``(I - Z)^{-T} grad E`` by a dense solve: the ``M -> inf`` limit of the Neumann accumulator."""
    Zm = z_matrix(spec, theta, data.X, data.Z, eta, gamma, backend)
    ge = grad_e.vector if isinstance(grad_e, MetricGradient) else np.asarray(grad_e)
    return np.linalg.solve((np.eye(len(Zm)) - Zm).T, ge)


def neumann_accumulator(spec, theta, data: Dataset, grad_e, M, eta, gamma=0.0, backend="autodiff"):
    """The ``w`` vector that ``aid_eigem`` scores with."""
    ops = _Ops(spec, backend)
    ge = grad_e.vector if isinstance(grad_e, MetricGradient) else np.asarray(grad_e, dtype=np.float64)
    w = ge.copy()
    for _ in range(M - 1):
        jw = ops.jtu(theta, w, data.X, data.Z)
        w = (w - eta * (jw + gamma * w) if gamma else w - eta * jw) + ge
    return w
