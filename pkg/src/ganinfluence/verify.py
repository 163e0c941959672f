"""Ground-truth checks for the estimators.

Rank agreement with brute-force retraining (Kendall's tau with a
permutation p-value), error sweeps over (T, M, eta, gamma), a power-iteration
estimate of ``||I - eta J||`` and the epsilon-linearization probe.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass

import numpy as np

from . import influence as inf
from . import metrics as mt
from . import models, training
from .errors import AdjointBlewUp, DegenerateInput, Diverged, NoConvergence
from .metrics import MetricConfig
from .models import Dataset, GameSpec
from .training import RemovalSet

N_SHUFFLES = 10_000


@dataclass(frozen=True)
class TauSummary:
    tau: float
    n: int
    p_value: float


def _tau_b(a, b):
    """Tie-corrected tau by exhaustive pair counting."""
    da = np.sign(a[:, None] - a[None, :])
    db = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(len(a), 1)
    sa, sb = da[iu], db[iu]
    s = float(np.sum(sa * sb))
    n_a = float(np.count_nonzero(sa))
    n_b = float(np.count_nonzero(sb))
    return s / np.sqrt(n_a * n_b)


def kendall_tau(a, b, n_shuffles: int = N_SHUFFLES, seed: int = 0) -> TauSummary:
    """Kendall's tau-b of two score vectors and a one-sided permutation p-value.

    The p-value is the fraction of seeded shuffles of ``b`` whose tau is at
    least the observed one (with the usual +1 correction).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or len(a) < 2:
        raise ValueError("need two score vectors of equal length >= 2")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise DegenerateInput("a constant score vector has no ranking")
    tau = _tau_b(a, b)
    p = 1.0
    if n_shuffles:
        rng = np.random.default_rng(seed)
        # pair-sign matrix of a is reused; only b's order changes
        iu = np.triu_indices(len(a), 1)
        sa = np.sign(a[:, None] - a[None, :])[iu]
        n_a = float(np.count_nonzero(sa))
        sb0 = np.sign(b[:, None] - b[None, :])
        n_b = float(np.count_nonzero(sb0[iu]))
        hits = 0
        for _ in range(n_shuffles):
            perm = rng.permutation(len(b))
            sb = sb0[np.ix_(perm, perm)][iu]
            if np.dot(sa, sb) / np.sqrt(n_a * n_b) >= tau - 1e-12:
                hits += 1
        p = (hits + 1) / (n_shuffles + 1)
    return TauSummary(float(tau), len(a), float(p))


# --- spectral norm of Z = I - eta (J + gamma I) -----------------------------------------

def spectral_norm_Z(spec: GameSpec, theta, eta: float, iters: int = 200, X=None, Z=None,
                    gamma: float = 0.0, tol: float = 1e-10, seed: int = 0, jtu=None, jv=None) -> float:
    """Largest singular value of ``Z`` by power iteration on ``Z^T Z``.

    ``Z v`` is obtained as a Jacobian-vector product and ``Z^T u`` as a
    vector-Jacobian product, so ``J`` is never formed.  ``jtu``/``jv`` may be
    passed directly (used for synthetic fields).
    """
    if iters < 10:
        raise ValueError("iters must be >= 10")
    theta = np.asarray(theta, dtype=np.float64)
    if eta == 0.0 and gamma == 0.0:
        return 1.0
    if jtu is None:
        def jtu(u):
            return models.jacobian_t_vector(spec, theta, u, X, Z)
    if jv is None:
        from . import autodiff as ad

        def field(t):
            return models.game_field(spec, t, X, Z)

        def jv(w):
            return ad.jvp_of_vector_field(field, theta, w)

    def zt(u):
        return u - eta * (jtu(u) + gamma * u)

    def zv(w):
        return w - eta * (jv(w) + gamma * w)

    v = np.random.default_rng(seed).normal(size=theta.size)
    v /= np.linalg.norm(v)
    lam = prev = None
    history = []
    for _ in range(iters):
        w = zt(zv(v))
        lam = float(np.dot(v, w))
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        history.append(lam)
        if prev is not None and abs(lam - prev) <= tol * max(1.0, abs(lam)):
            return float(np.sqrt(max(lam, 0.0)))
        prev = lam
    tail = np.array(history[-5:])
    if np.ptp(tail) > 1e-3 * max(1.0, abs(tail).max()):
        raise NoConvergence("power iteration did not settle")
    return float(np.sqrt(max(lam, 0.0)))


def dense_spectral_norm_Z(spec, theta, eta, X, Z, gamma=0.0):
    Zm = inf.z_matrix(spec, theta, X, Z, eta, gamma)
    return float(np.linalg.svd(Zm, compute_uv=False)[0])


# --- epsilon probe --------------------------------------------------------------------

def epsilon_consistency_probe(spec: GameSpec, data: Dataset, traj, j: int, eps_list=(1e-1, 1e-2, 1e-3),
                              backend="auto"):
    """Slope of ``log ||(theta_eps - theta) - eps * dtheta_hat||`` against ``log eps``.

    Returns ``(slope, residuals)``.  A first-order-correct estimate leaves a
    second-order residual, so the slope approaches 2.
    """
    eps = np.asarray(eps_list, dtype=np.float64)
    if len(eps) < 3 or np.any(eps <= 0) or np.any(eps > 1):
        raise ValueError("need at least three eps values in (0, 1]")
    est = inf.itd_parameter_influence(traj, data, [j], backend=backend)[0]
    finals, base, bad = training.replay_many(traj, data, [RemovalSet((j,), e) for e in eps], backend=backend)
    if bad.any():
        raise Diverged(traj.T, float("inf"), training.DIVERGENCE_GUARD)
    res = np.array([np.linalg.norm((f - base) - e * est) for f, e in zip(finals, eps)])
    if np.all(res == 0.0):
        return float("inf"), res
    slope = float(np.polyfit(np.log(eps), np.log(np.maximum(res, 1e-300)), 1)[0])
    return slope, res


# --- error sweeps -------------------------------------------------------------------------

@dataclass
class ErrorSweepRow:
    T: int
    M: int | None
    eta: float
    gamma: float
    eps: float | None
    estimator: str
    tau: float
    error_norm: float
    spectral_estimate: float
    diverged: bool = False


SWEEP_FIELDS = [f for f in ErrorSweepRow.__dataclass_fields__]


def write_rows(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([("" if v is None else (int(v) if isinstance(v, bool) else v))
                        for v in asdict(r).values()])


def parameter_truth(traj, data, targets, backend="auto"):
    finals, base, bad = training.replay_many(traj, data, [RemovalSet((int(j),)) for j in targets],
                                             backend=backend)
    return finals - base, bad


def estimator_error_sweep(spec: GameSpec, data: Dataset, val_X, seed: int, Ts=(100,), Ms=(None,),
                          etas=(0.01,), gammas=(0.0,), n_targets: int = 100, metric=None,
                          estimators=("itd", "aid"), backend="auto", n_shuffles: int = 0):
    """Train, brute-force the truth on ``n_targets`` instances, score both estimators.

    ``Ms`` applies to AID only; ITD rows carry ``M=None``.  ``error_norm`` is
    the mean parameter-space error over targets, ``tau`` the rank agreement
    on the metric.
    """
    grid = list(itertools.product(Ts, etas, gammas))
    if not grid or not estimators:
        raise ValueError("empty sweep grid")
    metric = metric or MetricConfig()
    targets = np.arange(min(n_targets, data.n_x))
    d_phi, _ = models.param_dims(spec)
    rows = []
    for T, eta, gamma in grid:
        try:
            traj = training.run_agd(spec, data, T, eta, seed, backend=backend)
        except Diverged:
            for est in estimators:
                for M in (Ms if est == "aid" else (None,)):
                    rows.append(ErrorSweepRow(T, M, eta, gamma, None, est, np.nan, np.nan, np.nan, True))
            continue
        truth_theta, bad = parameter_truth(traj, data, targets, backend)
        truth_e, _ = mt.true_influence(traj, data, metric, val_X, targets, backend=backend)
        ge = mt.grad_metric(spec, traj.final[:d_phi], metric, val_X)
        try:
            znorm = spectral_norm_Z(spec, traj.final, eta, X=data.X, Z=data.Z, gamma=gamma)
        except NoConvergence:
            znorm = float("nan")
        for est in estimators:
            for M in (Ms if est == "aid" else (None,)):
                try:
                    if est == "itd":
                        rep = inf.itd_eigem(traj, data, ge, targets, gamma, backend=backend)
                        dth = inf.itd_parameter_influence(traj, data, targets, gamma, backend)
                    else:
                        rep = inf.aid_eigem(traj.final, spec, data, ge, targets, M, eta, gamma, backend=backend)
                        dth = inf.aid_parameter_influence(traj.final, spec, data, targets, M, eta, gamma, backend)
                except AdjointBlewUp:
                    rows.append(ErrorSweepRow(T, M, eta, gamma, None, est, np.nan, np.nan, znorm, True))
                    continue
                ok = ~bad
                err = float(np.mean(np.linalg.norm(dth[ok] - truth_theta[ok], axis=1)))
                try:
                    tau = kendall_tau(rep.scores[ok], truth_e[ok], n_shuffles).tau
                except DegenerateInput:
                    tau = float("nan")
                rows.append(ErrorSweepRow(T, M, eta, gamma, None, est, tau, err, znorm, bool(bad.any())))
    return rows


def itd_parameter_error(spec, data, T, eta, seed, targets, gamma=0.0, theta0=None, backend="auto"):
    """Mean ``||dtheta_hat - dtheta||`` of ITD on ``targets`` after ``T`` steps."""
    traj = training.run_agd(spec, data, T, eta, seed, theta0=theta0, backend=backend)
    truth, bad = parameter_truth(traj, data, targets, backend)
    est = inf.itd_parameter_influence(traj, data, targets, gamma, backend)
    return float(np.mean(np.linalg.norm(est[~bad] - truth[~bad], axis=1))), traj
