"""Differentiable evaluation metrics on generated samples.

``all_metric`` is the average log-likelihood of held-out data under a
Gaussian KDE fitted to generated samples; ``gauss_frechet`` is the Fréchet
distance between Gaussian fits of two raw sample sets.  Both have tape
versions so their gradient through the generator can be taken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import autodiff as ad
from . import models
from .errors import DegenerateCovariance, NonFiniteValue
from .models import Dataset, GameSpec

HIGHER = "higher"
LOWER = "lower"


@dataclass(frozen=True)
class MetricValue:
    value: float
    direction: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise NonFiniteValue("metric value is not finite")


@dataclass(frozen=True)
class MetricConfig:
    """Which metric to evaluate and on which reference data.

    ``n_gen`` latent draws are taken from ``latent_seed`` independently of
    any training latents.
    """

    name: str = "all"
    bandwidth: float = 1.0
    n_gen: int = 1000
    latent_seed: int = 12345

    @property
    def direction(self):
        return HIGHER if self.name == "all" else LOWER

    def latents(self, spec: GameSpec):
        return models.latents(self.n_gen, spec.latent_dim, self.latent_seed)


@dataclass(frozen=True)
class MetricGradient:
    vector: np.ndarray
    metric: str
    n_gen: int
    latent_seed: int
    value: float = float("nan")

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))


def is_harmful(score, direction) -> np.ndarray:
    """Removing an instance helps when it moves the metric in its good direction."""
    score = np.asarray(score)
    return score > 0 if direction == HIGHER else score < 0


def harm_score(score, direction) -> np.ndarray:
    """Scores re-signed so that larger always means more harmful."""
    score = np.asarray(score, dtype=np.float64)
    return score if direction == HIGHER else -score


# --- average log-likelihood ----------------------------------------------------

def _all_tape(gen: ad.Var, val: np.ndarray, h: float) -> ad.Var:
    val = np.asarray(val, dtype=np.float64).reshape(len(val), -1)
    d = val.shape[1]
    n_gen = gen.shape[0]
    # fixed summation order makes the value invariant to how the samples are listed
    order = np.lexsort(gen.value.T[::-1])
    if np.any(order != np.arange(n_gen)):
        gen = gen[order]
    sq = None
    for k in range(d):
        diff = ad.reshape(gen[:, k], (1, -1)) - val[:, k : k + 1]
        term = diff * diff
        sq = term if sq is None else sq + term
    log_k = sq * (-0.5 / h**2)
    lse = ad.logsumexp(log_k, axis=1)
    const = -np.log(n_gen) - 0.5 * d * np.log(2 * np.pi * h**2)
    return ad.mean(lse) + const


def all_metric(gen_samples, val_data, bandwidth: float = 1.0) -> MetricValue:
    """Mean log Gaussian-KDE density of ``val_data`` under ``gen_samples``."""
    gen = np.asarray(gen_samples, dtype=np.float64)
    val = np.asarray(val_data, dtype=np.float64)
    if gen.size == 0 or val.size == 0:
        raise ValueError("both sample sets must be non-empty")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    gen = gen.reshape(len(gen), -1)
    with ad.no_grad():
        out = _all_tape(ad.constant(gen), val.reshape(len(val), -1), bandwidth)
    return MetricValue(float(out.value), HIGHER)


# --- Gaussian Fréchet distance ---------------------------------------------------

def _moments(a):
    a = np.asarray(a, dtype=np.float64)
    a = a.reshape(len(a), -1)
    if len(a) < 2:
        raise ValueError("need at least two samples")
    return a.mean(axis=0), np.atleast_2d(np.cov(a, rowvar=False, bias=True))


def gauss_frechet(gen_samples, real_samples, flag: list | None = None) -> MetricValue:
    """Fréchet distance between Gaussian fits of two sample sets (lower is better).

    A failed matrix square root is retried with ``1e-9 I`` added to both
    covariances; ``flag`` (if given) receives ``"regularized"`` in that case.
    """
    m1, s1 = _moments(gen_samples)
    m2, s2 = _moments(real_samples)
    covmean, ok = _sqrtm(s1 @ s2)
    if not ok:
        eye = 1e-9 * np.eye(len(s1))
        covmean, ok = _sqrtm((s1 + eye) @ (s2 + eye))
        if not ok:
            raise DegenerateCovariance("matrix square root failed after regularization")
        if flag is not None:
            flag.append("regularized")
    value = float(np.sum((m1 - m2) ** 2) + np.trace(s1 + s2 - 2.0 * covmean))
    return MetricValue(value, LOWER)


def _sqrtm(a):
    try:
        r = linalg.sqrtm(a)
    except (linalg.LinAlgError, ValueError):
        return None, False
    if np.iscomplexobj(r):
        if np.abs(r.imag).max() > 1e-8:
            return None, False
        r = r.real
    return r, bool(np.isfinite(r).all())


def _frechet_tape_1d(gen: ad.Var, real: np.ndarray) -> ad.Var:
    g = ad.reshape(gen, (-1,))
    real = np.asarray(real, dtype=np.float64).reshape(-1)
    m1 = ad.mean(g)
    c = g - m1
    var1 = ad.mean(c * c)
    m2, var2 = real.mean(), real.var()
    # 1-d closed form of the trace term: var1 + var2 - 2 sqrt(var1 var2)
    return (m1 - m2) * (m1 - m2) + var1 + var2 - 2.0 * ad.sqrt(var1 * var2)


# --- metric on a generator and its lifted gradient --------------------------------

def _metric_tape(cfg: MetricConfig, gen: ad.Var, ref):
    if cfg.name == "all":
        return _all_tape(gen, ref, cfg.bandwidth)
    if cfg.name == "frechet":
        if np.asarray(ref).reshape(len(ref), -1).shape[1] != 1:
            raise NotImplementedError("tape Fréchet distance is implemented for 1-d data")
        return _frechet_tape_1d(gen, ref)
    raise ValueError(f"unknown metric {cfg.name!r}")


def evaluate(spec: GameSpec, phi, cfg: MetricConfig, ref) -> MetricValue:
    """Metric of the generator ``phi`` on its own ``cfg``-seeded latent draw."""
    with ad.no_grad():
        gen = models.generate(spec, ad.constant(phi), cfg.latents(spec))
    if cfg.name == "all":
        return all_metric(gen.value, ref, cfg.bandwidth)
    return gauss_frechet(gen.value, ref)


def evaluate_many(spec: GameSpec, phis, cfg: MetricConfig, ref) -> np.ndarray:
    return np.array([evaluate(spec, p, cfg, ref).value for p in phis])


def grad_metric(spec: GameSpec, phi, cfg: MetricConfig, ref) -> MetricGradient:
    """``(grad_phi E, 0)`` with the discriminator block left exactly zero."""
    d_phi, d_psi = models.param_dims(spec)
    z = cfg.latents(spec)
    p = ad.variable(np.array(phi, dtype=np.float64))
    out = _metric_tape(cfg, models.generate(spec, p, z), ref)
    (g,) = ad.gradients(out, [p])
    if not np.isfinite(g.value).all():
        raise NonFiniteValue("non-finite metric gradient")
    vec = np.concatenate([g.value, np.zeros(d_psi)])
    return MetricGradient(vec, cfg.name, cfg.n_gen, cfg.latent_seed, float(out.value))


def disc_loss_gradient(spec: GameSpec, theta, val_X, latent_seed: int, n_latent: int | None = None):
    """Gradient of the discriminator's loss ``-V(theta)`` on validation data and fresh latents.

    Both blocks are generally nonzero.  The discriminator maximizes ``V``, so
    its loss is ``-V``; a negative influence on it marks an instance harmful.
    """
    n_latent = n_latent or len(val_X)
    Z = models.latents(n_latent, spec.latent_dim, latent_seed)
    x = ad.variable(np.array(theta, dtype=np.float64))
    _, v_disc = models.objectives(spec, x, val_X, Z)
    (g,) = ad.gradients(-v_disc, [x])
    return MetricGradient(g.value.copy(), "disc_loss", n_latent, latent_seed, -float(v_disc.value))


def true_influence(traj, data: Dataset, cfg: MetricConfig, ref, targets, renormalize=False,
                   backend="auto"):
    """Brute-force metric change from retraining without each target.

    Every counterfactual generator is scored on the same latent draw as the
    factual one.  Returns ``(scores, diverged)``.
    """
    from .training import RemovalSet, replay_many

    targets = [int(j) for j in targets]
    if traj.T == 0:
        return np.zeros(len(targets)), np.zeros(len(targets), dtype=bool)
    finals, base, diverged = replay_many(
        traj, data, [RemovalSet((j,)) for j in targets], renormalize=renormalize, backend=backend
    )
    d_phi, _ = models.param_dims(traj.spec)
    e0 = evaluate(traj.spec, base[:d_phi], cfg, ref).value
    scores = np.array([
        np.nan if bad else evaluate(traj.spec, th[:d_phi], cfg, ref).value - e0
        for th, bad in zip(finals, diverged)
    ])
    return scores, diverged
