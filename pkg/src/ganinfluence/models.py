"""GAN families, loss pairs and the concatenated game gradient.

The parameter vector is ``theta = (phi, psi)``: generator parameters first,
discriminator parameters second.  The game gradient

    v(theta) = (grad_phi V, -grad_psi V)

is the direction of simultaneous generator descent and discriminator ascent,
so one adversarial step is ``theta - eta * v(theta)``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import SpecMismatch

LQGAN = "lqgan"
MLP = "mlp"

ORIGINAL = "original"
NON_SATURATING = "nonsaturating"
WASSERSTEIN = "wasserstein"
LOSSES = (ORIGINAL, NON_SATURATING, WASSERSTEIN)


@dataclass(frozen=True)
class GameSpec:
    model: str = LQGAN
    loss: str = ORIGINAL
    reg_rates: tuple[float, float] = (0.0, 0.0)
    latent_dim: int = 1
    data_dim: int = 1
    hidden: tuple[int, ...] = (16, 16)
    activation: str = "tanh"
    init_scale: float = 0.1

    def __post_init__(self):
        if self.model not in (LQGAN, MLP):
            raise SpecMismatch(f"unknown model family {self.model!r}")
        if self.loss not in LOSSES:
            raise SpecMismatch(f"unknown loss {self.loss!r}")
        if self.model == LQGAN and (self.latent_dim != 1 or self.data_dim != 1):
            raise SpecMismatch("LQGAN is defined for 1-d data and latents only")
        if min(self.reg_rates) < 0:
            raise SpecMismatch("regularizer rates must be non-negative")
        if self.activation not in ("tanh", "sigmoid"):
            raise SpecMismatch(f"unknown activation {self.activation!r}")

    @classmethod
    def mlp(cls, loss=ORIGINAL, reg_rates=(1e-3, 1e-3), **kw):
        return cls(model=MLP, loss=loss, reg_rates=tuple(reg_rates), **kw)

    @property
    def zero_sum(self) -> bool:
        return self.loss != NON_SATURATING

    def to_dict(self):
        return {
            "model": self.model,
            "loss": self.loss,
            "reg_rates": list(self.reg_rates),
            "latent_dim": self.latent_dim,
            "data_dim": self.data_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("reg_rates", "hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    Z: np.ndarray
    labels: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        Z = np.asarray(self.Z, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if Z.ndim == 1:
            Z = Z[:, None]
        if len(X) < 1 or len(Z) < 1:
            raise ValueError("dataset needs at least one instance and one latent")
        if not (np.isfinite(X).all() and np.isfinite(Z).all()):
            raise ValueError("dataset entries must be finite")
        X.setflags(write=False)
        Z.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @property
    def n_x(self) -> int:
        return len(self.X)

    @property
    def n_z(self) -> int:
        return len(self.Z)


# --- loss pairs ------------------------------------------------------------
# Each entry holds (f, g_disc, g_gen) as Var -> Var maps plus their first and
# second derivatives in numpy for the closed-form LQGAN path.

def _sig(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _log_sigmoid(a: Var) -> Var:
    return -ad.softplus(-a)


def loss_terms(loss: str):
    """Return ``(f, g_disc, g_gen)`` for a loss name, all concave in the discriminator output."""
    if loss == WASSERSTEIN:
        return (lambda a: a), (lambda a: -a), (lambda a: -a)
    if loss == ORIGINAL:
        return _log_sigmoid, (lambda a: _log_sigmoid(-a)), (lambda a: _log_sigmoid(-a))
    # generator minimizes -log sigmoid(D(G(z))) instead of log(1 - sigmoid(D(G(z))))
    return _log_sigmoid, (lambda a: _log_sigmoid(-a)), (lambda a: -_log_sigmoid(a))


def loss_derivatives(loss: str):
    """Numpy first/second derivatives ``(f', f'', gd', gd'', gg', gg'')``."""
    if loss == WASSERSTEIN:
        one = lambda a: np.ones_like(a)
        zero = lambda a: np.zeros_like(a)
        mone = lambda a: -np.ones_like(a)
        return one, zero, mone, zero, mone, zero
    fp = lambda a: _sig(-a)
    fpp = lambda a: -_sig(a) * _sig(-a)
    gdp = lambda a: -_sig(a)
    if loss == ORIGINAL:
        return fp, fpp, gdp, fpp, gdp, fpp
    ggp = lambda a: -_sig(-a)
    ggpp = lambda a: _sig(a) * _sig(-a)
    return fp, fpp, gdp, fpp, ggp, ggpp


# --- model families --------------------------------------------------------

def _mlp_sizes(spec: GameSpec):
    gen = [spec.latent_dim, *spec.hidden, spec.data_dim]
    disc = [spec.data_dim, *spec.hidden, 1]
    return gen, disc


def _n_layer_params(sizes):
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def param_dims(spec: GameSpec) -> tuple[int, int]:
    if spec.model == LQGAN:
        return 2, 2
    gen, disc = _mlp_sizes(spec)
    return _n_layer_params(gen), _n_layer_params(disc)


def _mlp_forward(params: Var, sizes, inp, act):
    h = ad.as_var(inp)
    off = 0
    n_layers = len(sizes) - 1
    for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = ad.reshape(params[off : off + a * b], (a, b))
        off += a * b
        bias = params[off : off + b]
        off += b
        h = ad.matmul(h, W) + bias
        if k < n_layers - 1:
            h = ad.tanh(h) if act == "tanh" else ad.sigmoid(h)
    return h


def generate(spec: GameSpec, phi, z) -> Var:
    """Generated samples, shape ``(n, data_dim)``."""
    phi = ad.as_var(phi)
    z = np.asarray(z, dtype=np.float64).reshape(-1, spec.latent_dim)
    if spec.model == LQGAN:
        return ad.reshape(phi[0] * z[:, 0] + phi[1], (-1, 1))
    gen, _ = _mlp_sizes(spec)
    return _mlp_forward(phi, gen, z, spec.activation)


def discriminate(spec: GameSpec, psi, x) -> Var:
    """Discriminator outputs, shape ``(n,)``."""
    psi = ad.as_var(psi)
    if not isinstance(x, Var):
        x = np.asarray(x, dtype=np.float64).reshape(-1, spec.data_dim)
    if spec.model == LQGAN:
        x0 = x[:, 0]
        return psi[0] * x0 * x0 + psi[1] * x0
    _, disc = _mlp_sizes(spec)
    return ad.reshape(_mlp_forward(psi, disc, x, spec.activation), (-1,))


def init_params(spec: GameSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.model == LQGAN:
        return np.array([1.0, 0.0, -0.1, 0.1]) + rng.normal(0.0, 0.01, size=4)
    parts = []
    for sizes in _mlp_sizes(spec):
        for a, b in zip(sizes[:-1], sizes[1:]):
            parts.append(rng.normal(0.0, spec.init_scale, size=a * b))
            parts.append(np.zeros(b))
    return np.concatenate(parts)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters with the generator/discriminator split recorded."""

    values: np.ndarray
    split_index: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if not 1 <= self.split_index < v.size:
            raise ValueError("both parameter blocks must be non-empty")
        object.__setattr__(self, "values", v)

    @property
    def phi(self):
        return self.values[: self.split_index]

    @property
    def psi(self):
        return self.values[self.split_index :]

    @property
    def dim(self):
        return self.values.size


# --- objective and game gradient ---------------------------------------------

def _coef(n, data_weights, denom):
    if data_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(data_weights, dtype=np.float64)
    return w / (n if denom is None else denom)


def objectives(spec: GameSpec, theta: Var, X, Z, data_weights=None, denom=None):
    """Generator and discriminator objectives ``(V_gen, V_disc)`` as tape nodes.

    The data term is ``sum_i w_i f(D(psi, x_i)) / denom`` with ``denom``
    defaulting to ``len(X)``; removals zero a weight but keep the normalizer.
    For zero-sum losses both objectives are the same node.
    """
    d_phi, _ = param_dims(spec)
    theta = ad.as_var(theta)
    phi, psi = theta[:d_phi], theta[d_phi:]
    X = np.asarray(X, dtype=np.float64).reshape(-1, spec.data_dim)
    f, g_disc, g_gen = loss_terms(spec.loss)
    c = _coef(len(X), data_weights, denom)
    fake = discriminate(spec, psi, generate(spec, phi, Z))
    data_term = ad.vsum(c * f(discriminate(spec, psi, X)))
    lam1, lam2 = spec.reg_rates
    reg = 0.0
    if lam1:
        reg = reg + 0.5 * lam1 * ad.dot(phi, phi)
    if lam2:
        reg = reg - 0.5 * lam2 * ad.dot(psi, psi)
    v_disc = data_term + ad.mean(g_disc(fake)) + reg
    if spec.zero_sum:
        return v_disc, v_disc
    v_gen = ad.mean(g_gen(fake)) + reg
    return v_gen, v_disc


def game_field(spec: GameSpec, theta: Var, X, Z, data_weights=None, denom=None) -> Var:
    """``v(theta)`` recorded on the tape so it can be differentiated again."""
    d_phi, d_psi = param_dims(spec)
    v_gen, v_disc = objectives(spec, theta, X, Z, data_weights, denom)
    sign = np.concatenate([np.ones(d_phi), -np.ones(d_psi)])
    if v_gen is v_disc:
        (g,) = ad.gradients(v_disc, [theta], create_graph=True)
        return g * sign
    (gg,) = ad.gradients(v_gen, [theta], create_graph=True)
    (gd,) = ad.gradients(v_disc, [theta], create_graph=True)
    return ad.concatenate([gg[:d_phi], -gd[d_phi:]])


def value_V(spec: GameSpec, theta, X, Z, data_weights=None, denom=None) -> float:
    """Discriminator objective ``V`` (equal to the game value for zero-sum losses)."""
    with ad.no_grad():
        _, v = objectives(spec, ad.constant(theta), X, Z, data_weights, denom)
    return float(v.value)


def game_gradient(spec: GameSpec, theta, X, Z, data_weights=None, denom=None) -> np.ndarray:
    d_phi, d_psi = param_dims(spec)
    x = ad.variable(np.array(theta, dtype=np.float64))
    v_gen, v_disc = objectives(spec, x, X, Z, data_weights, denom)
    sign = np.concatenate([np.ones(d_phi), -np.ones(d_psi)])
    if v_gen is v_disc:
        (g,) = ad.gradients(v_disc, [x])
        return g.value * sign
    (gg,) = ad.gradients(v_gen, [x])
    (gd,) = ad.gradients(v_disc, [x])
    return np.concatenate([gg.value[:d_phi], -gd.value[d_phi:]])


def jacobian_t_vector(spec: GameSpec, theta, u, X, Z, gamma=0.0, data_weights=None, denom=None):
    """``(J(theta) + gamma I)^T u`` by double reverse sweep."""
    out = ad.vjp_of_vector_field(
        lambda t: game_field(spec, t, X, Z, data_weights, denom), theta, u
    )
    if gamma:
        out = out + gamma * np.asarray(u, dtype=np.float64)
    return out


def removal_gradient(spec: GameSpec, theta, x_j, eta: float, batch_size: int) -> np.ndarray:
    """Parameter shift ``-(eta/|X|) (0, grad_psi f(D(psi, x_j)))`` from dropping one instance."""
    d_phi, d_psi = param_dims(spec)
    theta = np.asarray(theta, dtype=np.float64)
    f, _, _ = loss_terms(spec.loss)
    psi = ad.variable(theta[d_phi:])
    out = ad.vsum(f(discriminate(spec, psi, np.reshape(x_j, (1, -1)))))
    (g,) = ad.gradients(out, [psi])
    return np.concatenate([np.zeros(d_phi), -(eta / batch_size) * g.value])


def removal_dots(spec: GameSpec, theta, u, X_items, eta: float, batch_size: int) -> np.ndarray:
    """``removal_gradient(theta, x_i)^T u`` for every row of ``X_items`` in one pass.

    Only the discriminator block of ``u`` matters.  The per-instance
    directional derivatives of ``f(D(psi, x_i))`` along ``u_psi`` are
    obtained by differentiating a seeded VJP with respect to its seed.
    """
    d_phi, _ = param_dims(spec)
    theta = np.asarray(theta, dtype=np.float64)
    u_psi = np.asarray(u, dtype=np.float64)[d_phi:]
    f, _, _ = loss_terms(spec.loss)
    psi = ad.variable(theta[d_phi:])
    h = f(discriminate(spec, psi, X_items))
    r = ad.variable(np.zeros(h.shape))
    (jt_r,) = ad.gradients(h, [psi], grad_output=r, create_graph=True)
    (ju,) = ad.gradients(ad.dot(jt_r, ad.constant(u_psi)), [r])
    return -(eta / batch_size) * ju.value


# --- closed forms for the linear-quadratic game ---------------------------------

def _lq_pieces(theta, X, Z, c):
    theta = np.asarray(theta, dtype=np.float64)
    phi1, phi2, psi1, psi2 = theta[..., 0:1], theta[..., 1:2], theta[..., 2:3], theta[..., 3:4]
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    z = np.asarray(Z, dtype=np.float64).reshape(-1)
    y = phi1 * z + phi2
    Dx = psi1 * x * x + psi2 * x
    Dy = psi1 * y * y + psi2 * y
    slope = 2.0 * psi1 * y + psi2
    return x, z, y, Dx, Dy, slope, (phi1, phi2, psi1, psi2)


def _check_lq(spec):
    if spec.model != LQGAN:
        raise SpecMismatch("closed forms exist only for the LQGAN family")


def lqgan_gradient(spec: GameSpec, theta, X, Z, data_weights=None, denom=None) -> np.ndarray:
    """Hand-derived ``v(theta)``; ``theta`` may carry leading batch axes ``(..., 4)``.

    ``data_weights`` may be ``(N,)`` or ``(..., N)`` to run many reweighted
    games at once.
    """
    _check_lq(spec)
    fp, _, gdp, _, ggp, _ = loss_derivatives(spec.loss)
    c = _coef(np.shape(X)[0], data_weights, denom)
    x, z, y, Dx, Dy, slope, (phi1, phi2, psi1, psi2) = _lq_pieces(theta, X, Z, c)
    nz = z.size
    a_gen = ggp(Dy) * slope
    g_phi1 = (a_gen * z).sum(-1) / nz
    g_phi2 = a_gen.sum(-1) / nz
    cf = c * fp(Dx)
    gd = gdp(Dy)
    g_psi1 = (cf * x * x).sum(-1) + (gd * y * y).sum(-1) / nz
    g_psi2 = (cf * x).sum(-1) + (gd * y).sum(-1) / nz
    lam1, lam2 = spec.reg_rates
    out = np.stack(
        [
            g_phi1 + lam1 * phi1[..., 0],
            g_phi2 + lam1 * phi2[..., 0],
            -(g_psi1 - lam2 * psi1[..., 0]),
            -(g_psi2 - lam2 * psi2[..., 0]),
        ],
        axis=-1,
    )
    return out


def lqgan_jacobian_t_vector(spec: GameSpec, theta, u, X, Z, data_weights=None, denom=None):
    """Hand-derived ``J(theta)^T u`` for the linear-quadratic game."""
    _check_lq(spec)
    fp, fpp, gdp, gdpp, ggp, ggpp = loss_derivatives(spec.loss)
    c = _coef(np.shape(X)[0], data_weights, denom)
    x, z, y, Dx, Dy, s, (phi1, phi2, psi1, psi2) = _lq_pieces(theta, X, Z, c)
    u = np.asarray(u, dtype=np.float64)
    u1, u2, u3, u4 = u[..., 0:1], u[..., 1:2], u[..., 2:3], u[..., 3:4]
    nz = z.size
    lam1, lam2 = spec.reg_rates
    dy = z * u1 + u2            # change of y along u_phi
    dDx = x * x * u3 + x * u4   # change of D(x) along u_psi
    dDy = y * y * u3 + y * u4   # change of D(y) along u_psi at fixed y
    # A = <grad_phi V_gen, u_phi>; B = <grad_psi V_disc, u_psi>; result = grad(A - B)
    dA_dy = (ggpp(Dy) * s * s + ggp(Dy) * 2.0 * psi1) * dy
    dB_dy = gdpp(Dy) * s * dDy + gdp(Dy) * (2.0 * y * u3 + u4)
    k = (dA_dy - dB_dy) / nz
    r_phi1 = (k * z).sum(-1) + lam1 * u1[..., 0]
    r_phi2 = k.sum(-1) + lam1 * u2[..., 0]
    a_psi = ggpp(Dy) * s * dy          # coefficient of (y^2, y) from A
    b_psi = gdpp(Dy) * dDy             # coefficient of (y^2, y) from B's fake term
    cy = (a_psi - b_psi) / nz
    extra = ggp(Dy) * dy / nz          # from d slope / d psi = (2y, 1)
    bx = c * fpp(Dx) * dDx
    r_psi1 = (cy * y * y).sum(-1) + (extra * 2.0 * y).sum(-1) - (bx * x * x).sum(-1) + lam2 * u3[..., 0]
    r_psi2 = (cy * y).sum(-1) + extra.sum(-1) - (bx * x).sum(-1) + lam2 * u4[..., 0]
    return np.stack([r_phi1, r_phi2, r_psi1, r_psi2], axis=-1)


def lqgan_removal_dots(spec: GameSpec, theta, u, X_items, eta: float, batch_size: int):
    _check_lq(spec)
    fp = loss_derivatives(spec.loss)[0]
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(X_items, dtype=np.float64).reshape(-1)
    Dx = theta[2] * x * x + theta[3] * x
    return -(eta / batch_size) * fp(Dx) * (x * x * u[2] + x * u[3])


def lqgan_closed_forms(spec: GameSpec, theta, X, Z, u=None):
    """Analytic ``v`` and, if ``u`` is given, ``J^T u`` for the LQGAN game."""
    out = {"v": lqgan_gradient(spec, theta, X, Z)}
    if u is not None:
        out["jtu"] = lqgan_jacobian_t_vector(spec, theta, u, X, Z)
    return out


# --- dataset persistence -------------------------------------------------------

def save_csv(path, rows: np.ndarray, labels: Sequence[int] | None = None):
    rows = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [f"x{i}" for i in range(rows.shape[1])]
        if labels is not None:
            header.append("label")
        w.writerow(header)
        for i, r in enumerate(rows):
            rec = [repr(float(v)) for v in r]
            if labels is not None:
                rec.append(int(labels[i]))
            w.writerow(rec)


def load_csv(path):
    """Read rows written by :func:`save_csv`; returns ``(rows, labels or None)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [row for row in reader if row]
    has_label = header[-1] == "label"
    ncol = len(header) - int(has_label)
    rows = np.array([[float(v) for v in r[:ncol]] for r in data], dtype=np.float64)
    labels = np.array([int(r[-1]) for r in data]) if has_label else None
    return rows.reshape(len(data), ncol), labels


def sample_distribution(family: str, params: dict, count: int, seed: int):
    """Seeded synthetic sampler; returns ``(rows, labels or None)``.

    ``normal`` takes ``mean``/``std``; ``mixture`` takes ``means``, ``stds``
    and ``weights`` and labels each draw with its component index.
    """
    rng = np.random.default_rng(seed)
    if family == "normal":
        return rng.normal(params.get("mean", 0.0), params.get("std", 1.0), size=(count, 1)), None
    if family == "mixture":
        weights = np.asarray(params["weights"], dtype=np.float64)
        comp = rng.choice(len(weights), size=count, p=weights / weights.sum())
        means = np.asarray(params["means"], dtype=np.float64)
        stds = np.asarray(params["stds"], dtype=np.float64)
        x = rng.normal(means[comp], stds[comp])
        return x.reshape(count, 1), comp
    raise ValueError(f"unknown sampler family {family!r}")


def latents(count: int, dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(count, dim))


def dataset_to_dir(data: Dataset, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_csv(path / "X.csv", data.X, data.labels)
    save_csv(path / "Z.csv", data.Z)


def dataset_from_dir(path) -> Dataset:
    path = Path(path)
    X, labels = load_csv(path / "X.csv")
    Z, _ = load_csv(path / "Z.csv")
    return Dataset(X, Z, labels)


def sampler_config_json(family, params, count, seed) -> str:
    return json.dumps({"family": family, "params": params, "count": count, "seed": seed}, sort_keys=True)
