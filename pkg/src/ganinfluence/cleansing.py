"""Data cleansing: score harmfulness, drop the top fraction, retrain, re-evaluate.

Rates share one ranking per seed, so removed sets are nested prefixes of it.
All retrainings for one seed (every rate, plus the factual baseline) go
through ``replay_many`` together, which keeps the before/after comparison on
identical arithmetic.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import influence as inf
from . import metrics as mt
from . import models
from . import training
from .errors import Diverged
from .metrics import MetricConfig
from .models import Dataset, GameSpec
from .training import RemovalSet, Trajectory

SCORERS = ("itd", "aid", "disc_itd", "disc_aid", "random")
FULL = "full"
ONE_EPOCH = "one_epoch"

RESULT_FIELDS = ["seed", "scorer", "metric", "rate", "before", "after", "improvement",
                 "diverged", "removed_contaminant_fraction"]

CLEAN = (1.0, 0.5)
CONTAMINANT = (-2.0, 0.5)


@dataclass(frozen=True)
class CleansingPlan:
    """What to score with, how much to remove and how to retrain.

    ``epoch_steps`` is the length of the window that one-epoch retraining
    resumes from (and that ITD sweeps over); ``None`` means ``T // 20``.
    """

    scorer: str = "itd"
    metric: MetricConfig = field(default_factory=MetricConfig)
    removal_rates: tuple[float, ...] = (0.05, 0.10)
    retrain: str = FULL
    seeds: tuple[int, ...] = (0,)
    renormalize: bool = True
    T: int = 10000
    eta: float = 0.01
    aid_M: int = 10000
    gamma: float = 0.0
    epoch_steps: int | None = None
    n_train: int = 1000
    n_val: int = 1000
    n_test: int = 1000
    test_latent_seed: int = 424242
    backend: str = "auto"

    def __post_init__(self):
        rates = tuple(float(r) for r in self.removal_rates)
        object.__setattr__(self, "removal_rates", rates)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.scorer not in SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.retrain not in (FULL, ONE_EPOCH):
            raise ValueError(f"unknown retrain strategy {self.retrain!r}")
        if not rates or any(not 0.0 < r < 1.0 for r in rates):
            raise ValueError("removal rates must lie in (0, 1)")
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("removal rates must be strictly increasing")
        if any(self.n_removed(r) < 1 for r in rates):
            raise ValueError("every removal rate must remove at least one instance")
        if not self.seeds:
            raise ValueError("need at least one seed")

    def n_removed(self, rate):
        return int(round(rate * self.n_train))

    @property
    def window(self):
        if self.retrain == FULL:
            return None
        return self.epoch_steps if self.epoch_steps is not None else max(1, self.T // 20)

    def to_dict(self):
        d = asdict(self)
        d["removal_rates"] = list(self.removal_rates)
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class CleansingCell:
    seed: int
    scorer: str
    metric: str
    rate: float
    before: float
    after: float
    improvement: float
    diverged: bool
    removed: tuple[int, ...]
    removed_contaminant_fraction: float

    def row(self):
        return [self.seed, self.scorer, self.metric, repr(self.rate), repr(self.before),
                repr(self.after), repr(self.improvement), int(self.diverged),
                repr(self.removed_contaminant_fraction)]


@dataclass
class CleansingResult:
    plan: CleansingPlan
    cells: list = field(default_factory=list)

    def select(self, rate=None, seed=None):
        return [c for c in self.cells
                if (rate is None or np.isclose(c.rate, rate)) and (seed is None or c.seed == seed)]

    def improvements(self, rate):
        """Improvements at ``rate`` with diverged cells excluded."""
        return np.array([c.improvement for c in self.select(rate) if not c.diverged])

    def contaminant_fraction(self, rate):
        return np.array([c.removed_contaminant_fraction for c in self.select(rate)])

    def summary(self):
        out = []
        for r in self.plan.removal_rates:
            imp = self.improvements(r)
            out.append({
                "rate": r,
                "mean_improvement": float(imp.mean()) if imp.size else float("nan"),
                "std_improvement": float(imp.std(ddof=1)) if imp.size > 1 else 0.0,
                "n_ok": int(imp.size),
                "mean_contaminant_fraction": float(np.nanmean(self.contaminant_fraction(r))),
            })
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_FIELDS)
            for c in self.cells:
                w.writerow(c.row())

    def manifest(self):
        return {"plan": self.plan.to_dict(), "summary": self.summary(),
                "removed": {f"{c.seed}:{c.rate}": list(c.removed) for c in self.cells}}

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")


# --- benchmark data ---------------------------------------------------------------

def make_contaminated_dataset(n: int, seed: int, n_latent: int | None = None,
                              clean_prob: float = 0.95) -> Dataset:
    """``n`` draws from ``b N(1, 0.5) + (1-b) N(-2, 0.5)`` with ``b ~ Bernoulli(clean_prob)``.

    Labels are 1 for the contaminating component.  The second argument of
    each normal is its standard deviation.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng([seed, 0xC1EA])
    clean = rng.random(n) < clean_prob
    x = np.where(clean, rng.normal(*CLEAN, size=n), rng.normal(*CONTAMINANT, size=n))
    Z = rng.normal(size=(n_latent or n, 1))
    return Dataset(x[:, None], Z, (~clean).astype(np.int64))


def clean_samples(n: int, seed: int, stream: int) -> np.ndarray:
    """Held-out draws from the clean component (``stream`` separates validation from test)."""
    return np.random.default_rng([seed, stream]).normal(*CLEAN, size=(n, 1))


# --- pipeline -----------------------------------------------------------------------

def score_harmfulness(plan: CleansingPlan, traj: Trajectory, data: Dataset, val_X, seed: int = 0):
    """Scores for every training instance, in the scorer's own sign convention."""
    window = plan.window
    if plan.scorer == "random":
        scores = np.random.default_rng([seed, 0x7A4D]).random(data.n_x)
        return inf.InfluenceReport(np.arange(data.n_x), scores, "random", "none", mt.HIGHER)
    if plan.scorer in ("disc_itd", "disc_aid"):
        return inf.influence_on_disc_loss(
            traj, data, val_X, estimator=plan.scorer[5:], M=plan.aid_M, eta=plan.eta,
            gamma=plan.gamma, window=window, backend=plan.backend,
            latent_seed=int(np.random.default_rng([seed, 0xD15C]).integers(2**31)),
        )
    d_phi, _ = models.param_dims(traj.spec)
    ge = mt.grad_metric(traj.spec, traj.final[:d_phi], plan.metric, val_X)
    if plan.scorer == "itd":
        return inf.itd_eigem(traj, data, ge, gamma=plan.gamma, window=window, backend=plan.backend,
                             direction=plan.metric.direction)
    return inf.aid_eigem(traj.final, traj.spec, data, ge, M=plan.aid_M, eta=plan.eta,
                         gamma=plan.gamma, backend=plan.backend, direction=plan.metric.direction)


def ranking(report: inf.InfluenceReport) -> np.ndarray:
    """Instance indices from most to least harmful (stable on ties)."""
    return report.indices[np.argsort(-report.harm(), kind="stable")]


def cleanse(plan: CleansingPlan, spec: GameSpec, data: Dataset, traj: Trajectory, val_X, test_X,
            seed: int = 0) -> list[CleansingCell]:
    """One seed's row of the grid: every rate's retrain and before/after test metric."""
    report = score_harmfulness(plan, traj, data, val_X, seed)
    order = ranking(report)
    removals = [RemovalSet(tuple(int(i) for i in order[: plan.n_removed(r)])) for r in plan.removal_rates]
    start = 0 if plan.retrain == FULL else max(0, traj.T - plan.window)
    finals, base, diverged = training.replay_many(
        traj, data, removals, start=start, renormalize=plan.renormalize, backend=plan.backend
    )
    tcfg = MetricConfig(plan.metric.name, plan.metric.bandwidth, plan.metric.n_gen,
                        plan.test_latent_seed + seed)
    d_phi, _ = models.param_dims(spec)
    before = mt.evaluate(spec, base[:d_phi], tcfg, test_X).value
    sign = 1.0 if tcfg.direction == mt.HIGHER else -1.0
    cells = []
    for rate, rem, th, bad in zip(plan.removal_rates, removals, finals, diverged):
        after = float("nan") if bad else mt.evaluate(spec, th[:d_phi], tcfg, test_X).value
        frac = float(np.mean(data.labels[list(rem.indices)])) if data.labels is not None else float("nan")
        cells.append(CleansingCell(seed, plan.scorer, plan.metric.name, rate, before, after,
                                   sign * (after - before), bool(bad), rem.indices, frac))
    return cells


def run_benchmark(plan: CleansingPlan, spec: GameSpec | None = None, progress=None) -> CleansingResult:
    """The contaminated-mixture benchmark over ``plan.seeds``.

    Each seed draws its own training, validation and test sets, trains AGD
    for ``plan.T`` steps and runs :func:`cleanse`.  A diverged factual run
    marks every cell of that seed as diverged.
    """
    spec = spec or GameSpec()
    result = CleansingResult(plan)
    for seed in plan.seeds:
        data = make_contaminated_dataset(plan.n_train, seed)
        val_X = clean_samples(plan.n_val, seed, 1)
        test_X = clean_samples(plan.n_test, seed, 2)
        try:
            traj = training.run_agd(spec, data, plan.T, plan.eta, seed, backend=plan.backend)
            cells = cleanse(plan, spec, data, traj, val_X, test_X, seed)
        except Diverged:
            nan = float("nan")
            cells = [CleansingCell(seed, plan.scorer, plan.metric.name, r, nan, nan, nan, True, (), nan)
                     for r in plan.removal_rates]
        result.cells.extend(cells)
        if progress:
            progress(seed, cells)
    return result


def run_benchmark_many(plans, spec: GameSpec | None = None, progress=None) -> dict:
    """Several scorers/strategies sharing each seed's training run.

    Plans must agree on everything except ``scorer``, ``retrain`` and
    ``epoch_steps``.  Returns ``{(scorer, retrain): CleansingResult}``.
    """
    plans = list(plans)
    ref = plans[0]
    shared = ("T", "eta", "seeds", "n_train", "n_val", "n_test", "backend")
    for p in plans[1:]:
        if any(getattr(p, k) != getattr(ref, k) for k in shared):
            raise ValueError("plans differ in a shared training setting")
    spec = spec or GameSpec()
    out = {(p.scorer, p.retrain): CleansingResult(p) for p in plans}
    for seed in ref.seeds:
        data = make_contaminated_dataset(ref.n_train, seed)
        val_X = clean_samples(ref.n_val, seed, 1)
        test_X = clean_samples(ref.n_test, seed, 2)
        try:
            traj = training.run_agd(spec, data, ref.T, ref.eta, seed, backend=ref.backend)
        except Diverged:
            traj = None
        for p in plans:
            if traj is None:
                nan = float("nan")
                cells = [CleansingCell(seed, p.scorer, p.metric.name, r, nan, nan, nan, True, (), nan)
                         for r in p.removal_rates]
            else:
                cells = cleanse(p, spec, data, traj, val_X, test_X, seed)
            out[(p.scorer, p.retrain)].cells.extend(cells)
            if progress:
                progress(seed, p, cells)
    return out
