"""``ganinfluence`` command line: train, influence, cleanse, verify, dataset.

Exit codes: 0 ok, 1 configuration or usage error, 2 numeric failure.
Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import cleansing as cl
from . import config as cfgmod
from . import influence as inf
from . import metrics as mt
from . import models, training
from . import verify as vf
from .errors import (AdjointBlewUp, ConfigError, DegenerateCovariance, Diverged, GanInfluenceError,
                     MissingCheckpoint, NoConvergence, NonFiniteValue)
from .metrics import MetricConfig
from .models import Dataset, GameSpec

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2
NUMERIC_ERRORS = (Diverged, AdjointBlewUp, NonFiniteValue, NoConvergence, DegenerateCovariance,
                  FloatingPointError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# --- builders ------------------------------------------------------------------------

def build_spec(cfg) -> GameSpec:
    s = cfg.spec
    return GameSpec(model=s.model, loss=s.loss, reg_rates=tuple(s.reg_rates), latent_dim=s.latent_dim,
                    data_dim=s.data_dim, hidden=tuple(s.hidden), activation=s.activation,
                    init_scale=s.init_scale)


def _sample(sec):
    if sec.source == "csv":
        rows, labels = models.load_csv(sec.path)
        return rows, labels
    return models.sample_distribution(sec.family, sec.params, sec.count, sec.seed)


def build_data(cfg, spec: GameSpec) -> Dataset:
    d = cfg.data
    if d.source == "contaminated":
        base = cl.make_contaminated_dataset(d.count, d.seed)
        X, labels = base.X, base.labels
    else:
        if d.source == "csv" and not Path(d.path).is_file():
            raise ConfigError(f"data file not found: {d.path}")
        X, labels = _sample(d)
    Z = models.latents(d.latent_count or len(X), spec.latent_dim, d.latent_seed)
    return Dataset(X, Z, labels)


def build_validation(cfg) -> np.ndarray:
    v = cfg.validation
    if v.source == "csv" and not Path(v.path or "").is_file():
        raise ConfigError(f"validation file not found: {v.path}")
    return _sample(v)[0]


def build_metric(cfg) -> MetricConfig:
    m = cfg.metric
    return MetricConfig(m.name, m.bandwidth, m.n_gen, m.latent_seed)


def _digest_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prepare_output(cfg):
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.dump(cfg, out / "config.json")
    return out


# --- commands --------------------------------------------------------------------------

def cmd_train(cfg, args):
    spec = build_spec(cfg)
    data = build_data(cfg, spec)
    val_X = build_validation(cfg)
    t = cfg.train
    if t.batch_size is None:
        traj = training.run_agd(spec, data, t.T, t.eta, t.seed, guard=t.guard, backend=t.backend)
    else:
        traj = training.run_asgd(spec, data, t.T, t.eta, t.batch_size, t.seed,
                                 latent_batch=t.latent_batch, guard=t.guard, backend=t.backend)
    out = _prepare_output(cfg)
    models.dataset_to_dir(data, out / "data")
    models.save_csv(out / "data" / "validation.csv", val_X)
    traj.save(out / "trajectory")
    d_phi, _ = models.param_dims(spec)
    vnorm = float(np.linalg.norm(training.step_gradient(spec, traj.final, data.X, data.Z,
                                                        np.ones(data.n_x), float(data.n_x), t.backend)))
    metric = mt.evaluate(spec, traj.final[:d_phi], build_metric(cfg), val_X).value
    manifest = {
        "config_sha256": _digest_file(out / "config.json"),
        "trajectory_digest": traj.digest(),
        "T": traj.T,
        "final_v_norm": vnorm,
        "metric": {"name": cfg.metric.name, "value": metric},
    }
    _write_json(out / "manifest.json", manifest)
    print(f"T={traj.T} |v(theta_T)|={vnorm:.6e} {cfg.metric.name}={metric:.6f}")
    print(f"trajectory: {out / 'trajectory'}")
    return EXIT_OK


def _load_run(cfg):
    out = cfg.output_dir()
    tdir = out / "trajectory"
    if not (tdir / "trajectory.json").is_file():
        raise ConfigError(f"no trajectory at {tdir}; run `train` first")
    traj = training.Trajectory.load(tdir)
    data = models.dataset_from_dir(out / "data")
    val_X, _ = models.load_csv(out / "data" / "validation.csv")
    return out, traj, data, val_X


def _parse_targets(text, n):
    if text is None:
        return None
    try:
        t = [int(x) for x in str(text).split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"bad --targets {text!r}") from None
    if any(i < 0 or i >= n for i in t):
        raise ConfigError(f"--targets out of range for {n} instances")
    return t


def cmd_influence(cfg, args):
    out, traj, data, val_X = _load_run(cfg)
    ic = cfg.influence
    targets = ic.targets
    if targets is not None and any((not isinstance(i, int)) or i < 0 or i >= data.n_x for i in targets):
        raise ConfigError("influence.targets out of range")
    if ic.target == "disc_loss":
        rep = inf.influence_on_disc_loss(traj, data, val_X, targets, ic.estimator, M=ic.aid_m,
                                         eta=ic.aid_eta, gamma=ic.gamma, window=ic.window,
                                         backend=ic.backend)
    else:
        d_phi, _ = models.param_dims(traj.spec)
        mcfg = build_metric(cfg)
        ge = mt.grad_metric(traj.spec, traj.final[:d_phi], mcfg, val_X)
        if ic.estimator == "itd":
            rep = inf.itd_eigem(traj, data, ge, targets, ic.gamma, window=ic.window, backend=ic.backend,
                                direction=mcfg.direction)
        else:
            rep = inf.aid_eigem(traj.final, traj.spec, data, ge, targets, ic.aid_m, ic.aid_eta or traj.eta,
                                ic.gamma, backend=ic.backend, direction=mcfg.direction)
    cfgmod.dump(cfg, out / "influence_config.json")
    rep.to_csv(out / "influence.csv")
    rep.to_json(out / "influence.json")
    harm = rep.ranks()
    top = rep.indices[np.argsort(harm)][:5]
    print(f"{rep.estimator} scores for {len(rep.indices)} instances; most harmful: {top.tolist()}")
    return EXIT_OK


def cmd_cleanse(cfg, args):
    c = cfg.cleanse
    plan = cl.CleansingPlan(
        scorer=c.scorer, metric=build_metric(cfg), removal_rates=tuple(c.rates), retrain=c.retrain,
        seeds=tuple(c.seeds), renormalize=c.renormalize, T=c.T, eta=c.eta, aid_M=c.aid_m,
        gamma=c.gamma, epoch_steps=c.epoch_steps, n_train=cfg.data.count,
    )
    result = cl.run_benchmark(plan, build_spec(cfg))
    out = _prepare_output(cfg)
    result.to_csv(out / "cleansing.csv")
    result.to_json(out / "cleansing.json")
    print(f"{'rate':>6} {'mean_improvement':>18} {'std':>10} {'n_ok':>5} {'contaminant_frac':>17}")
    for row in result.summary():
        print(f"{row['rate']:>6.3f} {row['mean_improvement']:>18.6f} {row['std_improvement']:>10.6f} "
              f"{row['n_ok']:>5d} {row['mean_contaminant_fraction']:>17.3f}")
    if all(cell.diverged for cell in result.cells):
        _error("Diverged", "every cleansing cell diverged")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_verify(cfg, args):
    spec = build_spec(cfg)
    data = build_data(cfg, spec)
    val_X = build_validation(cfg)
    v = cfg.verify
    rows = vf.estimator_error_sweep(spec, data, val_X, cfg.train.seed, Ts=v.Ts, Ms=v.Ms, etas=v.etas,
                                    gammas=v.gammas, n_targets=v.n_targets, metric=build_metric(cfg),
                                    estimators=tuple(v.estimators), backend=cfg.train.backend)
    out = _prepare_output(cfg)
    vf.write_rows(rows, out / "sweep.csv")
    for r in rows:
        print(f"T={r.T} M={r.M} eta={r.eta} gamma={r.gamma} {r.estimator}: tau={r.tau:.4f} "
              f"err={r.error_norm:.3e} |Z|={r.spectral_estimate:.6f}")
    return EXIT_OK


def cmd_dataset(cfg, args):
    spec = build_spec(cfg)
    if args.kind == "contaminated":
        data = cl.make_contaminated_dataset(args.n, args.seed)
    elif args.kind == "clean":
        X = cl.clean_samples(args.n, args.seed, 0)
        data = Dataset(X, models.latents(args.n, spec.latent_dim, args.seed + 1))
    else:
        data = build_data(cfg, spec)
    out = Path(args.out) if args.out else cfg.output_dir() / "dataset"
    models.dataset_to_dir(data, out)
    if data.labels is not None:
        print(f"{data.n_x} instances ({int(np.sum(data.labels))} labelled 1) -> {out}")
    else:
        print(f"{data.n_x} instances -> {out}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "influence": cmd_influence, "cleanse": cmd_cleanse,
            "verify": cmd_verify, "dataset": cmd_dataset}


def build_parser():
    p = _Parser(prog="ganinfluence", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, need_config=True):
        sp.add_argument("--config", required=need_config, help="YAML or JSON experiment config")
        sp.add_argument("--output", help="override the output directory")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.T=100")

    t = sub.add_parser("train", help="run AGD/ASGD and store the trajectory")
    common(t)
    t.add_argument("--T", type=int)
    t.add_argument("--eta", type=float)
    t.add_argument("--seed", type=int)

    i = sub.add_parser("influence", help="estimate per-instance influence")
    common(i)
    i.add_argument("--estimator", choices=["itd", "aid"])
    i.add_argument("--gamma", type=float)
    i.add_argument("--aid-m", type=int)
    i.add_argument("--window", type=int)
    i.add_argument("--targets", help="comma-separated instance indices")
    i.add_argument("--disc-loss", action="store_true", help="score influence on the discriminator loss")

    c = sub.add_parser("cleanse", help="run the cleansing benchmark")
    common(c)
    c.add_argument("--scorer", choices=list(cl.SCORERS))
    c.add_argument("--rates", help="comma-separated removal rates")
    c.add_argument("--seeds", help="comma-separated seeds")
    c.add_argument("--retrain", choices=["full", "one_epoch"])

    v = sub.add_parser("verify", help="estimator-vs-truth sweep")
    common(v)

    d = sub.add_parser("dataset", help="write a synthetic dataset")
    common(d, need_config=False)
    d.add_argument("--kind", choices=["contaminated", "clean", "config"], default="contaminated")
    d.add_argument("--n", type=int, default=1000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    return p


def _parse_scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _floats(text, name):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad {name} {text!r}") from None


def effective_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.output:
        cfg = cfgmod.override(cfg, "output", args.output)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfgmod.override(cfg, k.strip(), _parse_scalar(v))
    flag_map = {
        "T": "train.T", "eta": "train.eta", "seed": "train.seed", "estimator": "influence.estimator",
        "gamma": "influence.gamma", "aid_m": "influence.aid_m", "window": "influence.window",
        "scorer": "cleanse.scorer", "retrain": "cleanse.retrain",
    }
    if args.command == "dataset":
        flag_map = {}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            cfg = cfgmod.override(cfg, key, val)
    if getattr(args, "disc_loss", False):
        cfg = cfgmod.override(cfg, "influence.target", "disc_loss")
    if getattr(args, "targets", None) is not None:
        cfg = cfgmod.override(cfg, "influence.targets", _parse_targets(args.targets, 1 << 62))
    if getattr(args, "rates", None):
        cfg = cfgmod.override(cfg, "cleanse.rates", _floats(args.rates, "--rates"))
    if getattr(args, "seeds", None):
        cfg = cfgmod.override(cfg, "cleanse.seeds", [int(x) for x in _floats(args.seeds, "--seeds")])
    return cfg


def _error(kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True) + "\n")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = effective_config(args)
        return COMMANDS[args.command](cfg, args)
    except NUMERIC_ERRORS as exc:
        extra = {"step": exc.step} if hasattr(exc, "step") else {}
        _error(type(exc).__name__, str(exc), **extra)
        return EXIT_NUMERIC
    except (ConfigError, MissingCheckpoint, ValueError, FileNotFoundError, KeyError) as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_CONFIG
    except GanInfluenceError as exc:
        _error(type(exc).__name__, str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
