"""ITD parameter error against T in a contractive and an expansive configuration."""

import argparse

from ganinfluence import models
from ganinfluence import verify as vf
from ganinfluence.models import Dataset, GameSpec


def sweep(label, spec, data, eta, Ts, targets):
    for T in Ts:
        err, traj = vf.itd_parameter_error(spec, data, T, eta, 0, targets)
        z = vf.spectral_norm_Z(spec, traj.final, eta, X=data.X, Z=data.Z)
        print(f"{label:>12} eta={eta:<7g} T={T:<6} ||Z||={z:.4f} error={err:.12e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--targets", type=int, default=20)
    args = ap.parse_args()
    X, _ = models.sample_distribution("normal", {"mean": 1.0, "std": 1.0}, args.n, 1)
    data = Dataset(X, models.latents(args.n, 1, 2))
    targets = range(args.targets)
    reg = GameSpec(reg_rates=(1.0, 1.0))
    for eta in (0.04, 0.01):
        sweep("contractive", reg, data, eta, (100, 1000, 10000), targets)
    sweep("expansive", GameSpec(), data, 2.0, (100, 200, 400), targets)


if __name__ == "__main__":
    main()
