"""Command-line entry point: ``jointscale <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from ..imagecore import load_ppm
from .config import ConfigError, load_config
from .experiments import run
from .remote import Endpoint, RemoteError, ground_truth, remote_classify, score_of, transfer_success

SUBCOMMANDS = {
    "train": "train",
    "attack-scale": "scale-attack",
    "attack-white": "whitebox",
    "attack-black": "blackbox",
    "detect": "detect",
    "robust": "robust-scalers",
    "report": "report",
    "remote-eval": None,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointscale", description="Joint scaling/classifier attack experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--scaler", choices=("nearest", "bilinear", "area"))
        s.add_argument("--beta", type=int)
        s.add_argument("--defense", help="comma list of none, median, randomized")
        s.add_argument("--budget-grid", help="comma list of query budgets")
        s.add_argument("--eps-grid", help="comma list of scaled-L2 budgets")
        s.add_argument("--kappa-grid", help="comma list of C&W confidences")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    return p


def _overrides(args) -> dict:
    ov = {
        "seed": args.seed,
        "out": args.out,
        "scaler": args.scaler,
        "beta": args.beta,
        "defense": args.defense,
        "budget_grid": args.budget_grid,
        "eps_grid": args.eps_grid,
        "kappa_grid": args.kappa_grid,
    }
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip().replace("-", "_")] = v
    return ov


def remote_eval(cfg) -> int:
    """Classify paired benign/attack PPM files and apply the transfer success rule."""
    if not cfg.endpoint:
        raise ConfigError("remote-eval needs 'endpoint' in the config")
    ep = Endpoint(cfg.endpoint, cfg.endpoint_format, cfg.token_env)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in Path(cfg.benign_dir).glob("*.ppm"))
    with open(out / "remote.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(["image", "truth", "benign_score", "attack_score", "eligible", "success"])
        for name in names:
            benign = remote_classify(ep, load_ppm(Path(cfg.benign_dir) / name))
            truth = ground_truth(benign, cfg.truth_min)
            if truth is None:
                w.writerow([name, "", repr(benign[0][1] if benign else 0.0), "", 0, 0])
                continue
            attacked = remote_classify(ep, load_ppm(Path(cfg.attack_dir) / name))
            ok = transfer_success(truth, attacked, cfg.success_max)
            w.writerow([name, truth, repr(score_of(benign, truth)), repr(score_of(attacked, truth)), 1, int(ok)])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ov = _overrides(args)
        kind = SUBCOMMANDS[args.command]
        if kind:
            ov["experiment"] = kind
        cfg = load_config(args.config, ov)
        if kind is None:
            return remote_eval(cfg)
        out = run(cfg)
    except (ConfigError, RemoteError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # partial rows were flushed by run()
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(f"results written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
