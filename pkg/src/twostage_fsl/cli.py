"""Command-line entry point.

    twostage-fsl gen-synthetic --spec spec.json --out data/
    twostage-fsl train --config exp.json [--stage 1|2|both] [--resume]
    twostage-fsl eval --config exp.json [--checkpoint F] [--episodes N] [--seed S] [--workers W]
    twostage-fsl sweep --config exp.json --param lambda_rho --grid 0,0.1,1

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SyntheticTaskSpec, gen_synthetic, write_dataset
from .errors import ConfigError, DataError, FewShotError
from .experiment import SWEEP_PARAMS, load_config, run_eval, run_train, sweep


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twostage-fsl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic Gaussian-cluster dataset")
    g.add_argument("--spec", required=True, help="JSON file with SyntheticTaskSpec fields")
    g.add_argument("--out", required=True, help="output dataset directory")

    def common(sp, seed=True):
        sp.add_argument("--config", required=True, help="experiment config JSON")
        if seed:
            sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--output-dir", help="override the config's output_dir")

    t = sub.add_parser("train", help="run stage 1, stage 2, or both")
    common(t)
    t.add_argument("--stage", choices=["1", "2", "both"], default="both")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(e, seed=False)
    e.add_argument("--checkpoint", help="defaults to <output_dir>/model.ckpt")
    e.add_argument("--episodes", type=int, help="number of test episodes (config default 1000)")
    e.add_argument("--seed", type=int, help="seed for the test episodes")
    e.add_argument("--workers", type=int, help="threads for episode evaluation")
    e.add_argument("--report", help="report path, defaults to <output_dir>/report.json")

    s = sub.add_parser("sweep", help="train and evaluate once per grid value")
    common(s)
    s.add_argument("--param", required=True, choices=sorted(SWEEP_PARAMS))
    s.add_argument("--grid", required=True, help="comma-separated values")
    return p


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None and args.command != "eval":
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg.seed = cfg.train.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    return cfg


def _gen_synthetic(args) -> int:
    path = Path(args.spec)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: spec file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    spec = SyntheticTaskSpec.from_dict(raw)
    splits = gen_synthetic(spec)
    manifest = write_dataset(args.out, splits, spec.name)
    print(manifest)
    return 0


def _train(args) -> int:
    cfg = _config(args)
    _, r1, r2 = run_train(cfg, stage=args.stage, resume=args.resume)
    for name, r in (("stage 1", r1), ("stage 2", r2)):
        if r is None:
            continue
        if r.skipped:
            print(f"{name}: skipped (transformer disabled)")
        elif r.trace:
            print(f"{name}: {len(r.trace)} episodes, final loss {r.trace[-1]['loss']:.4f}")
    print(f"outputs in {cfg.output_dir}")
    return 0


def _eval(args) -> int:
    cfg = _config(args)
    if args.episodes is not None:
        cfg.eval.episodes = args.episodes
    if args.seed is not None:
        cfg.eval.seed = args.seed
    if args.workers is not None:
        cfg.eval.workers = args.workers
    rep = run_eval(cfg, checkpoint=args.checkpoint, report_path=args.report)
    print(f"{cfg.eval.n_way}-way {cfg.eval.k_shot}-shot: {100 * rep.mean_acc:.2f} +- {100 * rep.ci95:.2f} "
          f"over {rep.n_episodes} episodes")
    return 0


def _sweep(args) -> int:
    cfg = _config(args)
    grid = [v.strip() for v in args.grid.split(",") if v.strip()]
    rows = sweep(cfg, args.param, grid)
    print("value,mean_acc,ci95,n_episodes")
    for r in rows:
        print(f"{r['value']},{r['mean_acc']:.4f},{r['ci95']:.4f},{r['n_episodes']}")
    return 0


COMMANDS = {"gen-synthetic": _gen_synthetic, "train": _train, "eval": _eval, "sweep": _sweep}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FewShotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {DataError(str(exc))}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
