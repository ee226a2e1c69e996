"""Experiment configs and run directories, shared by the CLI and the demos.

An experiment config is a JSON document::

    {
      "dataset": "data/manifest.json",
      "output_dir": "runs/pn_vrt",
      "seed": 0,
      "model": {... ModelConfig fields ...},
      "train": {... TrainConfig fields except seed ...},
      "eval":  {"n_way": 5, "k_shot": 1, "q_query": 15, "episodes": 1000,
                "seed": 0, "workers": 1, "split": "novel"}
    }

Unknown keys anywhere are rejected.  Relative paths resolve against the
directory holding the config file.  Every run writes ``resolved_config.json``
with all defaults filled in, so a run directory is enough to reproduce it.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

from .data import load_dataset
from .errors import ConfigError, DataError
from .eval import EvalReport, evaluate
from .model import FewShotModel, ModelConfig
from .tensor import load_tensors
from .trainer import TrainConfig, train

SWEEP_PARAMS = {
    "lambda_rho": ("model", "lambda_rho"),
    "lambda_r": ("train", "lambda_r"),
    "t_h": ("model", "t_h"),
    "train_way": ("train", "stage1_way"),
    "n_query": ("eval", "q_query"),
}


@dataclass
class EvalProtocol:
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 15
    episodes: int = 1000
    seed: int = 0
    workers: int = 1
    split: str = "novel"


@dataclass
class ExperimentConfig:
    dataset: str
    output_dir: str
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)

    def __post_init__(self):
        self.train.seed = self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        for k in ("mlp_hidden", "t11_hidden", "fv_pool_blocks"):
            if d["model"][k] is not None:
                d["model"][k] = list(d["model"][k])
        return d

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _section(cls, raw: Any, where: str, exclude=()):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)} - set(exclude)
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: Mapping, base_dir=None) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config: expected a JSON object")
    top = {"dataset", "output_dir", "seed", "model", "train", "eval"}
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    for key in ("dataset", "output_dir"):
        if key not in raw:
            raise ConfigError(f"config: missing {key!r}")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    def resolve(p: str) -> str:
        p = Path(p)
        return str(p if p.is_absolute() else base_dir / p)

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"config: seed must be a non-negative integer, got {seed!r}")
    cfg = ExperimentConfig(
        dataset=resolve(raw["dataset"]),
        output_dir=resolve(raw["output_dir"]),
        seed=seed,
        model=_section(ModelConfig, raw.get("model", {}), "model"),
        train=_section(TrainConfig, raw.get("train", {}), "train", exclude=("seed",)),
        eval=_section(EvalProtocol, raw.get("eval", {}), "eval"),
    )
    if cfg.model.extractor not in ("mlp", "conv"):
        raise ConfigError(f"model: extractor must be 'mlp' or 'conv', got {cfg.model.extractor!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at byte offset {exc.pos}: {exc.msg}") from exc
    return parse_config(raw, path.parent)


def write_resolved(cfg: ExperimentConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "resolved_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _data_and_model(cfg: ExperimentConfig):
    data = load_dataset(cfg.dataset)
    if "base" not in data:
        raise DataError(f"{cfg.dataset}: manifest has no base split")
    model = FewShotModel(data["base"].sample_shape, cfg.model, seed=cfg.seed)
    return data, model


def run_train(cfg: ExperimentConfig, stage: str = "both", resume: bool = False):
    write_resolved(cfg)
    data, model = _data_and_model(cfg)
    r1, r2 = train(cfg.train, data, model, cfg.out, stage=stage, resume=resume)
    return model, r1, r2


def run_eval(cfg: ExperimentConfig, checkpoint=None, report_path=None) -> EvalReport:
    """Evaluate a checkpoint; writes ``report.json`` plus a separate timing file."""
    data, model = _data_and_model(cfg)
    ckpt = Path(checkpoint) if checkpoint is not None else cfg.out / "model.ckpt"
    if not ckpt.exists():
        raise ConfigError(f"{ckpt}: checkpoint not found; run `train` first")
    model.load_state_dict(load_tensors(ckpt), stage1_only=not cfg.model.use_T)
    ev = cfg.eval
    if ev.split not in data:
        raise DataError(f"{cfg.dataset}: no {ev.split!r} split to evaluate on")
    report = evaluate(model, data[ev.split], ev.n_way, ev.k_shot, ev.q_query, ev.episodes,
                      seed=ev.seed, base=data["base"], workers=ev.workers,
                      max_base_samples=cfg.train.max_base_samples)
    report_path = Path(report_path) if report_path is not None else cfg.out / "report.json"
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n")
    report_path.with_name(report_path.stem + "_timing.json").write_text(
        json.dumps({"wallclock_s": report.wallclock_s}) + "\n")
    return report


def with_value(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep: unknown parameter {param!r}; choose from {sorted(SWEEP_PARAMS)}")
    section, name = SWEEP_PARAMS[param]
    out = copy.deepcopy(cfg)
    current = getattr(getattr(out, section), name)
    setattr(getattr(out, section), name, type(current)(value))
    return out


def sweep(cfg: ExperimentConfig, param: str, grid) -> list[dict]:
    """One train + eval per grid value, each in ``<output_dir>/sweep_<param>/<value>``.

    Writes ``sweep_<param>.csv`` with columns ``value,mean_acc,ci95,n_episodes``.
    """
    grid = list(grid)
    if not grid:
        raise ConfigError("sweep: grid is empty")
    rows = []
    for value in grid:
        point = with_value(cfg, param, value)
        point.output_dir = str(cfg.out / f"sweep_{param}" / str(value))
        run_train(point)
        rep = run_eval(point)
        rows.append({"value": value, "mean_acc": rep.mean_acc, "ci95": rep.ci95, "n_episodes": rep.n_episodes})
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(cfg.out / f"sweep_{param}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "mean_acc", "ci95", "n_episodes"])
        for r in rows:
            w.writerow([r["value"], repr(r["mean_acc"]), repr(r["ci95"]), r["n_episodes"]])
    return rows
