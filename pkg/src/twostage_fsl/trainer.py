"""Two-stage episodic training with Adam, checkpoints and CSV traces.

Stage 1 trains the extractor (and the variance estimator when enabled) on
N-way K-shot episodes from the base split.  Stage 2 freezes both and trains
only the category transformer on pseudo-novel / pseudo-base splits of the
base classes.  Each episode draws from an RNG stream keyed by
``(seed, stage, episode)``, which is what makes ``resume`` exact.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .episodes import class_mean_features, sample_episode, sample_stage2_episode
from .errors import ConfigError, ContractError
from .eval import evaluate
from .metric import compute_prototypes, embed_episode, predict, stage1_loss
from .model import FewShotModel
from .nets import VARIANCE_FLOOR
from .tensor import Tape, Tensor, load_tensors, save_tensors
from .transform import stage2_terms

log = logging.getLogger(__name__)

TRACE_HEADER = ["episode", "loss", "query_acc", "lr", "wallclock_ms"]


@dataclass
class TrainConfig:
    seed: int = 0
    stage1_way: int = 10
    stage1_shot: int = 5
    stage1_query: int = 5
    stage1_episodes: int = 1000
    stage2_way: int = 5
    stage2_shot: int = 1
    stage2_query: int = 5
    stage2_episodes: int = 300
    max_base_samples: int = 200
    lambda_r: float = 1e-4
    lr: float = 1e-3
    lr_halve_every: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 100
    val_every: int = 500
    val_episodes: int = 100
    val_way: int = 5
    val_shot: int = 1
    val_query: int = 5

    def lr_at(self, episode: int) -> float:
        if self.lr_halve_every <= 0:
            return self.lr
        return self.lr * 0.5 ** (episode // self.lr_halve_every)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def state_dict(self, prefix: str = "opt/") -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array(float(self.step))}
        for name in self.m:
            out[f"{prefix}m/{name}"] = self.m[name].copy()
            out[f"{prefix}v/{name}"] = self.v[name].copy()
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray], prefix: str = "opt/") -> None:
        self.step = int(state[f"{prefix}step"])
        self.m = {k[len(prefix) + 2:]: v.copy() for k, v in state.items() if k.startswith(prefix + "m/")}
        self.v = {k[len(prefix) + 2:]: v.copy() for k, v in state.items() if k.startswith(prefix + "v/")}


def adam_step(state: OptimizerState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray] | None = None, lr: float | None = None) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place on ``params``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            raise ContractError(f"adam_step: no gradient for parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ----------------------------------------------------------------------------
# trace files


def write_trace(path, rows) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in rows:
            w.writerow([r["episode"], repr(float(r["loss"])), repr(float(r["query_acc"])),
                        repr(float(r["lr"])), r["wallclock_ms"]])
    tmp.replace(path)


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"episode": int(r["episode"]), "loss": float(r["loss"]), "query_acc": float(r["query_acc"]),
                 "lr": float(r["lr"]), "wallclock_ms": int(r["wallclock_ms"])}
                for r in csv.DictReader(fh)]


@dataclass
class StageResult:
    model: FewShotModel
    trace: list[dict]
    skipped: bool = False
    floor_hits: int = 0


def _optimizer(config: TrainConfig) -> OptimizerState:
    return OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)


def _resume_state(path: Path, trace_path: Path):
    state = load_tensors(path)
    episode = int(state["meta/episode"])
    best = float(state["meta/best_val"])
    trace = [r for r in read_trace(trace_path) if r["episode"] < episode] if trace_path.exists() else []
    if len(trace) != episode:
        raise ConfigError(f"{trace_path}: trace has {len(trace)} rows but checkpoint is at episode {episode}")
    return state, episode, best, trace


def train_stage1(config: TrainConfig, data: Mapping[str, LabeledDataset], model: FewShotModel,
                 out_dir=None, resume: bool = False) -> StageResult:
    base = data["base"]
    validation = data.get("validation")
    mc = model.config
    lam = model.lambda_rho
    params = model.stage1_parameters()
    opt = _optimizer(config)
    out = Path(out_dir) if out_dir is not None else None
    start, best, trace = 0, -1.0, []
    best_state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / "stage1_last.ckpt"
        if resume and last.exists():
            state, start, best, trace = _resume_state(last, out / "trace_stage1.csv")
            model.load_state_dict(state, stage1_only=True)
            opt.load_state_dict(state)
            if (out / "stage1_best.ckpt").exists():
                best_state = load_tensors(out / "stage1_best.ckpt")
            log.info("resuming stage 1 at episode %d", start)
    floor_hits = 0
    t0 = time.perf_counter()

    def checkpoint(done: int) -> None:
        if out is None:
            return
        state = model.stage1_state()
        state.update(opt.state_dict())
        state["meta/episode"] = np.array(float(done))
        state["meta/best_val"] = np.array(best)
        write_trace(out / "trace_stage1.csv", trace)
        save_tensors(out / "stage1_last.ckpt", state)

    for e in range(start, config.stage1_episodes):
        ep = sample_episode(base, config.stage1_way, config.stage1_shot, config.stage1_query, rng_seed=[config.seed, 1, e])
        with Tape() as tape:
            emb = embed_episode(model.extractor, ep, train=True, with_relative=lam > 0)
            protos = compute_prototypes(emb, ep, model.fv, mc.use_V, train=True)
            loss = stage1_loss(ep, emb, protos, lam)
        T.backward(tape, loss, params.values())
        lr = config.lr_at(e)
        adam_step(opt, params, lr=lr)
        if mc.use_V and protos.sigma2.data.min() <= 10 * VARIANCE_FLOOR:
            floor_hits += 1
            log.warning("episode %d: predicted variance %.3g is near the floor", e, protos.sigma2.data.min())
        q_rel = emb.query("relative") if lam > 0 else None
        pred = predict(emb.query("absolute"), protos, lam, query_rel=q_rel)
        trace.append({"episode": e, "loss": loss.item(), "query_acc": float(np.mean(pred == ep.query_y)),
                      "lr": lr, "wallclock_ms": int(1000 * (time.perf_counter() - t0))})
        done = e + 1
        if validation is not None and len(validation) >= config.val_way and config.val_every > 0 \
                and done % config.val_every == 0:
            rep = evaluate(model, validation, config.val_way, config.val_shot, config.val_query,
                           config.val_episodes, seed=[config.seed, 3, done], use_transform=False)
            log.info("episode %d: validation accuracy %.4f", done, rep.mean_acc)
            if rep.mean_acc > best:
                best = rep.mean_acc
                best_state = model.stage1_state()
                if out is not None:
                    save_tensors(out / "stage1_best.ckpt", best_state)
        if config.checkpoint_every > 0 and done % config.checkpoint_every == 0:
            checkpoint(done)

    # the last-episode checkpoint keeps the final weights so resume stays exact
    checkpoint(config.stage1_episodes)
    if best_state is not None:
        model.load_state_dict(best_state, stage1_only=True)
    if out is not None:
        save_tensors(out / "stage1.ckpt", model.stage1_state())
    return StageResult(model, trace, floor_hits=floor_hits)


def train_stage2(config: TrainConfig, data: Mapping[str, LabeledDataset], model: FewShotModel,
                 out_dir=None, resume: bool = False) -> StageResult:
    """Train the transformer with the extractor and variance estimator frozen."""
    if not model.config.use_T:
        return StageResult(model, [], skipped=True)
    base = data["base"]
    params = model.stage2_parameters()
    opt = _optimizer(config)
    out = Path(out_dir) if out_dir is not None else None
    start, trace = 0, []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        last = out / "stage2_last.ckpt"
        if resume and last.exists():
            state, start, _, trace = _resume_state(last, out / "trace_stage2.csv")
            model.transformer.load_state_dict(state)
            opt.load_state_dict(state)
            log.info("resuming stage 2 at episode %d", start)
    class_means = class_mean_features(base, model.features, config.max_base_samples)
    t0 = time.perf_counter()

    def checkpoint(done: int) -> None:
        if out is None:
            return
        state = model.transformer.state_dict()
        state.update(opt.state_dict())
        state["meta/episode"] = np.array(float(done))
        state["meta/best_val"] = np.array(-1.0)
        write_trace(out / "trace_stage2.csv", trace)
        save_tensors(out / "stage2_last.ckpt", state)

    for e in range(start, config.stage2_episodes):
        ep = sample_stage2_episode(base, config.stage2_way, config.stage2_shot, config.stage2_query,
                                   model.features, config.max_base_samples, rng_seed=[config.seed, 2, e],
                                   class_means=class_means)
        with Tape() as tape:
            terms = stage2_terms(ep, model.extractor, model.fv, model.transformer, config.lambda_r,
                                 use_variance=model.config.use_V, train=True)
        T.backward(tape, terms.loss, params.values())
        lr = config.lr_at(e)
        adam_step(opt, params, lr=lr)
        trace.append({"episode": e, "loss": terms.loss.item(), "query_acc": terms.query_acc, "lr": lr,
                      "wallclock_ms": int(1000 * (time.perf_counter() - t0)),
                      "regression": terms.regression.item()})
        if config.checkpoint_every > 0 and (e + 1) % config.checkpoint_every == 0:
            checkpoint(e + 1)

    if out is not None:
        checkpoint(config.stage2_episodes)
        save_tensors(out / "model.ckpt", model.state_dict())
    return StageResult(model, trace)


def train(config: TrainConfig, data: Mapping[str, LabeledDataset], model: FewShotModel,
          out_dir=None, stage: str = "both", resume: bool = False) -> tuple[StageResult | None, StageResult | None]:
    """Run stage 1, stage 2, or both in order.  Stage 2 alone needs ``stage1.ckpt``."""
    if stage not in ("1", "2", "both"):
        raise ConfigError(f"stage must be 1, 2 or both, got {stage!r}")
    r1 = r2 = None
    if stage in ("1", "both"):
        r1 = train_stage1(config, data, model, out_dir, resume)
    if stage in ("2", "both"):
        if stage == "2":
            ckpt = Path(out_dir or ".") / "stage1.ckpt"
            if not ckpt.exists():
                raise ConfigError(f"{ckpt}: stage 2 needs a stage-1 checkpoint; run `train --stage 1` first")
            model.load_state_dict(load_tensors(ckpt), stage1_only=True)
        r2 = train_stage2(config, data, model, out_dir, resume)
        if r2.skipped and out_dir is not None:
            save_tensors(Path(out_dir) / "model.ckpt", model.state_dict())
    elif out_dir is not None:
        save_tensors(Path(out_dir) / "model.ckpt", model.state_dict())
    return r1, r2
