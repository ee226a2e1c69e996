"""Episodic test protocol and accuracy aggregation.

Every test episode draws from its own RNG stream keyed by ``(seed, index)``,
so serial and threaded evaluation produce identical per-episode results.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import LabeledDataset
from .episodes import Episode, class_mean_features, sample_episode
from .errors import ConfigError
from .metric import compute_prototypes, embed_episode, predict
from .model import FewShotModel
from .transform import transform_prototype


@dataclass
class EvalReport:
    config: dict
    n_episodes: int
    mean_acc: float
    ci95: float
    accuracies: list[float]
    wallclock_s: float = field(default=0.0, compare=False)

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        if not timing:
            d.pop("wallclock_s")
        return json.dumps(d, indent=2, sort_keys=True)


def summarize(accuracies) -> tuple[float, float]:
    """Mean and 95% half-width ``1.96 * std / sqrt(n)`` (population std)."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.size == 0:
        raise ConfigError("no episodes to summarize")
    return float(acc.mean()), float(1.96 * acc.std() / np.sqrt(acc.size))


def base_prototype_matrix(model: FewShotModel, base: LabeledDataset, max_samples: int = 200) -> np.ndarray:
    """Rows are base-class mean features in ascending class-id order."""
    means = class_mean_features(base, model.features, max_samples)
    return np.stack([means[c] for c in sorted(means)])


def episode_accuracy(model: FewShotModel, episode: Episode, base_prototypes: np.ndarray | None = None,
                     use_transform: bool | None = None) -> float:
    c = model.config
    use_T = c.use_T if use_transform is None else use_transform
    lam = model.lambda_rho
    with T.no_grad():
        emb = embed_episode(model.extractor, episode, train=False, with_relative=lam > 0)
        protos = compute_prototypes(emb, episode, model.fv, c.use_V, train=False)
        transformed = None
        if use_T:
            if base_prototypes is None:
                raise ConfigError("transformer evaluation needs base-class prototypes")
            transformed = transform_prototype(protos.absolute.data, base_prototypes, model.transformer, False)
        q_rel = emb.query("relative") if lam > 0 else None
        pred = predict(emb.query("absolute"), protos, lam, query_rel=q_rel, transformed=transformed)
    return float(np.mean(pred == episode.query_y))


def evaluate(model: FewShotModel, data: LabeledDataset, n_way: int, k_shot: int, q_query: int,
             n_episodes: int, seed: int = 0, base: LabeledDataset | None = None,
             workers: int = 1, max_base_samples: int = 200,
             use_transform: bool | None = None) -> EvalReport:
    """Mean query accuracy over ``n_episodes`` episodes drawn from ``data``.

    ``use_transform`` overrides the model's T flag (validation during stage 1
    runs without the transformer).
    """
    if n_way > len(data):
        raise ConfigError(f"{n_way}-way evaluation but the split has only {len(data)} classes")
    if n_episodes < 1:
        raise ConfigError("n_episodes must be >= 1")
    start = time.perf_counter()
    use_T = model.config.use_T if use_transform is None else use_transform
    P_r = None
    if use_T:
        if base is None:
            raise ConfigError("transformer evaluation needs the base split")
        P_r = base_prototype_matrix(model, base, max_base_samples)

    seed_key = [seed] if isinstance(seed, (int, np.integer)) else list(seed)

    def run(i: int) -> float:
        ep = sample_episode(data, n_way, k_shot, q_query, rng_seed=seed_key + [i])
        return episode_accuracy(model, ep, P_r, use_T)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(run, range(n_episodes)))
    else:
        accs = [run(i) for i in range(n_episodes)]
    mean, ci = summarize(accs)
    config = dict(model.describe(), n_way=n_way, k_shot=k_shot, q_query=q_query,
                  seed=seed_key[0] if len(seed_key) == 1 else seed_key, use_T=use_T)
    return EvalReport(config, n_episodes, mean, ci, accs, time.perf_counter() - start)
