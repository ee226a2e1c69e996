"""N-way K-shot episode sampling for both training stages and for testing.

Samples inside an episode follow one canonical order: support first, then
query; within each, class-major by episode-local class index and then in
draw order.  Relative features index samples in exactly this order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .data import LabeledDataset
from .errors import ConfigError


@dataclass
class Episode:
    n_way: int
    k_shot: int
    q_query: int
    roster: list[str]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray  # sample index within its class, for audits
    query_idx: np.ndarray

    @property
    def n_support(self) -> int:
        return self.n_way * self.k_shot

    @property
    def n_query(self) -> int:
        return self.n_way * self.q_query

    def inputs(self) -> np.ndarray:
        return np.concatenate([self.support_x, self.query_x], axis=0)


@dataclass
class Stage2Episode:
    n_way: int
    k_shot: int
    q_query: int
    pseudo_novel: list[str]
    pseudo_base: list[str]
    base_prototypes: np.ndarray  # n_p x D, rows in ascending class id order
    gt_prototypes: np.ndarray  # n_way x D
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_idx: np.ndarray
    query_idx: np.ndarray


def _draw(rng: np.random.Generator, data: LabeledDataset, picked, k: int, q: int):
    sx, sy, si, qx, qy, qi = [], [], [], [], [], []
    for local, ci in enumerate(picked):
        rec = data.classes[ci]
        if len(rec) < k + q:
            raise ConfigError(f"class {rec.class_id!r} has {len(rec)} samples, episode needs {k + q}")
        order = rng.permutation(len(rec))[:k + q]
        s, qq = order[:k], order[k:]
        sx.append(rec.samples[s])
        qx.append(rec.samples[qq])
        sy.append(np.full(k, local))
        qy.append(np.full(q, local))
        si.append(s)
        qi.append(qq)
    return (np.concatenate(sx), np.concatenate(sy), np.concatenate(si),
            np.concatenate(qx), np.concatenate(qy), np.concatenate(qi))


def sample_episode(data: LabeledDataset, n_way: int, k_shot: int, q_query: int, rng_seed) -> Episode:
    """Draw N classes, then K support and Q disjoint query samples per class."""
    if n_way < 1 or k_shot < 1 or q_query < 0:
        raise ConfigError(f"invalid episode geometry N={n_way} K={k_shot} Q={q_query}")
    if n_way > len(data):
        raise ConfigError(f"{n_way}-way episode from a split with {len(data)} classes")
    rng = np.random.default_rng(rng_seed)
    picked = rng.choice(len(data), size=n_way, replace=False)
    sx, sy, si, qx, qy, qi = _draw(rng, data, picked, k_shot, q_query)
    return Episode(n_way, k_shot, q_query, [data.classes[i].class_id for i in picked],
                   sx, sy.astype(np.intp), qx, qy.astype(np.intp), si, qi)


FeatureFn = Callable[[np.ndarray], np.ndarray]


def class_mean_features(data: LabeledDataset, features: FeatureFn, max_samples: int = 200,
                        batch_size: int = 256) -> dict[str, np.ndarray]:
    """Mean flattened feature per class over its first ``max_samples`` samples."""
    out = {}
    for rec in data.classes:
        xs = rec.samples[:max_samples]
        chunks = [features(xs[i:i + batch_size]) for i in range(0, len(xs), batch_size)]
        out[rec.class_id] = np.concatenate(chunks).mean(axis=0)
    return out


def sample_stage2_episode(data: LabeledDataset, n_pn: int, k_pn: int, q_pn: int, features: FeatureFn,
                          max_base_samples: int = 200, rng_seed=0,
                          class_means: Mapping[str, np.ndarray] | None = None) -> Stage2Episode:
    """Split the base classes into pseudo-novel and pseudo-base for one episode.

    ``features`` maps a batch of samples to flattened features with the
    frozen extractor.  Pass ``class_means`` (from :func:`class_mean_features`)
    to avoid recomputing every class mean per episode.
    """
    if not 1 <= n_pn < len(data):
        raise ConfigError(f"need 1 <= N_pn < N_base, got N_pn={n_pn}, N_base={len(data)}")
    if class_means is None:
        class_means = class_mean_features(data, features, max_base_samples)
    rng = np.random.default_rng(rng_seed)
    picked = rng.choice(len(data), size=n_pn, replace=False)
    novel_ids = [data.classes[i].class_id for i in picked]
    base_ids = sorted(set(data.class_ids) - set(novel_ids))
    sx, sy, si, qx, qy, qi = _draw(rng, data, picked, k_pn, q_pn)
    return Stage2Episode(
        n_pn, k_pn, q_pn, novel_ids, base_ids,
        np.stack([class_means[c] for c in base_ids]),
        np.stack([class_means[c] for c in novel_ids]),
        sx, sy.astype(np.intp), qx, qy.astype(np.intp), si, qi,
    )
