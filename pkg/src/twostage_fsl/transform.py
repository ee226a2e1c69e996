"""Stage-2 category-agnostic transformation of few-shot class means.

``p' = p @ W1 + shift(p) + threshold(softmax(-||P_r - p||^2)) @ P_r @ W2``

The inputs ``p`` and ``P_r`` come from the frozen stage-1 extractor, so the
attention weights are computed as plain arrays and only ``W1``, ``W2`` and
the shift network receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .episodes import Stage2Episode
from .errors import ConfigError
from .metric import averaging_matrix
from .nets import Module, ShiftMLP, VarianceEstimator, flatten
from .tensor import Tensor


class CategoryTransformer(Module):
    """Parameters ``W1`` (identity init), ``W2`` (zero init) and the shift MLP."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: Sequence[int] = (128, 96),
                 threshold: float = 0.02):
        super().__init__()
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
        self.dim = int(dim)
        self.threshold = float(threshold)
        self.W1 = self.add_param("W1", np.eye(self.dim))
        self.W2 = self.add_param("W2", np.zeros((self.dim, self.dim)))
        self.mlp = self.add_child("mlp", ShiftMLP(self.dim, rng, hidden))

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        # checkpoint namespace: ft/W1, ft/W2, ft11/*
        out = {"ft/W1": self.W1.data.copy(), "ft/W2": self.W2.data.copy()}
        out.update(self.mlp.state_dict("ft11/"))
        return out

    def load_state_dict(self, state, prefix: str = "") -> None:
        for key, t in (("ft/W1", self.W1), ("ft/W2", self.W2)):
            if key not in state:
                raise ConfigError(f"checkpoint is missing parameter {key!r}")
            if state[key].shape != t.shape:
                raise ConfigError(f"parameter {key!r}: checkpoint shape {state[key].shape} != {t.shape}")
            t.data = np.array(state[key], dtype=np.float64)
        self.mlp.load_state_dict(state, "ft11/")


def base_attention(p, base_prototypes) -> np.ndarray:
    """Softmax over base classes of the negative squared distance to ``p``.

    ``p`` may be one vector (returns a vector) or a matrix of rows.
    """
    p = np.asarray(p, dtype=np.float64)
    P = np.asarray(base_prototypes, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ConfigError(f"base prototype matrix must be non-empty n_p x D, got {P.shape}")
    single = p.ndim == 1
    rows = p[None, :] if single else p
    if rows.shape[1] != P.shape[1]:
        raise ConfigError(f"prototype dimension {rows.shape[1]} != base dimension {P.shape[1]}")
    logits = -T._sqdist_forward(rows, P)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs[0] if single else probs


def threshold_probs(probs, threshold: float) -> np.ndarray:
    """Zero every entry not strictly above ``threshold``; no renormalization."""
    probs = np.asarray(probs, dtype=np.float64)
    return np.where(probs > threshold, probs, 0.0)


def base_contribution(p, base_prototypes, threshold: float) -> np.ndarray:
    """``threshold(attention) @ P_r`` for each row of ``p``."""
    P = np.asarray(base_prototypes, dtype=np.float64)
    weights = threshold_probs(base_attention(p, P), threshold)
    return weights @ P


def transform_prototype(p, base_prototypes, params: CategoryTransformer, train: bool) -> Tensor:
    """Transformed prototypes, one row per input row of ``p``."""
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.shape[1] != params.dim:
        raise ConfigError(f"prototype dimension {p.shape[1]} != transformer dimension {params.dim}")
    pt = Tensor(p)
    residual = T.matmul(pt, params.W1)
    shift = params.mlp(pt, train)
    mixed = T.matmul(Tensor(base_contribution(p, base_prototypes, params.threshold)), params.W2)
    out = T.add(T.add(residual, shift), mixed)
    return T.reshape(out, (params.dim,)) if single else out


@dataclass
class Stage2Terms:
    loss: Tensor
    nll: Tensor
    regression: Tensor
    prototypes: Tensor
    query_acc: float


def frozen_class_stats(extractor, fv: VarianceEstimator | None, support_x, support_y, n_way: int,
                       use_variance: bool):
    """Untransformed class means and their predicted variances (no gradients)."""
    with T.no_grad():
        maps = extractor(Tensor(support_x), False)
        A = averaging_matrix(support_y, n_way)
        flat = maps.data.reshape(maps.shape[0], -1)
        p = A @ flat
        p_maps = (A @ flat).reshape((n_way,) + maps.shape[1:])
        if use_variance:
            sigma2 = fv(Tensor(p_maps), False).data
        else:
            sigma2 = np.ones(n_way)
    return p, sigma2


def stage2_terms(episode: Stage2Episode, extractor, fv: VarianceEstimator | None,
                 params: CategoryTransformer, lambda_r: float, use_variance: bool = True,
                 train: bool = True) -> Stage2Terms:
    if lambda_r < 0:
        raise ConfigError(f"lambda_r must be >= 0, got {lambda_r}")
    p, sigma2 = frozen_class_stats(extractor, fv, episode.support_x, episode.support_y,
                                   episode.n_way, use_variance)
    with T.no_grad():
        q = flatten(extractor(Tensor(episode.query_x), False)).data
    p_new = transform_prototype(p, episode.base_prototypes, params, train)
    d = T.div(T.sqdist(Tensor(q), p_new), Tensor(sigma2))
    logp = T.log_softmax(T.neg(d))
    nll = T.neg(T.mean(T.pick(logp, episode.query_y)))
    err = T.sub(p_new, Tensor(episode.gt_prototypes))
    regression = T.mean(T.sum(T.square(err), axis=1))
    loss = T.add(nll, T.mul(regression, lambda_r))
    acc = float(np.mean(np.argmax(logp.data, axis=1) == episode.query_y))
    return Stage2Terms(loss, nll, regression, p_new, acc)


def stage2_loss(episode: Stage2Episode, extractor, fv, params: CategoryTransformer, lambda_r: float,
                use_variance: bool = True, train: bool = True) -> Tensor:
    """Query NLL under transformed prototypes plus ``lambda_r`` times the mean
    squared error between transformed and ground-truth prototypes."""
    return stage2_terms(episode, extractor, fv, params, lambda_r, use_variance, train).loss
