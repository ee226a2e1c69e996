"""Stage-1 classification math: relative features, prototypes, distances, loss.

Absolute-space distances are squared Euclidean distances divided by the
class variance predicted for each prototype; relative-space distances are
plain squared Euclidean distances between distance profiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .episodes import Episode
from .errors import ConfigError
from .nets import VarianceEstimator, flatten
from .tensor import Tensor


@dataclass
class EpisodeEmbedding:
    absolute: Tensor  # r x D, support rows then query rows
    maps: Tensor  # r x h x w x C
    relative: Tensor | None  # r x r
    n_support: int

    def support(self, space: str = "absolute") -> Tensor:
        return T.rows(self._space(space), np.arange(self.n_support))

    def query(self, space: str = "absolute") -> Tensor:
        rows = self._space(space)
        return T.rows(rows, np.arange(self.n_support, rows.shape[0]))

    def _space(self, space: str) -> Tensor:
        if space == "absolute":
            return self.absolute
        if space == "relative":
            if self.relative is None:
                raise ConfigError("embedding was built without relative features")
            return self.relative
        raise ConfigError(f"unknown feature space {space!r}")


@dataclass
class PrototypeSet:
    absolute: Tensor  # N x D
    maps: Tensor  # N x h x w x C
    relative: Tensor | None  # N x r
    sigma2: Tensor  # N


def relative_features(absolute: Tensor) -> Tensor:
    """Row ``k`` lists the squared distances from sample ``k`` to every sample."""
    absolute = T.as_tensor(absolute)
    if absolute.ndim != 2 or absolute.shape[0] < 2:
        raise ConfigError(f"relative features need at least 2 rows, got shape {absolute.shape}")
    return T.sqdist(absolute, absolute)


def embed_episode(extractor, episode: Episode, train: bool, with_relative: bool = True) -> EpisodeEmbedding:
    maps = extractor(Tensor(episode.inputs()), train)
    absolute = flatten(maps)
    relative = relative_features(absolute) if with_relative else None
    return EpisodeEmbedding(absolute, maps, relative, episode.n_support)


def averaging_matrix(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """``A[c, i] = 1/|S_c|`` when sample ``i`` has label ``c``; ``A @ X`` gives class means."""
    labels = np.asarray(labels)
    onehot = (labels[None, :] == np.arange(n_classes)[:, None]).astype(np.float64)
    counts = onehot.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ConfigError("a class has no support samples")
    return onehot / counts


def compute_prototypes(embedding: EpisodeEmbedding, episode: Episode, fv: VarianceEstimator | None,
                       use_variance: bool, train: bool) -> PrototypeSet:
    A = Tensor(averaging_matrix(episode.support_y, episode.n_way))
    p_abs = T.matmul(A, embedding.support("absolute"))
    n_s = embedding.n_support
    support_maps = T.rows(embedding.maps, np.arange(n_s))
    flat_maps = T.reshape(support_maps, (n_s, -1))
    p_maps = T.reshape(T.matmul(A, flat_maps), (episode.n_way,) + embedding.maps.shape[1:])
    p_rel = T.matmul(A, embedding.support("relative")) if embedding.relative is not None else None
    if use_variance:
        if fv is None:
            raise ConfigError("use_variance requires a variance estimator")
        sigma2 = fv(p_maps, train)
    else:
        sigma2 = Tensor(np.ones(episode.n_way))
    return PrototypeSet(p_abs, p_maps, p_rel, sigma2)


def class_log_probs(query_rows, prototypes: PrototypeSet, space: str = "absolute",
                    absolute: Tensor | None = None) -> Tensor:
    """Log-probabilities over classes, one row per query.

    ``absolute`` substitutes the absolute prototypes (e.g. with transformed
    ones) while keeping the predicted variances.
    """
    q = T.as_tensor(query_rows)
    if q.ndim == 1:
        q = T.reshape(q, (1, q.shape[0]))
    if space == "absolute":
        protos = prototypes.absolute if absolute is None else T.as_tensor(absolute)
        d = T.div(T.sqdist(q, protos), prototypes.sigma2)
    elif space == "relative":
        if prototypes.relative is None:
            raise ConfigError("prototypes were built without relative features")
        d = T.sqdist(q, prototypes.relative)
    else:
        raise ConfigError(f"unknown feature space {space!r}")
    return T.log_softmax(T.neg(d))


def stage1_loss(episode: Episode, embedding: EpisodeEmbedding, prototypes: PrototypeSet,
                lambda_rho: float) -> Tensor:
    """Mean over queries of ``-log p_abs(y|x) - lambda_rho * log p_rel(y|x)``."""
    if lambda_rho < 0:
        raise ConfigError(f"lambda_rho must be >= 0, got {lambda_rho}")
    y = episode.query_y
    loss = T.neg(T.mean(T.pick(class_log_probs(embedding.query("absolute"), prototypes, "absolute"), y)))
    if lambda_rho > 0:
        rel = T.mean(T.pick(class_log_probs(embedding.query("relative"), prototypes, "relative"), y))
        loss = T.sub(loss, T.mul(rel, lambda_rho))
    return loss


def class_scores(query_abs, prototypes: PrototypeSet, lambda_rho: float, query_rel=None,
                 transformed=None) -> np.ndarray:
    """Combined negative log-probability per (query, class); lower is better."""
    with T.no_grad():
        scores = -class_log_probs(query_abs, prototypes, "absolute", absolute=transformed).data
        if lambda_rho > 0:
            if query_rel is None:
                raise ConfigError("lambda_rho > 0 needs relative query features")
            scores = scores - lambda_rho * class_log_probs(query_rel, prototypes, "relative").data
    return scores


def predict(query_abs, prototypes: PrototypeSet, lambda_rho: float, query_rel=None,
            transformed=None) -> np.ndarray:
    """Arg-min of the combined score; ties go to the lowest class index."""
    return np.argmin(class_scores(query_abs, prototypes, lambda_rho, query_rel, transformed), axis=1)
