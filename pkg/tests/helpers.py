"""Small builders shared by several test modules."""

import numpy as np

from twostage_fsl import tensor as T
from twostage_fsl.episodes import Episode
from twostage_fsl.metric import EpisodeEmbedding, relative_features
from twostage_fsl.tensor import Tensor


def toy_episode(n_way, k_shot, q_query, dim=4, rng=None):
    """Episode whose inputs are random vectors, support then query, class-major."""
    rng = rng or np.random.default_rng(0)
    sx = rng.normal(size=(n_way * k_shot, dim))
    qx = rng.normal(size=(n_way * q_query, dim))
    sy = np.repeat(np.arange(n_way), k_shot)
    qy = np.repeat(np.arange(n_way), q_query)
    return Episode(n_way, k_shot, q_query, [f"t{i}" for i in range(n_way)], sx, sy, qx, qy,
                   np.tile(np.arange(k_shot), n_way), np.tile(np.arange(q_query), n_way))


def embedding_from_rows(absolute, n_support, with_relative=True):
    """Wrap raw embedding rows as if an extractor had produced them."""
    a = absolute if isinstance(absolute, Tensor) else Tensor(absolute)
    maps = T.reshape(a, (a.shape[0], 1, 1, a.shape[1]))
    rel = relative_features(a) if with_relative else None
    return EpisodeEmbedding(a, maps, rel, n_support)
