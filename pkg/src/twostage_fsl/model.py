"""The full two-stage model: extractor, variance estimator, category transformer."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .nets import VarianceEstimator, build_extractor, flatten
from .tensor import Tensor
from .transform import CategoryTransformer


@dataclass
class ModelConfig:
    extractor: str = "mlp"
    mlp_hidden: Sequence[int] = (64, 64)
    feature_dim: int = 64
    fv_hidden: int = 32
    fv_pool_blocks: Sequence[int] | None = None
    t11_hidden: Sequence[int] = (128, 96)
    use_V: bool = True
    use_R: bool = True
    use_T: bool = True
    lambda_rho: float = 0.1
    t_h: float = 0.02


class FewShotModel:
    """Holds every network and the ablation flags that decide which ones run."""

    def __init__(self, input_shape: Sequence[int], config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.input_shape = tuple(int(v) for v in input_shape)
        c = self.config
        self.extractor = build_extractor(c.extractor, self.input_shape, np.random.default_rng([seed, 10]),
                                         hidden=tuple(c.mlp_hidden), out_dim=c.feature_dim)
        self.fv = VarianceEstimator(self.extractor.map_shape, np.random.default_rng([seed, 11]),
                                    hidden=c.fv_hidden,
                                    pool_blocks=None if c.fv_pool_blocks is None else tuple(c.fv_pool_blocks))
        self.transformer = CategoryTransformer(self.extractor.feature_dim, np.random.default_rng([seed, 12]),
                                               hidden=tuple(c.t11_hidden), threshold=c.t_h)

    @property
    def feature_dim(self) -> int:
        return self.extractor.feature_dim

    @property
    def lambda_rho(self) -> float:
        return self.config.lambda_rho if self.config.use_R else 0.0

    def stage1_parameters(self) -> dict[str, Tensor]:
        params = self.extractor.named_parameters("fphi/")
        if self.config.use_V:
            params.update(self.fv.named_parameters("fv/"))
        return params

    def stage2_parameters(self) -> dict[str, Tensor]:
        return self.transformer.named_parameters("ft/")

    def stage1_state(self) -> dict[str, np.ndarray]:
        out = self.extractor.state_dict("fphi/")
        out.update(self.fv.state_dict("fv/"))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = self.stage1_state()
        out.update(self.transformer.state_dict())
        return out

    def load_state_dict(self, state, stage1_only: bool = False) -> None:
        self.extractor.load_state_dict(state, "fphi/")
        self.fv.load_state_dict(state, "fv/")
        if not stage1_only:
            self.transformer.load_state_dict(state)

    def features(self, x: np.ndarray) -> np.ndarray:
        """Flattened eval-mode features, never recorded."""
        with T.no_grad():
            return flatten(self.extractor(Tensor(x), False)).data

    def describe(self) -> dict:
        d = asdict(self.config)
        d["input_shape"] = list(self.input_shape)
        return d
