"""Two-stage few-shot recognition: learned-variance prototypes with relative
features, followed by a category-agnostic prototype transformation."""

from .errors import ConfigError, ContractError, DataError, FewShotError, NumericError
from .tensor import Tape, Tensor, backward, load_tensors, no_grad, save_tensors
from .data import LabeledDataset, SyntheticTaskSpec, gen_synthetic, load_dataset, write_dataset
from .episodes import Episode, Stage2Episode, sample_episode, sample_stage2_episode
from .metric import class_log_probs, compute_prototypes, predict, relative_features, stage1_loss
from .transform import (CategoryTransformer, base_attention, stage2_loss, threshold_probs,
                        transform_prototype)
from .model import FewShotModel, ModelConfig
from .eval import EvalReport, evaluate
from .trainer import OptimizerState, TrainConfig, adam_step, train, train_stage1, train_stage2

__version__ = "0.1.0"
