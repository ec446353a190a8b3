"""Run configuration. Numeric defaults follow the router-only training recipe:
midpoint threshold, zero-initialised routers, half capacity, and the
learning-rate / lambda search grids."""
import enum
from dataclasses import dataclass, field
from typing import List, Optional

from core.libs import assertions

DEFAULT_TAU = 0.5
DEFAULT_TARGET_CAPACITY = 0.5
DEFAULT_LR_GRID = [1e-5, 2e-5, 5e-5, 1e-4, 2e-4]
DEFAULT_LAMBDA_GRID = [0.0, 0.1, 0.01, 0.001]
CAPACITY_TOLERANCE = 0.05
MAX_TRAIN_WINDOWS = 5000
MAX_ROUTED_LAYERS = 16


class TargetEnum(str, enum.Enum):
    ATTENTION = 'attention'
    MLP = 'mlp'
    BLOCK = 'block'


class GranularityEnum(str, enum.Enum):
    TOKEN = 'token'
    SEQUENCE = 'sequence'


class ActivationEnum(str, enum.Enum):
    SWIGLU = 'swiglu'
    GELU = 'gelu'


@dataclass
class MoEConfig:
    n_experts: int = 8
    top_k: int = 2
    expert_hidden: int = 256
    renormalize: bool = False


@dataclass
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 256
    n_layers: int = 16
    n_heads: int = 4
    head_dim: int = 64
    mlp_hidden: int = 1536
    max_seq_len: int = 128
    activation: ActivationEnum = ActivationEnum.SWIGLU
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    moe: Optional[MoEConfig] = None

    def validate(self):
        assertions.assert_config(self.d_model == self.n_heads * self.head_dim,
                                 'd_model must equal n_heads * head_dim')
        assertions.assert_config(self.head_dim % 2 == 0, 'head_dim must be even for rotary embeddings')
        if self.moe is not None:
            assertions.assert_config(1 <= self.moe.top_k <= self.moe.n_experts,
                                     'moe.top_k must lie in [1, n_experts]')
        return self

    @property
    def expert_hidden(self):
        return self.moe.expert_hidden if self.moe is not None else self.mlp_hidden

    def mlp_matrices(self):
        return 3 if self.activation == ActivationEnum.SWIGLU else 2

    def n_params(self):
        d = self.d_model
        per_layer = 4 * d * d + 2 * d
        if self.moe is None:
            per_layer += self.mlp_matrices() * d * self.mlp_hidden
        else:
            per_layer += d * self.moe.n_experts
            per_layer += self.moe.n_experts * self.mlp_matrices() * d * self.moe.expert_hidden
        return self.n_layers * per_layer + 2 * self.vocab_size * d + d


@dataclass
class PlanConfig:
    target: TargetEnum = TargetEnum.ATTENTION
    granularity: GranularityEnum = GranularityEnum.SEQUENCE
    layers: Optional[List[int]] = None
    n_routed: Optional[int] = None
    tau: float = DEFAULT_TAU
    causal_prefix: bool = False
    allow_last: bool = False


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    lam: float = 0.1
    target_capacity: float = DEFAULT_TARGET_CAPACITY
    steps: int = 2000
    batch_size: int = 8
    seq_len: int = 64
    seed: int = 0
    max_windows: Optional[int] = MAX_TRAIN_WINDOWS
    lr_grid: List[float] = field(default_factory=lambda: list(DEFAULT_LR_GRID))
    lambda_grid: List[float] = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    capacity_tolerance: float = CAPACITY_TOLERANCE
    grid_steps: Optional[int] = None
    workers: int = 1


@dataclass
class PretrainConfig:
    steps: int = 2000
    learning_rate: float = 3e-3
    batch_size: int = 8


@dataclass
class DataConfig:
    corpus_path: Optional[str] = None
    val_fraction: float = 0.1
    synthetic_sentences: int = 20000


@dataclass
class BenchConfig:
    batch_size: int = 4
    seq_len: int = 64
    gen_len: int = 16
    repeats: int = 5
    workers: int = 1
    eval_windows: Optional[int] = 256


@dataclass
class BaselineConfig:
    drop_target: TargetEnum = TargetEnum.ATTENTION
    drop_count: int = 4
    expert_drop_fraction: float = 0.25
    calibration_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    plan: PlanConfig = field(default_factory=PlanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
