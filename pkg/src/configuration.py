import dataclasses
import json
import typing
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import dataconf
from keboola.component.exceptions import UserException


class ConfigurationBase:

    @classmethod
    def load_from_dict(cls, configuration: dict):
        """
        Initialize the configuration dataclass object from dictionary.
        Args:
            configuration: Dictionary loaded from json configuration.

        Returns:

        """
        json_conf = json.dumps(_coerce_floats(cls, configuration))
        return dataconf.loads(json_conf, cls, ignore_unexpected=True)

    @classmethod
    def get_dataclass_required_parameters(cls) -> list[str]:
        """
        Return list of required parameters based on the dataclass definition (no default value)
        Returns: list[str]

        """
        return [f.name for f in dataclasses.fields(cls)
                if f.default == dataclasses.MISSING
                and f.default_factory == dataclasses.MISSING]

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=_enum_value))


def _enum_value(value):
    if isinstance(value, Enum):
        return value.value
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _coerce_floats(cls, values):
    """Integer literals given for float fields become floats, recursively through nested dataclasses."""
    if not dataclasses.is_dataclass(cls) or not isinstance(values, dict):
        return values
    hints = typing.get_type_hints(cls)
    coerced = dict(values)
    for f in dataclasses.fields(cls):
        if f.name not in coerced:
            continue
        hint = hints[f.name]
        args = [arg for arg in typing.get_args(hint) if arg is not type(None)]
        target = args[0] if typing.get_origin(hint) is typing.Union and len(args) == 1 else hint
        value = coerced[f.name]
        if target is float and isinstance(value, int) and not isinstance(value, bool):
            coerced[f.name] = float(value)
        elif dataclasses.is_dataclass(target):
            coerced[f.name] = _coerce_floats(target, value)
    return coerced


class ResidualMode(str, Enum):
    BASELINE = "baseline"
    DDL = "ddl"


class MapMode(str, Enum):
    KMAP = "kmap"
    VMAP = "vmap"


class Variant(str, Enum):
    BASELINE = "baseline"
    EC = "ec"
    CC = "cc"
    CC_EC = "cc-ec"

    @property
    def expands_embedding(self) -> bool:
        return self in (Variant.EC, Variant.CC_EC)

    @property
    def compresses_channels(self) -> bool:
        return self in (Variant.CC, Variant.CC_EC)


class GateMode(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class DirectionMode(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class PoolMode(str, Enum):
    COMPRESSED = "compressed"
    MEAN = "mean"
    FLATTEN = "flatten"


class Precision(str, Enum):
    FLOAT32 = "float32"
    FLOAT64 = "float64"


class ModelPreset(str, Enum):
    TOY = "toy"
    SMALL = "small"
    MEDIUM = "medium"


class Schedule(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


PRESETS = {
    ModelPreset.SMALL: {"d": 768, "n_layers": 12, "n_heads": 6, "head_dim": 128},
    ModelPreset.MEDIUM: {"d": 1024, "n_layers": 24, "n_heads": 8, "head_dim": 128},
}


@dataclass
class DdlSettings(ConfigurationBase):
    map_mode: MapMode = MapMode.KMAP
    variant: Variant = Variant.BASELINE
    d_v: int = 1
    eps_k: float = 1e-6
    beta_init: float = 1.0
    gate_mode: GateMode = GateMode.LINEAR
    beta_hidden_size: int = 32
    direction_mode: DirectionMode = DirectionMode.LINEAR
    direction_pool: PoolMode = PoolMode.COMPRESSED
    value_from_context: bool = False
    state_shortconv_kernel_size: int = 4
    input_embed_shortconv_kernel_size: int = 4
    state_read_init: Optional[float] = None
    apply_to_attention: bool = True
    apply_to_mlp: bool = True


@dataclass
class ModelConfig(ConfigurationBase):
    preset: ModelPreset = ModelPreset.TOY
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 16
    vocab_size: int = 256
    seq_len: int = 128
    residual_mode: ResidualMode = ResidualMode.BASELINE
    tie_embeddings: bool = False
    rope_base: float = 10000.0

    def apply_preset(self) -> "ModelConfig":
        for key, value in PRESETS.get(self.preset, {}).items():
            setattr(self, key, value)
        return self


@dataclass
class TrainConfig(ConfigurationBase):
    steps: int = 2000
    batch_size: int = 32
    seq_len: Optional[int] = None
    lr: float = 1e-3
    warmup_steps: int = 100
    schedule: Schedule = Schedule.COSINE
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_interval: int = 100
    eval_batches: int = 20
    log_interval: int = 10
    seed: int = 0
    precision: Precision = Precision.FLOAT32
    threads: int = 1


@dataclass
class DataSettings(ConfigurationBase):
    corpus_path: str = ""
    validation_fraction: float = 0.05


@dataclass
class CheckpointSettings(ConfigurationBase):
    file_name: str = "model.ddl"
    save_interval: int = 0
    resume: bool = True


@dataclass
class Configuration(ConfigurationBase):
    model: ModelConfig = field(default_factory=ModelConfig)
    ddl: DdlSettings = field(default_factory=DdlSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)
    checkpoint: CheckpointSettings = field(default_factory=CheckpointSettings)

    @classmethod
    def load_from_dict(cls, configuration: dict) -> "Configuration":
        loaded = super().load_from_dict(configuration)
        loaded.model.apply_preset()
        return loaded

    @property
    def context_length(self) -> int:
        return self.train.seq_len or self.model.seq_len

    @property
    def uses_expanded_state(self) -> bool:
        return self.model.residual_mode == ResidualMode.DDL and self.ddl.d_v > 1

    def validate(self) -> "Configuration":
        """Cross-field checks that must hold before a model is built."""
        model, ddl = self.model, self.ddl
        if model.n_heads * model.head_dim != model.d:
            raise UserException(f"n_heads * head_dim must equal d, got {model.n_heads} * {model.head_dim} "
                                f"!= {model.d}")
        if model.head_dim % 2:
            raise UserException(f"head_dim must be even for rotary embeddings, got {model.head_dim}")
        if model.seq_len < 2:
            raise UserException(f"seq_len must be at least 2, got {model.seq_len}")
        if self.context_length > model.seq_len:
            raise UserException(f"Training seq_len {self.context_length} exceeds the model's seq_len "
                                f"{model.seq_len}")
        if model.vocab_size != 256:
            raise UserException(f"Byte-level corpora need vocab_size 256, got {model.vocab_size}")
        if not 0.0 < ddl.beta_init < 2.0:
            raise UserException(f"beta_init must lie in (0, 2), got {ddl.beta_init}")
        if ddl.d_v < 1:
            raise UserException(f"d_v must be at least 1, got {ddl.d_v}")
        if ddl.d_v == 1 and ddl.variant != Variant.BASELINE:
            raise UserException(f"Variant '{ddl.variant.value}' needs an expanded state, set d_v > 1")
        if ddl.variant.compresses_channels and ddl.state_shortconv_kernel_size != ddl.d_v:
            raise UserException(f"Variant '{ddl.variant.value}' needs state_shortconv_kernel_size equal to d_v "
                                f"({ddl.d_v}), got {ddl.state_shortconv_kernel_size}")
        if ddl.eps_k < 0:
            raise UserException(f"eps_k must not be negative, got {ddl.eps_k}")
        if self.train.batch_size < 1 or self.train.steps < 0:
            raise UserException("batch_size must be positive and steps non-negative")
        if not 0.0 < self.data.validation_fraction < 1.0:
            raise UserException(f"validation_fraction must lie in (0, 1), got {self.data.validation_fraction}")
        return self
