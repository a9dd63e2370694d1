"""
Model and training configuration.

Config files are UTF-8 ``key = value`` lines whose keys are exactly the field
names of :class:`ModelConfig`; ``#`` starts a comment. Files ending in
``.yaml``/``.yml`` are read as a YAML mapping with the same keys.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import yaml

from dual_branch_sam.exceptions import ConfigurationError, FormatError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ViTBranchConfig:
    image_size_vit: int
    patch_size: int
    embed_dim: int
    num_heads: int
    depth: int
    num_stages: int
    se_reduction: int
    drop_path_rate: float
    mlp_ratio: int

    @property
    def grid(self) -> int:
        return self.image_size_vit // self.patch_size

    @property
    def blocks_per_stage(self) -> int:
        return self.depth // self.num_stages


@dataclass(frozen=True)
class ConvBranchConfig:
    image_size_conv: int
    out_channels: int
    strides: Tuple[int, ...] = (2, 2, 1, 1, 1)

    @property
    def grid(self) -> int:
        return self.image_size_conv // 4


@dataclass(frozen=True)
class DeformAttnConfig:
    num_heads: int
    num_points: int
    offset_scale: float
    embed_dim: int

    @property
    def value_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class ModelConfig:
    """
    Every architectural and training hyperparameter. Defaults are the
    desk-scale stand-ins for the ViT-B setup (ViT input 128 for 1024, conv
    input 32 for 256) with the published training recipe.
    """

    # ViT branch
    image_size_vit: int = 128
    patch_size: int = 16
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    num_stages: int = 2
    se_reduction: int = 4
    mlp_ratio: int = 4
    # conv branch
    image_size_conv: int = 32
    # cross fusion
    deform_heads: int = 4
    deform_points: int = 4
    offset_scale: float = 1.0
    fusion_squeeze_ratio: int = 4
    # decoder
    decoder_heads: int = 4
    # regularization
    drop_rate: float = 0.4
    drop_path_rate: float = 0.4
    # optimization
    lr0: float = 1e-4
    epochs: int = 12
    poly_power: float = 0.9
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 4
    seed: int = 0
    pretrained_seed: int = 2024
    # prompts and evaluation
    max_shift: float = 20.0
    tolerance: float = 1.0
    # ablation switches
    use_channel_attention: bool = True
    use_bilateral: bool = True
    use_fusion: bool = True
    zero_init: bool = True
    # numerics and runtime
    dtype: str = "float32"
    ln_eps: float = 1e-6
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    workers: int = 1
    log_every: int = 1

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    # -- derived views ------------------------------------------------------

    @property
    def vit(self) -> ViTBranchConfig:
        return ViTBranchConfig(
            image_size_vit=self.image_size_vit,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            depth=self.depth,
            num_stages=self.num_stages,
            se_reduction=self.se_reduction,
            drop_path_rate=self.drop_path_rate,
            mlp_ratio=self.mlp_ratio,
        )

    @property
    def conv(self) -> ConvBranchConfig:
        return ConvBranchConfig(image_size_conv=self.image_size_conv, out_channels=self.embed_dim)

    @property
    def deform(self) -> DeformAttnConfig:
        return DeformAttnConfig(
            num_heads=self.deform_heads,
            num_points=self.deform_points,
            offset_scale=self.offset_scale,
            embed_dim=self.embed_dim,
        )

    @property
    def grid(self) -> int:
        return self.image_size_vit // self.patch_size

    @property
    def mask_size(self) -> int:
        """Side of the decoder's logit map (two x2 upsamplings of the token grid)."""
        return 4 * self.grid

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "ModelConfig":
        """
        Check every cross-field invariant.

        Raises
        ------
        ConfigurationError
            Naming the first violated invariant.
        """

        def require(condition: bool, message: str):
            if not condition:
                raise ConfigurationError(message)

        for name in ("image_size_vit", "patch_size", "embed_dim", "num_heads", "depth", "num_stages",
                     "se_reduction", "mlp_ratio", "image_size_conv", "deform_heads", "deform_points",
                     "fusion_squeeze_ratio", "decoder_heads", "epochs", "batch_size", "workers", "log_every"):
            require(getattr(self, name) >= 1, f"{name} must be a positive integer, got {getattr(self, name)}")
        require(self.image_size_vit % self.patch_size == 0,
                f"image_size_vit {self.image_size_vit} not divisible by patch_size {self.patch_size}")
        require(self.embed_dim % self.num_heads == 0,
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        require(self.embed_dim % self.deform_heads == 0,
                f"embed_dim {self.embed_dim} not divisible by deform_heads {self.deform_heads}")
        require(self.embed_dim % self.decoder_heads == 0,
                f"embed_dim {self.embed_dim} not divisible by decoder_heads {self.decoder_heads}")
        require(self.embed_dim % 8 == 0, f"embed_dim {self.embed_dim} must be divisible by 8 (decoder upscaling)")
        require(self.embed_dim // self.se_reduction >= 1, "se_reduction leaves no hidden channels")
        require(self.embed_dim // self.fusion_squeeze_ratio >= 1, "fusion_squeeze_ratio leaves no hidden channels")
        require(self.depth % self.num_stages == 0,
                f"depth {self.depth} not divisible by num_stages {self.num_stages}")
        require(self.image_size_conv % 4 == 0 and self.image_size_conv // 4 == self.grid,
                f"conv grid {self.image_size_conv}/4 does not match ViT grid {self.image_size_vit}/{self.patch_size}")
        for name in ("drop_rate", "drop_path_rate"):
            value = getattr(self, name)
            require(0.0 <= value < 1.0, f"{name} must lie in [0, 1), got {value}")
        require(len(self.betas) == 2 and all(0.0 <= b < 1.0 for b in self.betas),
                f"betas must be two values in [0, 1), got {self.betas}")
        require(self.lr0 >= 0.0 and self.weight_decay >= 0.0, "lr0 and weight_decay must be nonnegative")
        require(self.tolerance >= 0.0 and self.max_shift >= 0.0, "tolerance and max_shift must be nonnegative")
        require(self.dtype in ("float32", "float64"), f"dtype must be float32 or float64, got {self.dtype}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}


def _coerce(name: str, raw: Any) -> Any:
    default = _FIELDS[name].default
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            text = str(raw).strip().lower()
            if text in ("true", "1", "yes", "on"):
                return True
            if text in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = raw if isinstance(raw, (list, tuple)) else str(raw).split(",")
            return tuple(float(v) for v in items)
        return str(raw).strip()
    except ValueError as e:
        raise ConfigurationError(f"invalid value for {name}: {e}")


def config_from_mapping(values: Dict[str, Any], base: ModelConfig = None) -> ModelConfig:
    """
    Build a config from ``values`` on top of ``base`` (defaults when omitted).

    Raises
    ------
    ConfigurationError
        On unknown keys or uncoercible values.
    """
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    base = base if base is not None else ModelConfig()
    return base.replace(**{k: _coerce(k, v) for k, v in values.items()})


def parse_config_text(text: str) -> Dict[str, str]:
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigurationError(f"config line {number}: duplicate key {key}")
        values[key] = value
    return values


def load_config(path: Union[str, Path]) -> ModelConfig:
    """
    Read and validate a config file.

    Parameters
    ----------
    path : str or Path
        ``key = value`` file, or a YAML mapping when the suffix is .yaml/.yml.

    Returns
    -------
    ModelConfig
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix in (".yaml", ".yml"):
        values = yaml.safe_load(text) or {}
        if not isinstance(values, dict):
            raise FormatError(f"{path}: YAML config must be a mapping")
    else:
        values = parse_config_text(text)
    config = config_from_mapping(values).validate()
    logger.info(f"Loaded config from {path}")
    return config


def format_config(config: ModelConfig) -> str:
    lines = []
    for name in _FIELDS:
        value = getattr(config, name)
        if isinstance(value, tuple):
            value = ", ".join(repr(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def save_config(config: ModelConfig, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_config(config), encoding="utf-8")
