"""Training configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import CONTRAST_MODES, GAN_MODES, LossWeights
from .networks import LAYER_ENCODERS
from .sampling import LOCATION_STRATEGIES, STRATEGIES

KEY_ENCODERS = ("momentum", "live")
WEIGHT_KEYS = tuple(f.name for f in fields(LossWeights))


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    momentum: float = 0.99
    n_loc: int = 256
    n_pos: int = 8
    n_neg: int = 256
    neg_group: int = 7
    patch: int = 32
    stride: int = 8
    pos_strategy: str = "nonlocal"
    neg_strategy: str = "nonlocal"
    loc_neg_strategy: str = "reverse_nonlocal"
    layer_encoder: str = "discriminator"
    key_encoder: str = "momentum"
    contrast_mode: str = "denominator_with_positive"
    gan_mode: str = "logistic"
    lr: float = 1e-4
    d_lr_scale: float = 1.0  # discriminator lr = lr * d_lr_scale
    beta1: float = 0.5
    beta2: float = 0.999
    batch: int = 4
    crop: int = 256
    iters: int = 0
    seed: int = 0
    channels: int = 3
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    head_dim: int = 256
    checkpoint_every: int = 1000
    deterministic: bool = True

    def __post_init__(self):
        choices = {
            "pos_strategy": STRATEGIES,
            "neg_strategy": STRATEGIES,
            "loc_neg_strategy": LOCATION_STRATEGIES,
            "layer_encoder": LAYER_ENCODERS,
            "key_encoder": KEY_ENCODERS,
            "contrast_mode": CONTRAST_MODES,
            "gan_mode": GAN_MODES,
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ValueError(f"{key}={getattr(self, key)!r} not in {allowed}")
        if self.lr <= 0 or self.d_lr_scale <= 0:
            raise ValueError("lr and d_lr_scale must be > 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must be in [0, 1]")
        for key in ("n_loc", "n_pos", "n_neg", "patch", "stride", "batch", "crop", "channels",
                    "ngf", "ndf", "head_dim", "checkpoint_every"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.neg_group < 0 or self.n_blocks < 0 or self.iters < 0:
            raise ValueError("neg_group, n_blocks and iters must be >= 0")
        if self.crop % 4:
            raise ValueError("crop must be divisible by 4")
        if self.patch > self.crop:
            raise ValueError("patch larger than crop")
        grid = ((self.crop - self.patch) // self.stride + 1) ** 2
        if max(self.n_pos, self.n_neg) > grid or self.n_loc > grid - 1:
            raise ValueError(
                f"sample counts (N={self.n_loc}, N_B={self.n_pos}, N_R={self.n_neg}) exceed the "
                f"{grid}-patch grid of a {self.crop} crop with patch {self.patch}, stride {self.stride}"
            )

    def replace(self, **changes) -> "TrainConfig":
        weight_changes = {k: changes.pop(k) for k in list(changes) if k in WEIGHT_KEYS}
        if weight_changes:
            changes["weights"] = dataclasses.replace(self.weights, **weight_changes)
        return dataclasses.replace(self, **changes)

    def to_flat(self) -> dict:
        flat = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        flat.update(dataclasses.asdict(self.weights))
        return flat

    @classmethod
    def from_flat(cls, flat: dict) -> "TrainConfig":
        return cls().replace(**flat)


def desk_config(**overrides) -> TrainConfig:
    """Headline settings scaled to 96x96 crops on one CPU.

    The per-pixel reconstruction term is weighted up and the GAN uses least
    squares; with element-averaged losses and weight 1 the adversarial term
    swamps self-consistency on this budget.
    """
    base = TrainConfig(
        crop=96, patch=16, stride=4, n_loc=128, n_neg=128, n_pos=8,
        ngf=16, ndf=16, n_blocks=6, iters=2000, checkpoint_every=500,
        gan_mode="least_squares",
    ).replace(recon_weight=500.0)
    return base.replace(**overrides)


def _field_types() -> dict:
    types = {f.name: f.type for f in fields(TrainConfig) if f.name != "weights"}
    types.update({k: "float" for k in WEIGHT_KEYS})
    return types


def _coerce(key: str, raw: str, kind: str):
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value for {key}: {raw!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (``#`` comments); unknown keys are errors."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, types[key])
    return (base or TrainConfig()).replace(**values)


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), base)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())
