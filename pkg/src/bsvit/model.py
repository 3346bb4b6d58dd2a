"""Config-driven BSViT assembly, deterministic inference and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attention import VARIANTS, build_adjacency
from .autograd import Var
from .blocks import ClassificationHead, EncoderBlock, PatchSplitting
from .neurons import SpikingNeuron, SurrogateSpec
from .nn import Module
from .profiler import EnergyLedger
from .tensor import DimensionError

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid model or run configuration; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelConfig:
    in_channels: int = 3
    height: int = 32
    width: int = 32
    timesteps: int = 2
    depth: int = 1
    dim: int = 32
    mlp_ratio: int = 4
    heads: int = 1
    n_max: int = 20
    mask_enabled: bool = True
    mask_blocks: list[bool] | None = None
    attention: str = "dbssa"
    surrogate: str = "rectangular"
    surrogate_width: float = 1.0
    v_theta: float = 1.0
    stem_pools: int = 2
    num_classes: int = 10
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("in_channels", "height", "width", "timesteps", "depth", "dim",
                     "mlp_ratio", "heads", "n_max", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if self.dim % 8:
            raise ConfigError("dim", "must be divisible by 8 for the patch stem")
        if self.dim % self.heads:
            raise ConfigError("heads", f"must divide dim={self.dim}")
        if not 0 <= self.stem_pools <= 4:
            raise ConfigError("stem_pools", "must be between 0 and 4")
        stride = 2 ** self.stem_pools
        if self.height % stride or self.width % stride:
            raise ConfigError("height", f"input {self.height}x{self.width} not divisible by stem stride {stride}")
        if self.attention not in VARIANTS:
            raise ConfigError("attention", f"must be one of {sorted(VARIANTS)}")
        if self.surrogate not in ("rectangular", "arctan"):
            raise ConfigError("surrogate", "must be 'rectangular' or 'arctan'")
        if self.surrogate_width <= 0:
            raise ConfigError("surrogate_width", "must be positive")
        if self.v_theta <= 0:
            raise ConfigError("v_theta", "must be positive")
        if self.mask_blocks is not None and len(self.mask_blocks) != self.depth:
            raise ConfigError("mask_blocks", f"needs {self.depth} entries")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype", "must be 'float32' or 'float64'")

    @property
    def grid(self) -> tuple[int, int]:
        stride = 2 ** self.stem_pools
        return self.height // stride, self.width // stride

    @property
    def tokens(self) -> int:
        h, w = self.grid
        return h * w

    def block_masked(self, index: int) -> bool:
        if self.mask_blocks is not None:
            return bool(self.mask_blocks[index])
        return bool(self.mask_enabled)

    def to_dict(self) -> dict:
        return {"version": CONFIG_VERSION, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown config field")
        return cls(**data)


class BSViT(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        dtype = np.dtype(cfg.dtype)
        sur = SurrogateSpec(cfg.surrogate, cfg.surrogate_width)
        grid = cfg.grid
        mask = build_adjacency(*grid)
        self.bsps = PatchSplitting(cfg.in_channels, cfg.dim, rng, cfg.stem_pools, cfg.n_max, sur, dtype)
        self.s0_lif = SpikingNeuron("burst", cfg.n_max, cfg.v_theta, sur, dtype)
        self.blocks = [
            EncoderBlock(cfg.dim, rng, cfg.heads, cfg.mlp_ratio, cfg.n_max, cfg.attention,
                         mask if cfg.block_masked(i) else None, sur, dtype)
            for i in range(cfg.depth)
        ]
        self.head = ClassificationHead(cfg.dim, cfg.num_classes, rng, dtype)
        for _, mod in self.named_modules():
            if isinstance(mod, SpikingNeuron):
                mod.v_theta = float(cfg.v_theta)
        self.last_ledger: EnergyLedger | None = None

    def set_mask(self, enabled: bool | list[bool]) -> None:
        """Switch the (parameter-free) patch mask per block."""
        flags = [enabled] * len(self.blocks) if isinstance(enabled, bool) else list(enabled)
        mask = build_adjacency(*self.config.grid)
        for block, on in zip(self.blocks, flags):
            block.attn.mask = mask if on else None

    def set_smooth(self, smooth: bool = True, sharpness: float = 1.0) -> None:
        """Swap every step nonlinearity (and the stem max-pool) for a smooth stand-in."""
        self.bsps.smooth = smooth
        for _, mod in self.named_modules():
            if isinstance(mod, SpikingNeuron):
                mod.smooth = smooth
                mod.sharpness = sharpness

    def encode(self, x: Var) -> Var:
        """Final-block spikes (B, T, N, D) for a (B, T, C, H, W) batch."""
        u, _ = self.bsps.forward(x)
        s = self.s0_lif.forward(u)
        for block in self.blocks:
            s, u = block.forward(s, u)
        return s

    def forward(self, x: Var) -> Var:
        """Training graph on a (B, T, C, H, W) batch; returns (B, classes) logits."""
        return self.head.forward(self.encode(x))

    def run(self, frames: np.ndarray, ledger: EnergyLedger | None = None) -> np.ndarray:
        """Inference on one (T, C, H, W) sample with the addition-only engine."""
        u, _ = self.bsps.run(frames, ledger)
        s = self.s0_lif.run(u, ledger, "s0_lif")
        for i, block in enumerate(self.blocks):
            s, u = block.run(s, u, ledger, f"block{i}")
        return self.head.run(s, ledger)


def build_model(cfg: ModelConfig) -> BSViT:
    return BSViT(cfg)


def _as_frames(model: BSViT, image: np.ndarray) -> np.ndarray:
    cfg = model.config
    image = np.asarray(image, dtype=np.dtype(cfg.dtype))
    if image.ndim == 3:
        frames = np.repeat(image[None], cfg.timesteps, axis=0)
    elif image.ndim == 4:
        frames = image  # event frames already carry time
    else:
        raise DimensionError(f"expected (C, H, W) or (T, C, H, W) input, got shape {image.shape}")
    if frames.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
        raise DimensionError(
            f"input geometry {frames.shape[1:]} != configured {(cfg.in_channels, cfg.height, cfg.width)}")
    return frames


def infer(model: BSViT, image: np.ndarray, ledger: EnergyLedger | None = None) -> np.ndarray:
    """Class logits for one sample; the run's ledger lands in ``model.last_ledger``.

    A static (C, H, W) image is repeated over the configured timesteps; a
    (T, C, H, W) input is taken as event frames.  Neuron state starts fresh.
    """
    ledger = EnergyLedger() if ledger is None else ledger
    logits = model.run(_as_frames(model, image), ledger)
    model.last_ledger = ledger
    return logits


def infer_batch(model: BSViT, images: np.ndarray) -> tuple[np.ndarray, list[EnergyLedger]]:
    ledgers = [EnergyLedger() for _ in range(len(images))]
    logits = np.stack([infer(model, img, led) for img, led in zip(images, ledgers)])
    return logits, ledgers


def save_checkpoint(model: BSViT, path: str | Path) -> Path:
    from .data import save_tensors

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True))
    save_tensors(path, model.state_dict())
    return path


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> BSViT:
    """Load a checkpoint; ``config`` (if given) must agree with the stored one."""
    from .data import load_tensors

    path = Path(path)
    stored = ModelConfig.from_dict(json.loads((path / "config.json").read_text()))
    if config is not None:
        a, b = asdict(stored), asdict(config)
        # the mask carries no parameters, so it may differ between runs
        for key in ("mask_enabled", "mask_blocks", "seed"):
            a.pop(key), b.pop(key)
        if a != b:
            diff = sorted(k for k in a if a[k] != b[k])
            raise ConfigError(diff[0], "checkpoint/config mismatch")
        stored = config
    model = BSViT(stored)
    model.load_state_dict(load_tensors(path))
    model.eval()
    return model
