"""Generators, PatchGAN discriminator, projection heads and the EMA key encoder."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = 1
BUNDLE_PARTS = ("gB", "gR", "D", "emaD", "hLayer", "hLoc")

Features = list[tuple[torch.Tensor, int]]  # (N x C x h x w activation, pixel stride)


def init_weights(net: nn.Module, gain: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Two stride-2 downsamples, residual blocks, two upsamples.

    Inputs and outputs live in [0, 1]. The head emits ``tanh(y)`` in [-1, 1];
    with ``residual_input`` it is added to the input (near-identity at init),
    otherwise it is used directly (the rain branch). Either way the result is
    clamped to [0, 1], which also keeps the rain layer non-negative.
    """

    def __init__(self, channels: int = 3, width: int = 64, n_blocks: int = 9, residual_input: bool = True):
        super().__init__()
        if channels < 1 or width < 1 or n_blocks < 0:
            raise ValueError("channels and width must be >= 1, n_blocks >= 0")
        self.residual_input = residual_input
        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(channels, width, 7), nn.InstanceNorm2d(width), nn.ReLU(True)
        )
        self.down1 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(2 * width), nn.ReLU(True)
        )
        self.down2 = nn.Sequential(
            nn.Conv2d(2 * width, 4 * width, 3, stride=2, padding=1, padding_mode="reflect"), nn.InstanceNorm2d(4 * width), nn.ReLU(True)
        )
        self.blocks = nn.Sequential(*[ResnetBlock(4 * width) for _ in range(n_blocks)])
        # resize-then-convolve avoids the checkerboard of strided transposed convolutions
        self.up1 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(4 * width, 2 * width, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(2 * width), nn.ReLU(True),
        )
        self.up2 = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * width, width, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(width), nn.ReLU(True),
        )
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(width, channels, 7))
        self.feature_dim = 6 * width
        init_weights(self)
        # start at background = input, rain = 0
        nn.init.normal_(self.head[1].weight, 0.0, 1e-3)

    def encode(self, x: torch.Tensor) -> Features:
        """Downsampling-half activations at pixel strides 2 and 4."""
        h1 = self.down1(self.stem(2 * x - 1))
        h2 = self.down2(h1)
        return [(h1, 2), (h2, 4)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by 4")
        y = self.head(self.up2(self.up1(self.blocks(self.down2(self.down1(self.stem(2 * x - 1)))))))
        out = torch.tanh(y)
        if self.residual_input:
            out = out + x
        return bounded(out)


def bounded(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass, identity in the backward pass.

    A hard clamp would leave saturated pixels without gradient for good.
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


class DiscriminatorTrunk(nn.Module):
    """Three stride-2 convolutions shared by the GAN score head and the layer encoder."""

    def __init__(self, channels: int = 3, width: int = 64):
        super().__init__()
        self.conv1 = nn.Sequential(nn.Conv2d(channels, width, 4, 2, 1, padding_mode="reflect"), nn.LeakyReLU(0.2, True))
        self.conv2 = nn.Sequential(
            nn.Conv2d(width, 2 * width, 4, 2, 1, padding_mode="reflect"), nn.InstanceNorm2d(2 * width), nn.LeakyReLU(0.2, True)
        )
        self.conv3 = nn.Sequential(
            nn.Conv2d(2 * width, 4 * width, 4, 2, 1, padding_mode="reflect"), nn.InstanceNorm2d(4 * width), nn.LeakyReLU(0.2, True)
        )
        self.feature_dim = 6 * width

    def encode(self, x: torch.Tensor) -> Features:
        """Activations at pixel strides 4 and 8."""
        h2 = self.conv2(self.conv1(2 * x - 1))
        h3 = self.conv3(h2)
        return [(h2, 4), (h3, 8)]

    def forward(self, x):
        return self.encode(x)[-1][0]


class PatchDiscriminator(nn.Module):
    """70x70 PatchGAN: returns a map of raw real/fake scores, one per receptive patch."""

    def __init__(self, channels: int = 3, width: int = 64):
        super().__init__()
        self.trunk = DiscriminatorTrunk(channels, width)
        self.tail = nn.Sequential(
            nn.Conv2d(4 * width, 8 * width, 4, 1, 1, padding_mode="reflect"), nn.InstanceNorm2d(8 * width), nn.LeakyReLU(0.2, True),
            nn.Conv2d(8 * width, 1, 4, 1, 1, padding_mode="reflect"),
        )
        init_weights(self)

    def forward(self, x):
        return self.tail(self.trunk(x))


class ProjectionHead(nn.Module):
    """Two-layer MLP; outputs are L2-normalised."""

    def __init__(self, in_dim: int, dim: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_dim, dim), nn.ReLU(True), nn.Linear(dim, dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.xavier_normal_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return F.normalize(self.mlp(x), dim=-1, eps=1e-12)


def receptive_field(kernels: Sequence[int], strides: Sequence[int]) -> int:
    rf = 1
    for k, s in reversed(list(zip(kernels, strides))):
        rf = (rf - 1) * s + k
    return rf


# --------------------------------------------------------------------------
# patch pooling


def pool_patches(features: Features, coords, patch: int, batch_index: int = 0) -> torch.Tensor:
    """Average each feature map over the footprint of every patch and concatenate.

    ``coords`` is an ``(n, 2)`` array of top-left pixel ``(row, col)``. The
    footprint at stride ``s`` is cells ``[r // s, ceil((r + P) / s))``, clipped
    to the map; box sums come from a summed-area table.
    """
    coords = torch.as_tensor(np.asarray(coords), dtype=torch.long)
    out = []
    for fmap, stride in features:
        f = fmap[batch_index]
        c, h, w = f.shape
        sat = F.pad(f.cumsum(1).cumsum(2), (1, 0, 1, 0))
        r0 = (coords[:, 0] // stride).clamp(0, h - 1)
        c0 = (coords[:, 1] // stride).clamp(0, w - 1)
        r1 = torch.maximum(-(-(coords[:, 0] + patch) // stride), r0 + 1).clamp(max=h)
        c1 = torch.maximum(-(-(coords[:, 1] + patch) // stride), c0 + 1).clamp(max=w)
        total = sat[:, r1, c1] - sat[:, r0, c1] - sat[:, r1, c0] + sat[:, r0, c0]
        area = ((r1 - r0) * (c1 - c0)).to(total.dtype)
        out.append((total / area).T)
    return torch.cat(out, dim=1)


def _as_tensor_image(image) -> torch.Tensor:
    if isinstance(image, np.ndarray):
        t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
        t = t.permute(2, 0, 1) if t.ndim == 3 else t[None]
        return t[None]
    return image if image.ndim == 4 else image[None]


def _encode(encoder, head, image, indices, grid) -> torch.Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    grid.check_index(indices)
    feats = encoder.encode(_as_tensor_image(image))
    return head(pool_patches(feats, grid.index_map[indices], grid.patch))


def encode_layer(trunk, image, patch_indices, grid, head) -> torch.Tensor:
    """Unit-norm layer-contrast embeddings, one row per patch index."""
    return _encode(trunk, head, image, patch_indices, grid)


def encode_location(encoder, image, location_indices, grid, head) -> torch.Tensor:
    """Unit-norm location-contrast embeddings from a generator's downsampling half."""
    return _encode(encoder, head, image, location_indices, grid)


@torch.no_grad()
def momentum_update(live_params: Iterable[torch.Tensor], ema_params: Iterable[torch.Tensor], m: float) -> None:
    """In place ``ema <- m * ema + (1 - m) * live``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum {m} outside [0, 1]")
    live_params, ema_params = list(live_params), list(ema_params)
    if len(live_params) != len(ema_params):
        raise ValueError("parameter lists differ in length")
    for live, ema in zip(live_params, ema_params):
        if live.shape != ema.shape:
            raise ValueError(f"parameter shape mismatch {tuple(live.shape)} vs {tuple(ema.shape)}")
        ema.mul_(m).add_(live.detach(), alpha=1.0 - m)


# --------------------------------------------------------------------------
# bundle


@dataclass(frozen=True)
class NetworkSpec:
    channels: int = 3
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    head_dim: int = 256
    layer_encoder: str = "discriminator"


LAYER_ENCODERS = ("discriminator", "image_generator", "image_rain_generator")


class NetworkBundle(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        if spec.layer_encoder not in LAYER_ENCODERS:
            raise ValueError(f"unknown layer encoder {spec.layer_encoder!r}")
        self.spec = spec
        self.gB = ResnetGenerator(spec.channels, spec.ngf, spec.n_blocks, residual_input=True)
        self.gR = ResnetGenerator(spec.channels, spec.ngf, spec.n_blocks, residual_input=False)
        self.D = PatchDiscriminator(spec.channels, spec.ndf)
        self.emaD = copy.deepcopy(self.D.trunk)
        self.emaD.requires_grad_(False)
        layer_dim = self.D.trunk.feature_dim if spec.layer_encoder == "discriminator" else self.gB.feature_dim
        self.hLayer = ProjectionHead(layer_dim, spec.head_dim)
        self.hLoc = ProjectionHead(self.gB.feature_dim, spec.head_dim)

    def layer_encoders(self) -> tuple[nn.Module, nn.Module]:
        """Live encoders for background and rain patches."""
        if self.spec.layer_encoder == "discriminator":
            return self.D.trunk, self.D.trunk
        if self.spec.layer_encoder == "image_generator":
            return self.gB, self.gB
        return self.gB, self.gR

    def generator_parameters(self):
        return [*self.gB.parameters(), *self.gR.parameters(), *self.hLayer.parameters(), *self.hLoc.parameters()]


def build_bundle(cfg) -> NetworkBundle:
    """Build from any object exposing the :class:`NetworkSpec` field names."""
    spec = NetworkSpec(**{k: getattr(cfg, k) for k in NetworkSpec.__dataclass_fields__ if hasattr(cfg, k)})
    return NetworkBundle(spec)


# --------------------------------------------------------------------------
# checkpoints


def flat_parameters(bundle: NetworkBundle) -> dict[str, torch.Tensor]:
    """``{part}/{layer}/{param}`` -> tensor for every parameter and buffer."""
    flat = {}
    for part in BUNDLE_PARTS:
        for name, t in getattr(bundle, part).state_dict().items():
            layer, _, param = name.rpartition(".")
            flat[f"{part}/{layer}/{param}"] = t.detach().clone()
    return flat


def load_flat_parameters(bundle: NetworkBundle, flat: dict[str, torch.Tensor]) -> None:
    for part in BUNDLE_PARTS:
        prefix = part + "/"
        state = {}
        for key, t in flat.items():
            if key.startswith(prefix):
                layer, param = key[len(prefix):].rsplit("/", 1)
                state[f"{layer}.{param}" if layer else param] = t
        getattr(bundle, part).load_state_dict(state)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_checkpoint(path: str | Path, bundle: NetworkBundle, meta: dict, extra: dict | None = None) -> None:
    """One archive: parameters, JSON metadata and optional training state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": CHECKPOINT_FORMAT, **meta}
    archive = {"params": flat_parameters(bundle), "meta": json.dumps(meta, sort_keys=True), "state": extra or {}}
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        torch.save(archive, tmp)
        tmp.replace(path)
    except OSError:
        tmp.unlink(missing_ok=True)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    archive = torch.load(Path(path), map_location="cpu", weights_only=False)
    meta = json.loads(archive["meta"])
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    return archive["params"], meta, archive.get("state", {})
