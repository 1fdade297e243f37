"""Additive rain model, a synthetic desk-scale rain dataset and crop loaders.

Images are ``H x W x C`` float32 arrays with intensities in ``[0, 1]``.
"""
from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

IMAGE_SUFFIXES = (".png",)


class DatasetError(RuntimeError):
    """Raised for an unusable dataset directory or image file."""


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def compose(background: np.ndarray, rain: np.ndarray) -> np.ndarray:
    """Rainy observation ``clamp(B + R, 0, 1)``."""
    _check_same_shape(background, rain)
    return np.clip(background + rain, 0.0, 1.0)


@dataclass(frozen=True)
class StreakParams:
    angle: float = 0.0  # degrees from vertical
    density: float = 0.05
    length: int = 5
    intensity: float = 0.8
    veiling: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -45.0 <= self.angle <= 45.0:
            raise ValueError(f"angle {self.angle} outside [-45, 45]")
        if not 0.0 <= self.density <= 0.2:
            raise ValueError(f"density {self.density} outside [0, 0.2]")
        if int(self.length) != self.length or self.length < 3:
            raise ValueError(f"length must be an integer >= 3, got {self.length}")
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity {self.intensity} outside (0, 1]")
        if not 0.0 <= self.veiling <= 0.5:
            raise ValueError(f"veiling {self.veiling} outside [0, 0.5]")


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Unit-weight line of ``length`` taps tilted ``angle`` degrees from vertical.

    Taps are snapped to the nearest pixel, so the kernel sums to ``length``.
    """
    size = length + 2 if length % 2 else length + 3
    centre = size // 2
    theta = np.deg2rad(angle)
    t = np.linspace(-(length - 1) / 2, (length - 1) / 2, length)
    cols = np.rint(centre + t * np.sin(theta)).astype(int)
    rows = np.rint(centre + t * np.cos(theta)).astype(int)
    kernel = np.zeros((size, size), np.float32)
    np.add.at(kernel, (rows, cols), 1.0)
    return kernel


def synthesize_streaks(h: int, w: int, params: StreakParams, channels: int = 3) -> np.ndarray:
    """Render an achromatic rain layer of oriented streaks plus a veiling offset.

    Exactly ``round(density * h * w)`` impulses with amplitudes in
    ``[0.5, 1] * intensity`` are smeared along a motion kernel.
    """
    if h < params.length or w < params.length:
        raise ValueError(f"image {h}x{w} smaller than streak length {params.length}")
    rng = np.random.default_rng(params.seed)
    n = int(round(params.density * h * w))
    impulses = np.zeros(h * w, np.float32)
    if n:
        where = rng.choice(h * w, size=n, replace=False)
        impulses[where] = params.intensity * rng.uniform(0.5, 1.0, size=n)
    impulses = impulses.reshape(h, w)
    kernel = motion_kernel(params.length, params.angle)
    streaks = cv2.filter2D(impulses, -1, kernel, borderType=cv2.BORDER_CONSTANT)
    layer = np.clip(np.clip(streaks, 0.0, 1.0) + params.veiling, 0.0, 1.0)
    return np.repeat(layer[:, :, None], channels, axis=2).astype(np.float32)


def procedural_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Piecewise-smooth synthetic clean image (gradient, shapes, stripes)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    c0, c1 = rng.uniform(0.1, 0.6, size=(2, 3))
    direction = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(direction) * xx / w + np.sin(direction) * yy / h + 1) / 2
    img = (c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]).astype(np.float32)

    for _ in range(rng.integers(5, 10)):
        colour = tuple(float(v) for v in rng.uniform(0.05, 0.7, 3))
        x0, y0 = int(rng.integers(0, w)), int(rng.integers(0, h))
        if rng.random() < 0.5:
            x1 = int(np.clip(x0 + rng.integers(-w // 2, w // 2), 0, w - 1))
            y1 = int(np.clip(y0 + rng.integers(-h // 2, h // 2), 0, h - 1))
            cv2.rectangle(img, (x0, y0), (x1, y1), colour, thickness=-1)
        else:
            axes = (int(rng.integers(4, w // 3)), int(rng.integers(4, h // 3)))
            cv2.ellipse(img, (x0, y0), axes, float(rng.uniform(0, 180)), 0, 360, colour, -1)

    # one horizontal-ish striped region, distinct from near-vertical rain
    period = rng.uniform(6, 14)
    phase = rng.uniform(0, 2 * np.pi)
    stripes = 0.08 * np.sin(2 * np.pi * yy / period + phase)
    mask = np.zeros((h, w), np.float32)
    cx, cy = int(rng.integers(0, w)), int(rng.integers(0, h))
    cv2.circle(mask, (cx, cy), int(rng.integers(h // 6, h // 2)), 1.0, -1)
    img += (stripes * mask)[..., None]
    img = cv2.GaussianBlur(img, (0, 0), 0.8)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# image files


def read_image(path: str | Path) -> np.ndarray:
    """Decode an 8- or 16-bit image file to an RGB float32 array in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot decode image: {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float32) / 65535.0
    else:
        raise DatasetError(f"unsupported pixel type {raw.dtype}: {path}")
    if img.ndim == 2:
        img = img[:, :, None]
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    if img.shape[2] == 3:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def write_image(path: str | Path, img: np.ndarray, bits: int = 8) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    peak = {8: 255, 16: 65535}[bits]
    data = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    if data.ndim == 3 and data.shape[2] == 3:
        data = data[:, :, ::-1]
    if not cv2.imwrite(str(path), data):
        raise OSError(f"failed to write {path}")


def list_images(folder: str | Path) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"not a directory: {folder}")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DatasetError(f"no images in {folder}")
    return files


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DatasetSpec:
    rainy_dir: Path
    clean_dir: Path
    crop: int = 256
    split: str = "train"

    @classmethod
    def from_root(cls, root: str | Path, crop: int = 256) -> "DatasetSpec":
        root = Path(root)
        return cls(root / "rainy", root / "clean", crop, "train")


def _load_pool(folder: Path, crop: int) -> tuple[list[Path], list[np.ndarray]]:
    files = list_images(folder)
    images = []
    for f in files:
        img = read_image(f)
        if min(img.shape[:2]) < crop:
            raise DatasetError(f"{f}: size {img.shape[1]}x{img.shape[0]} smaller than crop {crop}")
        images.append(img)
    return files, images


class CropLoader:
    """Random unaugmented crops from a rainy pool and an unpaired clean pool.

    Every batch is a pure function of ``(seed, step)``, so a training run can
    be resumed at any step without replaying the stream.
    """

    def __init__(self, spec: DatasetSpec, batch: int, seed: int = 0):
        if batch < 1:
            raise ValueError("batch must be >= 1")
        self.spec = spec
        self.batch = batch
        self.seed = seed
        self.rainy_files, self.rainy = _load_pool(Path(spec.rainy_dir), spec.crop)
        self.clean_files, self.clean = _load_pool(Path(spec.clean_dir), spec.crop)
        if len(self.rainy) < batch:
            raise DatasetError(f"{len(self.rainy)} rainy images < batch {batch}")

    @property
    def batches_per_epoch(self) -> int:
        return len(self.rainy) // self.batch

    def _crop(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        c = self.spec.crop
        top = int(rng.integers(0, img.shape[0] - c + 1))
        left = int(rng.integers(0, img.shape[1] - c + 1))
        return img[top:top + c, left:left + c]

    def indices_at(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.batches_per_epoch)
        perm = np.random.default_rng([self.seed, epoch, 0]).permutation(len(self.rainy))
        return perm[pos * self.batch:(pos + 1) * self.batch]

    def batch_at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices_at(step)
        rng = np.random.default_rng([self.seed, step, 1])
        rainy = np.stack([self._crop(self.rainy[i], rng) for i in idx])
        clean_idx = rng.choice(len(self.clean), size=self.batch, replace=len(self.clean) < self.batch)
        clean = np.stack([self._crop(self.clean[i], rng) for i in clean_idx])
        return rainy, clean

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        start = epoch * self.batches_per_epoch
        for step in range(start, start + self.batches_per_epoch):
            yield self.batch_at(step)

    def stream(self, start: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        step = start
        while True:
            yield self.batch_at(step)
            step += 1

    __iter__ = stream


def load_crops(spec: DatasetSpec, batch: int, seed: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    return CropLoader(spec, batch, seed).stream()


_DONE = object()


def prefetch(iterable, depth: int = 2):
    """Run ``iterable`` in a producer thread; each item is delivered once."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def produce():
        try:
            for item in iterable:
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            q.put(exc)
            return
        q.put(_DONE)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()


def make_desk_dataset(
    root: str | Path,
    n_train: int = 16,
    n_clean: int = 16,
    n_test: int = 4,
    size: int = 96,
    rain: StreakParams = StreakParams(density=0.05, intensity=0.8, veiling=0.1, length=5),
    max_angle: float = 30.0,
    seed: int = 0,
) -> Path:
    """Write the synthetic layout ``rainy/``, ``clean/``, ``test/{rainy,gt}/``.

    Rainy, clean-pool and test scenes come from disjoint seed ranges, so the
    clean pool never contains the ground truth of a rainy image.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)

    def rainy_version(scene_seed: int) -> tuple[np.ndarray, np.ndarray]:
        clean = procedural_scene(size, size, scene_seed)
        params = replace(rain, angle=float(rng.uniform(-max_angle, max_angle)), seed=scene_seed + 7919)
        return compose(clean, synthesize_streaks(size, size, params, clean.shape[2])), clean

    base = 1_000_000 * (seed + 1)
    for i in range(n_train):
        rainy, _ = rainy_version(base + i)
        write_image(root / "rainy" / f"{i:04d}.png", rainy)
    for i in range(n_clean):
        write_image(root / "clean" / f"{i:04d}.png", procedural_scene(size, size, base + 100_000 + i))
    for i in range(n_test):
        rainy, clean = rainy_version(base + 200_000 + i)
        write_image(root / "test" / "rainy" / f"{i:04d}.png", rainy)
        write_image(root / "test" / "gt" / f"{i:04d}.png", clean)
    return root


def as_batch(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([np.asarray(im, np.float32) for im in images])
