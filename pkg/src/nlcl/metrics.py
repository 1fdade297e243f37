"""PSNR / SSIM and embedding dumps for analysis."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

K1, K2 = 0.01, 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 Y channel of an RGB image in [0, 1]."""
    img = np.asarray(img, np.float64)
    y = (65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2] + 16.0) / 255.0
    return y[..., None]


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained window of a single-channel pair."""
    a, b = _pair(a, b)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image side below SSIM window {SSIM_WINDOW}")
    g = gaussian_window()
    pad = SSIM_WINDOW // 2

    def blur(x):
        out = cv2.sepFilter2D(x, cv2.CV_64F, g, g, borderType=cv2.BORDER_REFLECT)
        return out[pad:-pad, pad:-pad]

    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM (11-tap Gaussian, sigma 1.5); colour images average per-channel scores."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        return float(ssim_map(a, b, data_range).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c], data_range).mean() for c in range(a.shape[2])]))


@dataclass
class MetricResult:
    per_image: list = field(default_factory=list)  # (name, psnr, ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for _, p, _ in self.per_image]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.per_image]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["name", "psnr", "ssim"])
            for name, p, s in self.per_image:
                w.writerow([name, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])


def evaluate(pairs, luma: bool = False) -> MetricResult:
    """``pairs`` yields ``(name, estimate, reference)``."""
    result = MetricResult()
    for name, est, ref in pairs:
        if luma:
            est, ref = to_luma(est), to_luma(ref)
        result.per_image.append((name, psnr(est, ref), ssim(est, ref)))
    return result


# --------------------------------------------------------------------------
# embeddings


@torch.no_grad()
def embed_layers(bundle, rainy: np.ndarray, cfg, n: int, rng: np.random.Generator):
    """Layer-contrast embeddings of ``n`` patches from the estimated layers of ``rainy``.

    Returns ``(labels, features)``; background rows come first, the odd
    remainder goes to the background class.
    """
    from .networks import pool_patches
    from .sampling import build_grid
    from .trainer import to_tensor

    rainy = np.asarray(rainy, np.float32)
    if rainy.ndim == 3:
        rainy = rainy[None]
    o = to_tensor(rainy)
    b, r = bundle.gB(o), bundle.gR(o)
    enc_b, enc_r = bundle.layer_encoders()
    grid = build_grid(rainy[0], cfg.patch, cfg.stride)
    n_rain = n // 2
    rows, labels = [], []
    for label, count, enc, img in (("background", n - n_rain, enc_b, b), ("rain", n_rain, enc_r, r)):
        if not count:
            continue
        feats = enc.encode(img)
        image_idx = rng.integers(0, len(rainy), size=count)
        patch_idx = rng.integers(0, grid.count, size=count)
        for i in np.unique(image_idx):
            sel = patch_idx[image_idx == i]
            rows.append(bundle.hLayer(pool_patches(feats, grid.index_map[sel], cfg.patch, int(i))))
            labels += [label] * len(sel)
    return labels, torch.cat(rows).numpy()


def dump_embeddings(bundle, images, cfg, path, n: int = 512, seed: int = 0):
    """Write ``label f0 .. f{d-1}`` tab-separated rows for external projection."""
    labels, feats = embed_layers(bundle, images, cfg, n, np.random.default_rng(seed))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write("\t".join(["label", *(f"f{i}" for i in range(feats.shape[1]))]) + "\n")
        for label, row in zip(labels, feats):
            fh.write(label + "\t" + "\t".join(f"{v:.7g}" for v in row) + "\n")
    return labels, feats


def read_embeddings(path):
    labels, rows = [], []
    with open(path) as fh:
        next(fh)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            labels.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    return labels, np.asarray(rows)


def cosine_separation(labels, feats) -> tuple[float, float]:
    """Mean intra-class and inter-class cosine similarity (self-pairs excluded)."""
    labels = np.asarray(labels)
    f = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    sim = f @ f.T
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    return float(sim[same & off_diag].mean()), float(sim[~same].mean())
