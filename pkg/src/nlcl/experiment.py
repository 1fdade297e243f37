"""Desk-scale experiment: synthetic data, a training run and its measurements."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, desk_config
from .metrics import cosine_separation, dump_embeddings, evaluate
from .rain_model import CropLoader, DatasetSpec, list_images, make_desk_dataset, read_image
from .trainer import derain, load_bundle, to_tensor, train


def read_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def distance_trend(distances: np.ndarray, fraction: float = 0.1) -> tuple[float, float]:
    """Mean of the first and the last ``fraction`` of a series."""
    k = max(1, int(round(len(distances) * fraction)))
    return float(np.mean(distances[:k])), float(np.mean(distances[-k:]))


def test_pairs(root):
    root = Path(root)
    for path in list_images(root / "test" / "rainy"):
        yield path.stem, read_image(path), read_image(root / "test" / "gt" / path.name)


def measure(run_dir, data_root, embed_n: int = 512) -> dict:
    """Held-out PSNR/SSIM, distance trend, self-consistency and embedding separation."""
    run_dir, data_root = Path(run_dir), Path(data_root)
    bundle = load_bundle(run_dir / "last.pt")
    cfg = TrainConfig.from_flat(json.loads(torch.load(run_dir / "last.pt", weights_only=False)["meta"])["config"])

    pairs = list(test_pairs(data_root))
    before = evaluate((n, o, gt) for n, o, gt in pairs)
    after = evaluate((n, derain(bundle, o)[0], gt) for n, o, gt in pairs)

    dist = read_log(run_dir / "log.csv")["mean_pos_dist"]
    first, last = distance_trend(dist)

    loader = CropLoader(DatasetSpec.from_root(data_root, cfg.crop), cfg.batch, cfg.seed)
    residuals = []
    with torch.no_grad():
        for rainy, _ in loader.epoch(0):
            o = to_tensor(rainy)
            residuals.append((bundle.gB(o) + bundle.gR(o) - o).abs().mean().item())

    rainy_train = np.stack(loader.rainy)
    labels, feats = dump_embeddings(bundle, rainy_train, cfg, run_dir / "embeddings.tsv", n=embed_n, seed=cfg.seed)
    intra, inter = cosine_separation(labels, feats)

    summary = {
        "psnr_input": before.mean_psnr, "psnr_output": after.mean_psnr,
        "ssim_input": before.mean_ssim, "ssim_output": after.mean_ssim,
        "pos_dist_first10": first, "pos_dist_last10": last,
        "self_consistency_l1": float(np.mean(residuals)),
        "cosine_intra": intra, "cosine_inter": inter,
        "iters": int(len(dist)),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def run_desk(workdir, cfg: TrainConfig | None = None, seed: int = 0) -> dict:
    """Generate the toy dataset, train, and measure; reuses a finished run in ``workdir``."""
    workdir = Path(workdir)
    cfg = cfg or desk_config(seed=seed)
    data = workdir / "data"
    if not (data / "test" / "gt").is_dir():
        make_desk_dataset(data, seed=seed)
    run = workdir / "run"
    last = run / "last.pt"
    done = False
    if last.exists():
        meta = json.loads(torch.load(last, weights_only=False)["meta"])
        done = meta["step"] >= cfg.iters and meta["config"] == cfg.to_flat()
    if not done:
        resume = None
        ckpts = sorted(run.glob("ckpt_*.pt"))
        if ckpts:
            meta = json.loads(torch.load(ckpts[-1], weights_only=False)["meta"])
            if meta["config"] == cfg.to_flat():
                resume = ckpts[-1]
        loader = CropLoader(DatasetSpec.from_root(data, cfg.crop), cfg.batch, cfg.seed)
        train(cfg, loader, run, resume=resume)
    return measure(run, data)
