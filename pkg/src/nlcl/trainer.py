"""Training loop, checkpoint/resume and background-only inference."""
from __future__ import annotations

import csv
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .config import TrainConfig, format_config
from .networks import (
    NetworkBundle, build_bundle, config_hash, load_flat_parameters, momentum_update,
    pool_patches, read_checkpoint, save_checkpoint,
)
from .sampling import build_grid, mean_positive_distance, sample_layer_contrast, sample_location_contrast

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "recon", "sparse", "adv_g", "adv_d", "layer_con", "loc_con", "total", "mean_pos_dist")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int
    bundle: NetworkBundle
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    distance_log: list = field(default_factory=list)


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


def init_state(cfg: TrainConfig) -> TrainState:
    set_deterministic(cfg.deterministic)
    torch.manual_seed(cfg.seed)
    bundle = build_bundle(cfg)
    betas = (cfg.beta1, cfg.beta2)
    opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=cfg.lr, betas=betas)
    opt_d = torch.optim.Adam(bundle.D.parameters(), lr=cfg.lr * cfg.d_lr_scale, betas=betas)
    return TrainState(0, bundle, opt_g, opt_d)


@contextmanager
def frozen(module: torch.nn.Module):
    """Let gradients pass through ``module`` without accumulating on its parameters."""
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, C)`` array -> ``(N, C, H, W)`` tensor."""
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def to_numpy(images: torch.Tensor) -> np.ndarray:
    return images.detach().permute(0, 2, 3, 1).cpu().numpy()


def _key_encoders(bundle: NetworkBundle, cfg: TrainConfig):
    live_b, live_r = bundle.layer_encoders()
    if cfg.key_encoder == "momentum" and cfg.layer_encoder == "discriminator":
        return bundle.emaD, bundle.emaD
    return live_b, live_r


def layer_contrast_loss(bundle, cfg, b, r, samples, index_map):
    """Layer contrast averaged over the batch; ``samples`` holds one LayerSample per element."""
    enc_b, enc_r = bundle.layer_encoders()
    key_b, key_r = _key_encoders(bundle, cfg)
    q_feats_b, q_feats_r = enc_b.encode(b), enc_r.encode(r)
    with torch.no_grad():
        k_feats_b, k_feats_r = key_b.encode(b.detach()), key_r.encode(r.detach())
    head = bundle.hLayer
    total = 0.0
    for i, s in enumerate(samples):
        pos_xy, neg_xy = index_map[s.positives], index_map[s.negatives]
        q_b = head(pool_patches(q_feats_b, pos_xy, cfg.patch, i))
        q_r = head(pool_patches(q_feats_r, neg_xy, cfg.patch, i))
        with torch.no_grad():
            k_b = head(pool_patches(k_feats_b, pos_xy, cfg.patch, i))
            k_r = head(pool_patches(k_feats_r, neg_xy, cfg.patch, i))
        pos_b, mask_b = L.group_positives(k_b, np.zeros(len(s.positives), np.int64))
        pos_r, mask_r = L.group_positives(k_r, s.negative_groups)
        total = total + L.layer_contrastive(
            q_b, pos_b, k_r, q_r, pos_r, k_b, cfg.weights.tau, cfg.contrast_mode, mask_b, mask_r
        )
    return total / len(samples)


def location_contrast_loss(bundle, cfg, o, b, samples, index_map):
    enc = bundle.gB
    q_feats = enc.encode(b)
    with torch.no_grad():
        k_feats = enc.encode(o)
    total = 0.0
    for i, s in enumerate(samples):
        v_b = bundle.hLoc(pool_patches(q_feats, index_map[s.queries], cfg.patch, i))
        with torch.no_grad():
            v_o_all = bundle.hLoc(pool_patches(k_feats, index_map, cfg.patch, i))
        total = total + L.location_contrastive(v_o_all[s.queries], v_b, v_o_all[s.negatives], cfg.weights.tau)
    return total / len(samples)


def _dump_batch(rainy, clean, step, dump_dir) -> Path:
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step:06d}.npz"
    np.savez(path, rainy=rainy, clean=clean)
    return path


def train_step(batch, state: TrainState, cfg: TrainConfig, dump_dir="."):
    """One iteration; returns ``(report, mean_positive_distance)`` and advances ``state``."""
    rainy, clean = batch
    bundle, w = state.bundle, cfg.weights
    o, real = to_tensor(rainy), to_tensor(clean)

    b = bundle.gB(o)
    r = bundle.gR(o)

    d_real = bundle.D(real)
    d_fake_det = bundle.D(b.detach())
    _, adv_d = L.gan_losses(d_fake_det, d_real, d_fake_det, cfg.gan_mode)
    state.opt_d.zero_grad(set_to_none=True)
    adv_d.backward()
    state.opt_d.step()

    rng = np.random.default_rng([cfg.seed, state.step, 17])
    b_np, r_np, o_np = to_numpy(b), to_numpy(r), np.asarray(rainy, np.float64)
    layer_samples = [sample_layer_contrast(b_np[i], r_np[i], cfg, rng) for i in range(len(b_np))]
    pos_dist = float(np.mean([
        mean_positive_distance(b_np[i], s.positives, cfg.patch, cfg.stride) for i, s in enumerate(layer_samples)
    ]))
    index_map = build_grid(o_np[0], cfg.patch, cfg.stride).index_map

    zero = torch.zeros(())
    with frozen(bundle.D):
        adv_g = L.gan_losses(bundle.D(b), d_real.detach(), d_fake_det.detach(), cfg.gan_mode)[0] if w.delta_adv else zero
        layer_con = layer_contrast_loss(bundle, cfg, b, r, layer_samples, index_map) if w.mu_layer else zero
    if w.sigma_loc:
        loc_samples = [sample_location_contrast(o_np[i], cfg, rng) for i in range(len(o_np))]
        loc_con = location_contrast_loss(bundle, cfg, o, b, loc_samples, index_map)
    else:
        loc_con = zero
    recon = L.reconstruction_loss(b, r, o)
    sparse = L.rain_sparsity(r)
    total = L.total_generator_loss(recon, sparse, adv_g, layer_con, loc_con, w)

    if not (torch.isfinite(total) and torch.isfinite(adv_d)):
        path = _dump_batch(rainy, clean, state.step, dump_dir)
        raise TrainingError(
            f"non-finite loss at step {state.step}: recon={float(recon.detach())} sparse={float(sparse.detach())} "
            f"adv_g={float(adv_g.detach())} adv_d={float(adv_d.detach())} layer_con={float(layer_con.detach())} "
            f"loc_con={float(loc_con.detach())}; batch saved to {path}"
        )

    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()

    momentum_update(bundle.D.trunk.parameters(), bundle.emaD.parameters(), cfg.momentum)

    report = L.LossReport(*(float(t.detach()) for t in (recon, sparse, adv_g, adv_d, layer_con, loc_con, total)))
    state.distance_log.append((state.step, pos_dist))
    state.step += 1
    return report, pos_dist


# --------------------------------------------------------------------------
# checkpoints and the outer loop


def checkpoint_meta(state: TrainState, cfg: TrainConfig) -> dict:
    return {"step": state.step, "config_hash": config_hash(cfg.to_flat()), "config": cfg.to_flat()}


def save_state(path, state: TrainState, cfg: TrainConfig) -> None:
    extra = {
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "distance_log": list(state.distance_log),
    }
    save_checkpoint(path, state.bundle, checkpoint_meta(state, cfg), extra)


def load_state(path, cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    params, meta, extra = read_checkpoint(path)
    if cfg is None:
        cfg = TrainConfig.from_flat(meta["config"])
    state = init_state(cfg)
    load_flat_parameters(state.bundle, params)
    if "opt_g" in extra:
        state.opt_g.load_state_dict(extra["opt_g"])
        state.opt_d.load_state_dict(extra["opt_d"])
    state.distance_log = [tuple(x) for x in extra.get("distance_log", [])]
    state.step = int(meta["step"])
    return state, cfg


def load_bundle(path) -> NetworkBundle:
    params, meta, _ = read_checkpoint(path)
    cfg = TrainConfig.from_flat(meta["config"])
    bundle = build_bundle(cfg)
    load_flat_parameters(bundle, params)
    bundle.eval()
    return bundle


def _open_log(path: Path, resume_step: int):
    rows = []
    if resume_step and path.exists():
        with path.open(newline="") as fh:
            rows = [row for row in csv.DictReader(fh) if int(row["step"]) < resume_step]
    fh = path.open("w", newline="")
    writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
    writer.writeheader()
    writer.writerows(rows)
    return fh, writer


def train(cfg: TrainConfig, loader, out_dir, resume=None, progress_every: int = 50) -> TrainState:
    """Run ``cfg.iters`` steps from scratch or from a checkpoint.

    Writes ``config.txt``, ``log.csv`` (one row per step), ``ckpt_<step>.pt``
    every ``cfg.checkpoint_every`` steps and ``last.pt``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    state = load_state(resume, cfg)[0] if resume else init_state(cfg)

    def checkpoint(name):
        try:
            save_state(out / name, state, cfg)
        except OSError as exc:
            raise TrainingError(f"checkpoint write failed at step {state.step}: {exc}") from exc

    if state.step == 0:
        checkpoint(f"ckpt_{0:06d}.pt")
    fh, writer = _open_log(out / "log.csv", state.step)
    t0, start = time.time(), state.step
    try:
        while state.step < cfg.iters:
            step = state.step
            report, dist = train_step(loader.batch_at(step), state, cfg, dump_dir=out)
            writer.writerow({"step": step, **report.as_dict(), "mean_pos_dist": dist})
            if state.step % progress_every == 0:
                fh.flush()
                log.info("step %d/%d total=%.4f recon=%.5f adv_g=%.3f adv_d=%.3f layer=%.3f loc=%.3f "
                         "pos_dist=%.3f (%.2fs/it)", state.step, cfg.iters, report.total, report.recon,
                         report.adv_g, report.adv_d, report.layer_con, report.loc_con, dist,
                         (time.time() - t0) / (state.step - start))
            if state.step % cfg.checkpoint_every == 0:
                checkpoint(f"ckpt_{state.step:06d}.pt")
    finally:
        fh.close()
    checkpoint("last.pt")
    return state


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def derain(bundle: NetworkBundle, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Background ``G_B(O)`` and residual rain ``clip(O - B)`` for one ``H x W x C`` image.

    Sides are padded up to a multiple of 4 (minimum 8) and cropped back.
    """
    image = np.asarray(image, np.float32)
    if image.ndim != 3 or not np.all(np.isfinite(image)):
        raise ValueError("expected a finite H x W x C image")
    h, w = image.shape[:2]
    # multiples of 4, and at least 8 so the stride-4 features can be reflect-padded
    ph, pw = max(8, h + (-h) % 4) - h, max(8, w + (-w) % 4) - w
    x = to_tensor(image[None])
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = torch.nn.functional.pad(x, (0, pw, 0, ph), mode=mode)
    b = to_numpy(bundle.gB(x))[0, :h, :w]
    return b, np.clip(image - b, 0.0, 1.0)
