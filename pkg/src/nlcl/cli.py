"""Command line entry point: ``nlcl <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import TrainConfig, desk_config, format_config, load_config

log = logging.getLogger("nlcl")

SAMPLING_CELLS = [
    ("random", "random"), ("neighbour", "random"), ("neighbour", "neighbour"),
    ("nonlocal", "random"), ("random", "nonlocal"), ("nonlocal", "nonlocal"),
]
ENCODER_CELLS = ["image_generator", "image_rain_generator", "discriminator"]
COUNT_POS = [4, 8, 16, 32]
COUNT_NEG = [64, 128, 256, 512]
LOSS_REMOVALS = {
    "no_adv": "delta_adv",
    "no_l1": "lambda_sparse",
    "no_loccon": "sigma_loc",
    "no_layercon": "mu_layer",
}
AXES = ("sampling", "encoder", "counts", "losses")


def ablation_cells(axis: str, base: TrainConfig) -> dict[str, TrainConfig]:
    """Named configurations for one ablation axis."""
    if axis == "sampling":
        return {f"pos-{p}_neg-{n}": base.replace(pos_strategy=p, neg_strategy=n) for p, n in SAMPLING_CELLS}
    if axis == "encoder":
        return {e: base.replace(layer_encoder=e) for e in ENCODER_CELLS}
    if axis == "counts":
        return {f"pos{p}_neg{n}": base.replace(n_pos=p, n_neg=n) for p in COUNT_POS for n in COUNT_NEG}
    if axis == "losses":
        return {name: base.replace(**{key: 0.0}) for name, key in LOSS_REMOVALS.items()}
    raise ValueError(f"unknown axis {axis!r}")


def ablation_base() -> TrainConfig:
    # stride 2 so a 96 crop holds 1681 patches, enough for 512 negatives
    return desk_config(stride=2)


def _data_root(args, out: Path) -> Path:
    from .rain_model import make_desk_dataset

    if args.data:
        return Path(args.data)
    root = out / "data"
    if not (root / "rainy").is_dir():
        make_desk_dataset(root, seed=0)
    return root


def cmd_synth(args):
    from .rain_model import StreakParams, make_desk_dataset

    rain = StreakParams(density=args.density, intensity=args.intensity, veiling=args.veiling, length=args.length)
    make_desk_dataset(args.out, args.n_train, args.n_clean, args.n_test, args.size, rain, seed=args.seed)
    print(f"wrote dataset to {args.out}")


def cmd_train(args):
    from .rain_model import CropLoader, DatasetSpec
    from .trainer import train

    cfg = load_config(args.config) if args.config else desk_config()
    if args.iters is not None:
        cfg = cfg.replace(iters=args.iters)
    loader = CropLoader(DatasetSpec.from_root(args.data, cfg.crop), cfg.batch, cfg.seed)
    state = train(cfg, loader, args.out, resume=args.resume)
    print(f"finished at step {state.step}; checkpoint {Path(args.out) / 'last.pt'}")


def cmd_derain(args):
    from .rain_model import list_images, read_image, write_image
    from .trainer import derain, load_bundle

    bundle = load_bundle(args.ckpt)
    src = Path(args.input)
    files = list_images(src) if src.is_dir() else [src]
    out = Path(args.out)
    for f in files:
        b, r = derain(bundle, read_image(f))
        write_image(out / f"{f.stem}.png", b)
        if args.save_rain:
            write_image(out / f"{f.stem}_rain.png", r)
    print(f"derained {len(files)} image(s) into {out}")


def cmd_eval(args):
    from .metrics import evaluate
    from .rain_model import list_images, read_image
    from .trainer import derain, load_bundle

    wanted = [m.strip().lower() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in ("psnr", "ssim", "niqe"):
            raise SystemExit(f"unknown metric {m!r}")
    if "niqe" in wanted:
        print("niqe: unavailable")
    bundle = load_bundle(args.ckpt)
    root = Path(args.data) / "test"
    pairs = (
        (f.stem, derain(bundle, read_image(f))[0], read_image(root / "gt" / f.name))
        for f in list_images(root / "rainy")
    )
    result = evaluate(pairs, luma=args.luma)
    if args.out:
        result.write_csv(args.out)
    cols = [m for m in ("psnr", "ssim") if m in wanted]
    print(",".join(["name", *cols]))
    for name, p, s in result.per_image + [("mean", result.mean_psnr, result.mean_ssim)]:
        vals = {"psnr": f"{p:.4f}", "ssim": f"{s:.4f}"}
        print(",".join([name, *(vals[c] for c in cols)]))


def cmd_ablate(args):
    from .rain_model import CropLoader, DatasetSpec
    from .trainer import train

    out = Path(args.out)
    base = load_config(args.base) if args.base else ablation_base()
    base = base.replace(iters=args.iters, checkpoint_every=max(1, args.iters))
    cells = ablation_cells(args.axis, base)
    data = None if args.no_run else _data_root(args, out)
    index = {}
    for name, cfg in cells.items():
        cell = out / args.axis / name
        cell.mkdir(parents=True, exist_ok=True)
        (cell / "config.txt").write_text(format_config(cfg))
        status = "written"
        if data is not None:
            loader = CropLoader(DatasetSpec.from_root(data, cfg.crop), cfg.batch, cfg.seed)
            train(cfg, loader, cell / "run")
            status = "ok"
        index[name] = status
        print(f"{args.axis}/{name}: {status}")
    (out / args.axis / "cells.json").write_text(json.dumps(index, indent=2))


def cmd_plot(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    if args.log:
        from .experiment import read_log

        data = read_log(args.log)
        keys = ["recon", "sparse", "adv_g", "adv_d", "layer_con", "loc_con", "total"]
        fig, axes = plt.subplots(1, 2, figsize=(11, 4))
        for k in keys:
            axes[0].plot(data["step"], data[k], label=k, lw=0.8)
        axes[0].set_xlabel("step")
        axes[0].set_title("losses")
        axes[0].legend(fontsize=7)
        axes[1].plot(data["step"], data["mean_pos_dist"], lw=0.8)
        axes[1].set_xlabel("step")
        axes[1].set_title("mean positive patch distance")
        fig.tight_layout()
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=120)
        plt.close(fig)
        print(f"wrote {out}")
    if args.matches:
        write_matches(args, out, plt)


def write_matches(args, out: Path, plt):
    from .rain_model import read_image
    from .sampling import build_grid, topk_dissimilar, topk_similar

    img = read_image(args.matches)
    grid = build_grid(img, args.patch, args.stride)
    rng = np.random.default_rng(args.seed)
    queries = rng.choice(grid.count, size=min(args.queries, grid.count), replace=False)
    rank = topk_dissimilar if args.dissimilar else topk_similar
    out.mkdir(parents=True, exist_ok=True)
    results = [rank(grid, int(q), args.k) for q in queries]
    with (out / "matches.jsonl").open("w") as fh:
        for res in results:
            fh.write(json.dumps({
                "query": res.query_index,
                "indices": [int(i) for i in res.indices],
                "distances": [float(d) for d in res.distances],
            }) + "\n")
    fig, axes = plt.subplots(len(results), args.k + 1, figsize=(1.2 * (args.k + 1), 1.2 * len(results)), squeeze=False)
    for row, res in zip(axes, results):
        for ax, idx in zip(row, [res.query_index, *res.indices]):
            ax.imshow(np.clip(grid.patch_at(idx), 0, 1).squeeze(), cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
        row[0].set_ylabel(str(res.query_index), fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "montage.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out / 'matches.jsonl'} and {out / 'montage.png'}")


def cmd_embed(args):
    from .metrics import dump_embeddings
    from .rain_model import list_images, read_image
    from .trainer import load_bundle, load_state

    bundle = load_bundle(args.ckpt)
    _, cfg = load_state(args.ckpt)
    images = np.stack([read_image(f) for f in list_images(Path(args.data) / "rainy")])
    images = images[:, : cfg.crop, : cfg.crop]
    dump_embeddings(bundle, images, cfg, args.out, n=args.n, seed=args.seed)
    print(f"wrote {args.n} rows to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlcl", description="Unsupervised deraining with non-local contrastive learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic desk-scale dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=16)
    s.add_argument("--n-clean", type=int, default=16)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--density", type=float, default=0.05)
    s.add_argument("--intensity", type=float, default=0.8)
    s.add_argument("--veiling", type=float, default=0.1)
    s.add_argument("--length", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="key = value config file (default: desk-scale settings)")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.add_argument("--iters", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("derain", help="run the background generator on images")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--save-rain", action="store_true")
    s.set_defaults(func=cmd_derain)

    s = sub.add_parser("eval", help="PSNR / SSIM on <data>/test")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", default="psnr,ssim")
    s.add_argument("--luma", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="emit (and smoke-run) one ablation axis")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--out", required=True)
    s.add_argument("--base", help="base config file")
    s.add_argument("--data", help="dataset root (default: synthesise one under --out)")
    s.add_argument("--iters", type=int, default=10)
    s.add_argument("--no-run", action="store_true", help="only write the configurations")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("plot", help="loss / distance curves, or block-matching dumps")
    s.add_argument("--log", help="training log.csv")
    s.add_argument("--out", required=True, help="PNG for --log, directory for --matches")
    s.add_argument("--matches", help="image to block-match")
    s.add_argument("--patch", type=int, default=16)
    s.add_argument("--stride", type=int, default=4)
    s.add_argument("--k", type=int, default=7)
    s.add_argument("--queries", type=int, default=8)
    s.add_argument("--dissimilar", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("embed", help="dump layer-contrast embeddings for external projection")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_embed)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "plot" and not (args.log or args.matches):
        print("plot: give --log and/or --matches", file=sys.stderr)
        return 2
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
