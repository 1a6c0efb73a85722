"""Command-line entry point.

Subcommands: train, eval, infer, prompts, select-patch, srm-dump, simdump,
make-synthetic.  Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.  All randomness flows from the seed in the resolved configuration
(or the subcommand's --seed).
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import zlib

import numpy as np

from . import config as cfg_mod
from . import evaluation, patches, srm
from .config import ConfigError
from .data import (
    KNOWN_GENERATORS,
    HierLabel,
    LabelError,
    ManifestError,
    load_image,
    load_manifest,
    make_synthetic_dataset,
)
from .ftg import Vocabulary, generate_prompts


class UsageError(ValueError):
    pass


def parse_label(raw: str) -> HierLabel:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) > 4 or not parts[0]:
        raise UsageError(f"label must be authenticity[,type[,family[,generator]]]: {raw!r}")
    levels = parts + [None] * (4 - len(parts))
    try:
        return HierLabel(*levels)
    except LabelError as exc:
        raise UsageError(str(exc)) from exc


def write_png16(path: str, image: np.ndarray) -> None:
    """Write an HxWx3 uint16 array as a 16-bit RGB PNG (stdlib only)."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint16:
        raise ValueError("expected HxWx3 uint16")
    h, w = image.shape[:2]

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(
            ">I", zlib.crc32(body)
        )

    ihdr = struct.pack(">IIBBBBB", w, h, 16, 2, 0, 0, 0)
    raw = b"".join(
        b"\x00" + image[row].astype(">u2").tobytes() for row in range(h)
    )
    with open(path, "wb") as fh:
        fh.write(b"\x89PNG\r\n\x1a\n")
        fh.write(chunk(b"IHDR", ihdr))
        fh.write(chunk(b"IDAT", zlib.compress(raw, 9)))
        fh.write(chunk(b"IEND", b""))


def _save_patch_png(pixels: np.ndarray, path: str) -> None:
    from PIL import Image

    img8 = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img8.transpose(1, 2, 0)).save(path)


# --- subcommands --------------------------------------------------------------


def cmd_prompts(args) -> int:
    label = parse_label(args.label)
    for sentence in generate_prompts(label).sentences:
        print(sentence)
    return 0


def cmd_make_synthetic(args) -> int:
    manifest = make_synthetic_dataset(
        args.n_real, args.n_fake, args.p_signal, args.seed, args.out, args.split
    )
    print(f"wrote {len(manifest)} entries under {args.out}")
    print(os.path.join(args.out, "manifest.tsv"))
    return 0


def cmd_select_patch(args) -> int:
    pixels = load_image(args.image)
    grid, scores = patches.patch_scores(pixels, args.p)
    best = patches.select_richest(pixels, args.p)
    if args.dump_scores:
        with open(args.dump_scores, "w", encoding="utf-8") as fh:
            fh.write("index\trow\tcol\thomogeneity\tselected\n")
            for i, ((r, c), s) in enumerate(zip(grid.coords, scores)):
                fh.write(f"{i}\t{r}\t{c}\t{s!r}\t{int(i == best.index)}\n")
    print(
        f"richest patch index={best.index} coords={best.coords} "
        f"homogeneity={best.homogeneity:.6f}"
    )
    if args.emit_patch:
        _save_patch_png(best.pixels, args.emit_patch)
    if args.emit_poorest:
        worst = int(np.argmax(scores))
        _save_patch_png(grid.patches[worst], args.emit_poorest)
        print(
            f"poorest patch index={worst} coords={grid.coords[worst]} "
            f"homogeneity={scores[worst]:.6f}"
        )
    return 0


def cmd_srm_dump(args) -> int:
    pixels = load_image(args.image)
    best = patches.select_richest(pixels, args.p)
    residual = srm.srm_extract(best.pixels, args.q)
    scaled = (residual + args.q) / (2.0 * args.q)
    image16 = np.round(scaled * 65535.0).astype(np.uint16).transpose(1, 2, 0)
    png_path = args.out + ".png"
    txt_path = args.out + ".txt"
    write_png16(png_path, image16)
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(f"patch_coords\t{best.coords[0]},{best.coords[1]}\n")
        fh.write(f"q\t{args.q!r}\n")
        for (name, _, _), channel in zip(srm.SRM_BANK, residual):
            fh.write(
                f"{name}\tmin={channel.min()!r}\tmax={channel.max()!r}"
                f"\tenergy={float((channel**2).mean())!r}\n"
            )
    print(png_path)
    print(txt_path)
    return 0


def cmd_train(args) -> int:
    import torch

    from .model import build_model
    from .trainer import Trainer

    cfg = cfg_mod.resolve_config(args.config, args.set or [])
    resolved = cfg_mod.format_config(cfg)
    print(resolved, end="")
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(resolved)
    train_manifest = load_manifest(args.train_manifest, "train")
    val_manifest = load_manifest(args.val_manifest, "test")
    if cfg["fle.vocab_path"]:
        vocab = Vocabulary.load(cfg["fle.vocab_path"])
    else:
        generators = set(KNOWN_GENERATORS) | {
            lab.generator
            for _, lab in train_manifest.entries
            if lab.generator is not None
        }
        vocab = Vocabulary.build(sorted(generators))
    torch.manual_seed(cfg["train.seed"])
    model = build_model(cfg_mod.model_config(cfg), vocab, seed=cfg["train.seed"])
    trainer = Trainer(model, cfg_mod.train_config(cfg), vocab)
    summary = trainer.fit(train_manifest, val_manifest, args.out, resume=args.resume)
    for row in summary["rows"]:
        auc_s = "-" if row["val_auc"] is None else f"{row['val_auc']:.4f}"
        print(
            f"epoch {row['epoch']}: lr={row['lr']:.2e} ce={row['l_ce']:.4f} "
            f"kl={row['l_kl']:.4f} cmc={row['l_cmc']:.4f} "
            f"val_acc={row['val_acc']:.4f} val_auc={auc_s}"
        )
    print(f"best checkpoint: {summary['best']}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import load_checkpoint_model

    model, _, _ = load_checkpoint_model(args.checkpoint)
    manifests = {
        os.path.splitext(os.path.basename(p))[0]: load_manifest(p, "test")
        for p in args.test
    }
    rows = evaluation.run_protocol(model, manifests, args.batch_size, args.threshold)
    os.makedirs(args.out, exist_ok=True)
    results_path = os.path.join(args.out, "results.tsv")
    evaluation.write_results_tsv(rows, results_path)
    for row in rows:
        auc_s = "-" if row["auc"] is None else f"{row['auc']:.4f}"
        print(f"{row['test_set']}\tn={row['n']}\tacc={row['acc']:.4f}\tauc={auc_s}")
    print(results_path)
    if args.perturb:
        kinds = (
            evaluation.PERTURBATION_KINDS
            if args.perturb == "all"
            else tuple(k.strip() for k in args.perturb.split(","))
        )
        for kind in kinds:
            if kind not in evaluation.PERTURBATION_KINDS:
                raise UsageError(f"unknown perturbation kind {kind!r}")
        seeds = [int(s) for s in args.seeds.split(",")]
        first = next(iter(manifests.values()))
        curves = evaluation.robustness_curves(
            model, first, kinds, seeds, args.batch_size
        )
        curves_path = os.path.join(args.out, "robustness.tsv")
        evaluation.write_curves_tsv(curves, curves_path)
        print(curves_path)
        if args.plot:
            png_path = os.path.join(args.out, "robustness.png")
            evaluation.render_curves_png(curves, png_path)
            print(png_path)
    return 0


def cmd_infer(args) -> int:
    from .trainer import infer

    pixels = np.stack([load_image(p) for p in args.image])
    probs = infer(pixels, args.checkpoint)
    for path, row in zip(args.image, probs):
        print(f"{path}\treal={row[0]:.6f}\tfake={row[1]:.6f}")
    return 0


def cmd_simdump(args) -> int:
    import torch

    from .data import batch_iterator
    from .ftg import encode_prompts
    from .trainer import load_checkpoint_model

    model, vocab, _ = load_checkpoint_model(args.checkpoint)
    if model.fle is None or model.gate is None:
        raise UsageError("checkpoint has no language branch; nothing to dump")
    manifest = load_manifest(args.manifest, "test")
    b = model.gate.batch_size
    if len(manifest) < b:
        raise UsageError(f"manifest has {len(manifest)} entries; need {b}")
    samples, _ = next(batch_iterator(manifest, b, seed=args.seed, train=True))
    dtype = next(model.parameters()).dtype
    images = torch.from_numpy(np.stack([s.pixels for s in samples])).to(dtype)
    tokens = torch.stack(
        [
            torch.from_numpy(encode_prompts(generate_prompts(s.label), vocab))
            for s in samples
        ]
    )
    with torch.no_grad():
        out = model(images, tokens=tokens)
        gated, _ = model.similarity(out["X_v"], out["T_l"], gated=True)
        ungated, _ = model.similarity(out["X_v"], out["T_l"], gated=False)
    os.makedirs(args.out, exist_ok=True)

    def dump(name: str, matrix: torch.Tensor) -> str:
        path = os.path.join(args.out, name)
        np.savetxt(path, matrix.numpy(), delimiter="\t")
        return path

    print(dump("s_v2l_gated.tsv", gated))
    print(dump("s_v2l_ungated.tsv", ungated))
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, (title, matrix) in zip(
        axes, [("with gate", gated), ("without gate", ungated)]
    ):
        im = ax.imshow(matrix.numpy(), cmap="viridis")
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    heatmap = os.path.join(args.out, "similarity.png")
    fig.tight_layout()
    fig.savefig(heatmap, dpi=120)
    plt.close(fig)
    print(heatmap)
    return 0


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfclip", description="fine-grained multi-modal face-forgery detector"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prompts", help="print the four prompt sentences for a label")
    p.add_argument("--label", required=True, help="e.g. real or fake,FS,diffusion,DiffFace")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("make-synthetic", help="generate the separable toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-real", type=int, default=64)
    p.add_argument("--n-fake", type=int, default=64)
    p.add_argument("--p-signal", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("select-patch", help="score patches and pick the richest")
    p.add_argument("--image", required=True)
    p.add_argument("--p", type=int, default=112)
    p.add_argument("--dump-scores")
    p.add_argument("--emit-patch")
    p.add_argument("--emit-poorest")
    p.set_defaults(func=cmd_select_patch)

    p = sub.add_parser("srm-dump", help="dump the richest patch's noise residual")
    p.add_argument("--image", required=True)
    p.add_argument("--p", type=int, default=112)
    p.add_argument("--q", type=float, default=srm.TRUNCATION)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_srm_dump)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--perturb", help='"all" or comma-separated kinds')
    p.add_argument("--seeds", default="0", help="perturbation seeds, comma-separated")
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="vision-only inference on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simdump", help="dump gated/ungated similarity matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simdump)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, LabelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
