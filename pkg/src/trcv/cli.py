"""Command-line entry point: ``trcv <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error (bad manifest, missing
or malformed saliency, invalid values), 3 runtime error (divergence,
I/O failure).  ``TRCV_NUM_WORKERS`` sets the number of intra-op threads
torch may use; results are bit-reproducible only with a single thread.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import DataError

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3

FG_COLOR = (0, 255, 0)
BG_COLOR = (255, 0, 0)
OTSU_TINT = np.array([0, 0, 255], dtype=np.float64)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / "manifest.jsonl" if p.is_dir() else p


def _load(data):
    from .ingestion import load_manifest

    return load_manifest(_manifest_path(data))


def _ckpt_path(raw) -> Path:
    p = Path(raw)
    if not p.exists() and p.with_suffix(".ckpt").exists():
        return p.with_suffix(".ckpt")
    if not p.exists():
        raise DataError(f"checkpoint not found: {raw}")
    return p


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "seed") if getattr(args, k, None) is not None}
    if overrides:
        flat = cfg.to_flat()
        flat.update(overrides)
        cfg = TrainConfig.from_flat(flat)
    return cfg


def _split(dataset, held_out: int, seed: int):
    from .ingestion import split_validation

    if held_out <= 0:
        return dataset, None
    return split_validation(dataset, held_out, seed)


def _frame_ids(raw):
    return [s for s in (raw or "").split(",") if s]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    from .ingestion import build_synthetic_dataset, write_manifest
    from .saliency import OracleProvider

    ds = build_synthetic_dataset(args.classes, args.videos_per_class, args.frames, args.size, args.seed,
                                 shots_per_video=args.shots)
    out = Path(args.out)
    write_manifest(ds, out / "manifest.jsonl")
    n = OracleProvider(args.noise, args.blur, args.seed, args.noise_corr).materialize(ds.frames.values(), out / "saliency")
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "frames": len(ds.frames), "saliency_maps": n}))


def _overlay(image, cands):
    img = image.astype(np.float64).copy()
    img[cands.otsu_mask] = 0.5 * img[cands.otsu_mask] + 0.5 * OTSU_TINT
    img = np.rint(img).astype(np.uint8)
    img[cands.bg_coords[:, 0], cands.bg_coords[:, 1]] = BG_COLOR
    img[cands.fg_coords[:, 0], cands.fg_coords[:, 1]] = FG_COLOR
    return img


def cmd_pseudo_preview(args):
    from .ingestion import write_image
    from .pseudolabel import SamplerConfig, extract_candidates, sample_pseudo_pixels
    from .saliency import FileProvider

    ds = _load(args.data)
    cfg = SamplerConfig(args.n_fg, args.n_bg, args.k_fg, args.k_bg, args.seed)
    wanted = _frame_ids(args.frames) or sorted(ds.frames)
    unknown = [f for f in wanted if f not in ds.frames]
    if unknown:
        raise DataError(f"unknown frame ids: {', '.join(unknown)}")
    provider = FileProvider(args.saliency)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    with open(out / "candidates.jsonl", "w", encoding="utf-8") as fh:
        for fid in wanted:
            frame = ds.frames[fid]
            cands = extract_candidates(provider.get(frame, frame.class_label), cfg)
            sample = sample_pseudo_pixels(cands, cfg, rng, fid)
            write_image(out / f"{fid}_overlay.png", _overlay(frame.image, cands))
            rec = {"frame_id": fid, **cands.to_json(), "sample": sample.pixels.tolist()}
            fh.write(json.dumps(rec) + "\n")
    print(json.dumps({"frames": len(wanted), "out": str(out)}))


def cmd_train(args):
    from .saliency import FileProvider
    from .training import train

    cfg = _train_config(args)
    train_set, val = _split(_load(args.data), args.val_videos, cfg.seed)
    best = train(train_set, FileProvider(args.saliency), cfg, args.out, val=val)
    print(json.dumps({"checkpoint": str(best), "last": str(Path(args.out) / "last.ckpt")}))


def _references(name, style):
    from .evaluation import REFERENCE_RESULTS

    if name == "none":
        return None
    return {"TCAM": REFERENCE_RESULTS[style][name]["TCAM"]}


def cmd_eval(args):
    from .evaluation import config_fingerprint, evaluate, render_report
    from .model import load_checkpoint

    model, meta = load_checkpoint(_ckpt_path(args.ckpt))
    ds = _load(args.data)
    if ds.num_classes != model.cfg.num_classes:
        raise DataError(f"checkpoint has {model.cfg.num_classes} classes, data has {ds.num_classes}")
    if not ds.annotations:
        raise DataError("dataset has no box annotations to score")
    report, records = evaluate(model, ds, config_fingerprint(meta.get("train_config", {})))
    refs = _references(args.reference, args.style)
    sys.stdout.write(render_report(report, args.style, args.dataset_name, refs))
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n", encoding="utf-8")
    if args.dump:
        with open(args.dump, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(r.to_json() + "\n")


def _heatmap(path, image, fg, box):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Rectangle

    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(image)
    axes[1].imshow(fg, cmap="jet", vmin=0.0, vmax=1.0)
    for ax in axes:
        ax.add_patch(Rectangle((box[0] - 0.5, box[1] - 0.5), box[2] - box[0], box[3] - box[1],
                               fill=False, edgecolor="lime", linewidth=2))
        ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_infer(args):
    from collections import Counter

    from .evaluation import extract_bbox
    from .ingestion import read_image
    from .model import infer, load_checkpoint

    model, meta = load_checkpoint(_ckpt_path(args.ckpt))
    names = meta.get("class_names") or [str(c) for c in range(model.cfg.num_classes)]
    if args.heatmap and len(args.frame) > 1:
        raise UsageError("--heatmap takes a single --frame")
    images = []
    for f in args.frame:
        try:
            images.append(read_image(f))
        except FileNotFoundError:
            raise DataError(f"frame image not found: {f}") from None
    probs, maps = infer(model, images)
    for path, p, m, im in zip(args.frame, probs, maps, images):
        counter = Counter()
        box = extract_bbox(m, counter)
        c = int(np.argmax(p))
        print(json.dumps({"frame": str(path), "class": c, "class_name": names[c], "score": float(p[c]),
                          "box": list(box), "degenerate": bool(counter["degenerate"])}))
        if args.heatmap:
            _heatmap(args.heatmap, im, m[1], box)


def cmd_ablate(args):
    from .evaluation import render_report, run_ablation
    from .saliency import FileProvider

    cfg = _train_config(args)
    train_set, val = _split(_load(args.data), args.val_videos, cfg.seed)
    if val is None:
        raise UsageError("ablate needs --val-videos >= 1 to score the rows")
    results = run_ablation(train_set, FileProvider(args.saliency), cfg, val=val, out_dir=args.out)
    text = render_report(results, "table3", args.dataset_name)
    sys.stdout.write(text)
    if args.out:
        (Path(args.out) / "table3.tsv").write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trcv", description="Weakly supervised video object localization with sampled pseudo-pixels.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic blob dataset with oracle saliency maps")
    s.add_argument("--classes", type=int, default=3, help="number of classes (default 3)")
    s.add_argument("--videos-per-class", type=int, default=2, help="videos per class (default 2)")
    s.add_argument("--frames", type=int, default=4, help="frames per video (default 4)")
    s.add_argument("--size", type=int, default=64, help="square frame size in pixels (default 64)")
    s.add_argument("--shots", type=int, default=2, help="shots per video (default 2)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.add_argument("--noise", type=float, default=0.0, help="oracle saliency noise amplitude (default 0)")
    s.add_argument("--noise-corr", type=float, default=0.0,
                   help="spatial correlation of the noise in pixels; 0 = iid (default 0)")
    s.add_argument("--blur", type=float, default=1.0, help="oracle saliency blur sigma (default 1)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pseudo-preview", help="draw candidate pools and a sampled pseudo-label per frame")
    s.add_argument("--data", required=True, help="manifest file or directory holding manifest.jsonl")
    s.add_argument("--saliency", required=True, help="directory of .smap files")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--frames", help="comma-separated frame ids (default: all)")
    s.add_argument("--n-fg", type=float, default=0.3, help="fraction of the densest component kept as FG pool")
    s.add_argument("--n-bg", type=float, default=0.3, help="fraction of lowest-valued pixels kept as BG pool")
    s.add_argument("--k-fg", type=int, default=30, help="FG pixels sampled")
    s.add_argument("--k-bg", type=int, default=30, help="BG pixels sampled")
    s.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    s.set_defaults(func=cmd_pseudo_preview)

    for name, func, helptext in (("train", cmd_train, "train both heads"),
                                 ("ablate", cmd_ablate, "train and score the four loss combinations")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="key=value config file (default: built-in defaults)")
        s.add_argument("--data", required=True, help="manifest file or directory holding manifest.jsonl")
        s.add_argument("--saliency", required=True, help="directory of .smap files")
        s.add_argument("--out", required=True, help="run directory")
        s.add_argument("--val-videos", type=int, default=0 if name == "train" else 1,
                       help="videos per class held out for validation")
        s.add_argument("--epochs", type=int, help="override the config's epochs")
        s.add_argument("--seed", type=int, help="override the config's seed")
        if name == "ablate":
            s.add_argument("--dataset-name", default="synthetic", help="column label in the table")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a checkpoint on annotated frames")
    s.add_argument("--ckpt", required=True, help="checkpoint file (the .ckpt suffix may be omitted)")
    s.add_argument("--data", required=True, help="manifest file or directory holding manifest.jsonl")
    s.add_argument("--style", choices=("table1", "table2"), default="table1", help="report layout")
    s.add_argument("--reference", choices=("none", "YTOv1", "YTOv2.2"), default="none",
                   help="add the published TCAM row for comparison")
    s.add_argument("--dataset-name", default="synthetic", help="dataset label in the table")
    s.add_argument("--json", help="also write the report as JSON here")
    s.add_argument("--dump", help="write per-frame records as JSON lines here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="predict class and box for image files")
    s.add_argument("--ckpt", required=True, help="checkpoint file (the .ckpt suffix may be omitted)")
    s.add_argument("--frame", required=True, action="append", help="image file; repeat for several")
    s.add_argument("--heatmap", help="write a FG heatmap figure (single frame only)")
    s.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = os.environ.get("TRCV_NUM_WORKERS")
    try:
        if workers:
            import torch

            torch.set_num_threads(max(1, int(workers)))
        args.func(args)
    except UsageError as exc:
        print(f"trcv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError, KeyError) as exc:
        print(f"trcv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - the exit-code contract covers every other failure
        print(f"trcv: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
