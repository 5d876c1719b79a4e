"""SGD training of both heads with pseudo-pixels resampled every step.

Per step: draw a batch of shots and a few frames from each, augment them,
look up each frame's saliency candidates (computed once on the
un-augmented frame), carry the candidate coordinates through the same
resize/crop/flip, draw fresh pseudo-pixels, and minimize
``CE + l_pal*PAL + l_asl*ASL + l_crf*CRF``.

Outputs in ``out_dir``: ``last.ckpt``, ``best.ckpt`` (best validation
CorLoc, or the last epoch when no validation set is given),
``metrics.jsonl`` (one record per epoch, deterministic for a fixed seed),
``timing.jsonl`` (wall-clock per epoch) and ``config.cfg``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, DegenerateMapError, DivergenceError, SaliencyError
from .evaluation import evaluate
from .ingestion import Dataset, Frame
from .losses import (LossWeights, absolute_size_loss, build_affinity, classification_loss, crf_downsample,
                     crf_loss, pixel_alignment_loss, total_loss)
from .model import EncoderConfig, TrCAMV, resize_image, save_checkpoint, standardize
from .pseudolabel import CandidateSets, SamplerConfig, extract_candidates, sample_pseudo_pixels

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    frames_per_shot: int = 2
    image_resize: int = 256
    crop: int = 224
    lr: float = 0.01
    lr_schedule: list = field(default_factory=list)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    # backbone (DeiT-small geometry by default)
    patch_size: int = 16
    depth: int = 12
    embed_dim: int = 384
    heads: int = 6
    mlp_ratio: float = 4.0
    decoder_channels: int = 64
    crf_radius: int = 3
    crf_sigma_s: float = 3.0
    crf_sigma_c: float = 15.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.crop > self.image_resize:
            raise ValueError(f"crop {self.crop} larger than resize {self.image_resize}")
        if not 0 < self.lr <= 1:
            raise ValueError("lr must lie in (0, 1]")
        if self.batch_size < 1 or self.frames_per_shot < 1:
            raise ValueError("batch_size and frames_per_shot must be >= 1")

    def encoder_config(self, num_classes: int) -> EncoderConfig:
        return EncoderConfig(self.crop, self.patch_size, self.depth, self.embed_dim, self.heads,
                             num_classes, self.mlp_ratio, self.decoder_channels)

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant rate; default x0.1 at 50% and x0.01 at 75% of training."""
        sched = self.lr_schedule or [(0, self.lr), (self.epochs // 2, self.lr * 0.1),
                                     ((3 * self.epochs) // 4, self.lr * 0.01)]
        lr = self.lr
        for start, value in sorted(sched):
            if epoch >= start:
                lr = value
        return lr

    # flat key=value form ------------------------------------------------

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                flat.update(dataclasses.asdict(v))
            else:
                flat[f.name] = v
        return flat

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_flat().items():
            if k == "lr_schedule":
                v = ",".join(f"{e}:{r!r}" for e, r in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_flat(cls, flat: dict) -> TrainConfig:
        sub = {"sampler": SamplerConfig, "weights": LossWeights}
        known = {f.name: f for f in dataclasses.fields(cls)}
        sub_fields = {name: {f.name: f for f in dataclasses.fields(t)} for name, t in sub.items()}
        top, nested = {}, {name: {} for name in sub}
        for key, raw in flat.items():
            owner = next((n for n, fs in sub_fields.items() if key in fs), None)
            if owner is not None:
                nested[owner][key] = _coerce(sub_fields[owner][key].type, raw)
            elif key in known and key not in sub:
                top[key] = _parse_schedule(raw) if key == "lr_schedule" else _coerce(known[key].type, raw)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**top, sampler=SamplerConfig(**nested["sampler"]), weights=LossWeights(**nested["weights"]))

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        flat = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            flat[k.strip()] = v.strip()
        return cls.from_flat(flat)

    @classmethod
    def from_file(cls, path) -> TrainConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _coerce(typ, raw):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def _parse_schedule(raw):
    if not isinstance(raw, str):
        return [tuple(x) for x in raw]
    out = []
    for part in filter(None, (p.strip() for p in raw.split(","))):
        e, r = part.split(":")
        out.append((int(e), float(r)))
    return out


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentTransform:
    """Geometry of one augmentation draw: squash-resize, crop, optional flip."""

    src_shape: tuple[int, int]
    resize: int
    top: int
    left: int
    crop: int
    flip: bool

    def map_coords(self, rc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map source ``(row, col)`` pixels to crop coordinates; returns coords and an in-crop mask."""
        rc = np.asarray(rc, dtype=np.int64).reshape(-1, 2)
        h, w = self.src_shape
        r = np.floor((rc[:, 0] + 0.5) * self.resize / h).astype(np.int64) - self.top
        c = np.floor((rc[:, 1] + 0.5) * self.resize / w).astype(np.int64) - self.left
        if self.flip:
            c = self.crop - 1 - c
        valid = (r >= 0) & (r < self.crop) & (c >= 0) & (c < self.crop)
        return np.stack([r, c], axis=1), valid


@dataclass
class AugmentedFrame:
    tensor: torch.Tensor  # (3, crop, crop) standardized network input
    rgb: torch.Tensor  # (3, crop, crop) colours in [0, 255], for CRF affinities
    transform: AugmentTransform


def hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=(-1,))


def augment(frame, rng: np.random.Generator, resize: int = 256, crop: int = 224,
            flip_prob: float = 0.5) -> AugmentedFrame:
    """Resize to ``resize``, random ``crop``, random horizontal flip, per-channel standardization."""
    if crop > resize:
        raise ValueError(f"crop {crop} larger than resize {resize}")
    image = getattr(frame, "image", frame)
    big = resize_image(image, resize)
    top = int(rng.integers(0, resize - crop + 1))
    left = int(rng.integers(0, resize - crop + 1))
    flip = bool(rng.random() < flip_prob)
    rgb = big[:, top:top + crop, left:left + crop]
    if flip:
        rgb = hflip(rgb)
    rgb = rgb.contiguous()
    tf = AugmentTransform(tuple(image.shape[:2]), resize, top, left, crop, flip)
    return AugmentedFrame(standardize(rgb / 255.0), rgb, tf)


def transform_candidates(cands: CandidateSets, tf: AugmentTransform) -> CandidateSets:
    """Candidate pools expressed in crop coordinates; pixels cropped away are dropped."""
    def move(coords, values):
        mapped, valid = tf.map_coords(coords)
        mapped, values = mapped[valid], values[valid]
        if len(mapped) == 0:
            return mapped, values
        # downscaling can land several source pixels on one target pixel
        uniq, idx = np.unique(mapped, axis=0, return_index=True)
        return uniq, values[idx]

    fg, fv = move(cands.fg_coords, cands.fg_values)
    bg, bv = move(cands.bg_coords, cands.bg_values)
    return CandidateSets(fg, fv, bg, bv, cands.threshold, cands.fg_region, cands.otsu_mask)


# ---------------------------------------------------------------------------
# batching


def shot_index(dataset: Dataset) -> list[list[Frame]]:
    shots = {}
    for f in dataset.frames.values():
        shots.setdefault((f.video_id, f.shot_id), []).append(f)
    return [shots[k] for k in sorted(shots)]


def sample_batch(dataset: Dataset, frames_per_shot: int, rng: np.random.Generator,
                 batch_size: int = 32, shots=None) -> list[Frame]:
    """Visit shots in random order, taking up to ``frames_per_shot`` random frames from each."""
    shots = shot_index(dataset) if shots is None else shots
    if not shots:
        raise DataError("dataset has no frames")
    batch = []
    for i in rng.permutation(len(shots)):
        frames = shots[i]
        k = min(frames_per_shot, len(frames), batch_size - len(batch))
        pick = rng.choice(len(frames), size=k, replace=False)
        batch.extend(frames[j] for j in sorted(pick))
        if len(batch) >= batch_size:
            break
    return batch


def steps_per_epoch(shots, frames_per_shot: int, batch_size: int) -> int:
    per_epoch = sum(min(frames_per_shot, len(s)) for s in shots)
    return max(1, math.ceil(per_epoch / batch_size))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_val_corloc: float = -1.0
    skipped_missing: int = 0
    skipped_degenerate: int = 0


class _CandidateCache:
    """Saliency -> candidate pools, computed once per frame."""

    MISSING = "missing"

    def __init__(self, provider, sampler: SamplerConfig):
        self.provider = provider
        self.sampler = sampler
        self._cache = {}

    def get(self, frame: Frame):
        if frame.frame_id not in self._cache:
            try:
                sal = self.provider.get(frame, frame.class_label)
                value = extract_candidates(sal, self.sampler)
            except DegenerateMapError:
                value = None
            except SaliencyError as exc:
                log.warning("skipping frame %s: %s", frame.frame_id, exc)
                value = self.MISSING
            self._cache[frame.frame_id] = value
        return self._cache[frame.frame_id]


def _build_model(cfg: TrainConfig, num_classes: int) -> TrCAMV:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        return TrCAMV(cfg.encoder_config(num_classes))


def train(dataset: Dataset, provider, cfg: TrainConfig, out_dir, val: Dataset | None = None,
          step_hook=None) -> Path:
    """Run the full schedule; returns the path of the selected checkpoint.

    ``step_hook(model, state)`` is called after every backward pass, before
    the parameter update.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(cfg.to_text(), encoding="utf-8")
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    data_rng, aug_rng = (np.random.default_rng(s) for s in seeds)
    sampler_rng = np.random.default_rng([cfg.seed, cfg.sampler.rng_seed])

    model = _build_model(cfg, dataset.num_classes)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr_at(0), momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    shots = shot_index(dataset)
    n_steps = steps_per_epoch(shots, cfg.frames_per_shot, cfg.batch_size)
    cache = _CandidateCache(provider, cfg.sampler)
    state = TrainState()
    w = cfg.weights
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    metrics_path.write_text("")
    timing_path.write_text("")

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cfg.lr_at(epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        t_barrier = w.barrier_t(epoch)
        sums = {"total": 0.0, "cls": 0.0, "pal": 0.0, "asl": 0.0, "crf": 0.0}
        n_done = 0
        tic = time.perf_counter()
        for _ in range(n_steps):
            batch = sample_batch(dataset, cfg.frames_per_shot, data_rng, cfg.batch_size, shots)
            xs, rgbs, ys, labels = [], [], [], []
            for f in batch:
                cands = cache.get(f)
                if cands is _CandidateCache.MISSING:
                    state.skipped_missing += 1
                    continue
                aug = augment(f, aug_rng, cfg.image_resize, cfg.crop)
                pl = None
                if cands is None:
                    state.skipped_degenerate += 1
                else:
                    moved = transform_candidates(cands, aug.transform)
                    if len(moved.fg_coords) and len(moved.bg_coords):
                        pl = sample_pseudo_pixels(moved, cfg.sampler, sampler_rng, f.frame_id)
                xs.append(aug.tensor)
                rgbs.append(aug.rgb)
                ys.append(f.class_label)
                labels.append(pl)
            if not xs:
                continue
            x = torch.stack(xs)
            cls_logits, loc_logits = model(x)
            maps = loc_logits.softmax(dim=1)
            l_cls = classification_loss(cls_logits.softmax(dim=-1), torch.tensor(ys))
            keep = [i for i, pl in enumerate(labels) if pl is not None]
            if keep:
                l_pal = pixel_alignment_loss(maps[keep], [labels[i] for i in keep])
            else:
                l_pal = maps.new_zeros(())
            l_asl = absolute_size_loss(maps, t_barrier)
            crf_maps, crf_rgb = crf_downsample(maps, torch.stack(rgbs))
            with torch.set_grad_enabled(w.lambda_crf > 0):
                aff = build_affinity(crf_rgb, cfg.crf_radius, cfg.crf_sigma_s, cfg.crf_sigma_c)
                l_crf = crf_loss(crf_maps, aff)
            loss = total_loss(l_cls, l_pal, l_asl, l_crf if w.lambda_crf > 0 else l_crf.detach(), w)
            if not torch.isfinite(loss):
                raise DivergenceError("non-finite loss", epoch, state.step)
            opt.zero_grad()
            loss.backward()
            if step_hook is not None:
                step_hook(model, state)
            opt.step()
            state.step += 1
            n_done += 1
            for k, v in (("total", loss), ("cls", l_cls), ("pal", l_pal), ("asl", l_asl), ("crf", l_crf)):
                sums[k] += float(v.detach())
        if n_done == 0:
            raise SaliencyError("no training frame has a saliency map")

        record = {"epoch": epoch, "step": state.step, "lr": lr, "barrier_t": t_barrier}
        record.update({f"loss_{k}": v / n_done for k, v in sums.items()})
        if val is not None and val.annotations:
            report, _ = evaluate(model, val)
            model.train()
            record["val_corloc"] = report.avg_corloc
            record["val_cl"] = report.cl_accuracy
        record["skipped_missing"] = state.skipped_missing
        record["skipped_degenerate"] = state.skipped_degenerate
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        with open(timing_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_time": time.perf_counter() - tic}) + "\n")
        log.info("epoch %d %s", epoch, record)

        meta = {"epoch": epoch, "step": state.step, "train_config": cfg.to_flat(),
                "class_names": list(dataset.class_names)}
        save_checkpoint(model, out / "last.ckpt", meta)
        if "val_corloc" in record and record["val_corloc"] > state.best_val_corloc:
            state.best_val_corloc = record["val_corloc"]
            shutil.copyfile(out / "last.ckpt", out / "best.ckpt")
    if val is None or not val.annotations:
        shutil.copyfile(out / "last.ckpt", out / "best.ckpt")
    return out / "best.ckpt"
