"""Video-frame datasets: manifest I/O, synthetic blob videos, validation split.

A dataset is a set of videos, each carrying one class tag, cut into shots of
frames.  Only some frames carry bounding boxes; those are the ones scored at
evaluation time.

Boxes are ``(x_min, y_min, x_max, y_max)`` with half-open pixel extents, so
a box covering columns 3..5 has ``x_min=3, x_max=6`` and width 3.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, ManifestError

Box = tuple[int, int, int, int]

MIN_SYNTH_SIZE = 16
SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring", "bar", "hexagon")


@dataclass
class Frame:
    frame_id: str
    video_id: str
    shot_id: str
    class_label: int
    path: str | None = None
    # set for in-memory frames (synthetic) or after the first load
    _image: np.ndarray | None = field(default=None, repr=False, compare=False)
    # blob mask from the synthetic generator, used by the oracle provider
    gt_mask: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            if self.path is None:
                raise DataError(f"frame {self.frame_id!r} has neither pixels nor a path")
            self._image = read_image(self.path)
        return self._image

    @property
    def size(self) -> tuple[int, int]:
        """(height, width) of the frame."""
        h, w = self.image.shape[:2]
        return h, w


@dataclass
class VideoRecord:
    video_id: str
    class_label: int
    shots: list[str]
    frame_count: int = 0


@dataclass
class BoxAnnotation:
    frame_id: str
    boxes: list[Box]


@dataclass
class Dataset:
    videos: list[VideoRecord]
    frames: dict[str, Frame]
    annotations: list[BoxAnnotation]
    num_classes: int
    class_names: list[str]

    def __post_init__(self):
        self._boxes = {a.frame_id: a.boxes for a in self.annotations}

    def boxes_for(self, frame_id: str) -> list[Box] | None:
        return self._boxes.get(frame_id)

    def annotated_frames(self) -> list[Frame]:
        return [self.frames[a.frame_id] for a in self.annotations]

    def video_ids(self) -> list[str]:
        return [v.video_id for v in self.videos]

    def subset(self, video_ids) -> Dataset:
        keep = set(video_ids)
        videos = [v for v in self.videos if v.video_id in keep]
        frames = {k: f for k, f in self.frames.items() if f.video_id in keep}
        annotations = [a for a in self.annotations if a.frame_id in frames]
        return Dataset(videos, frames, annotations, self.num_classes, list(self.class_names))

    def validate(self) -> None:
        """Check cross-record invariants; raise :class:`DataError` on the first violation."""
        if not self.videos:
            raise DataError("no videos")
        if self.num_classes < 1 or len(self.class_names) != self.num_classes:
            raise DataError("class_names must list exactly num_classes names")
        by_id = {v.video_id: v for v in self.videos}
        if len(by_id) != len(self.videos):
            raise DataError("duplicate video_id")
        for v in self.videos:
            if not 0 <= v.class_label < self.num_classes:
                raise DataError(f"video {v.video_id!r} has class {v.class_label} outside [0, {self.num_classes})")
        counts = {v: 0 for v in by_id}
        for f in self.frames.values():
            video = by_id.get(f.video_id)
            if video is None:
                raise DataError(f"frame {f.frame_id!r} references unknown video {f.video_id!r}")
            if f.shot_id not in video.shots:
                raise DataError(f"frame {f.frame_id!r} references unknown shot {f.shot_id!r}")
            if f.class_label != video.class_label:
                raise DataError(f"frame {f.frame_id!r} class differs from its video")
            counts[f.video_id] += 1
        for v in self.videos:
            if v.frame_count != counts[v.video_id]:
                raise DataError(f"video {v.video_id!r}: frame_count {v.frame_count} != {counts[v.video_id]} frames")
        for a in self.annotations:
            if a.frame_id not in self.frames:
                raise DataError(f"annotation references unknown frame {a.frame_id!r}")
            for b in a.boxes:
                if not (b[0] < b[2] and b[1] < b[3]):
                    raise DataError(f"degenerate box {b} for frame {a.frame_id!r}")


def read_image(path) -> np.ndarray:
    """Decode an 8-bit PNG or PPM file into an ``H x W x 3`` uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path) -> Dataset:
    """Read a JSON-lines manifest.

    Frame images are not decoded here; relative paths resolve against the
    manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    meta = None
    videos: dict[str, VideoRecord] = {}
    frames: dict[str, Frame] = {}
    annotations: list[BoxAnnotation] = []
    frame_lines: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict) or "kind" not in rec:
                raise ManifestError("record without 'kind'", lineno)
            kind = rec["kind"]
            try:
                if kind == "meta":
                    if meta is not None:
                        raise ManifestError("duplicate meta record", lineno)
                    meta = (int(rec["num_classes"]), [str(n) for n in rec["class_names"]])
                    continue
                if meta is None:
                    raise ManifestError("first record must be the meta header", lineno)
                if kind == "video":
                    vid = str(rec["video_id"])
                    if vid in videos:
                        raise ManifestError(f"duplicate video {vid!r}", lineno)
                    label = int(rec["class"])
                    if not 0 <= label < meta[0]:
                        raise ManifestError(f"class {label} outside [0, {meta[0]})", lineno)
                    videos[vid] = VideoRecord(vid, label, [str(s) for s in rec["shots"]])
                elif kind == "frame":
                    fid = str(rec["frame_id"])
                    vid = str(rec["video_id"])
                    if fid in frames:
                        raise ManifestError(f"duplicate frame {fid!r}", lineno)
                    video = videos.get(vid)
                    if video is None:
                        raise ManifestError(f"frame {fid!r} references unknown video {vid!r}", lineno)
                    shot = str(rec["shot_id"])
                    if shot not in video.shots:
                        raise ManifestError(f"frame {fid!r} references unknown shot {shot!r}", lineno)
                    frames[fid] = Frame(fid, vid, shot, video.class_label, path=str(root / rec["path"]))
                    frame_lines[fid] = lineno
                    video.frame_count += 1
                elif kind == "boxes":
                    fid = str(rec["frame_id"])
                    if fid not in frames:
                        raise ManifestError(f"annotation references unknown frame {fid!r}", lineno)
                    boxes = []
                    for b in rec["boxes"]:
                        if len(b) != 4:
                            raise ManifestError(f"box {b} needs 4 coordinates", lineno)
                        b = tuple(int(v) for v in b)
                        if not (b[0] < b[2] and b[1] < b[3]):
                            raise ManifestError(f"degenerate box {list(b)}", lineno)
                        boxes.append(b)
                    annotations.append(BoxAnnotation(fid, boxes))
                else:
                    raise ManifestError(f"unknown record kind {kind!r}", lineno)
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, ManifestError):
                    raise
                raise ManifestError(f"malformed {kind!r} record: {exc!r}", lineno) from None
    if meta is None or not videos:
        raise ManifestError("no videos")
    dataset = Dataset(list(videos.values()), frames, annotations, meta[0], meta[1])
    dataset.validate()
    return dataset


def write_manifest(dataset: Dataset, path, image_dir: str = "frames") -> None:
    """Serialize *dataset* as a manifest; in-memory frames are written as PNG under ``image_dir``."""
    path = Path(path)
    root = path.parent
    root.mkdir(parents=True, exist_ok=True)
    lines = [{"kind": "meta", "num_classes": dataset.num_classes, "class_names": list(dataset.class_names)}]
    for v in dataset.videos:
        lines.append({"kind": "video", "video_id": v.video_id, "class": v.class_label, "shots": list(v.shots)})
    for f in dataset.frames.values():
        if f._image is not None or f.path is None:
            rel = f"{image_dir}/{f.frame_id}.png"
            (root / image_dir).mkdir(parents=True, exist_ok=True)
            write_image(root / rel, f.image)
        else:
            rel = os.path.relpath(f.path, root)
        lines.append({"kind": "frame", "frame_id": f.frame_id, "video_id": f.video_id,
                      "shot_id": f.shot_id, "path": rel})
    for a in dataset.annotations:
        lines.append({"kind": "boxes", "frame_id": a.frame_id, "boxes": [list(b) for b in a.boxes]})
    with open(path, "w", encoding="utf-8") as fh:
        for rec in lines:
            fh.write(json.dumps(rec) + "\n")


# ---------------------------------------------------------------------------
# synthetic blobs


def shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil for one of :data:`SHAPES`."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = (yy - c) / (size / 2.0), (xx - c) / (size / 2.0)
    if shape == "disk":
        m = dx**2 + dy**2 <= 1.0
    elif shape == "square":
        m = (np.abs(dx) <= 0.85) & (np.abs(dy) <= 0.85)
    elif shape == "triangle":
        m = (dy <= 0.9) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    elif shape == "diamond":
        m = np.abs(dx) + np.abs(dy) <= 1.0
    elif shape == "cross":
        m = ((np.abs(dx) <= 0.35) | (np.abs(dy) <= 0.35)) & (np.abs(dx) <= 1) & (np.abs(dy) <= 1)
    elif shape == "ring":
        r2 = dx**2 + dy**2
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif shape == "bar":
        m = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 0.45)
    elif shape == "hexagon":
        m = (np.abs(dy) <= 0.87) & (np.abs(dx) * 0.87 + np.abs(dy) * 0.5 <= 0.87)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def class_color(c: int, num_classes: int) -> np.ndarray:
    r, g, b = colorsys.hsv_to_rgb(c / num_classes, 0.85, 0.95)
    return np.array([r, g, b]) * 255.0


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    # low-saturation texture: smooth field plus grain
    coarse = rng.normal(size=(size, size, 3))
    smooth = ndimage.gaussian_filter(coarse, sigma=(size / 10.0, size / 10.0, 0))
    smooth /= smooth.std() + 1e-9
    gray = smooth.mean(axis=2, keepdims=True)
    tex = 0.8 * gray + 0.2 * smooth
    base = rng.uniform(90, 150)
    img = base + 22.0 * tex + rng.normal(scale=6.0, size=(size, size, 3))
    return img


def build_synthetic_dataset(num_classes: int, videos_per_class: int, frames_per_video: int,
                            image_size: int, seed: int, shots_per_video: int = 2) -> Dataset:
    """Render moving colored shapes over textured backgrounds.

    Class ``c`` is a fixed hue and shape; each video moves one blob along a
    straight line, bouncing off the borders.  Every frame is annotated with
    the tight box of the rendered blob and keeps the blob mask in
    ``Frame.gt_mask``.
    """
    if min(num_classes, videos_per_class, frames_per_video) < 1:
        raise ValueError("num_classes, videos_per_class and frames_per_video must be >= 1")
    if image_size < MIN_SYNTH_SIZE:
        raise ValueError(f"image_size too small to place the blob ({image_size} < {MIN_SYNTH_SIZE})")
    rng = np.random.default_rng(seed)
    names = [f"{SHAPES[c % len(SHAPES)]}{c}" for c in range(num_classes)]
    videos, frames, annotations = [], {}, []
    n_shots = max(1, min(shots_per_video, frames_per_video))
    for c in range(num_classes):
        color = class_color(c, num_classes)
        shape = SHAPES[c % len(SHAPES)]
        for v in range(videos_per_class):
            vid = f"{names[c]}_v{v:02d}"
            shots = [f"{vid}_s{s}" for s in range(n_shots)]
            bsize = int(rng.integers(int(0.3 * image_size), int(0.5 * image_size) + 1))
            stencil = shape_mask(shape, bsize)
            bg = _background(rng, image_size)
            span = image_size - bsize
            pos = rng.uniform(0, span, size=2)
            vel = rng.uniform(-0.06, 0.06, size=2) * image_size
            shade = rng.uniform(0.85, 1.0)
            for j in range(frames_per_video):
                y0, x0 = int(round(pos[0])), int(round(pos[1]))
                mask = np.zeros((image_size, image_size), dtype=bool)
                mask[y0:y0 + bsize, x0:x0 + bsize] = stencil
                img = bg + rng.normal(scale=4.0, size=bg.shape)
                img[mask] = color * shade + rng.normal(scale=6.0, size=(int(mask.sum()), 3))
                img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                rows, cols = np.nonzero(mask)
                box = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
                fid = f"{vid}_f{j:03d}"
                shot = shots[min(j * n_shots // frames_per_video, n_shots - 1)]
                frames[fid] = Frame(fid, vid, shot, c, _image=img, gt_mask=mask)
                annotations.append(BoxAnnotation(fid, [box]))
                pos = pos + vel
                for k in range(2):
                    if pos[k] < 0 or pos[k] > span:
                        vel[k] = -vel[k]
                        pos[k] = min(max(pos[k], 0.0), float(span))
            videos.append(VideoRecord(vid, c, shots, frames_per_video))
    dataset = Dataset(videos, frames, annotations, num_classes, names)
    dataset.validate()
    return dataset


# ---------------------------------------------------------------------------
# splits


def split_validation(dataset: Dataset, videos_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``videos_per_class`` whole videos of every class."""
    if videos_per_class < 0:
        raise ValueError("videos_per_class must be >= 0")
    rng = np.random.default_rng(seed)
    held = []
    for c in range(dataset.num_classes):
        ids = sorted(v.video_id for v in dataset.videos if v.class_label == c)
        if videos_per_class and len(ids) <= videos_per_class:
            raise DataError(
                f"class {dataset.class_names[c]!r} has {len(ids)} videos; "
                f"need more than {videos_per_class} to hold out {videos_per_class}")
        if videos_per_class:
            pick = rng.choice(len(ids), size=videos_per_class, replace=False)
            held.extend(ids[i] for i in sorted(pick))
    held_set = set(held)
    train = dataset.subset(v for v in dataset.video_ids() if v not in held_set)
    val = Dataset([v for v in dataset.videos if v.video_id in held_set],
                  {k: f for k, f in dataset.frames.items() if f.video_id in held_set},
                  [a for a in dataset.annotations if dataset.frames[a.frame_id].video_id in held_set],
                  dataset.num_classes, list(dataset.class_names))
    return train, val
