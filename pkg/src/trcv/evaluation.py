"""Localization and classification scoring over annotated frames.

A frame counts as correctly localized when the box drawn around the
predicted foreground overlaps some ground-truth box with IoU strictly above
0.5 (CorLoc).  Per-class rates are averaged without weighting, as in the
usual per-class tables.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .ingestion import Box, Dataset
from .pseudolabel import connected_components

CORLOC_IOU = 0.5

ABLATION_ROWS = ("PAL", "PAL + ASL", "PAL + CRF", "PAL + CRF + ASL")

YTO_V1_CLASSES = ("Aero", "Bird", "Boat", "Car", "Cat", "Cow", "Dog", "Horse", "Mbike", "Train")

# Published YouTube-Objects results used as comparison rows (percent).
REFERENCE_RESULTS = {
    "table1": {
        "YTOv1": {
            "TCAM": dict(zip(YTO_V1_CLASSES + ("Avg",),
                             (90.5, 70.4, 62.2, 75.7, 84.8, 81.0, 81.0, 64.5, 70.4, 50.0, 73.0))),
            "TrCAM-V": dict(zip(YTO_V1_CLASSES + ("Avg",),
                                (91.7, 77.8, 91.9, 94.0, 84.8, 81.0, 83.8, 77.4, 77.8, 87.5, 84.8))),
        },
        "YTOv2.2": {
            "TCAM": dict(zip(YTO_V1_CLASSES + ("Avg",),
                             (79.4, 94.9, 75.7, 61.7, 68.8, 87.1, 75.0, 62.4, 72.1, 45.0, 72.2))),
            "TrCAM-V": dict(zip(YTO_V1_CLASSES + ("Avg",),
                                (87.6, 91.6, 90.3, 74.1, 78.7, 79.2, 76.2, 66.9, 60.0, 62.0, 76.7))),
        },
    },
    "table2": {
        "YTOv1": {"TCAM": 84.4, "TrCAM-V": 92.2},
        "YTOv2.2": {"TCAM": 72.1, "TrCAM-V": 87.9},
    },
    "table3": {
        "YTOv1": {"TCAM": 73.0, "PAL": 74.8, "PAL + ASL": 75.5, "PAL + CRF": 81.4, "PAL + CRF + ASL": 84.8},
        "YTOv2.2": {"TCAM": 72.2, "PAL": 72.3, "PAL + ASL": 74.2, "PAL + CRF": 76.2, "PAL + CRF + ASL": 76.7},
    },
}


@dataclass
class EvalRecord:
    frame_id: str
    predicted_box: Box
    gt_boxes: list[Box]
    predicted_class: int
    true_class: int

    def to_json(self) -> str:
        d = asdict(self)
        d["predicted_box"] = list(self.predicted_box)
        d["gt_boxes"] = [list(b) for b in self.gt_boxes]
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> EvalRecord:
        d = json.loads(line)
        return cls(d["frame_id"], tuple(d["predicted_box"]), [tuple(b) for b in d["gt_boxes"]],
                   d["predicted_class"], d["true_class"])


@dataclass
class Report:
    per_class_corloc: dict[str, float]
    avg_corloc: float
    cl_accuracy: float
    fingerprint: str = ""
    excluded_classes: list[str] = field(default_factory=list)
    degenerate_boxes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


# ---------------------------------------------------------------------------
# boxes


def extract_bbox(fg_map, counter: Counter | None = None) -> Box:
    """Tight box around the largest 8-connected foreground blob.

    ``fg_map`` is a ``(2, H, W)`` map; a pixel is foreground when channel 1
    beats channel 0.  An all-background map yields the full-frame box and
    bumps ``counter["degenerate"]``.
    """
    m = np.asarray(fg_map)
    h, w = m.shape[-2:]
    comps = connected_components(m[1] > m[0])
    if not comps:
        if counter is not None:
            counter["degenerate"] += 1
        return (0, 0, w, h)
    largest = comps[int(np.argmax([len(c) for c in comps]))]
    rows, cols = largest[:, 0], largest[:, 1]
    return (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of half-open pixel boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0, iw) * max(0, ih)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# metrics


def is_correct(record: EvalRecord) -> bool:
    return max(iou(record.predicted_box, g) for g in record.gt_boxes) > CORLOC_IOU


def corloc(records, num_classes: int | None = None, class_names=None) -> tuple[dict, float, list]:
    """Per-class CorLoc, their unweighted mean, and the classes with no records.

    Records are grouped by ``true_class``; records without ground-truth
    boxes are ignored.
    """
    scored = [r for r in records if r.gt_boxes]
    if num_classes is None:
        num_classes = max((r.true_class for r in scored), default=-1) + 1
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    hits, totals = Counter(), Counter()
    for r in scored:
        totals[r.true_class] += 1
        hits[r.true_class] += is_correct(r)
    per_class, excluded = {}, []
    for c in range(num_classes):
        if totals[c] == 0:
            excluded.append(names[c])
            continue
        per_class[names[c]] = hits[c] / totals[c]
    if not per_class:
        raise ValueError("no class has scored records")
    avg = float(np.mean(list(per_class.values())))
    return per_class, avg, excluded


def classification_accuracy(records) -> float:
    """Fraction of annotated records whose predicted class is right."""
    scored = [r for r in records if r.gt_boxes]
    if not scored:
        raise ValueError("no annotated records")
    return sum(r.predicted_class == r.true_class for r in scored) / len(scored)


def build_report(records, dataset: Dataset, fingerprint: str = "", degenerate: int = 0) -> Report:
    per_class, avg, excluded = corloc(records, dataset.num_classes, dataset.class_names)
    return Report(per_class, avg, classification_accuracy(records), fingerprint, excluded, degenerate)


def predict_records(model, dataset: Dataset, batch_size: int = 32) -> tuple[list[EvalRecord], int]:
    """Run the model over every annotated frame; returns records and the degenerate-box count."""
    from .model import infer

    frames = dataset.annotated_frames()
    counter = Counter()
    records = []
    for i in range(0, len(frames), batch_size):
        chunk = frames[i:i + batch_size]
        probs, maps = infer(model, chunk)
        for f, p, m in zip(chunk, probs, maps):
            records.append(EvalRecord(f.frame_id, extract_bbox(m, counter), list(dataset.boxes_for(f.frame_id)),
                                      int(np.argmax(p)), f.class_label))
    return records, counter["degenerate"]


def evaluate(model, dataset: Dataset, fingerprint: str = "") -> tuple[Report, list[EvalRecord]]:
    records, degenerate = predict_records(model, dataset)
    return build_report(records, dataset, fingerprint, degenerate), records


def config_fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# rendering


def _pct(x) -> str:
    return "-" if x is None else f"{100.0 * x:.1f}"


def _ref_pct(x) -> str:
    return "-" if x is None else f"{x:.1f}"


def render_report(report, style: str, dataset_name: str = "synthetic", references: dict | None = None) -> str:
    """Tab-separated table text.

    ``table1``: one CorLoc column per class then ``Avg``.  ``table2``: one CL
    column.  ``table3``: ``report`` maps the four loss combinations to
    :class:`Report`; an ``Improvement`` row compares the full combination
    against the first reference row (or the ``PAL`` row when no reference
    is given).  ``references`` maps method names to published values in
    percent: for table1 a per-class dict with ``Avg``, otherwise one number.
    """
    references = references or {}
    lines = []
    if style == "table1":
        if not report.per_class_corloc:
            raise ValueError("report has no per-class CorLoc values")
        classes = list(report.per_class_corloc)
        lines.append("\t".join(["Dataset", "Method", *classes, "Avg"]))
        for name, vals in references.items():
            lines.append("\t".join([dataset_name, name, *(_ref_pct(vals.get(c)) for c in classes),
                                    _ref_pct(vals.get("Avg"))]))
        lines.append("\t".join([dataset_name, "TrCAM-V", *(_pct(report.per_class_corloc[c]) for c in classes),
                                _pct(report.avg_corloc)]))
    elif style == "table2":
        lines.append("\t".join(["Method", dataset_name]))
        for name, val in references.items():
            lines.append(f"{name}\t{_ref_pct(val)}")
        lines.append(f"TrCAM-V\t{_pct(report.cl_accuracy)}")
    elif style == "table3":
        missing = [r for r in ABLATION_ROWS if r not in report]
        if missing:
            raise ValueError(f"ablation matrix lacks rows {missing}")
        lines.append(f"Methods\t{dataset_name}")
        for name, val in references.items():
            lines.append(f"{name}\t{_ref_pct(val)}")
        for row in ABLATION_ROWS:
            lines.append(f"{row}\t{_pct(report[row].avg_corloc)}")
        full = 100.0 * report[ABLATION_ROWS[-1]].avg_corloc
        base = next(iter(references.values())) if references else 100.0 * report["PAL"].avg_corloc
        lines.append(f"Improvement\t{round(full, 1) - round(base, 1):+.1f}")
    else:
        raise ValueError(f"unknown style {style!r}")
    return "\n".join(lines) + "\n"


def report_from_percent(per_class: dict, avg: float | None = None, cl: float = 0.0) -> Report:
    """Build a :class:`Report` from percent values (e.g. published table rows)."""
    pc = {k: v / 100.0 for k, v in per_class.items()}
    a = avg / 100.0 if avg is not None else float(np.mean(list(pc.values())))
    return Report(pc, a, cl / 100.0)


# ---------------------------------------------------------------------------
# ablation


def ablation_weights(base, row: str):
    """Loss weights for one ablation row: absent terms get weight zero."""
    from dataclasses import replace

    w = base
    return replace(w, lambda_asl=w.lambda_asl if "ASL" in row else 0.0,
                   lambda_crf=w.lambda_crf if "CRF" in row else 0.0)


def run_ablation(dataset: Dataset, provider, base_cfg, val: Dataset | None = None, out_dir=None,
                 rows=ABLATION_ROWS, eval_on: Dataset | None = None) -> dict[str, Report]:
    """Train and score each loss combination with the same seed and data order.

    Every row starts from the same initialization and sees the same batches;
    only the loss weights differ.  Scores come from the last checkpoint on
    ``eval_on`` (default: ``val``).
    """
    import tempfile
    from dataclasses import replace
    from pathlib import Path

    from .model import load_checkpoint
    from .training import train

    target = eval_on if eval_on is not None else val
    if target is None:
        raise ValueError("run_ablation needs a held-out dataset to score")
    results = {}
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(out_dir) if out_dir is not None else Path(tmp)
        for row in rows:
            cfg = replace(base_cfg, weights=ablation_weights(base_cfg.weights, row))
            run_dir = root / row.replace(" ", "").replace("+", "_")
            train(dataset, provider, cfg, run_dir, val=val)
            model, _ = load_checkpoint(run_dir / "last.ckpt")
            results[row], _ = evaluate(model, target, config_fingerprint(cfg))
    return results
