"""CULane-style scoring: key-point extraction from the probability map,
30-pixel stroke rendering, pairwise IOU, exhaustive optimal matching, and the
per-category precision/recall/F1 report (crossroad images count false
positives only).

Images are evaluated in their original resolution: stored predictions and
.lines.txt ground truth are both in original image coordinates, and a live
model's extracted lanes are scaled back before rendering.
"""

from __future__ import annotations

import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import ops, pnm
from .data import CATEGORIES, DatasetIndex, IndexEntry, LanePolyline
from .errors import ShapeMismatchError
from .geometry import stroke_mask
from .network import Model, ModelOutput

MAX_LANES_PER_IMAGE = 8

DISPLAY_NAMES = {"normal": "Normal", "crowded": "Crowded", "night": "Night",
                 "no_line": "No line", "shadow": "Shadow", "arrow": "Arrow",
                 "dazzle": "Dazzle light", "curve": "Curve", "crossroad": "Crossroad"}


@dataclass(frozen=True)
class ExtractionConfig:
    exist_threshold: float = 0.5
    prob_threshold: float = 0.3
    row_stride: int | None = None  # None -> max(1, H // 32)
    min_points: int = 2

    def __post_init__(self):
        if not (0.0 < self.exist_threshold < 1.0 and 0.0 < self.prob_threshold < 1.0):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.row_stride is not None and self.row_stride < 1:
            raise ValueError("row_stride must be >= 1")

    def stride_for(self, h: int) -> int:
        return self.row_stride if self.row_stride is not None else max(1, h // 32)


def extract_channel(prob: np.ndarray, config: ExtractionConfig) -> LanePolyline | None:
    """Key points of one lane channel: per sampled row (bottom up) the argmax
    column, kept while the probability clears the threshold."""
    h, w = prob.shape
    pts = []
    for row in range(h - 1, -1, -config.stride_for(h)):
        col = int(np.argmax(prob[row]))
        if prob[row, col] >= config.prob_threshold:
            pts.append((float(col), float(row)))
    if len(pts) < config.min_points:
        return None
    return LanePolyline(pts[::-1])


def extract_lanes(output: ModelOutput, config: ExtractionConfig = ExtractionConfig()
                  ) -> list[LanePolyline]:
    """Reconnect key points per lane channel whose existence clears the gate.

    Expects a single-image output (N == 1). Results are ordered by lane
    channel: the polyline of channel i precedes that of channel j > i.
    """
    if output.seg_logits.shape[0] != 1:
        raise ShapeMismatchError("extract_lanes expects a single-image output")
    probs = ops.channel_softmax(output.seg_logits)[0]
    exist = output.exist_probs[0]
    lanes = []
    for lane in range(1, probs.shape[0]):
        if exist[lane - 1] < config.exist_threshold:
            continue
        poly = extract_channel(probs[lane], config)
        if poly is not None:
            lanes.append(poly)
    return lanes


def render_lane(poly: LanePolyline, h: int, w: int, width: float = 30.0) -> np.ndarray:
    """Binary stroke mask: pixel centers within width/2 of the polyline."""
    if width < 1:
        raise ValueError("render width must be >= 1")
    return stroke_mask(poly.points, h, w, width)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 0 when both masks are empty."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)


def match_lanes(pred: list[np.ndarray], gt: list[np.ndarray],
                iou_threshold: float = 0.5) -> MatchResult:
    """Exhaustive search over injective assignments of predictions to ground
    truths, maximizing the number of pairs with IOU >= threshold; ties go to
    the larger total IOU, then the lexicographically smallest pairing."""
    if len(pred) > MAX_LANES_PER_IMAGE or len(gt) > MAX_LANES_PER_IMAGE:
        raise ValueError(f"at most {MAX_LANES_PER_IMAGE} lanes per image")
    iou = np.zeros((len(pred), len(gt)))
    for i, pm in enumerate(pred):
        for j, gm in enumerate(gt):
            iou[i, j] = mask_iou(pm, gm)

    best = {"tp": -1, "total": -1.0, "pairs": None}

    def consider(pairs):
        tp = len(pairs)
        total = sum(v for _, _, v in pairs)
        if (tp, total) > (best["tp"], best["total"]) or \
                ((tp, total) == (best["tp"], best["total"])
             and (best["pairs"] is None or pairs < best["pairs"])):
            best.update(tp=tp, total=total, pairs=list(pairs))

    def dfs(i, used, pairs):
        if i == len(pred):
            consider(pairs)
            return
        if len(pairs) + (len(pred) - i) < best["tp"]:
            return  # cannot beat the current best count
        for j in range(len(gt)):
            if j not in used and iou[i, j] >= iou_threshold:
                used.add(j)
                pairs.append((i, j, float(iou[i, j])))
                dfs(i + 1, used, pairs)
                pairs.pop()
                used.discard(j)
        dfs(i + 1, used, pairs)  # leave prediction i unmatched

    dfs(0, set(), [])
    pairs = best["pairs"] or []
    return MatchResult(tp=len(pairs), fp=len(pred) - len(pairs),
                       fn=len(gt) - len(pairs), pairs=pairs)


def compute_f1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """(precision, recall, f1); every 0/0 is defined as 0."""
    if tp < 0 or fp < 0 or fn < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class CategoryCount:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, m: MatchResult):
        self.tp += m.tp
        self.fp += m.fp
        self.fn += m.fn


class EvalReport:
    """Per-category and total match counts.

    Crossroad images contribute only their false positives and are excluded
    from the totals. Categories outside the canonical list still count toward
    the totals and the key=value block, but get no table row.
    """

    def __init__(self):
        self.counts: dict[str, CategoryCount] = {c: CategoryCount() for c in CATEGORIES}

    def add(self, category: str | None, m: MatchResult):
        cat = category or "normal"
        self.counts.setdefault(cat, CategoryCount())
        if cat == "crossroad":
            self.counts[cat].fp += m.fp
        else:
            self.counts[cat].add(m)

    def total(self) -> CategoryCount:
        out = CategoryCount()
        for cat, c in self.counts.items():
            if cat != "crossroad":
                out.tp += c.tp
                out.fp += c.fp
                out.fn += c.fn
        return out

    @property
    def crossroad_fp(self) -> int:
        return self.counts["crossroad"].fp

    def format_table(self) -> str:
        head = f"{'Category':<14}{'TP':>8}{'FP':>8}{'FN':>8}{'Precision':>12}{'Recall':>10}{'F1':>10}"
        rows = [head]
        for cat in CATEGORIES:
            name = DISPLAY_NAMES[cat]
            c = self.counts[cat]
            if cat == "crossroad":
                rows.append(f"{name:<14}{'-':>8}{c.fp:>8}{'-':>8}{'-':>12}{'-':>10}{'-':>10}")
            else:
                p, r, f1 = compute_f1(c.tp, c.fp, c.fn)
                rows.append(f"{name:<14}{c.tp:>8}{c.fp:>8}{c.fn:>8}{p:>12.4f}{r:>10.4f}{f1:>10.4f}")
        t = self.total()
        p, r, f1 = compute_f1(t.tp, t.fp, t.fn)
        rows.append(f"{'Total':<14}{t.tp:>8}{t.fp:>8}{t.fn:>8}{p:>12.4f}{r:>10.4f}{f1:>10.4f}")
        return "\n".join(rows)

    def format_key_values(self) -> str:
        lines = []
        for cat in sorted(self.counts):
            c = self.counts[cat]
            if cat == "crossroad":
                lines.append(f"crossroad_fp={c.fp}")
                continue
            p, r, f1 = compute_f1(c.tp, c.fp, c.fn)
            lines.append(f"{cat}_tp={c.tp}")
            lines.append(f"{cat}_fp={c.fp}")
            lines.append(f"{cat}_fn={c.fn}")
            lines.append(f"{cat}_f1={f1:.4f}")
        t = self.total()
        p, r, f1 = compute_f1(t.tp, t.fp, t.fn)
        lines += [f"total_tp={t.tp}", f"total_fp={t.fp}", f"total_fn={t.fn}",
                  f"total_precision={p:.4f}", f"total_recall={r:.4f}", f"total_f1={f1:.4f}"]
        return "\n".join(lines)

    def format_report(self) -> str:
        return self.format_table() + "\n\n" + self.format_key_values() + "\n"


def _worker_count() -> int:
    env = os.environ.get("LANEDET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def evaluate_entry(entry: IndexEntry, predict, iou_threshold: float,
                   render_width: float) -> MatchResult:
    h, w = pnm.read_pnm_size(entry.image_path)
    gt = [p.clipped(h, w) for p in data_mod.load_gt_polylines(entry)]
    gt = [p for p in gt if p is not None][:MAX_LANES_PER_IMAGE]
    pred = list(predict(entry))[:MAX_LANES_PER_IMAGE]
    gt_masks = [render_lane(p, h, w, render_width) for p in gt]
    pred_masks = [render_lane(p, h, w, render_width) for p in pred]
    return match_lanes(pred_masks, gt_masks, iou_threshold)


def evaluate_dataset(index: DatasetIndex, predict, iou_threshold: float = 0.5,
                     render_width: float = 30.0) -> EvalReport:
    """Accumulate per-image matches into an EvalReport.

    ``predict`` maps an IndexEntry to lane polylines in original image
    coordinates; build one with model_predictions() or stored_predictions().
    Per-image evaluation fans out over LANEDET_THREADS workers; accumulation
    is a sum of integer counts, so the image order cannot matter.
    """
    workers = min(_worker_count(), max(1, len(index.entries)))
    report = EvalReport()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda e: evaluate_entry(e, predict, iou_threshold, render_width),
                index.entries))
    else:
        results = [evaluate_entry(e, predict, iou_threshold, render_width)
                   for e in index.entries]
    for entry, match in zip(index.entries, results):
        report.add(entry.category, match)
    return report


def stored_predictions(pred_root: str, index: DatasetIndex):
    """Predictor reading per-image <stem>.pred.txt files under pred_root,
    mirroring the image paths relative to the dataset root. A missing file
    counts as an empty prediction and warns once."""
    warned: set[str] = set()

    def predict(entry: IndexEntry) -> list[LanePolyline]:
        rel = os.path.relpath(entry.image_path, index.root)
        path = os.path.join(pred_root, os.path.splitext(rel)[0] + ".pred.txt")
        if not os.path.isfile(path):
            if path not in warned:
                warned.add(path)
                print(f"warning: missing prediction file {path}; counting as empty",
                      file=sys.stderr)
            return []
        return data_mod.parse_lines_file(path)

    return predict


def model_predictions(model: Model, config: ExtractionConfig = ExtractionConfig()):
    """Predictor running live inference; extracted lanes are mapped back to
    the original image coordinate system."""

    def predict(entry: IndexEntry) -> list[LanePolyline]:
        raw = pnm.read_ppm(entry.image_path)
        oh, ow = raw.shape[:2]
        img = data_mod.bilinear_resize(pnm.u8_to_float(raw).transpose(2, 0, 1),
                                       model.cfg.input_h, model.cfg.input_w)
        out = model.forward(img[None].astype(model.cfg.np_dtype), train=False)
        lanes = extract_lanes(out, config)
        sx = (ow - 1.0) / max(model.cfg.input_w - 1.0, 1.0)
        sy = (oh - 1.0) / max(model.cfg.input_h - 1.0, 1.0)
        return [p.scaled(sx, sy) for p in lanes]

    return predict
