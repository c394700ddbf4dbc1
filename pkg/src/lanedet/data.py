"""Synthetic lane scenes, CULane-layout datasets, and label rasterization.

A dataset root follows the CULane convention:

    <root>/list/{train,val,test}.txt       image [mask] [e1 e2 e3 e4] per line
    <root>/list/test_split/<category>.txt  image paths per scene category
    <image>.lines.txt                      one lane per line, "x y x y ..."

Images are binary PPM, label masks binary PGM of class ids (0 background,
1..4 lanes ordered left to right). A missing .lines.txt means a zero-lane
(crossroad-style) image. Existence vectors are always derived from the final
label mask, which keeps the mask/existence invariant true by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm
from .errors import FormatError
from .geometry import stroke_mask

CATEGORIES = ("normal", "crowded", "night", "no_line", "shadow",
              "arrow", "dazzle", "curve", "crossroad")
NUM_LANES = 4


class LanePolyline:
    """Ordered (x, y) points of one lane curve, strictly increasing in y."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] >= 2:
            order = np.argsort(pts[:, 1], kind="stable")
            pts = pts[order]
            keep = np.concatenate([[True], np.diff(pts[:, 1]) > 0])
            pts = pts[keep]
        if pts.shape[0] < 2:
            raise ValueError("a lane polyline needs at least 2 points with distinct y")
        self.points = pts

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        return isinstance(other, LanePolyline) and np.array_equal(self.points, other.points)

    def scaled(self, sx: float, sy: float) -> "LanePolyline":
        return LanePolyline(self.points * np.array([sx, sy]))

    def clipped(self, h: int, w: int) -> "LanePolyline | None":
        """Clamp x into the image, drop rows outside it; None if < 2 points survive."""
        pts = self.points.copy()
        pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 1.0)
        pts = pts[(pts[:, 1] >= 0.0) & (pts[:, 1] <= h - 1.0)]
        return LanePolyline(pts) if pts.shape[0] >= 2 else None

    def x_at(self, y: float) -> float:
        """Linear interpolation along the polyline (clamped at the ends)."""
        return float(np.interp(y, self.points[:, 1], self.points[:, 0]))

    def to_flat(self) -> list[float]:
        return [float(v) for v in self.points.reshape(-1)]


@dataclass
class Sample:
    image: np.ndarray       # (3, H, W) float32 in [0, 1]
    label_mask: np.ndarray  # (H, W) uint8 class ids 0..4
    exist: np.ndarray       # (4,) uint8


@dataclass
class IndexEntry:
    image_path: str
    lines_path: str
    mask_path: str | None = None
    exist_flags: tuple | None = None
    category: str | None = None


@dataclass
class DatasetIndex:
    root: str
    entries: list[IndexEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


def default_stroke_width(w: int) -> int:
    """Training-label stroke width: 16 px at 800-wide, proportional, >= 3."""
    return max(3, int(round(16.0 * w / 800.0)))


def exist_from_mask(mask: np.ndarray, num_lanes: int = NUM_LANES) -> np.ndarray:
    present = np.zeros(num_lanes, dtype=np.uint8)
    ids = np.unique(mask)
    for lane in range(1, num_lanes + 1):
        present[lane - 1] = 1 if lane in ids else 0
    return present


def rasterize_lanes(polylines, h: int, w: int, width: float) -> np.ndarray:
    """Class-id mask; lane k draws id k, later lanes overwrite overlaps."""
    mask = np.zeros((h, w), dtype=np.uint8)
    for lane_id, poly in enumerate(polylines[:NUM_LANES], start=1):
        if poly is None:
            continue
        mask[stroke_mask(poly.points, h, w, width)] = lane_id
    return mask


def bilinear_resize(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a (C, H, W) float array."""
    c, h, w = img.shape
    if (h, w) == (oh, ow):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, ow) if ow > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def nearest_resize(mask: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Corner-aligned nearest-neighbour resize for class-id masks."""
    h, w = mask.shape
    if (h, w) == (oh, ow):
        return mask.copy()
    ys = np.rint(np.linspace(0.0, h - 1.0, oh) if oh > 1 else np.zeros(1)).astype(int)
    xs = np.rint(np.linspace(0.0, w - 1.0, ow) if ow > 1 else np.zeros(1)).astype(int)
    return mask[ys][:, xs].copy()


# ---------------------------------------------------------------------------
# synthetic scenes


def _synthetic_scene(rng: np.random.Generator, h: int, w: int, crossroad: bool,
                     stroke_width: int):
    """One rendered road scene; returns (Sample, [LanePolyline])."""
    ys_grad = np.linspace(0.0, 1.0, h)[None, :, None]
    image = 0.18 + 0.08 * ys_grad + rng.normal(0.0, 0.02, size=(3, h, w))
    # road speckle
    for _ in range(6):
        r0 = rng.integers(0, h)
        c0 = rng.integers(0, w)
        rh = int(rng.integers(2, max(3, h // 12)))
        rw = int(rng.integers(2, max(3, w // 12)))
        image[:, r0:r0 + rh, c0:c0 + rw] += rng.uniform(-0.05, 0.05)
    # distractor patches under the lane strokes
    for _ in range(int(rng.integers(0, 3))):
        r0 = rng.integers(h // 3, h)
        c0 = rng.integers(0, w)
        rh = int(rng.integers(h // 12, max(h // 12 + 1, h // 6)))
        rw = int(rng.integers(w // 12, max(w // 12 + 1, w // 6)))
        image[:, r0:r0 + rh, c0:c0 + rw] = rng.uniform(0.35, 0.55)

    lanes: list[LanePolyline] = []
    if not crossroad:
        n_lanes = int(rng.integers(2, NUM_LANES + 1))
        vy = h * rng.uniform(0.18, 0.30)
        vx = w * rng.uniform(0.42, 0.58)
        slots = np.sort(rng.choice(4, size=n_lanes, replace=False))
        base = np.linspace(0.12, 0.88, 4) * w
        bend = rng.uniform(-0.20, 0.20)
        for slot in slots:
            xb = base[slot] + rng.uniform(-0.04, 0.04) * w
            curve = bend + rng.uniform(-0.05, 0.05)
            y0 = vy + 0.10 * h
            ys = np.linspace(y0, h - 1.0, 16)
            s = (ys - vy) / (h - 1.0 - vy)
            xs = vx + (xb - vx) * s + curve * w * s * (1.0 - s)
            pts = np.stack([xs, ys], axis=1)
            pts = pts[(pts[:, 0] >= 0.0) & (pts[:, 0] <= w - 1.0)]
            if pts.shape[0] < 2:
                continue
            lanes.append(LanePolyline(pts))
        lanes.sort(key=lambda p: p.points[-1, 0])
        for poly in lanes:
            bright = rng.uniform(0.75, 0.95)
            tint = rng.uniform(-0.04, 0.04, size=3)
            stroke = stroke_mask(poly.points, h, w, stroke_width)
            for ch in range(3):
                image[ch][stroke] = np.maximum(image[ch][stroke], bright + tint[ch])
    else:
        r0 = int(h * rng.uniform(0.5, 0.8))
        image[:, r0:r0 + max(2, h // 20), :] = rng.uniform(0.3, 0.5)

    label = rasterize_lanes(lanes, h, w, stroke_width)
    sample = Sample(image=np.clip(image, 0.0, 1.0).astype(np.float32),
                    label_mask=label, exist=exist_from_mask(label))
    return sample, lanes


def generate_synthetic(seed: int, count: int, h: int, w: int,
                       crossroad_frac: float = 0.0,
                       stroke_width: int | None = None):
    """Deterministic list of (Sample, ground-truth polylines).

    Scene i depends only on (seed, i), so prefixes agree across counts.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if h % 8 or w % 8 or h < 16 or w < 16:
        raise ValueError(f"h and w must be >= 16 and divisible by 8, got {h}x{w}")
    width = default_stroke_width(w) if stroke_width is None else stroke_width
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        crossroad = rng.random() < crossroad_frac
        scenes.append(_synthetic_scene(rng, h, w, crossroad, width))
    return scenes


# ---------------------------------------------------------------------------
# CULane-layout IO


def parse_lines_file(path: str) -> list[LanePolyline]:
    """One lane per non-empty line: alternating x y floats."""
    lanes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) % 2:
                raise FormatError(f"{path}:{lineno}: odd number of coordinates")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric coordinate") from None
            if len(vals) < 4:
                continue  # fewer than 2 points cannot form a lane
            lanes.append(LanePolyline(np.array(vals).reshape(-1, 2)))
    return lanes


def write_lines_file(path: str, polylines) -> None:
    out = []
    for poly in polylines:
        out.append(" ".join(f"{v:.3f}" for v in poly.to_flat()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(out) + ("\n" if out else ""))


def _resolve(root: str, rel: str) -> str:
    return os.path.join(root, rel.lstrip("/"))


def lines_path_for(image_path: str) -> str:
    stem, _ = os.path.splitext(image_path)
    return stem + ".lines.txt"


def load_category_map(root: str) -> dict[str, str]:
    """image path (as written in the lists) -> category, from list/test_split."""
    split_dir = os.path.join(root, "list", "test_split")
    mapping: dict[str, str] = {}
    if not os.path.isdir(split_dir):
        return mapping
    for name in sorted(os.listdir(split_dir)):
        if not name.endswith(".txt"):
            continue
        category = os.path.splitext(name)[0]
        with open(os.path.join(split_dir, name), "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    mapping[line.split()[0]] = category
    return mapping


def load_culane_index(root: str, list_file: str | None = None) -> DatasetIndex:
    """Parse a list file (default list/test.txt) into a DatasetIndex.

    Line format: image path, optional mask path, optional 4 existence flags.
    Image paths must exist; a missing .lines.txt downgrades the entry to a
    zero-lane image rather than failing.
    """
    list_path = list_file or os.path.join(root, "list", "test.txt")
    categories = load_category_map(root)
    entries = []
    with open(list_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            img_rel = parts[0]
            mask_rel = None
            flags = None
            if len(parts) == 1:
                pass
            elif len(parts) == 2:
                mask_rel = parts[1]
            elif len(parts) in (5, 6):
                mask_rel = parts[1] if len(parts) == 6 else None
                try:
                    flags = tuple(int(p) for p in parts[-4:])
                except ValueError:
                    raise FormatError(f"{list_path}:{lineno}: bad existence flags") from None
                if any(f not in (0, 1) for f in flags):
                    raise FormatError(f"{list_path}:{lineno}: existence flags must be 0/1")
            else:
                raise FormatError(f"{list_path}:{lineno}: expected 1, 2, 5 or 6 fields, got {len(parts)}")
            img = _resolve(root, img_rel)
            if not os.path.isfile(img):
                raise FormatError(f"{list_path}:{lineno}: image not found: {img}")
            mask = _resolve(root, mask_rel) if mask_rel else None
            if mask and not os.path.isfile(mask):
                raise FormatError(f"{list_path}:{lineno}: mask not found: {mask}")
            entries.append(IndexEntry(image_path=img,
                                      lines_path=lines_path_for(img),
                                      mask_path=mask,
                                      exist_flags=flags,
                                      category=categories.get(img_rel)))
    return DatasetIndex(root=root, entries=entries)


def load_gt_polylines(entry: IndexEntry) -> list[LanePolyline]:
    """Ground-truth lanes in original image coordinates; [] when absent."""
    if not os.path.isfile(entry.lines_path):
        return []
    return parse_lines_file(entry.lines_path)


def load_sample(entry: IndexEntry, h: int, w: int,
                stroke_width: int | None = None) -> Sample:
    """Image resized bilinearly to (h, w); mask loaded (nearest) or rasterized
    from the polyline annotation; existence derived from the final mask."""
    raw = pnm.read_ppm(entry.image_path)
    oh, ow = raw.shape[:2]
    image = bilinear_resize(pnm.u8_to_float(raw).transpose(2, 0, 1), h, w).astype(np.float32)
    if entry.mask_path:
        mask = nearest_resize(pnm.read_pgm(entry.mask_path), h, w)
        if mask.max() > NUM_LANES:
            raise FormatError(f"{entry.mask_path}: class id {mask.max()} out of range")
    else:
        sx = (w - 1.0) / (ow - 1.0) if ow > 1 else 1.0
        sy = (h - 1.0) / (oh - 1.0) if oh > 1 else 1.0
        polys = [p.scaled(sx, sy).clipped(h, w) for p in load_gt_polylines(entry)]
        width = default_stroke_width(w) if stroke_width is None else stroke_width
        mask = rasterize_lanes([p for p in polys if p is not None], h, w, width)
    return Sample(image=image, label_mask=mask, exist=exist_from_mask(mask))


def load_all(index: DatasetIndex, h: int, w: int, stroke_width: int | None = None):
    """Load every entry; returns (loaded, errors) with nothing silently skipped."""
    loaded, errors = [], []
    for entry in index.entries:
        try:
            loaded.append((entry, load_sample(entry, h, w, stroke_width)))
        except (FormatError, OSError) as exc:
            errors.append((entry, exc))
    return loaded, errors


def write_dataset(out_dir: str, scenes, crossroad_flags=None) -> DatasetIndex:
    """Write scenes as a CULane-layout tree (images, masks, lines, lists)."""
    images_dir = os.path.join(out_dir, "images")
    masks_dir = os.path.join(out_dir, "laneseg")
    split_dir = os.path.join(out_dir, "list", "test_split")
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    os.makedirs(split_dir, exist_ok=True)
    if crossroad_flags is None:
        crossroad_flags = [len(polys) == 0 for _, polys in scenes]
    train_lines, test_lines = [], []
    normal_list, crossroad_list = [], []
    for i, (sample, polys) in enumerate(scenes):
        name = f"{i:06d}"
        img_rel = f"/images/{name}.ppm"
        mask_rel = f"/laneseg/{name}.pgm"
        pnm.write_ppm(os.path.join(images_dir, name + ".ppm"),
                      pnm.float_to_u8(sample.image.transpose(1, 2, 0)))
        pnm.write_pgm(os.path.join(masks_dir, name + ".pgm"), sample.label_mask)
        if polys:
            write_lines_file(os.path.join(images_dir, name + ".lines.txt"), polys)
        flags = " ".join(str(int(v)) for v in sample.exist)
        train_lines.append(f"{img_rel} {mask_rel} {flags}")
        test_lines.append(img_rel)
        (crossroad_list if crossroad_flags[i] else normal_list).append(img_rel)
    list_dir = os.path.join(out_dir, "list")
    for fname, lines in (("train.txt", train_lines), ("val.txt", train_lines),
                         ("test.txt", test_lines)):
        with open(os.path.join(list_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    for fname, lines in (("normal.txt", normal_list), ("crossroad.txt", crossroad_list)):
        with open(os.path.join(split_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    return load_culane_index(out_dir, os.path.join(list_dir, "train.txt"))
