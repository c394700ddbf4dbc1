"""Shared fixture builder: a 6-image dataset with hand-planted prediction
errors (1 missed lane, 1 hallucinated lane, 1 crossroad image with 2
hallucinations) in CULane layout plus a matching prediction directory."""

import os

import numpy as np

from lanedet import data

H, W = 96, 192
GT_LANE_COUNTS = (2, 3, 2, 4, 3)  # images 0..4; image 5 is the crossroad
EXPECTED = {"tp": 13, "fp": 1, "fn": 1, "crossroad_fp": 2}


def _vertical_lane(x, x_bottom_shift=6.0):
    ys = np.linspace(12.0, H - 4.0, 8)
    xs = np.linspace(x, x + x_bottom_shift, 8)
    return data.LanePolyline(np.stack([xs, ys], axis=1))


def _lanes_for_image(i, count):
    return [_vertical_lane(18.0 + 38.0 * k + 3.0 * i) for k in range(count)]


def build_planted_dataset(root):
    """Write dataset + predictions; returns (index, pred_root, expected)."""
    scenes = []
    for i, count in enumerate(GT_LANE_COUNTS):
        lanes = _lanes_for_image(i, count)
        mask = data.rasterize_lanes(lanes, H, W, data.default_stroke_width(W))
        image = np.full((3, H, W), 0.3, dtype=np.float32)
        scenes.append((data.Sample(image=image, label_mask=mask,
                                   exist=data.exist_from_mask(mask)), lanes))
    crossroad_img = data.Sample(image=np.full((3, H, W), 0.3, dtype=np.float32),
                                label_mask=np.zeros((H, W), dtype=np.uint8),
                                exist=np.zeros(4, dtype=np.uint8))
    scenes.append((crossroad_img, []))
    data.write_dataset(root, scenes)
    index = data.load_culane_index(root)

    pred_root = os.path.join(root, "preds")
    os.makedirs(os.path.join(pred_root, "images"), exist_ok=True)

    def write_pred(i, lanes):
        data.write_lines_file(os.path.join(pred_root, "images", f"{i:06d}.pred.txt"), lanes)

    write_pred(0, _lanes_for_image(0, 2))
    write_pred(1, _lanes_for_image(1, 3)[:2])           # one missed lane -> FN
    write_pred(2, _lanes_for_image(2, 2) + [_vertical_lane(160.0)])  # hallucination -> FP
    write_pred(3, _lanes_for_image(3, 4))
    write_pred(4, _lanes_for_image(4, 3))
    write_pred(5, [_vertical_lane(40.0), _vertical_lane(120.0)])     # crossroad FPs
    return index, pred_root, dict(EXPECTED)
