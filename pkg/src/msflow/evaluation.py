"""Evaluation protocols for semantic matching.

Keypoint PCK under two normalisations, area-weighted part IoU, dense-flow
PCK with random object sampling, horizontal-flip selection, co-segmentation
IoU, nearest-neighbour matching and the occlusion probe used to visualise
effective receptive fields.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

DEFAULT_ALPHAS = (0.05, 0.1, 0.15)


class EvalError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _site_centers(h, w, stride):
    off = (stride - 1) / 2.0
    gx, gy = np.meshgrid(np.arange(w) * stride + off, np.arange(h) * stride + off)
    return np.stack([gx.ravel(), gy.ravel()], -1)


def _bilinear_sites(fmap: np.ndarray, points: np.ndarray, stride: int) -> np.ndarray:
    d, h, w = fmap.shape
    s = (np.asarray(points, dtype=np.float64) - (stride - 1) / 2.0) / stride
    fx = np.clip(s[:, 0], 0, w - 1)
    fy = np.clip(s[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(int), max(h - 2, 0))
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    ax, ay = fx - x0, fy - y0
    f = fmap.astype(np.float64)
    return ((1 - ax) * (1 - ay) * f[:, y0, x0] + ax * (1 - ay) * f[:, y0, x1]
            + (1 - ax) * ay * f[:, y1, x0] + ax * ay * f[:, y1, x1]).T


def nn_match(f_s, f_t, points_s: np.ndarray, stride: int) -> np.ndarray:
    """Transfer source pixel points to the target site with the nearest feature.

    Source features are read bilinearly at the points; the match is the
    target site minimising Euclidean distance, first in raster order on
    ties, returned as that site's pixel center.
    """
    fs, ft = _arr(f_s), _arr(f_t)
    fs = fs[0] if fs.ndim == 4 else fs
    ft = ft[0] if ft.ndim == 4 else ft
    q = _bilinear_sites(fs, points_s, stride)
    d, h, w = ft.shape
    sites = ft.reshape(d, -1).T.astype(np.float64)
    dist = (q * q).sum(1)[:, None] - 2 * q @ sites.T + (sites * sites).sum(1)[None]
    idx = np.argmin(dist, axis=1)
    return _site_centers(h, w, stride)[idx]


@dataclass
class KeypointAnnotation:
    pair_id: str
    source_points: np.ndarray
    target_points: np.ndarray
    source_size: tuple[int, int]     # (H, W)
    target_size: tuple[int, int]
    target_bbox: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1

    def __post_init__(self):
        self.source_points = np.asarray(self.source_points, dtype=np.float64).reshape(-1, 2)
        self.target_points = np.asarray(self.target_points, dtype=np.float64).reshape(-1, 2)
        if len(self.source_points) != len(self.target_points):
            raise EvalError(f"pair {self.pair_id}: keypoint counts differ")


@dataclass
class PckResult:
    alphas: tuple[float, ...]
    correct: list[int]
    total: int
    convention: str = "unit"

    def value(self, alpha: float) -> float:
        i = self.alphas.index(alpha)
        return self.correct[i] / self.total if self.total else 0.0

    def values(self) -> dict[float, float]:
        return {a: self.value(a) for a in self.alphas}

    def merge(self, other: PckResult) -> PckResult:
        return PckResult(self.alphas, [a + b for a, b in zip(self.correct, other.correct)],
                         self.total + other.total, self.convention)


def keypoint_distances(ann: KeypointAnnotation, predicted: np.ndarray, convention: str = "unit",
                       unit_mode: str = "diagonal") -> np.ndarray:
    """Per-keypoint error divided by the convention's reference length."""
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 2)
    diff = pred - ann.target_points
    h, w = ann.target_size
    if convention == "unit":
        if unit_mode == "diagonal":
            return np.sqrt((diff ** 2).sum(1)) / np.hypot(h, w)
        if unit_mode == "per_axis":
            return np.sqrt((diff[:, 0] / w) ** 2 + (diff[:, 1] / h) ** 2)
        raise EvalError(f"unknown unit_mode {unit_mode!r}")
    if convention == "bbox":
        if ann.target_bbox is None:
            raise EvalError(f"pair {ann.pair_id}: bbox convention needs a target bounding box")
        x0, y0, x1, y1 = ann.target_bbox
        return np.sqrt((diff ** 2).sum(1)) / max(x1 - x0, y1 - y0)
    raise EvalError(f"unknown PCK convention {convention!r}")


def pck(annotations: Sequence[KeypointAnnotation], predicted: Sequence[np.ndarray],
        alphas: Sequence[float] = DEFAULT_ALPHAS, convention: str = "unit",
        unit_mode: str = "diagonal") -> PckResult:
    """A keypoint is correct iff its normalised error is strictly below alpha."""
    alphas = tuple(alphas)
    correct = [0] * len(alphas)
    total = 0
    for ann, pred in zip(annotations, predicted, strict=True):
        d = keypoint_distances(ann, pred, convention, unit_mode)
        for i, a in enumerate(alphas):
            correct[i] += int((d < a).sum())
        total += len(d)
    return PckResult(alphas, correct, total, convention)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)


def warp_mask(mask: np.ndarray, backward_map: np.ndarray) -> np.ndarray:
    """Nearest-neighbour pull of a source mask through a target->source map (H_t, W_t, 2)."""
    h, w = mask.shape
    x = np.rint(backward_map[..., 0]).astype(int)
    y = np.rint(backward_map[..., 1]).astype(int)
    inside = (x >= 0) & (x < w) & (y >= 0) & (y < h)
    out = np.zeros(backward_map.shape[:2], dtype=bool)
    out[inside] = np.asarray(mask, bool)[y[inside], x[inside]]
    return out


def weighted_iou(source_parts: Sequence[np.ndarray], target_parts: Sequence[np.ndarray],
                 flow_chain) -> float:
    """Area-weighted IoU of warped source parts against target parts.

    ``flow_chain`` is a target->source map (H_t, W_t, 2) or a callable taking
    a source mask and returning it warped into the target frame. Weights are
    the target part areas.
    """
    if len(source_parts) == 0:
        raise EvalError("weighted_iou needs at least one part")
    if len(source_parts) != len(target_parts):
        raise EvalError("source and target part lists differ in length")
    warp = flow_chain if callable(flow_chain) else (lambda m: warp_mask(m, flow_chain))
    num = den = 0.0
    for s, t in zip(source_parts, target_parts):
        area = float(np.asarray(t, bool).sum())
        num += area * mask_iou(warp(s), t)
        den += area
    if den == 0:
        raise EvalError("all target parts are empty")
    return num / den


def dense_flow_pck(gt_map: np.ndarray, predicted_map: np.ndarray, object_mask: np.ndarray,
                   n_samples: int = 1000, seed: int = 0, threshold: float = 5.0,
                   eval_max_dim: float = 100.0) -> float:
    """Fraction of sampled object pixels whose transfer error is below ``threshold``
    once the image is rescaled so its larger side is ``eval_max_dim`` pixels."""
    mask = np.asarray(object_mask, bool)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise EvalError("object mask is empty")
    scale = eval_max_dim / max(mask.shape)
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(xs), size=n_samples, replace=n_samples > len(xs))
    err = np.sqrt(((np.asarray(predicted_map, np.float64)[ys[pick], xs[pick]]
                    - np.asarray(gt_map, np.float64)[ys[pick], xs[pick]]) ** 2).sum(-1)) * scale
    return float((err < threshold).mean())


def flip_select(image_s: np.ndarray, image_t: np.ndarray, feature_loss: Callable) -> bool:
    """True iff mirroring the second image gives a strictly smaller feature loss."""
    plain = float(feature_loss(image_s, image_t))
    flipped = float(feature_loss(image_s, np.ascontiguousarray(image_t[:, ::-1])))
    return flipped < plain


def coseg_iou(predicted_masks: Sequence[np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    ious = [mask_iou(p, g) for p, g in zip(predicted_masks, gt_masks, strict=True)]
    return float(np.mean(ious)) if ious else 0.0


def feature_similarity(f_s: np.ndarray, f_t: np.ndarray, point_s, point_t, stride: int) -> float:
    a = _bilinear_sites(f_s, np.asarray(point_s, float)[None], stride)[0]
    b = _bilinear_sites(f_t, np.asarray(point_t, float)[None], stride)[0]
    a = a / max(np.linalg.norm(a), 1e-12)
    b = b / max(np.linalg.norm(b), 1e-12)
    return float(a @ b)


def receptive_field_probe(image_s: np.ndarray, image_t: np.ndarray, point_s, point_t, backbone,
                          square_side: int, stride: int, gray=None) -> np.ndarray:
    """Similarity drop between two fixed points while a gray square slides over the target.

    Entry (i, j) corresponds to the square with top-left corner
    ``(j * stride, i * stride)``.
    """
    from .encoder import extract_features

    h, w = image_t.shape[:2]
    if gray is None:
        gray = image_t.reshape(-1, image_t.shape[-1]).mean(0)
    gray = np.broadcast_to(np.asarray(gray, np.float32), (image_t.shape[-1],))
    fstride = backbone.stride
    with no_grad():
        fs = extract_features(image_s, backbone).data[0]
        base = feature_similarity(fs, extract_features(image_t, backbone).data[0], point_s, point_t, fstride)
        ys = range(0, h - square_side + 1, stride)
        xs = range(0, w - square_side + 1, stride)
        heat = np.zeros((len(ys), len(xs)))
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                occ = image_t.copy()
                occ[y: y + square_side, x: x + square_side] = gray
                ft = extract_features(occ, backbone).data[0]
                heat[i, j] = base - feature_similarity(fs, ft, point_s, point_t, fstride)
    return heat


def metric_record(metric: str, value: float, n: int, convention: str | None = None,
                  alpha: float | None = None) -> dict:
    return {"metric": metric, "convention": convention, "alpha": alpha, "value": value, "n": n}


def pck_records(result: PckResult, metric: str = "pck") -> list[dict]:
    return [metric_record(metric, result.value(a), result.total, result.convention, a) for a in result.alphas]


def pck_table(rows: dict[str, PckResult]) -> str:
    """Methods x PCK@alpha text table in the benchmark layout (percentages)."""
    if not rows:
        return ""
    alphas = next(iter(rows.values())).alphas
    width = max(len("Methods"), *(len(k) for k in rows))
    head = "Methods".ljust(width) + " | " + " ".join(f"@{a:<5g}".rjust(7) for a in alphas)
    lines = [head, "-" * len(head)]
    for name, res in rows.items():
        lines.append(name.ljust(width) + " | " + " ".join(f"{100 * res.value(a):7.1f}" for a in alphas))
    return "\n".join(lines)


def dumps_records(records: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
