"""Dataset directory layout shared by mining, training and evaluation.

::

    images/<id>.png|jpg
    classes.json     {"<id>": "<class label>", ...}
    pairs.jsonl      one object per pair

A pair row holds ``source`` and ``target`` image ids, a ``pair_id``,
``correspondences`` as ``[x_s, y_s, x_t, y_t]`` pixel quadruples and,
optionally, ``keypoints`` with ``source``/``target`` point lists and a
``target_bbox`` ``[x0, y0, x1, y1]``. Mined rows add per-correspondence
``scales`` and ``confidences``. Coordinates refer to the stored image size.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .evaluation import KeypointAnnotation

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(ValueError):
    pass


@dataclass
class PairRecord:
    source: str
    target: str
    pair_id: str
    correspondences: np.ndarray
    keypoints: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = dict(self.extra)
        row.update(source=self.source, target=self.target, pair_id=self.pair_id,
                   correspondences=[[float(v) for v in r] for r in np.asarray(self.correspondences).reshape(-1, 4)])
        if self.keypoints is not None:
            row["keypoints"] = self.keypoints
        return row

    @classmethod
    def from_row(cls, row: dict, line: int = 0) -> PairRecord:
        try:
            src, tgt = str(row["source"]), str(row["target"])
        except KeyError as e:
            raise DatasetError(f"pairs.jsonl line {line}: missing field {e.args[0]!r}") from None
        corr = np.asarray(row.get("correspondences", []), dtype=np.float64).reshape(-1, 4)
        extra = {k: v for k, v in row.items() if k not in ("source", "target", "pair_id", "correspondences", "keypoints")}
        return cls(src, tgt, str(row.get("pair_id", f"{src}__{tgt}")), corr, row.get("keypoints"), extra)


def image_paths(root) -> dict[str, Path]:
    d = Path(root) / "images"
    if not d.is_dir():
        return {}
    out = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise DatasetError(f"duplicate image id {p.stem!r}")
            out[p.stem] = p
    return out


def image_size_of(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as img:
        return img.size[1], img.size[0]


def load_images(root, size: int | None = None, ids=None) -> dict[str, np.ndarray]:
    paths = image_paths(root)
    ids = sorted(paths) if ids is None else ids
    missing = [i for i in ids if i not in paths]
    if missing:
        raise DatasetError(f"images not found: {missing}")
    return {i: io.read_image(paths[i], size) for i in ids}


def load_classes(root) -> dict[str, str]:
    p = Path(root) / "classes.json"
    if not p.exists():
        return {}
    return {str(k): str(v) for k, v in json.loads(p.read_text()).items()}


def load_pairs(root) -> list[PairRecord]:
    p = Path(root) / "pairs.jsonl"
    if not p.exists():
        return []
    return [PairRecord.from_row(r, i + 1) for i, r in enumerate(io.read_jsonl(p))]


def write_pairs(path, records) -> None:
    io.write_jsonl(path, [r.to_row() for r in records])


def rescale_points(points: np.ndarray, from_hw, to_hw) -> np.ndarray:
    """Map pixel coordinates between image sizes with the pixel-centre resize convention."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sy = to_hw[0] / from_hw[0]
    sx = to_hw[1] / from_hw[1]
    return np.stack([(p[:, 0] + 0.5) * sx - 0.5, (p[:, 1] + 0.5) * sy - 0.5], -1)


def rescale_correspondences(corr: np.ndarray, src_hw, tgt_hw, size: int) -> np.ndarray:
    c = np.asarray(corr, dtype=np.float64).reshape(-1, 4)
    if tuple(src_hw) == (size, size) and tuple(tgt_hw) == (size, size):
        return c
    return np.concatenate([rescale_points(c[:, :2], src_hw, (size, size)),
                           rescale_points(c[:, 2:], tgt_hw, (size, size))], axis=1)


def annotations(root, records: list[PairRecord] | None = None) -> list[KeypointAnnotation]:
    """Keypoint annotations of every annotated pair, in stored image coordinates."""
    paths = image_paths(root)
    out = []
    for r in records if records is not None else load_pairs(root):
        if not r.keypoints:
            continue
        kp = r.keypoints
        bbox = kp.get("target_bbox")
        out.append(KeypointAnnotation(
            r.pair_id, np.asarray(kp["source"], float).reshape(-1, 2), np.asarray(kp["target"], float).reshape(-1, 2),
            image_size_of(paths[r.source]), image_size_of(paths[r.target]),
            tuple(bbox) if bbox is not None else None))
    return out


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def write_synthetic(root, n_pairs: int, size: int = 64, seed: int = 0, kind: str = "translation",
                    n_correspondences: int = 60, n_keypoints: int = 10) -> Path:
    """Write a dataset of synthetic pairs with ground-truth correspondences and keypoints.

    Each pair forms its own class, so the image graph links exactly the two
    images of a pair. ``kind`` is ``translation``, ``warp`` or ``blob``.
    """
    from . import rng as rngmod
    from .synthetic import blob_pair, sample_correspondences, translation_pair, warp_pair

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    classes, records = {}, []
    for i in range(n_pairs):
        rng = rngmod.stream(seed, "dataset", kind, i)
        if kind == "translation":
            pair = translation_pair(rng, size)
            mask = None
        elif kind == "warp":
            pair = warp_pair(rng, size, residual=4.0)
            mask = None
        elif kind == "blob":
            pair = blob_pair(rng, size)
            mask = pair.source_mask
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        a, b = f"p{i:04d}a", f"p{i:04d}b"
        io.write_image(root / "images" / f"{a}.png", pair.source)
        io.write_image(root / "images" / f"{b}.png", pair.target)
        classes[a] = classes[b] = f"pair{i:04d}"
        corr = sample_correspondences(pair, rng, n_correspondences, mask=mask, margin=2,
                                      inset=5.0 if mask is not None else 0.0)
        kp = sample_correspondences(pair, rng, n_keypoints, mask=mask, margin=2)
        records.append(PairRecord(a, b, f"{a}__{b}", corr, {
            "source": kp[:, :2].tolist(), "target": kp[:, 2:].tolist(),
            "target_bbox": [0.0, 0.0, float(size - 1), float(size - 1)]}))
    (root / "classes.json").write_text(json.dumps(classes, indent=1, sort_keys=True) + "\n")
    write_pairs(root / "pairs.jsonl", records)
    return root
