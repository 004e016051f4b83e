"""Synthetic image pairs with known geometry.

Every generator returns images in [0, 1] (H, W, 3, float32) together with
the exact source-to-target mapping, so correspondences, flows and masks can
be checked against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def random_texture(rng: np.random.Generator, h: int, w: int, sigmas=(1.0, 2.5, 6.0),
                   contrast: float = 1.0) -> np.ndarray:
    """Multi-scale smoothed colour noise, rescaled to [0, 1] per channel."""
    img = np.zeros((h, w, 3))
    for s in sigmas:
        noise = rng.normal(size=(h, w, 3))
        img += ndimage.gaussian_filter(noise, sigma=(s, s, 0), mode="wrap") * s
    lo = img.min(axis=(0, 1), keepdims=True)
    hi = img.max(axis=(0, 1), keepdims=True)
    img = (img - lo) / np.maximum(hi - lo, 1e-9)
    img = 0.5 + (img - 0.5) * contrast
    return img.astype(np.float32)


def bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, cval: float = 0.0) -> np.ndarray:
    """Sample an (H, W, C) image at float pixel coordinates (x right, y down)."""
    coords = np.stack([ys.ravel(), xs.ravel()])
    chans = [ndimage.map_coordinates(img[..., c].astype(np.float64), coords, order=1, mode="constant", cval=cval)
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1).reshape(xs.shape + (img.shape[2],)).astype(np.float32)


def resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize mapping pixel centers onto pixel centers."""
    sh, sw = img.shape[:2]
    ys = (np.arange(h) + 0.5) * sh / h - 0.5
    xs = (np.arange(w) + 0.5) * sw / w - 0.5
    gx, gy = np.meshgrid(np.clip(xs, 0, sw - 1), np.clip(ys, 0, sh - 1))
    return bilinear(img, gx, gy)


def mirror(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


@dataclass
class SyntheticPair:
    source: np.ndarray
    target: np.ndarray
    # dense ground truth: target pixel coordinate for every source pixel, (H, W, 2) as (x, y)
    forward_map: np.ndarray
    source_mask: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def map_points(self, pts: np.ndarray) -> np.ndarray:
        """Target coordinates of source points (n, 2) via bilinear lookup of the dense map."""
        pts = np.asarray(pts, dtype=np.float64)
        out = bilinear(self.forward_map, pts[:, 0], pts[:, 1], cval=np.nan)
        return out.astype(np.float64)

    def inside_target(self) -> np.ndarray:
        h, w = self.target.shape[:2]
        fx, fy = self.forward_map[..., 0], self.forward_map[..., 1]
        return (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)


def _pixel_mesh(h, w):
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return gx, gy


def translation_pair(rng: np.random.Generator, size: int = 64, shift=None, min_shift: float = 5,
                     max_shift: float = 25, jitter: float = 0.0, noise: float = 0.0) -> SyntheticPair:
    """Two crops of one texture canvas; ``target(x + t) == source(x)``.

    ``shift`` is an integer (tx, ty); by default its length is drawn from
    ``[min_shift, max_shift]`` in a random direction. ``jitter`` adds a
    per-image colour gain/offset perturbation of that magnitude; ``noise`` is
    the std of independent Gaussian pixel noise added to each image.
    """
    if shift is None:
        while True:
            r = rng.uniform(min_shift, max_shift)
            a = rng.uniform(0, 2 * np.pi)
            tx, ty = int(round(r * np.cos(a))), int(round(r * np.sin(a)))
            if min_shift <= np.hypot(tx, ty) <= max_shift:
                break
    else:
        tx, ty = int(shift[0]), int(shift[1])
    m = int(np.ceil(max(max_shift, abs(tx), abs(ty)))) + 1
    canvas = random_texture(rng, size + 2 * m, size + 2 * m)
    src = canvas[m: m + size, m: m + size]
    tgt = canvas[m - ty: m - ty + size, m - tx: m - tx + size]
    src, tgt = _photometric(rng, src, jitter), _photometric(rng, tgt, jitter)
    src, tgt = _pixel_noise(rng, src, noise), _pixel_noise(rng, tgt, noise)
    gx, gy = _pixel_mesh(size, size)
    fmap = np.stack([gx + tx, gy + ty], axis=-1).astype(np.float32)
    return SyntheticPair(src.copy(), tgt.copy(), fmap, meta={"shift": (tx, ty)})


def self_pair(rng: np.random.Generator, size: int = 64) -> SyntheticPair:
    img = random_texture(rng, size, size)
    gx, gy = _pixel_mesh(size, size)
    return SyntheticPair(img, img.copy(), np.stack([gx, gy], -1).astype(np.float32), meta={"shift": (0, 0)})


def _photometric(rng, img, jitter):
    if jitter <= 0:
        return img
    gain = 1.0 + rng.uniform(-jitter, jitter, size=3)
    offset = rng.uniform(-jitter, jitter, size=3) * 0.5
    return np.clip(img * gain + offset, 0, 1).astype(np.float32)


def _pixel_noise(rng, img, std):
    if std <= 0:
        return img
    return np.clip(img + rng.normal(0.0, std, size=img.shape), 0, 1).astype(np.float32)


def smooth_field(rng: np.random.Generator, h: int, w: int, amplitude: float, sigma: float = 10.0) -> np.ndarray:
    """Smooth random displacement field (H, W, 2) with max magnitude ``amplitude``."""
    f = ndimage.gaussian_filter(rng.normal(size=(h, w, 2)), sigma=(sigma, sigma, 0), mode="reflect")
    mag = np.sqrt((f ** 2).sum(-1)).max()
    return (f * (amplitude / max(mag, 1e-12))).astype(np.float64)


def normalized_affine_to_pixels(theta: np.ndarray, h: int, w: int) -> np.ndarray:
    """3x3 pixel-space matrix equivalent to a normalized-coordinate affine (align-corners)."""
    to_norm = np.array([[2.0 / (w - 1), 0, -1], [0, 2.0 / (h - 1), -1], [0, 0, 1]])
    a = np.vstack([np.asarray(theta, dtype=np.float64).reshape(2, 3), [0, 0, 1]])
    return np.linalg.inv(to_norm) @ a @ to_norm


def random_affine(rng: np.random.Generator, max_rot_deg=8.0, max_scale=0.08, max_trans=0.12) -> np.ndarray:
    rot = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    sc = 1.0 + rng.uniform(-max_scale, max_scale)
    tx, ty = rng.uniform(-max_trans, max_trans, size=2)
    c, s = np.cos(rot) * sc, np.sin(rot) * sc
    return np.array([c, -s, tx, s, c, ty])


def warp_pair(rng: np.random.Generator, size: int = 64, theta: np.ndarray | None = None,
              residual: float = 0.0, residual_sigma: float = 12.0, margin: int = 24,
              texture: np.ndarray | None = None) -> SyntheticPair:
    """Target = source warped by a normalized affine ``theta`` plus a smooth residual.

    The source-to-target map is ``T(x) = A x + r(x)`` in pixels, with ``r``
    bounded by ``residual`` pixels. The target is rendered from a larger
    canvas so no zero fill enters the valid region.
    """
    theta = random_affine(rng) if theta is None else np.asarray(theta, dtype=np.float64)
    canvas = texture if texture is not None else random_texture(rng, size + 2 * margin, size + 2 * margin)
    a = normalized_affine_to_pixels(theta, size, size)
    r = smooth_field(rng, size, size, residual, residual_sigma) if residual > 0 else np.zeros((size, size, 2))
    gx, gy = _pixel_mesh(size, size)
    fx = a[0, 0] * gx + a[0, 1] * gy + a[0, 2] + r[..., 0]
    fy = a[1, 0] * gx + a[1, 1] * gy + a[1, 2] + r[..., 1]
    fmap = np.stack([fx, fy], -1)
    # invert T by fixed-point iteration: y = A^-1 (x - r(y_src))
    ainv = np.linalg.inv(a)
    sx = ainv[0, 0] * gx + ainv[0, 1] * gy + ainv[0, 2]
    sy = ainv[1, 0] * gx + ainv[1, 1] * gy + ainv[1, 2]
    for _ in range(30):
        rs = bilinear(r.astype(np.float32), np.clip(sx, 0, size - 1), np.clip(sy, 0, size - 1)).astype(np.float64)
        px, py = gx - rs[..., 0], gy - rs[..., 1]
        sx = ainv[0, 0] * px + ainv[0, 1] * py + ainv[0, 2]
        sy = ainv[1, 0] * px + ainv[1, 1] * py + ainv[1, 2]
    src = canvas[margin: margin + size, margin: margin + size]
    tgt = bilinear(canvas, sx + margin, sy + margin)
    return SyntheticPair(src.copy(), tgt, fmap.astype(np.float32), meta={"theta": theta.tolist(), "residual": residual})


def blob_mask(h, w, cx, cy, rx, ry) -> np.ndarray:
    gx, gy = _pixel_mesh(h, w)
    return (((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2) <= 1.0


def blob_pair(rng: np.random.Generator, size: int = 64, radius=None, max_shift: float | None = None) -> SyntheticPair:
    """Textured elliptical blob on a smooth low-contrast background.

    The blob moves by an integer translation between the images; the
    background is an independent texture in each image, so only blob
    pixels have true correspondences. Radii and shift default to (10, 16)
    and 10 px at 64 px and scale with ``size``.
    """
    if radius is None:
        radius = (10 * size / 64, 16 * size / 64)
    if max_shift is None:
        max_shift = 10 * size / 64
    rx, ry = rng.uniform(*radius, size=2)
    m = max(rx, ry) + 2
    cx, cy = rng.uniform(m, size - 1 - m, size=2)
    for _ in range(100):
        tx, ty = np.round(rng.uniform(-max_shift, max_shift, size=2))
        if m <= cx + tx <= size - 1 - m and m <= cy + ty <= size - 1 - m:
            break
    else:
        tx = ty = 0.0
    fg = random_texture(rng, size + 2 * int(max_shift) + 2, size + 2 * int(max_shift) + 2, sigmas=(0.8, 1.5))
    fg = np.clip(0.2 + 0.8 * fg, 0, 1)
    off = int(max_shift) + 1
    imgs, masks = [], []
    for dx, dy in ((0, 0), (tx, ty)):
        bg = random_texture(rng, size, size, sigmas=(8.0,), contrast=0.25) * 0.5
        mask = blob_mask(size, size, cx + dx, cy + dy, rx, ry)
        tex = fg[off - int(dy): off - int(dy) + size, off - int(dx): off - int(dx) + size]
        imgs.append(np.where(mask[..., None], tex, bg).astype(np.float32))
        masks.append(mask)
    gx, gy = _pixel_mesh(size, size)
    fmap = np.stack([gx + tx, gy + ty], -1).astype(np.float32)
    return SyntheticPair(imgs[0], imgs[1], fmap, masks[0], masks[1],
                         meta={"shift": (float(tx), float(ty)), "center": (float(cx), float(cy)), "radii": (float(rx), float(ry))})


def sample_correspondences(pair: SyntheticPair, rng: np.random.Generator, n: int,
                           mask: np.ndarray | None = None, margin: float = 1.0, inset: float = 0.0) -> np.ndarray:
    """Random (x_s, y_s, x_t, y_t) rows at integer source pixels whose targets stay inside.

    With ``mask`` and ``inset > 0`` the source points keep a distance greater
    than ``inset`` from the mask boundary.
    """
    h, w = pair.source.shape[:2]
    ok = pair.inside_target()
    fx, fy = pair.forward_map[..., 0], pair.forward_map[..., 1]
    ok &= (fx >= margin) & (fx <= w - 1 - margin) & (fy >= margin) & (fy <= h - 1 - margin)
    if mask is not None:
        if inset > 0:
            from scipy.ndimage import distance_transform_edt

            mask = distance_transform_edt(mask) > inset
        ok &= mask
    ys, xs = np.nonzero(ok)
    if len(xs) == 0:
        return np.zeros((0, 4))
    pick = rng.choice(len(xs), size=min(n, len(xs)), replace=False)
    pick.sort()
    xs, ys = xs[pick].astype(np.float64), ys[pick].astype(np.float64)
    return np.stack([xs, ys, fx[ys.astype(int), xs.astype(int)], fy[ys.astype(int), xs.astype(int)]], -1)
