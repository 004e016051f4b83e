"""Toy-scale feature encoder trained with a contrastive loss on correspondences."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .msconv import Conv, MSConvConfig, MultiScaleConv, replace_convs
from .synthetic import bilinear
from .tensor import Module, Tensor

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    """A truncated four-block conv net followed by a 1x1 projection.

    ``pool_after`` lists conv indices followed by 2x2 max pooling; the
    feature stride is ``2 ** len(pool_after)``.
    """

    channels: tuple[int, ...] = (64, 128, 256, 256)
    kernels: tuple[int, ...] = (3, 3, 3, 3)
    pool_after: tuple[int, ...] = (0, 1)
    embed_dim: int = 128
    in_channels: int = 3
    msconv: MSConvConfig | None = None

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.pool_after = tuple(int(i) for i in self.pool_after)
        if len(self.channels) != len(self.kernels):
            raise ValueError("channels and kernels must have equal length")
        if self.embed_dim <= 0:
            raise ValueError(f"embed_dim must be positive, got {self.embed_dim}")
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError("kernel sizes must be odd")
        if isinstance(self.msconv, dict):
            self.msconv = MSConvConfig(**self.msconv)

    @property
    def stride(self) -> int:
        return 2 ** len(self.pool_after)

    def receptive_field(self) -> int:
        """Theoretical receptive field in input pixels (largest dilation if msconv)."""
        dmax = max(self.msconv.dilations) if self.msconv else 1
        rf, jump = 1, 1
        for i, k in enumerate(self.kernels):
            rf += dmax * (k - 1) * jump
            if i in self.pool_after:
                rf += jump
                jump *= 2
        return rf

    def min_input_size(self) -> int:
        """Smallest square input every layer accepts."""
        dmax = max(self.msconv.dilations) if self.msconv else 1
        for size in range(1, 4096):
            n, ok = size, True
            for i, k in enumerate(self.kernels):
                d = dmax if (self.msconv and k > 1) else 1
                if n < d * (k - 1) + 1 and d > 1:
                    ok = False
                    break
                if i in self.pool_after:
                    if n < 2:
                        ok = False
                        break
                    n //= 2
            if ok:
                return size
        raise ValueError("no valid input size")


def vgg_config(**kw) -> BackboneConfig:
    return BackboneConfig(**kw)


def alexnet_config(**kw) -> BackboneConfig:
    """AlexNet-shaped variant: wider first kernels, same truncation depth."""
    kw.setdefault("channels", (48, 128, 192, 192))
    kw.setdefault("kernels", (7, 5, 3, 3))
    return BackboneConfig(**kw)


def toy_config(msconv: MSConvConfig | None = None, **kw) -> BackboneConfig:
    kw.setdefault("channels", (16, 32, 32, 32))
    kw.setdefault("embed_dim", 32)
    return BackboneConfig(msconv=msconv, **kw)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.layers: list = []
        cin = config.in_channels
        for i, (c, k) in enumerate(zip(config.channels, config.kernels)):
            if config.msconv is not None and k > 1:
                self.layers.append(MultiScaleConv.init(cin, c, k, rng, config.msconv))
            else:
                self.layers.append(Conv.init(cin, c, k, rng))
            if i in config.pool_after:
                self.layers.append("pool")
            cin = c
        self.head = Conv.init(cin, config.embed_dim, 1, rng, activation=False)

    @property
    def stride(self) -> int:
        return self.config.stride

    def conv_layers(self) -> list:
        return [l for l in self.layers if not isinstance(l, str)]

    def msconv_layers(self) -> list[MultiScaleConv]:
        return [l for l in self.layers if isinstance(l, MultiScaleConv)]

    def on_replaced(self, config: MSConvConfig):
        self.config = replace(self.config, msconv=config)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = T.max_pool2(x) if layer == "pool" else layer(x)
        return self.head(x)


def image_tensor(image: np.ndarray) -> Tensor:
    """(H, W, 3) image -> (1, 3, H, W) tensor."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return Tensor(np.ascontiguousarray(img.transpose(2, 0, 1)[None]))


def raw_features(image: np.ndarray, backbone: Backbone) -> Tensor:
    h, w = image.shape[:2]
    need = backbone.config.min_input_size()
    if min(h, w) < need:
        raise ValueError(f"image {h}x{w} smaller than the network minimum input {need}x{need}")
    return backbone(image_tensor(image))


def extract_features(image: np.ndarray, backbone: Backbone) -> Tensor:
    """Unit-norm embedding at every feature site: Tensor[1, D, h, w]."""
    return T.l2_normalize(raw_features(image, backbone), axis=1)


def site_centers(h: int, w: int, stride: int) -> np.ndarray:
    """Pixel centers (x, y) of all feature sites, raster order, shape (h*w, 2)."""
    off = (stride - 1) / 2.0
    gx, gy = np.meshgrid(np.arange(w) * stride + off, np.arange(h) * stride + off)
    return np.stack([gx.ravel(), gy.ravel()], -1)


def pixel_to_site(points: np.ndarray, stride: int) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - (stride - 1) / 2.0) / stride


def sample_features(fmap: Tensor, points: np.ndarray, stride: int) -> Tensor:
    """Bilinear read of a (1, D, h, w) map at pixel points (n, 2) -> (n, D).

    Points are clamped to the span of site centers.
    """
    _, d, h, w = fmap.shape
    s = pixel_to_site(points, stride)
    fx = np.clip(s[:, 0], 0, w - 1)
    fy = np.clip(s[:, 1], 0, h - 1)
    gx = 2 * fx / max(w - 1, 1) - 1
    gy = 2 * fy / max(h - 1, 1) - 1
    grid = np.stack([gx, gy], -1)[None, None].astype(fmap.dtype)
    out = T.grid_sample(fmap, Tensor(grid))  # (1, D, 1, n)
    return out.reshape(d, len(points)).transpose(1, 0)


def contrastive_loss(f_a: Tensor, f_b: Tensor, positive, margin: float = 1.0) -> Tensor:
    """Mean contrastive loss: d^2 for positives, max(0, margin - d)^2 for negatives."""
    if f_a.shape != f_b.shape:
        raise T.ShapeError("contrastive_loss", "feature", f_b.shape, f_a.shape)
    if f_a.ndim == 1:
        f_a, f_b = f_a.reshape(1, -1), f_b.reshape(1, -1)
    pos = np.broadcast_to(np.asarray(positive, dtype=bool), (f_a.shape[0],))
    diff = f_a - f_b
    sq = (diff * diff).sum(axis=1)
    hinge = T.relu(margin - T.norm(diff, axis=1))
    per = sq * Tensor(pos.astype(f_a.dtype)) + hinge * hinge * Tensor((~pos).astype(f_a.dtype))
    return per.mean()


@dataclass
class HardNegatives:
    points: np.ndarray      # (m, 2) pixel centers, ascending feature distance
    indices: np.ndarray     # (m,) raster site indices
    distances: np.ndarray   # (m,)
    truncated: bool


def mine_hard_negatives(f_src: np.ndarray, target_map: np.ndarray, gt_point, radius_px: float,
                        count: int, stride: int) -> HardNegatives:
    """The ``count`` sites nearest to ``f_src`` in feature space lying more than
    ``radius_px`` pixels from ``gt_point``; ties keep raster order."""
    if radius_px <= 0:
        raise ValueError(f"radius_px must be positive, got {radius_px}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return mine_hard_negatives_batch(np.asarray(f_src)[None], target_map, np.asarray(gt_point, float)[None],
                                     radius_px, count, stride)[0]


def mine_hard_negatives_batch(f_src: np.ndarray, target_map: np.ndarray, gt_points: np.ndarray,
                              radius_px: float, count: int, stride: int) -> list[HardNegatives]:
    tm = np.asarray(target_map, dtype=np.float64)
    if tm.ndim == 4:
        tm = tm[0]
    d, h, w = tm.shape
    sites = tm.reshape(d, h * w).T
    centers = site_centers(h, w, stride)
    f = np.asarray(f_src, dtype=np.float64)
    dist = np.sqrt(np.maximum(((f[:, None, :] - sites[None]) ** 2).sum(-1), 0))
    pix = np.sqrt(((centers[None] - np.asarray(gt_points, float)[:, None]) ** 2).sum(-1))
    out = []
    for i in range(len(f)):
        valid = np.nonzero(pix[i] > radius_px)[0]
        order = valid[np.argsort(dist[i, valid], kind="stable")]
        take = order[:count]
        out.append(HardNegatives(centers[take], take, dist[i, take], len(valid) < count))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class Augmentation:
    """Pixel-space affine composed from mirror, pad, rotate and crop."""

    mirror: bool = False
    pad: int = 0
    angle_deg: float = 0.0
    crop: tuple[int, int] = (0, 0)
    size: tuple[int, int] = (0, 0)  # (H, W) of the original image

    def matrix(self) -> np.ndarray:
        h, w = self.size
        m = np.eye(3)
        if self.mirror:
            m = np.array([[-1.0, 0, w - 1], [0, 1, 0], [0, 0, 1]]) @ m
        m = np.array([[1.0, 0, self.pad], [0, 1, self.pad], [0, 0, 1]]) @ m
        if self.angle_deg:
            a = np.deg2rad(self.angle_deg)
            cx, cy = (w - 1) / 2 + self.pad, (h - 1) / 2 + self.pad
            c, s = np.cos(a), np.sin(a)
            rot = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
            m = rot @ m
        m = np.array([[1.0, 0, -self.crop[0]], [0, 1, -self.crop[1]], [0, 0, 1]]) @ m
        return m

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        if not self.angle_deg:
            # integer-only path stays exact
            x = pts[:, 0] * (-1 if self.mirror else 1) + ((self.size[1] - 1) if self.mirror else 0)
            return np.stack([x + self.pad - self.crop[0], pts[:, 1] + self.pad - self.crop[1]], -1)
        m = self.matrix()
        return pts @ m[:2, :2].T + m[:2, 2]

    def apply_image(self, img: np.ndarray) -> np.ndarray:
        h, w = self.size
        inv = np.linalg.inv(self.matrix())
        gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
        sx = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
        sy = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
        if not self.angle_deg:
            sx, sy = np.round(sx), np.round(sy)
        return bilinear(img, sx, sy)

    def to_dict(self) -> dict:
        return {"mirror": self.mirror, "pad": self.pad, "angle_deg": self.angle_deg,
                "crop": list(self.crop), "size": list(self.size)}


def random_augmentation(rng: np.random.Generator, size: tuple[int, int], max_pad: int = 4,
                        max_angle: float = 8.0, mirror: bool | None = None) -> Augmentation:
    pad = int(rng.integers(0, max_pad + 1))
    crop = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1)))
    angle = float(rng.uniform(-max_angle, max_angle)) if max_angle > 0 else 0.0
    if mirror is None:
        mirror = bool(rng.random() < 0.5)
    return Augmentation(mirror=mirror, pad=pad, angle_deg=angle, crop=crop, size=size)


@dataclass
class TrainSample:
    source: np.ndarray
    target: np.ndarray
    correspondences: np.ndarray          # (n, 4): x_s, y_s, x_t, y_t
    augmentation: tuple[Augmentation, Augmentation] | None = None
    pair_id: str = ""


def augment_sample(sample: TrainSample, rng: np.random.Generator, max_pad: int = 4,
                   max_angle: float = 8.0) -> TrainSample | None:
    """Mirror both images together, then pad/rotate/crop each independently.

    Correspondences that leave either image are dropped; ``None`` if none survive.
    """
    h, w = sample.source.shape[:2]
    flip = bool(rng.random() < 0.5)
    a_s = random_augmentation(rng, (h, w), max_pad, max_angle, mirror=flip)
    a_t = random_augmentation(rng, sample.target.shape[:2], max_pad, max_angle, mirror=flip)
    c = np.asarray(sample.correspondences, dtype=np.float64)
    ps = a_s.apply_points(c[:, :2])
    pt = a_t.apply_points(c[:, 2:4])
    ht, wt = sample.target.shape[:2]
    keep = ((ps[:, 0] >= 0) & (ps[:, 0] <= w - 1) & (ps[:, 1] >= 0) & (ps[:, 1] <= h - 1)
            & (pt[:, 0] >= 0) & (pt[:, 0] <= wt - 1) & (pt[:, 1] >= 0) & (pt[:, 1] <= ht - 1))
    if not keep.any():
        return None
    return TrainSample(a_s.apply_image(sample.source), a_t.apply_image(sample.target),
                       np.concatenate([ps[keep], pt[keep]], axis=1), (a_s, a_t), sample.pair_id)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class EncoderTrainConfig:
    epochs: int = 12
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    margin: float = 1.0
    negatives: int = 60
    radius: float = 32.0 * 64 / 224
    max_correspondences: int = 64
    augment: bool = True
    max_pad: int = 4
    max_angle: float = 8.0
    seed: int = 0


@dataclass
class TrainState:
    backbone: Backbone
    optimizer: T.SGD
    epoch: int = 0
    losses: list[float] = field(default_factory=list)


def make_state(backbone: Backbone, cfg: EncoderTrainConfig) -> TrainState:
    return TrainState(backbone, T.SGD(backbone.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay))


def sample_loss(backbone: Backbone, sample: TrainSample, cfg: EncoderTrainConfig,
                rng: np.random.Generator) -> Tensor:
    corr = np.asarray(sample.correspondences, dtype=np.float64)
    if len(corr) > cfg.max_correspondences:
        corr = corr[np.sort(rng.choice(len(corr), cfg.max_correspondences, replace=False))]
    fs = extract_features(sample.source, backbone)
    ft = extract_features(sample.target, backbone)
    stride = backbone.stride
    a = sample_features(fs, corr[:, :2], stride)
    b = sample_features(ft, corr[:, 2:4], stride)
    pos = contrastive_loss(a, b, True, cfg.margin)
    negs = mine_hard_negatives_batch(a.data, ft.data, corr[:, 2:4], cfg.radius, cfg.negatives, stride)
    rows = np.concatenate([np.full(len(n.indices), i) for i, n in enumerate(negs)]).astype(np.intp)
    cols = np.concatenate([n.indices for n in negs]).astype(np.intp)
    if len(rows) == 0:
        return pos
    d = ft.shape[1]
    tsites = ft.reshape(d, -1).transpose(1, 0)
    neg = contrastive_loss(a[rows], tsites[cols], False, cfg.margin)
    return pos + neg


def train_epoch(state: TrainState, samples: list[TrainSample], cfg: EncoderTrainConfig) -> float:
    """One pass over ``samples``; randomness depends only on (seed, epoch)."""
    rng = rngmod.stream(cfg.seed, "encoder", state.epoch)
    order = rng.permutation(len(samples))
    total, count = 0.0, 0
    for step, idx in enumerate(order):
        sample = samples[idx]
        if cfg.augment:
            sample = augment_sample(sample, rng, cfg.max_pad, cfg.max_angle) or sample
        state.optimizer.zero_grad()
        loss = sample_loss(state.backbone, sample, cfg, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at epoch {state.epoch}, batch {step} "
                                     f"(pair {sample.pair_id or idx})")
        if state.optimizer.lr > 0:
            loss.backward()
            state.optimizer.step()
        total += value
        count += 1
    state.epoch += 1
    mean = total / max(count, 1)
    state.losses.append(mean)
    log.info("encoder epoch %d loss %.5f", state.epoch, mean)
    return mean


def train_encoder(samples: list[TrainSample], backbone: Backbone, epochs: int, lr: float,
                  cfg: EncoderTrainConfig | None = None, state: TrainState | None = None):
    """Train in place; returns ``(backbone, per-epoch mean losses)``."""
    if not samples:
        raise ValueError("train_encoder needs at least one sample")
    cfg = replace(cfg or EncoderTrainConfig(), epochs=epochs, lr=lr)
    state = state or make_state(backbone, cfg)
    state.optimizer.lr = lr
    while state.epoch < epochs:
        train_epoch(state, samples, cfg)
    return backbone, list(state.losses)


def nn_transfer(fs: Tensor | np.ndarray, ft: Tensor | np.ndarray, points_s: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour transfer of source pixel points to target site centers."""
    from .evaluation import nn_match

    return nn_match(fs, ft, points_s, stride)
