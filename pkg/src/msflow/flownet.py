"""Semantic flow: affine spatial transformer, flow refinement and segmentation.

Coordinates come in three systems:

* pixels, x right and y down, pixel centers at integers;
* image-normalized ``u`` in [-1, 1], with -1/+1 at the first/last pixel center;
* site-normalized ``v`` in [-1, 1] over the feature grid, as consumed by
  ``grid_sample`` on feature maps.

The affine parameters and the flow field live in image-normalized units, so
they are independent of the feature stride. Source site ``p`` is sent to
``A(p + f(p))`` in the target; both the affine-only features F'_t and the
fully warped F''_t are sampled directly from F_t (one resampling each).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import tensor as T
from .encoder import Backbone, extract_features
from .msconv import Conv
from .tensor import Module, Tensor, parameter

log = logging.getLogger(__name__)

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
EPS_PROB = 1e-7


# ---------------------------------------------------------------------------
# coordinate frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    """Image size and the feature grid laid over it."""

    height: int
    width: int
    stride: int
    fh: int
    fw: int

    @classmethod
    def of(cls, image_shape, fmap_shape, stride: int) -> Frame:
        return cls(int(image_shape[0]), int(image_shape[1]), int(stride), int(fmap_shape[-2]), int(fmap_shape[-1]))

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.height, self.width))

    def _axes(self):
        # per-axis (image extent, feature extent)
        return np.array([self.width, self.height], float), np.array([self.fw, self.fh], float)

    def pixel_to_u(self, px: np.ndarray) -> np.ndarray:
        ext, _ = self._axes()
        return 2.0 * np.asarray(px, float) / (ext - 1) - 1.0

    def u_to_pixel(self, u):
        ext, _ = self._axes()
        return (u + 1.0) * ((ext - 1) / 2.0)

    def u_to_v_coeffs(self) -> tuple[np.ndarray, np.ndarray]:
        """``v = a * u + b`` per axis."""
        ext, fext = self._axes()
        s = self.stride
        a = (ext - 1) / (s * np.maximum(fext - 1, 1))
        b = ((ext - 1) / 2.0 - (s - 1) / 2.0) / s * 2.0 / np.maximum(fext - 1, 1) - 1.0
        return a, b

    def u_to_v(self, u):
        a, b = self.u_to_v_coeffs()
        return u * a.astype(np.float32) + b.astype(np.float32) if isinstance(u, Tensor) else u * a + b

    def site_u(self) -> np.ndarray:
        """Image-normalized coordinates of every feature site, (fh, fw, 2)."""
        off = (self.stride - 1) / 2.0
        gx, gy = np.meshgrid(np.arange(self.fw) * self.stride + off, np.arange(self.fh) * self.stride + off)
        return self.pixel_to_u(np.stack([gx, gy], -1))

    def pixel_u(self) -> np.ndarray:
        gx, gy = np.meshgrid(np.arange(self.width, dtype=float), np.arange(self.height, dtype=float))
        return self.pixel_to_u(np.stack([gx, gy], -1))


def apply_affine(theta: Tensor, u) -> Tensor:
    """``A u + t`` for coordinates ``u`` (..., 2), array or Tensor."""
    ux = u[..., 0]
    uy = u[..., 1]
    x = theta[0] * ux + theta[1] * uy + theta[2]
    y = theta[3] * ux + theta[4] * uy + theta[5]
    return T.stack([x, y], axis=-1)


def invert_affine(theta: Tensor, u: Tensor | np.ndarray) -> Tensor:
    """``A^-1 (u - t)`` differentiably in ``theta``."""
    a, b, tx, c, d, ty = (theta[i] for i in range(6))
    det = a * d - b * c
    dx = u[..., 0] - tx
    dy = u[..., 1] - ty
    x = (d * dx - b * dy) / det
    y = (a * dy - c * dx) / det
    return T.stack([x, y], axis=-1)


def affine_grid(theta, frame: Frame, source: Frame | None = None) -> Tensor:
    """Sampling grid (1, fh, fw, 2) in target site units for every source site."""
    source = source or frame
    theta = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta, np.float32))
    q = apply_affine(theta, source.site_u().astype(np.float32))
    return frame.u_to_v(q).reshape(1, source.fh, source.fw, 2)


def affine_warp(f_t: Tensor, theta, frame: Frame) -> Tensor:
    """F'_t: target features resampled at the affine image of every source site."""
    return T.grid_sample(f_t, affine_grid(theta, frame))


def sample_map(fmap: Tensor, u: Tensor | np.ndarray, frame: Frame, clamp: bool = False) -> Tensor:
    """Bilinear read of a (1, C, fh, fw) map at image-normalized points (n, 2) -> (n, C)."""
    v = frame.u_to_v(u if isinstance(u, Tensor) else np.asarray(u, np.float64))
    if clamp:
        v = v.clamp(-1.0, 1.0) if isinstance(v, Tensor) else np.clip(v, -1.0, 1.0)
    if not isinstance(v, Tensor):
        v = Tensor(v.astype(np.float32))
    n = v.shape[0]
    out = T.grid_sample(fmap, v.reshape(1, 1, n, 2))
    return out.reshape(fmap.shape[1], n).transpose(1, 0)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

@dataclass
class FlowNetConfig:
    loc_channels: int = 32
    channels: tuple[int, int] = (32, 64)
    loc_pool: str = "flatten"
    squared_feature_loss: bool = False
    gamma: float = 4.0
    mu: float = 1.0
    nu: float = 1.0
    mask_radius: float = 5.0
    flow_scale: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.loc_pool not in ("avg", "flatten"):
            raise ValueError(f"loc_pool must be 'avg' or 'flatten', got {self.loc_pool!r}")


class LocalizationNet(Module):
    """Two conv blocks, pooling, and a linear regressor to 6 affine parameters.

    The regressor starts at zero weight and identity bias, so the first
    prediction is the identity transform for any input.
    """

    def __init__(self, in_channels: int, grid: tuple[int, int], cfg: FlowNetConfig, rng):
        c = cfg.loc_channels
        self.c1 = Conv.init(in_channels, c, 3, rng)
        self.c2 = Conv.init(c, c, 3, rng)
        self.pool = cfg.loc_pool
        n_in = c if self.pool == "avg" else c * (grid[0] // 4) * (grid[1] // 4)
        self.weight = parameter(np.zeros((6, n_in)))
        self.bias = parameter(IDENTITY.copy())

    def forward(self, x: Tensor) -> Tensor:
        h = T.max_pool2(self.c1(x))
        h = T.max_pool2(self.c2(h))
        if self.pool == "avg":
            h = h.mean(axis=(2, 3))
        else:
            h = h.reshape(1, -1)
        return T.linear(h, self.weight, self.bias).reshape(6)


class RefineNet(Module):
    """Small encoder-decoder over concatenated features with skip connections.

    A shared trunk feeds two zero-initialised heads: a 2-channel flow and a
    1-channel foreground logit.
    """

    def __init__(self, in_channels: int, cfg: FlowNetConfig, rng):
        c1, c2 = cfg.channels
        self.e1 = Conv.init(in_channels, c1, 3, rng)
        self.e2 = Conv.init(c1, c2, 3, rng)
        self.e3 = Conv.init(c2, c2, 3, rng)
        self.d2 = Conv.init(2 * c2, c2, 3, rng)
        self.d1 = Conv.init(c2 + c1, c1, 3, rng)
        self.flow_head = Conv(np.zeros((2, c1, 3, 3)), np.zeros(2), activation=False)
        self.seg_head = Conv(np.zeros((1, c1, 3, 3)), np.zeros(1), activation=False)
        self.flow_scale = cfg.flow_scale

    def trunk(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise T.ShapeError("refine", "feature grid (multiple of 4)", (h, w), "divisible by 4")
        a = self.e1(x)
        b = self.e2(T.max_pool2(a))
        c = self.e3(T.max_pool2(b))
        d = self.d2(T.concat_channels([T.upsample2(c), b]))
        return self.d1(T.concat_channels([T.upsample2(d), a]))

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        h = self.trunk(x)
        return self.flow_head(h) * self.flow_scale, self.seg_head(h)


@dataclass
class FlowOutput:
    theta: Tensor          # (6,)
    flow: Tensor           # (1, 2, fh, fw), image-normalized displacement
    logits: Tensor         # (1, 1, fh, fw)
    f_aff: Tensor          # F'_t
    f_flow: Tensor         # F''_t
    frame: Frame

    @property
    def prob(self) -> Tensor:
        return T.sigmoid(self.logits)


class FlowModel(Module):
    def __init__(self, feat_dim: int, grid: tuple[int, int], cfg: FlowNetConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.config = cfg or FlowNetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feat_dim = int(feat_dim)
        self.grid = tuple(int(g) for g in grid)
        self.loc = LocalizationNet(2 * feat_dim, self.grid, self.config, rng)
        self.refine = RefineNet(2 * feat_dim, self.config, rng)

    def affine_localize(self, f_s: Tensor, f_t: Tensor) -> Tensor:
        if f_s.shape != f_t.shape:
            raise T.ShapeError("affine_localize", "feature map", f_t.shape, f_s.shape)
        return self.loc(T.concat_channels([f_s, f_t]))

    def flow_refine(self, f_s: Tensor, f_aff: Tensor) -> tuple[Tensor, Tensor]:
        return self.refine(T.concat_channels([f_s, f_aff]))

    def forward(self, f_s: Tensor, f_t: Tensor, frame: Frame) -> FlowOutput:
        theta = self.affine_localize(f_s, f_t)
        f_aff = affine_warp(f_t, theta, frame)
        flow, logits = self.flow_refine(f_s, f_aff)
        flow_u = flow.reshape(2, frame.fh * frame.fw).transpose(1, 0).reshape(frame.fh, frame.fw, 2)
        q = apply_affine(theta, flow_u + frame.site_u().astype(np.float32))
        f_flow = T.grid_sample(f_t, frame.u_to_v(q).reshape(1, frame.fh, frame.fw, 2))
        return FlowOutput(theta, flow, logits, f_aff, f_flow, frame)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def feature_loss(f_s: Tensor, f_w: Tensor, squared: bool = False) -> Tensor:
    """Mean over sites of the per-site L2 distance (squared on request)."""
    if f_s.shape != f_w.shape:
        raise T.ShapeError("feature_loss", "feature map", f_w.shape, f_s.shape)
    diff = f_s - f_w
    if squared:
        return (diff * diff).sum(axis=1).mean()
    return T.norm(diff, axis=1).mean()


def loss_affine(f_s: Tensor, f_aff: Tensor, squared: bool = False) -> Tensor:
    return feature_loss(f_s, f_aff, squared)


def loss_flow(f_s: Tensor, f_flow: Tensor, squared: bool = False) -> Tensor:
    return feature_loss(f_s, f_flow, squared)


def backward_points(correspondences: np.ndarray, theta: Tensor, flow: Tensor, frame: Frame) -> Tensor:
    """x''_t in source pixels: target points pulled back through the affine, minus the flow there."""
    c = np.asarray(correspondences, dtype=np.float64)
    u_t = frame.pixel_to_u(c[:, 2:4]).astype(np.float32)
    p = invert_affine(theta, u_t)
    f = sample_map(flow, p, frame, clamp=True)
    return frame.u_to_pixel(p - f)


def loss_corr(correspondences: np.ndarray, theta: Tensor, flow: Tensor, frame: Frame) -> Tensor | None:
    """Mean source-frame pixel distance, normalised by the image diagonal; ``None`` if empty."""
    c = np.asarray(correspondences, dtype=np.float64).reshape(-1, 4)
    if len(c) == 0:
        return None
    back = backward_points(c, theta, flow, frame)
    dist = T.norm(back - c[:, :2].astype(np.float32), axis=1)
    return dist.mean() / frame.diagonal


def upsample_prob(prob: Tensor, frame: Frame) -> Tensor:
    """Site probabilities read bilinearly at every pixel (edge-clamped), (H, W)."""
    u = frame.pixel_u().reshape(-1, 2)
    return sample_map(prob, u, frame, clamp=True).reshape(frame.height, frame.width)


def loss_mask(prob: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    m = np.asarray(target, dtype=np.float32)
    if prob.shape != m.shape:
        raise T.ShapeError("loss_mask", "mask", m.shape, prob.shape)
    p = prob.clamp(EPS_PROB, 1 - EPS_PROB)
    return -(p.log() * m + (1.0 - p).log() * (1.0 - m)).mean()


def loss_total(l_aff, l_flow, l_corr, l_mask, gamma: float = 4.0, mu: float = 1.0, nu: float = 1.0):
    """L_aff + gamma L_flow + mu L_corr + nu L_mask; ``None`` components are skipped."""
    total = 0.0
    for w, term in ((1.0, l_aff), (gamma, l_flow), (mu, l_corr), (nu, l_mask)):
        if term is not None:
            total = total + term * w
    return total


def proxy_mask(points: np.ndarray, height: int, width: int, radius: float = 5.0) -> np.ndarray:
    """1 exactly on pixels within ``radius`` of some point."""
    mask = np.zeros((height, width), dtype=bool)
    gx, gy = np.meshgrid(np.arange(width), np.arange(height))
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        mask |= (gx - x) ** 2 + (gy - y) ** 2 <= radius ** 2
    return mask


def binarize(prob: np.ndarray) -> np.ndarray:
    """Min-max normalise to the unit interval, then threshold at 0.5."""
    p = np.asarray(prob, dtype=np.float64)
    lo, hi = p.min(), p.max()
    if hi - lo < 1e-12:
        return np.zeros(p.shape, dtype=bool) if hi < 0.5 else np.ones(p.shape, dtype=bool)
    return (p - lo) / (hi - lo) >= 0.5


# ---------------------------------------------------------------------------
# dense outputs
# ---------------------------------------------------------------------------

def dense_map(out: FlowOutput) -> np.ndarray:
    """Target pixel coordinate of every source pixel, (H, W, 2)."""
    fr = out.frame
    with T.no_grad():
        u = fr.pixel_u().reshape(-1, 2)
        f = sample_map(out.flow, u, fr, clamp=True)
        q = apply_affine(out.theta, f + u.astype(np.float32))
        px = fr.u_to_pixel(q.data.astype(np.float64))
    return px.reshape(fr.height, fr.width, 2)


def endpoint_error(pred_map: np.ndarray, gt_map: np.ndarray, valid: np.ndarray | None = None) -> float:
    err = np.sqrt(((np.asarray(pred_map, float) - np.asarray(gt_map, float)) ** 2).sum(-1))
    return float(err[valid].mean() if valid is not None else err.mean())


def warp_image(target: np.ndarray, fmap: np.ndarray) -> np.ndarray:
    """Target image pulled into the source frame through a dense source->target map."""
    from .synthetic import bilinear

    return bilinear(target, fmap[..., 0], fmap[..., 1])


@dataclass
class SegmentationOutput:
    prob_source: np.ndarray
    prob_target: np.ndarray
    mask_source: np.ndarray
    mask_target: np.ndarray


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FlowSample:
    source: np.ndarray
    target: np.ndarray
    correspondences: np.ndarray   # (n, 4) x_s, y_s, x_t, y_t
    pair_id: str = ""


@dataclass
class FlowTrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    clip: float = 10.0
    joint_encoder: bool = False
    both_directions: bool = True
    seed: int = 0


@dataclass
class FlowHistory:
    total: list[float] = field(default_factory=list)
    aff: list[float] = field(default_factory=list)
    flow: list[float] = field(default_factory=list)
    corr: list[float] = field(default_factory=list)
    mask: list[float] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[float]]:
        return {"total": self.total, "aff": self.aff, "flow": self.flow, "corr": self.corr, "mask": self.mask}


def _swap(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64).reshape(-1, 4)
    return c[:, [2, 3, 0, 1]]


def direction_losses(model: FlowModel, f_s: Tensor, f_t: Tensor, frame: Frame, corr: np.ndarray):
    cfg = model.config
    out = model(f_s, f_t, frame)
    l_aff = loss_affine(f_s, out.f_aff, cfg.squared_feature_loss)
    l_flow = loss_flow(f_s, out.f_flow, cfg.squared_feature_loss)
    l_corr = loss_corr(corr, out.theta, out.flow, frame)
    target = proxy_mask(np.asarray(corr).reshape(-1, 4)[:, :2], frame.height, frame.width, cfg.mask_radius)
    l_mask = loss_mask(upsample_prob(out.prob, frame), target)
    return out, (l_aff, l_flow, l_corr, l_mask)


def pair_losses(model: FlowModel, f_s: Tensor, f_t: Tensor, frame: Frame, corr: np.ndarray,
                both_directions: bool = True):
    """Total loss summed over the forward and (optionally) backward direction."""
    cfg = model.config
    parts = [direction_losses(model, f_s, f_t, frame, corr)[1]]
    if both_directions:
        parts.append(direction_losses(model, f_t, f_s, frame, _swap(corr))[1])
    total = sum(loss_total(*p, gamma=cfg.gamma, mu=cfg.mu, nu=cfg.nu) for p in parts)
    comps = [sum(float(p[i].data) for p in parts if p[i] is not None) for i in range(4)]
    return total, comps


def _clip_grads(params, max_norm: float):
    if max_norm <= 0:
        return
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)
    n = np.sqrt(sq)
    if n > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / n)


def make_flow_model(encoder: Backbone, image_size: tuple[int, int], cfg: FlowNetConfig | None = None,
                    seed: int = 0) -> FlowModel:
    stride = encoder.stride
    grid = (image_size[0] // stride, image_size[1] // stride)
    return FlowModel(encoder.config.embed_dim, grid, cfg, rngmod.stream(seed, "flownet", "init"))


def flow_parameters(model: FlowModel, encoder: Backbone, cfg: FlowTrainConfig) -> list[Tensor]:
    return model.parameters() + (encoder.parameters() if cfg.joint_encoder else [])


def make_flow_optimizer(model: FlowModel, encoder: Backbone, cfg: FlowTrainConfig):
    params = flow_parameters(model, encoder, cfg)
    if cfg.optimizer == "adam":
        return T.Adam(params, cfg.lr)
    if cfg.optimizer == "sgd":
        return T.SGD(params, cfg.lr, cfg.momentum)
    raise ValueError(f"optimizer must be 'adam' or 'sgd', got {cfg.optimizer!r}")


def train_flownet(samples: list[FlowSample], encoder: Backbone, model: FlowModel,
                  cfg: FlowTrainConfig | None = None, callback=None, optimizer=None,
                  start_epoch: int = 0, history: FlowHistory | None = None) -> tuple[FlowModel, FlowHistory]:
    """One pair per step; the encoder stays frozen unless ``joint_encoder``.

    Passing the ``optimizer``, ``start_epoch`` and ``history`` of an earlier
    run resumes it exactly.
    """
    cfg = cfg or FlowTrainConfig()
    if not samples:
        raise ValueError("train_flownet needs at least one sample")
    params = flow_parameters(model, encoder, cfg)
    opt = optimizer or make_flow_optimizer(model, encoder, cfg)
    cache = {}
    if not cfg.joint_encoder:
        with T.no_grad():
            for i, s in enumerate(samples):
                cache[i] = (extract_features(s.source, encoder).detach(), extract_features(s.target, encoder).detach())
    hist = history or FlowHistory()
    for epoch in range(start_epoch, cfg.epochs):
        order = rngmod.stream(cfg.seed, "flownet", epoch).permutation(len(samples))
        sums = np.zeros(5)
        for step, i in enumerate(order):
            s = samples[i]
            if cfg.joint_encoder:
                f_s, f_t = extract_features(s.source, encoder), extract_features(s.target, encoder)
            else:
                f_s, f_t = cache[i]
            frame = Frame.of(s.source.shape, f_s.shape, encoder.stride)
            opt.zero_grad()
            total, comps = pair_losses(model, f_s, f_t, frame, s.correspondences, cfg.both_directions)
            value = float(total.data)
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite flow loss at epoch {epoch}, step {step} (pair {s.pair_id or i})")
            if cfg.lr > 0:
                total.backward()
                _clip_grads(params, cfg.clip)
                opt.step()
            sums += [value, *comps]
        means = sums / len(samples)
        for name, v in zip(("total", "aff", "flow", "corr", "mask"), means):
            getattr(hist, name).append(float(v))
        log.info("flow epoch %d total %.5f corr %.5f", epoch + 1, means[0], means[3])
        if callback is not None:
            callback(epoch, model, hist)
    return model, hist


def predict(model: FlowModel, encoder: Backbone, source: np.ndarray, target: np.ndarray) -> FlowOutput:
    with T.no_grad():
        f_s = extract_features(source, encoder)
        f_t = extract_features(target, encoder)
        frame = Frame.of(source.shape, f_s.shape, encoder.stride)
        return model(f_s, f_t, frame)


def segment(model: FlowModel, encoder: Backbone, source: np.ndarray, target: np.ndarray) -> SegmentationOutput:
    """Foreground probabilities for both images (one per direction) and their binary masks."""
    fwd = predict(model, encoder, source, target)
    bwd = predict(model, encoder, target, source)
    with T.no_grad():
        ps = upsample_prob(fwd.prob, fwd.frame).data.astype(np.float64)
        pt = upsample_prob(bwd.prob, bwd.frame).data.astype(np.float64)
    return SegmentationOutput(ps, pt, binarize(ps), binarize(pt))
