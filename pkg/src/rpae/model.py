"""Regional priority autoencoder and the whole-image baseline.

The RPAE runs a shared convolutional encoder, a region proposal head over the
encoded feature map, and one decoder per region category. Each decoder sees
only the ROI-pooled latent of its region and reconstructs that region as a
fixed ``P x P`` patch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .geometry import (AnchorGridSpec, Box, anchor_array, clip_array, decode_array,
                       nms_indices, roi_pool, roi_pool_backward)
from .scoring import (CategoryConfig, RegionScore, THIReport, build_report,
                      check_categories, region_error)

DEFAULT_CATEGORIES = (CategoryConfig("on_track", 5.0), CategoryConfig("track_side", 1.0))

# exp() guard for decoded proposal sizes
MAX_LOG_SCALE = 4.0

RPN_POOLING = ("none", "column_median")


def column_median(feature: np.ndarray):
    """Per-column lower median over rows, broadcast back to full height.

    Returns ``(out, index)``; ``index`` (N, C, 1, W) marks the row each median came from.
    """
    h = feature.shape[2]
    k = (h - 1) // 2
    index = np.argpartition(feature, k, axis=2)[:, :, k:k + 1, :]
    med = np.take_along_axis(feature, index, axis=2)
    return np.broadcast_to(med, feature.shape).copy(), index


def column_median_backward(dout: np.ndarray, index: np.ndarray) -> np.ndarray:
    dx = np.zeros_like(dout)
    np.put_along_axis(dx, index, dout.sum(axis=2, keepdims=True), axis=2)
    return dx


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass
class ModelConfig:
    image_height: int = 64
    image_width: int = 64
    feature_stride: int = 4
    latent_channels: int = 16
    rpn_channels: int = 32
    rpn_coords: bool = True
    rpn_pooling: str = "column_median"
    anchors: AnchorGridSpec = field(default_factory=AnchorGridSpec)
    categories: tuple[CategoryConfig, ...] = DEFAULT_CATEGORIES
    patch_size: int = 32
    pooled_size: int = 4
    objectness_threshold: float = 0.5
    nms_threshold: float = 0.5
    max_proposals: int = 8
    background_weight: float = 1.0
    severity_saturation: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.anchors, dict):
            self.anchors = AnchorGridSpec(**self.anchors)
        self.categories = tuple(CategoryConfig(**c) if isinstance(c, dict) else c
                                for c in self.categories)
        check_categories(self.categories)
        s = self.feature_stride
        if not _is_pow2(s) or s < 2:
            raise ValueError(f"feature_stride must be a power of two >= 2, got {s}")
        if self.image_height % s or self.image_width % s:
            raise ValueError(
                f"image size {self.image_height}x{self.image_width} not divisible by stride {s}")
        if self.anchors.feature_stride != s:
            raise ValueError("anchor feature_stride must equal the encoder stride")
        if self.patch_size < 4 or self.patch_size % self.pooled_size \
                or not _is_pow2(self.patch_size // self.pooled_size) \
                or self.patch_size == self.pooled_size:
            raise ValueError(
                "patch_size must be >= 4 and pooled_size times a power of two >= 2")
        if self.rpn_pooling not in RPN_POOLING:
            raise ValueError(f"rpn_pooling must be one of {RPN_POOLING}, got {self.rpn_pooling!r}")
        if self.max_proposals < 1:
            raise ValueError("max_proposals must be >= 1")
        if not 0 < self.nms_threshold <= 1:
            raise ValueError("nms_threshold must be in (0, 1]")

    @property
    def feature_shape(self) -> tuple[int, int]:
        return self.image_height // self.feature_stride, self.image_width // self.feature_stride

    @property
    def num_anchors(self) -> int:
        return self.anchors.num_shapes

    @property
    def priorities(self) -> np.ndarray:
        return np.array([c.priority for c in self.categories])

    def category_index(self, name: str) -> int:
        for i, c in enumerate(self.categories):
            if c.name == name:
                return i
        raise KeyError(f"unknown category {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anchors"] = {"feature_stride": self.anchors.feature_stride,
                        "shapes": [list(s) for s in self.anchors.shapes]}
        d["categories"] = [asdict(c) for c in self.categories]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float
    category_id: int
    category_confidence: float


@dataclass
class RpnOutput:
    """Raw head outputs for a batch: (N, A, h, w), (N, 4A, h, w), (N, K*A, h, w)."""

    objectness: np.ndarray
    deltas: np.ndarray
    category_logits: np.ndarray

    def flat(self, i: int, num_anchors: int):
        """Per-anchor views for image ``i``: (M,), (M, 4), (M, K) in anchor order."""
        a = num_anchors
        _, _, h, w = self.objectness.shape
        obj = self.objectness[i].transpose(1, 2, 0).reshape(-1)
        deltas = self.deltas[i].reshape(a, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)
        k = self.category_logits.shape[1] // a
        logits = self.category_logits[i].reshape(a, k, h, w).transpose(2, 3, 0, 1).reshape(-1, k)
        return obj, deltas, logits

    @staticmethod
    def unflat(obj, deltas, logits, num_anchors, h, w):
        """Inverse of :meth:`flat` for one image; returns (A, h, w), (4A, h, w), (KA, h, w)."""
        a = num_anchors
        k = logits.shape[1]
        o = obj.reshape(h, w, a).transpose(2, 0, 1)
        d = deltas.reshape(h, w, a, 4).transpose(2, 3, 0, 1).reshape(4 * a, h, w)
        c = logits.reshape(h, w, a, k).transpose(2, 3, 0, 1).reshape(k * a, h, w)
        return o, d, c


def build_encoder(config: ModelConfig, rng) -> nn.Sequential:
    n_down = int(math.log2(config.feature_stride))
    latent = config.latent_channels
    widths = [max(4, latent >> (n_down - 1 - i)) for i in range(n_down)]
    layers, c_in = [], 1
    for i, c in enumerate(widths):
        layers += [nn.Conv2d(f"encoder.conv{i}", c_in, c, 3, stride=2, pad=1, rng=rng),
                   nn.Activation("relu")]
        c_in = c
    layers += [nn.Conv2d(f"encoder.conv{n_down}", c_in, latent, 3, stride=1, pad=1, rng=rng),
               nn.Activation("relu")]
    return nn.Sequential(layers)


def build_upsampler(prefix: str, c_in: int, in_size: int, out_size: int, rng) -> nn.Sequential:
    """Stack of stride-2 transposed convolutions from ``in_size`` to ``out_size``, sigmoid output."""
    n_up = int(math.log2(out_size // in_size))
    layers = []
    for s in range(n_up):
        last = s == n_up - 1
        c_out = 1 if last else max(4, c_in // 2 if s else c_in)
        layers += [nn.ConvTranspose2d(f"{prefix}.deconv{s}", c_in, c_out, 4, stride=2,
                                      pad=1, rng=rng),
                   nn.Activation("sigmoid" if last else "relu")]
        c_in = c_out
    return nn.Sequential(layers)


class _Net:
    kind = "net"
    # calibrated THI threshold, persisted with checkpoints
    threshold: float | None = None

    def parameters(self) -> list[nn.Parameter]:
        raise NotImplementedError

    def _check_names(self):
        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")

    def named_parameters(self) -> dict[str, nn.Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].value.dtype

    def _check_image(self, image):
        cfg = self.config
        if image.ndim != 4 or image.shape[1:] != (1, cfg.image_height, cfg.image_width):
            raise ValueError(
                f"image shape {image.shape} does not match configured "
                f"(n, 1, {cfg.image_height}, {cfg.image_width})")
        return image.astype(self.dtype, copy=False)


class RpaeModel(_Net):
    kind = "rpae"

    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        a, k = config.num_anchors, len(config.categories)
        self.encoder = build_encoder(config, rng)
        lat, hid = config.latent_channels, config.rpn_channels
        extra = 2 if config.rpn_coords else 0
        self.rpn_conv = nn.Conv2d("rpn.conv", lat + extra, hid, 3, stride=1, pad=1, rng=rng)
        self.rpn_objectness = nn.Conv2d("rpn.objectness", hid, a, 1, rng=rng)
        self.rpn_deltas = nn.Conv2d("rpn.deltas", hid, 4 * a, 1, rng=rng)
        self.rpn_category = nn.Conv2d("rpn.category", hid, k * a, 1, rng=rng)
        self.decoders = [
            build_upsampler(f"decoder.{c.name}", lat, config.pooled_size, config.patch_size, rng)
            for c in config.categories]
        self.anchors = anchor_array(config.anchors, *config.feature_shape)
        self._check_names()

    def parameters(self):
        ps = self.encoder.parameters()
        for layer in (self.rpn_conv, self.rpn_objectness, self.rpn_deltas, self.rpn_category):
            ps += layer.parameters()
        for d in self.decoders:
            ps += d.parameters()
        return ps

    def encoder_parameters(self):
        return self.encoder.parameters()

    def rpn_parameters(self):
        return [p for layer in (self.rpn_conv, self.rpn_objectness, self.rpn_deltas,
                                self.rpn_category) for p in layer.parameters()]

    # -- encoder ------------------------------------------------------------

    def encode(self, image: np.ndarray) -> np.ndarray:
        return self.encode_with_cache(image)[0]

    def encode_with_cache(self, image):
        return self.encoder.forward(self._check_image(image))

    def encode_backward(self, dfeature, cache):
        return self.encoder.backward(dfeature, cache)

    # -- region proposal head ----------------------------------------------

    def rpn_forward(self, feature: np.ndarray) -> RpnOutput:
        return self.rpn_forward_with_cache(feature)[0]

    def _with_coords(self, feature):
        # position planes let the head regress offsets of boxes larger than its receptive field
        if not self.config.rpn_coords:
            return feature.copy()
        n, _, hf, wf = feature.shape
        ys, xs = np.meshgrid((np.arange(hf) + 0.5) / hf, (np.arange(wf) + 0.5) / wf,
                             indexing="ij")
        planes = np.broadcast_to(np.stack([ys, xs]).astype(feature.dtype), (n, 2, hf, wf))
        return np.concatenate([feature, planes], axis=1)

    def rpn_forward_with_cache(self, feature):
        median_index = None
        if self.config.rpn_pooling == "column_median":
            # regions span whole columns; a row median ignores compact blobs
            feature, median_index = column_median(feature)
        h, c_conv = self.rpn_conv.forward(self._with_coords(feature))
        h, c_relu = nn.pointwise(h, "relu")
        logits, c_obj = self.rpn_objectness.forward(h)
        prob, c_sig = nn.pointwise(logits, "sigmoid")
        deltas, c_del = self.rpn_deltas.forward(h)
        cats, c_cat = self.rpn_category.forward(h)
        return RpnOutput(prob, deltas, cats), (c_conv, c_relu, c_obj, c_sig, c_del, c_cat,
                                               median_index)

    def rpn_backward(self, grads: RpnOutput, cache):
        c_conv, c_relu, c_obj, c_sig, c_del, c_cat, median_index = cache
        dh = self.rpn_objectness.backward(nn.pointwise_backward(grads.objectness, c_sig), c_obj)
        dh = dh + self.rpn_deltas.backward(grads.deltas, c_del)
        dh = dh + self.rpn_category.backward(grads.category_logits, c_cat)
        dx = self.rpn_conv.backward(nn.pointwise_backward(dh, c_relu), c_conv)
        dx = dx[:, :self.config.latent_channels]
        if median_index is not None:
            dx = column_median_backward(dx, median_index)
        return dx

    def propose(self, rpn: RpnOutput, index: int = 0) -> list[Proposal]:
        """Decode, clip, threshold, suppress and rank the anchors of one image."""
        cfg = self.config
        obj, deltas, logits = rpn.flat(index, cfg.num_anchors)
        obj = obj.astype(np.float64)
        keep = np.flatnonzero(obj >= cfg.objectness_threshold)
        if keep.size == 0:
            return []
        d = deltas[keep].astype(np.float64)
        d[:, 2:] = np.clip(d[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
        boxes = clip_array(decode_array(self.anchors[keep], d),
                           cfg.image_width, cfg.image_height)
        order = nms_indices(boxes, obj[keep], cfg.nms_threshold)[:cfg.max_proposals]
        probs = nn.softmax_channels(logits[keep][order].astype(np.float64)[:, :, None, None])
        probs = probs[:, :, 0, 0]
        return [Proposal(Box.from_array(boxes[i]), float(obj[keep][i]),
                         int(p.argmax()), float(p.max()))
                for i, p in zip(order, probs)]

    # -- category decoders -------------------------------------------------

    def region_box(self, box: Box) -> Box:
        """Image extent of the feature cells ROI pooling reads for ``box``.

        Decoders can only see whole cells, so reconstruction is judged over this
        grid-snapped box rather than the raw proposal.
        """
        cfg = self.config
        s = cfg.feature_stride
        return Box(max(0, math.floor(box.x_min / s) * s), max(0, math.floor(box.y_min / s) * s),
                   min(cfg.image_width, math.ceil(box.x_max / s) * s),
                   min(cfg.image_height, math.ceil(box.y_max / s) * s))

    def pool_region(self, feature: np.ndarray, box: Box):
        s = self.config.pooled_size
        return roi_pool(feature, box, s, s, self.config.feature_stride)

    def decode_pooled(self, pooled: np.ndarray, category_id: int):
        """Run decoder ``category_id`` on pooled latents (R, C, s, s) -> patches (R, 1, P, P)."""
        return self.decoders[category_id].forward(pooled)

    def decode_region(self, feature: np.ndarray, proposal) -> np.ndarray:
        """Reconstruct the region of ``proposal`` (a Proposal or a ``(Box, category_id)`` pair)."""
        if isinstance(proposal, Proposal):
            box, cat = proposal.box, proposal.category_id
        else:
            box, cat = proposal
        pooled, _ = self.pool_region(feature, box)
        return self.decode_pooled(pooled, cat)[0]

    def forward(self, image: np.ndarray):
        """Full inference for a single image: ``(proposals, patches)``, aligned."""
        feature = self.encode(image)
        proposals = self.propose(self.rpn_forward(feature))
        return proposals, [self.decode_region(feature, p) for p in proposals]

    def score(self, image: np.ndarray, threshold: float) -> THIReport:
        cfg = self.config
        feature = self.encode(image)
        proposals = self.propose(self.rpn_forward(feature))
        prio = cfg.priorities
        scores = []
        for p in proposals:
            extent = self.region_box(p.box)
            err = region_error(image, self.decode_region(feature, p), extent)
            scores.append(RegionScore(extent, p.category_id, err, float(prio[p.category_id])))
        fallback = 0.0
        if not scores or sum(s.weight for s in scores) == 0:
            # no usable regions: judge the whole frame with the highest-priority decoder
            whole = Box(0, 0, cfg.image_width, cfg.image_height)
            top = int(np.argmax(prio))
            fallback = region_error(image, self.decode_region(feature, (whole, top)), whole)
            scores = []
        return build_report(scores, fallback, cfg.background_weight, threshold,
                            cfg.severity_saturation)


class BaselineModel(_Net):
    """Conventional whole-image autoencoder sharing the RPAE encoder layout."""

    kind = "baseline"

    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        hf, wf = config.feature_shape
        if hf != wf or config.image_height != config.image_width:
            raise ValueError("the baseline autoencoder needs square images")
        if hf % config.pooled_size or not _is_pow2(config.image_height // config.pooled_size):
            raise ValueError("feature size must be a multiple of pooled_size")
        self.encoder = build_encoder(config, rng)
        k = hf // config.pooled_size
        self.bottleneck = nn.MaxPool2d(k, k)
        self.decoder = build_upsampler("decoder.image", config.latent_channels,
                                       config.pooled_size, config.image_height, rng)
        self._check_names()

    def parameters(self):
        return self.encoder.parameters() + self.decoder.parameters()

    def forward_with_cache(self, image):
        x = self._check_image(image)
        f, c_enc = self.encoder.forward(x)
        z, c_pool = self.bottleneck.forward(f)
        out, c_dec = self.decoder.forward(z)
        return out, (c_enc, c_pool, c_dec)

    def forward(self, image):
        return self.forward_with_cache(image)[0]

    def backward(self, dout, cache):
        c_enc, c_pool, c_dec = cache
        dz = self.decoder.backward(dout, c_dec)
        return self.encoder.backward(self.bottleneck.backward(dz, c_pool), c_enc)

    def score(self, image, threshold: float) -> THIReport:
        err = nn.mse(self.forward(image), image.astype(self.dtype))
        whole = Box(0, 0, self.config.image_width, self.config.image_height)
        regions = [RegionScore(whole, 0, err, 1.0)]
        return build_report(regions, 0.0, 1.0, threshold, self.config.severity_saturation)


def baseline_forward(model: BaselineModel, image: np.ndarray) -> np.ndarray:
    return model.forward(image)
