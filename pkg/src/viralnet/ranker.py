"""Siamese scoring networks, the logistic rank loss and the gated pair losses.

Both branches of a pair run through one :class:`ScoringNet`; the two images
are simply stacked into one batch, so parameter sharing is structural.

Variants:

``base``        t = [f(I), f(S1(I))]
``m``           t = [f(I), f(S1(I)), f(S2(I/2)), f(S3(I/4))]
``c``, ``mc``   as above plus frozen category features
``siamese``     t = f(I), no transformers
``regression``  t = f(I), trained with squared error on raw scores
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import stn
from .data import crop_side
from .numcore import (DimensionError, LayerParams, avgpool2, conv_stack, fc_backward,
                      fc_forward, make_rng)

VARIANTS = ("base", "m", "c", "mc", "siamese", "regression")
PYRAMID_SCALES = (1.0, 0.5, 0.25)
VALID_LABELS = (0.0, 0.5, 1.0)


class ConfigError(ValueError):
    """Variant / configuration mismatch."""


@dataclass
class NetConfig:
    variant: str = "base"
    image_size: int = 64
    channels: int = 3
    roi_size: int = 32
    feature_dim: int = 32
    category_dim: int = 16
    base_scale: float = 0.5
    crop_area: float = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("image_size", "channels", "roi_size", "feature_dim", "category_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def levels(self):
        return {"base": 1, "c": 1, "m": 3, "mc": 3}.get(self.variant, 0)

    @property
    def uses_category(self):
        return self.variant in ("c", "mc")

    @property
    def n_views(self):
        return 1 + self.levels


def feature_extractor(channels, size, feature_dim, rng, prefix="features"):
    plan = [(8, 5), (16, 3), (16, 3)] if size >= 32 else [(8, 5), (16, 3)]
    stack, _ = conv_stack(channels, size, plan, [feature_dim], rng, prefix, final_relu=True)
    return stack


class CategoryNet:
    """Small softmax classifier; its penultimate activations are the category features."""

    def __init__(self, channels, size, category_dim, n_categories, rng):
        self.channels, self.size = channels, size
        self.category_dim, self.n_categories = category_dim, n_categories
        self.body, _ = conv_stack(channels, size, [(8, 5), (16, 3)], [category_dim], rng,
                                  "category", final_relu=True)
        self.classifier = LayerParams.uniform((n_categories, category_dim), rng, "category.classifier")

    @property
    def params(self):
        return self.body.params + [self.classifier]

    def freeze(self):
        for p in self.params:
            p.frozen = True

    def features(self, views):
        return self.body.forward(views)[0]

    def logits(self, views):
        feats, cache = self.body.forward(views)
        return fc_forward(feats, self.classifier), (feats, cache)

    def backward(self, state, dlogits):
        feats, cache = state
        dfeat, _ = fc_backward(feats, self.classifier, dlogits)
        self.body.backward(cache, dfeat, need_input_grad=False)


@dataclass
class ScoreTrace:
    v: float
    affines: list
    bounds: list
    t_r: np.ndarray


@dataclass
class ForwardResult:
    """Batched forward output plus everything backward needs."""
    v: np.ndarray            # (N,)
    theta: np.ndarray        # (N, L, 3)
    lam: np.ndarray          # (N, L)
    spatial: np.ndarray      # (N, L)
    t_r: np.ndarray          # (N, width)
    cache: dict = field(repr=False, default_factory=dict)

    def trace(self, i):
        affines = [stn.AffineParams.from_array(t) for t in self.theta[i]]
        bounds = [stn.BoundsReport(int(l), float(s)) for l, s in zip(self.lam[i], self.spatial[i])]
        return ScoreTrace(float(self.v[i]), affines, bounds, self.t_r[i].copy())


def resize(images, size):
    """Identity-affine resample of an (N, C, H, W) batch to (N, C, size, size)."""
    x, y = stn.grid_coords(np.array([[1.0, 0.0, 0.0]]), size, size)
    n = images.shape[0]
    return stn.sample(images, np.repeat(x, n, axis=0), np.repeat(y, n, axis=0))


def random_crops(images, area_fraction, rng):
    """One independent crop of the given area per image, resized back to full size."""
    n, _, H, W = images.shape
    ch, cw = crop_side(H, area_fraction), crop_side(W, area_fraction)
    if ch == H and cw == W:
        return images
    oy = rng.integers(0, H - ch + 1, size=n)
    ox = rng.integers(0, W - cw + 1, size=n)
    crops = np.stack([images[i, :, oy[i]:oy[i] + ch, ox[i]:ox[i] + cw] for i in range(n)])
    xg, yg = stn.grid_coords(np.array([[1.0, 0.0, 0.0]]), H, W)
    return stn.sample(crops, np.repeat(xg, n, axis=0), np.repeat(yg, n, axis=0))


class ScoringNet:
    def __init__(self, config: NetConfig, seed: int = 0, category_net: CategoryNet | None = None):
        self.config = cfg = config
        rng = make_rng(seed)
        self.extractor = feature_extractor(cfg.channels, cfg.roi_size, cfg.feature_dim, rng)
        self.stns = []
        if cfg.levels:
            if cfg.image_size % (1 << (cfg.levels - 1)):
                raise DimensionError("ScoringNet", "image_size",
                                     f"divisible by {1 << (cfg.levels - 1)}", cfg.image_size)
            for j in range(cfg.levels):
                scale = cfg.base_scale * PYRAMID_SCALES[j] if cfg.levels > 1 else cfg.base_scale
                self.stns.append(stn.LocalizationNet(cfg.channels, cfg.image_size >> j, rng,
                                                     init_scale=scale, name=f"stn{j + 1}"))
        if cfg.uses_category:
            if category_net is None:
                raise ConfigError(f"variant {cfg.variant!r} needs a pre-trained category network")
            if category_net.category_dim != cfg.category_dim:
                raise ConfigError("category network feature width does not match category_dim")
            category_net.freeze()
        elif category_net is not None:
            raise ConfigError(f"variant {cfg.variant!r} takes no category network")
        self.category = category_net
        # zero ranker: an untrained net ties every pair instead of inheriting
        # whatever brightness preference random features happen to carry
        self.head = LayerParams.zeros((1, self.head_width), "head")
        self.snap()

    @property
    def head_width(self):
        cfg = self.config
        return cfg.n_views * cfg.feature_dim + (cfg.category_dim if cfg.uses_category else 0)

    def named_params(self):
        """Ordered name -> LayerParams for every tensor, frozen ones included."""
        out = {}
        for p in self.extractor.params:
            out[p.name] = p
        for loc in self.stns:
            for p in loc.params:
                out[p.name] = p
        out[self.head.name] = self.head
        if self.category is not None:
            for p in self.category.params:
                out[p.name] = p
        return out

    @property
    def trainable(self):
        return [p for p in self.named_params().values() if not p.frozen]

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def snap(self):
        """Round trainable tensors to checkpoint precision, so a saved and
        reloaded net scores exactly like this one."""
        for p in self.trainable:
            p.snap()

    def _check(self, images):
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if images.shape[1:] != expected:
            raise DimensionError("score", "image", expected, images.shape[1:])
        return images

    def forward(self, images, rng=None) -> ForwardResult:
        """Score a batch. With ``rng`` every view gets its own random crop."""
        cfg = self.config
        images = self._check(images)
        n = images.shape[0]

        def source():
            if rng is None:
                return images
            return random_crops(images, cfg.crop_area, rng)

        glob = resize(source(), cfg.roi_size)
        views = [glob]
        levels = []
        theta = np.zeros((n, cfg.levels, 3))
        for j, loc in enumerate(self.stns):
            src = source()
            for _ in range(j):
                src = avgpool2(src)
            th, lcache = loc.forward(src)
            x, y = stn.grid_coords(th, cfg.roi_size, cfg.roi_size)
            views.append(stn.sample(src, x, y))
            levels.append((src, x, y, lcache))
            theta[:, j] = th
        feats, fcache = self.extractor.forward(np.concatenate(views))
        parts = [feats[k * n:(k + 1) * n] for k in range(len(views))]
        if self.category is not None:
            parts.append(self.category.features(glob))
        t_r = np.concatenate(parts, axis=1)
        v = fc_forward(t_r, self.head)[:, 0]
        lam = stn.corner_lambda(theta.reshape(-1, 3)).reshape(n, cfg.levels)
        spatial = stn.spatial_loss(theta.reshape(-1, 3)).reshape(n, cfg.levels) if cfg.levels \
            else np.zeros((n, 0))
        cache = {"n": n, "levels": levels, "fcache": fcache, "t_r": t_r, "glob": glob}
        return ForwardResult(v, theta, lam, spatial, t_r, cache)

    def backward(self, result: ForwardResult, dv, dtheta=None):
        """Accumulate parameter gradients given dL/dv (N,) and extra dL/dtheta (N, L, 3)."""
        cfg = self.config
        n = result.cache["n"]
        dv = np.asarray(dv, dtype=np.float64).reshape(n, 1)
        dt, _ = fc_backward(result.t_r, self.head, dv)
        F = cfg.feature_dim
        dfeats = np.concatenate([dt[:, k * F:(k + 1) * F] for k in range(cfg.n_views)])
        dviews = self.extractor.backward(result.cache["fcache"], dfeats,
                                         need_input_grad=bool(self.stns))
        for j, loc in enumerate(self.stns):
            src, x, y, lcache = result.cache["levels"][j]
            droi = dviews[(j + 1) * n:(j + 2) * n]
            _, gx, gy = stn.sample_backward(src, x, y, droi, need_image_grad=False)
            g = stn.grid_backward(gx, gy)
            if dtheta is not None:
                g = g + dtheta[:, j]
            loc.backward(lcache, g)

    def score(self, image) -> ScoreTrace:
        return self.forward(image).trace(0)

    def relu_signature(self, result: ForwardResult):
        """Activation pattern + sampler cell indices; changes mark a non-smooth point."""
        sig = [m.ravel() for m in self.extractor.relu_masks(result.cache["fcache"])]
        for j, loc in enumerate(self.stns):
            src, x, y, lcache = result.cache["levels"][j]
            sig += [m.ravel() for m in loc.stack.relu_masks(lcache)]
            H, W = src.shape[2:]
            px, py = stn.to_pixels(x, y, H, W)
            sig += [np.floor(px).ravel(), np.floor(py).ravel()]
        sig.append(result.lam.ravel())
        return np.concatenate([s.astype(np.float64) for s in sig])


def score_single(net: ScoringNet, image) -> ScoreTrace:
    if net.config.levels != 1:
        raise ConfigError("score_single needs a single-transformer variant (base or c)")
    return net.score(image)


def score_pyramid(net: ScoringNet, image) -> ScoreTrace:
    if net.config.levels != 3:
        raise ConfigError("score_pyramid needs a pyramid variant (m or mc)")
    if net.config.image_size % 4:
        raise DimensionError("score_pyramid", "image_size", "divisible by 4", net.config.image_size)
    return net.score(image)


def score_with_category(net: ScoringNet, image) -> ScoreTrace:
    if net.category is None:
        raise ConfigError("variant has no category network")
    return net.score(image)


# ---------------------------------------------------------------- losses

def rank_prob(v1, v2):
    """Logistic of the score difference, overflow-free."""
    d = np.asarray(v1, dtype=np.float64) - np.asarray(v2, dtype=np.float64)
    e = np.exp(-np.abs(d))
    p = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return p if p.ndim else float(p)


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isin(y, VALID_LABELS)):
        raise ValueError(f"labels must be 0, 0.5 or 1; got {np.unique(y)}")
    return y


def rank_loss(v1, v2, y):
    """-y log P - (1-y) log(1-P) written as softplus(d) - y d."""
    y = _check_labels(y)
    d = np.asarray(v1, dtype=np.float64) - np.asarray(v2, dtype=np.float64)
    loss = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d))) - y * d
    return loss if loss.ndim else float(loss)


def rank_loss_grad(v1, v2, y):
    """dL/d(v1 - v2)."""
    return rank_prob(v1, v2) - _check_labels(y)


@dataclass
class LossBreakdown:
    rank_loss: float
    spatial: np.ndarray   # (2, L): branch i, level j
    lam: np.ndarray       # (2, L)
    total: float

    def recompute(self):
        return gated_total(self.rank_loss, self.lam, self.spatial)


def gated_total(rank, lam, spatial):
    """Rank term gated by every indicator plus the indicator-weighted spatial terms."""
    lam = np.asarray(lam, dtype=np.float64)
    spatial = np.asarray(spatial, dtype=np.float64)
    gate = np.prod(1.0 - lam)
    return float(gate * rank + np.sum(lam * spatial))


def _breakdown(trace1: ScoreTrace, trace2: ScoreTrace, y):
    rank = rank_loss(trace1.v, trace2.v, y)
    lam = np.array([[b.lam for b in t.bounds] for t in (trace1, trace2)], dtype=np.float64)
    spatial = np.array([[b.spatial_loss for b in t.bounds] for t in (trace1, trace2)])
    return LossBreakdown(rank, spatial, lam, gated_total(rank, lam, spatial))


def combined_loss_single(trace1: ScoreTrace, trace2: ScoreTrace, y) -> LossBreakdown:
    if len(trace1.bounds) != 1 or len(trace2.bounds) != 1:
        raise ConfigError("single-scale loss needs exactly one transformer per branch")
    return _breakdown(trace1, trace2, y)


def combined_loss_multiscale(trace1: ScoreTrace, trace2: ScoreTrace, y) -> LossBreakdown:
    if len(trace1.bounds) != 3 or len(trace2.bounds) != 3:
        raise ConfigError("multiscale loss needs three transformers per branch")
    return _breakdown(trace1, trace2, y)


@dataclass
class PairBatchLoss:
    total: np.ndarray     # (B,) per-pair totals
    rank: np.ndarray      # (B,)
    lam: np.ndarray       # (B, 2, L)
    spatial: np.ndarray   # (B, 2, L)
    v1: np.ndarray
    v2: np.ndarray

    @property
    def mean(self):
        return float(self.total.mean())

    def breakdown(self, i):
        return LossBreakdown(float(self.rank[i]), self.spatial[i], self.lam[i], float(self.total[i]))


def pair_objective(net: ScoringNet, left, right, y, targets=None, rng=None, backward=True,
                   scale=None):
    """Forward both branches of a batch of pairs and (optionally) backpropagate.

    The objective is the mean total loss over the batch (``scale`` overrides
    the 1/B factor). ``targets`` (B, 2) raw scores are required by the
    regression variant, which ignores ``y``.
    """
    left = net._check(left)
    right = net._check(right)
    B = left.shape[0]
    scale = 1.0 / B if scale is None else scale
    res = net.forward(np.concatenate([left, right]), rng=rng)
    v1, v2 = res.v[:B], res.v[B:]
    L = net.config.levels
    lam = np.stack([res.lam[:B], res.lam[B:]], axis=1).astype(np.float64)
    spatial = np.stack([res.spatial[:B], res.spatial[B:]], axis=1)
    if net.config.variant == "regression":
        if targets is None:
            raise ConfigError("regression variant needs raw score targets")
        targets = np.asarray(targets, dtype=np.float64).reshape(B, 2)
        err = np.stack([v1, v2], axis=1) - targets
        rank = 0.5 * (err ** 2).sum(axis=1)
        total = rank
        dv = np.concatenate([err[:, 0], err[:, 1]]) * scale
        dtheta = None
    else:
        y = _check_labels(y).reshape(B)
        rank = np.asarray(rank_loss(v1, v2, y)).reshape(B)
        gate = np.prod(1.0 - lam.reshape(B, -1), axis=1)
        total = gate * rank + (lam * spatial).sum(axis=(1, 2))
        g = gate * np.asarray(rank_loss_grad(v1, v2, y)).reshape(B) * scale
        dv = np.concatenate([g, -g])
        dtheta = None
        if L:
            sg = stn.spatial_loss_grad(res.theta.reshape(-1, 3)).reshape(2 * B, L, 3)
            lam_all = np.concatenate([lam[:, 0], lam[:, 1]])
            dtheta = sg * lam_all[..., None] * scale
    out = PairBatchLoss(total, rank, lam, spatial, v1, v2)
    if backward:
        net.backward(res, dv, dtheta)
    return out, res
