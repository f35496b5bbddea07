"""Training loop, 2AFC evaluation, gradient checking and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DataError, Manifest, make_pairs
from .numcore import NumericalError, make_rng, sgd_step
from .ranker import (VARIANTS, CategoryNet, ConfigError, NetConfig, ScoringNet, gated_total,
                     pair_objective, rank_loss, resize)

log = logging.getLogger(__name__)

MAGIC = b"VNET1"
REL_FLOOR = 1e-6


@dataclass
class TrainConfig:
    variant: str = "base"
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    image_size: int = 64
    channels: int = 3
    roi_size: int = 32
    feature_dim: int = 32
    category_dim: int = 16
    max_pairs: int = 20000
    heldout_fraction: float = 0.05
    augment: bool = True
    crop_area: float = 0.9
    base_scale: float = 0.5
    stn_lr_scale: float = 0.01

    def __post_init__(self):
        if self.variant == "siamese-ablation":
            self.variant = "siamese"
        if self.variant == "regression-ablation":
            self.variant = "regression"
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        for name in ("epochs", "batch_size", "image_size", "channels", "roi_size",
                     "feature_dim", "category_dim", "max_pairs"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def net_config(self):
        return NetConfig(variant=self.variant, image_size=self.image_size, channels=self.channels,
                         roi_size=self.roi_size, feature_dim=self.feature_dim,
                         category_dim=self.category_dim, crop_area=self.crop_area,
                         base_scale=self.base_scale)


# --------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    pairs: int
    accuracy: float
    lambda_fraction: float
    mean_rank_loss: float
    mean_loss: float
    lambda_fraction_per_level: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def score_images(net: ScoringNet, images, batch=128):
    """Deterministic (no augmentation) scores and out-of-bounds flags."""
    v, lam, spatial = [], [], []
    for start in range(0, len(images), batch):
        res = net.forward(images[start:start + batch])
        v.append(res.v)
        lam.append(res.lam)
        spatial.append(res.spatial)
    return np.concatenate(v), np.concatenate(lam), np.concatenate(spatial)


def pair_credit(v1, v2, y):
    """1 for a correct ordering, 0.5 for tied scores or a tie label, else 0."""
    v1, v2, y = np.asarray(v1), np.asarray(v2), np.asarray(y)
    credit = np.where(np.sign(v1 - v2) == np.sign(y - 0.5), 1.0, 0.0)
    credit = np.where(v1 == v2, 0.5, credit)
    return np.where(y == 0.5, 0.5, credit)


def evaluate(net: ScoringNet, images, pairs, batch=128) -> EvalReport:
    """Pairwise 2AFC accuracy; each referenced image is scored once."""
    if not pairs:
        raise DataError("evaluation needs at least one pair")
    left = np.array([p.left for p in pairs])
    right = np.array([p.right for p in pairs])
    y = np.array([p.y for p in pairs])
    used = np.unique(np.concatenate([left, right]))
    pos = np.full(len(images), -1)
    pos[used] = np.arange(len(used))
    v, lam, spatial = score_images(net, images[used], batch)
    v1, v2 = v[pos[left]], v[pos[right]]
    credit = pair_credit(v1, v2, y)
    rank = np.asarray(rank_loss(v1, v2, y)).reshape(-1)
    L = lam.shape[1]
    if L:
        lam_pair = np.stack([lam[pos[left]], lam[pos[right]]], axis=1).astype(float)
        sp_pair = np.stack([spatial[pos[left]], spatial[pos[right]]], axis=1)
        totals = [gated_total(r, l, s) for r, l, s in zip(rank, lam_pair, sp_pair)]
        lam_frac = float(lam.mean())
        per_level = lam.mean(axis=0).tolist()
    else:
        totals, lam_frac, per_level = rank, 0.0, []
    return EvalReport(len(pairs), float(credit.sum() / len(pairs)), lam_frac,
                      float(rank.mean()), float(np.mean(totals)), per_level)


# ----------------------------------------------------------------- training

@dataclass
class TrainResult:
    net: ScoringNet
    metrics: list
    train_pairs: list
    heldout_pairs: list


def split_heldout(pairs, fraction, rng):
    n_hold = int(round(len(pairs) * fraction)) if fraction > 0 else 0
    order = rng.permutation(len(pairs))
    hold = sorted(order[:n_hold].tolist())
    hold_set = set(hold)
    return [pairs[i] for i in range(len(pairs)) if i not in hold_set], [pairs[i] for i in hold]


def train(config: TrainConfig, manifest: Manifest, category_net=None, images=None, pairs=None,
          callback=None) -> TrainResult:
    """Momentum-SGD training on pairs drawn from ``manifest``.

    ``images`` may be passed pre-loaded (indexed like the manifest) and
    ``pairs`` pre-built; otherwise both are derived from the seed. After each
    epoch ``callback(epoch, net, metrics_row)`` is invoked if given.
    """
    if config.variant in ("c", "mc") and category_net is None:
        raise ConfigError(f"variant {config.variant!r} needs a category checkpoint")
    rng = make_rng(config.seed)
    net = ScoringNet(config.net_config(), seed=config.seed, category_net=category_net)
    if images is None:
        images = manifest.load_images()
    if images.shape[1:] != (config.channels, config.image_size, config.image_size):
        raise DataError(f"images are {images.shape[1:]}, config expects "
                        f"{(config.channels, config.image_size, config.image_size)}")
    if pairs is None:
        pairs = make_pairs(manifest, config.max_pairs, rng)
    train_pairs, heldout = split_heldout(pairs, config.heldout_fraction, rng)
    if not train_pairs:
        raise DataError("no training pairs")
    scores = manifest.scores
    aug_rng = rng if config.augment else None
    loc_ids = {id(p) for loc in net.stns for p in loc.params}
    loc_params = [p for p in net.trainable if id(p) in loc_ids]
    rest = [p for p in net.trainable if id(p) not in loc_ids]
    metrics = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_pairs[i] for i in order[start:start + config.batch_size]]
            li = np.array([p.left for p in batch])
            ri = np.array([p.right for p in batch])
            y = np.array([p.y for p in batch])
            targets = np.stack([scores[li], scores[ri]], axis=1)
            loss, _ = pair_objective(net, images[li], images[ri], y, targets=targets, rng=aug_rng)
            if not np.all(np.isfinite(loss.total)):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}: "
                                     f"v1={loss.v1.tolist()} v2={loss.v2.tolist()}")
            sgd_step(rest, config.learning_rate, config.momentum)
            sgd_step(loc_params, config.learning_rate * config.stn_lr_scale, config.momentum)
            total += float(loss.total.sum())
            count += len(batch)
        net.snap()
        row = {"epoch": epoch, "mean_loss": total / count}
        if heldout:
            rep = evaluate(net, images, heldout)
            row["heldout_acc"] = rep.accuracy
            row["lambda_fraction"] = rep.lambda_fraction
        else:
            row["heldout_acc"] = None
            row["lambda_fraction"] = None
        metrics.append(row)
        log.info("epoch %d loss %.5f heldout %s", epoch, row["mean_loss"], row["heldout_acc"])
        if callback is not None:
            callback(epoch, net, row)
    return TrainResult(net, metrics, train_pairs, heldout)


def write_metrics(metrics, path):
    with open(path, "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ------------------------------------------------------- category pretraining

@dataclass
class CategoryResult:
    net: CategoryNet
    train_accuracy: float
    n_categories: int


def pretrain_category(config: TrainConfig, manifest: Manifest, images=None, epochs=None,
                      learning_rate=0.01, batch_size=32) -> CategoryResult:
    """Softmax classifier on category labels; its features are later frozen."""
    if not manifest.has_categories:
        raise DataError("manifest has no category labels")
    labels = np.array([e.category for e in manifest.entries])
    n_cat = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise DataError("category pretraining needs at least two distinct categories")
    if images is None:
        images = manifest.load_images()
    rng = make_rng(config.seed + 7919)
    net = CategoryNet(config.channels, config.roi_size, config.category_dim, n_cat, rng)
    views = np.concatenate([resize(images[i:i + 256], config.roi_size)
                            for i in range(0, len(images), 256)])
    epochs = epochs or 100
    for _ in range(epochs):
        order = rng.permutation(len(views))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits, state = net.logits(views[idx])
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), labels[idx]] -= 1.0
            net.backward(state, p / len(idx))
            sgd_step(net.params, learning_rate, config.momentum)
        if category_accuracy(net, views, labels) == 1.0:
            break  # converged on the training set
    for p in net.params:
        p.snap()
    acc = category_accuracy(net, views, labels)
    return CategoryResult(net, acc, n_cat)


def category_accuracy(net: CategoryNet, views, labels):
    preds = np.concatenate([net.logits(views[i:i + 256])[0].argmax(axis=1)
                            for i in range(0, len(views), 256)])
    return float((preds == labels).mean())


# ---------------------------------------------------------------- checkpoints

class CheckpointError(Exception):
    """Corrupt, truncated or mismatched checkpoint."""


def _tensor_items(named):
    for name, p in named.items():
        yield f"{name}.weight", p.weight
        yield f"{name}.bias", p.bias


def _write(path, meta, named):
    directory, offset, blobs = [], 0, []
    for name, arr in _tensor_items(named):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    meta = dict(meta, tensors=directory)
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read(path):
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from exc
    payload = data[pos + hlen:]
    tensors, expected = {}, 0
    for item in meta.get("tensors", []):
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        start, stop = item["offset"], item["offset"] + 4 * count
        if start != expected or stop > len(payload):
            raise CheckpointError(f"{path}: truncated or misaligned payload at {item['name']}")
        tensors[item["name"]] = np.frombuffer(payload[start:stop], dtype="<f4") \
            .astype(np.float64).reshape(item["shape"])
        expected = stop
    if expected != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return meta, tensors


def _assign(named, tensors, path):
    wanted = dict(_tensor_items(named))
    if set(wanted) != set(tensors):
        missing = sorted(set(wanted) - set(tensors))
        extra = sorted(set(tensors) - set(wanted))
        raise CheckpointError(f"{path}: tensor directory mismatch (missing {missing}, extra {extra})")
    for name, p in named.items():
        for suffix in ("weight", "bias"):
            src, dst = tensors[f"{name}.{suffix}"], getattr(p, suffix)
            if src.shape != dst.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}.{suffix}: "
                                      f"{src.shape} vs {dst.shape}")
            dst[...] = src


def save_checkpoint(net: ScoringNet, path, epoch=0, seed=0, extra=None):
    cfg = net.config
    meta = {"kind": "scoring", "variant": cfg.variant, "config": asdict(cfg),
            "epoch": int(epoch), "seed": int(seed)}
    if net.category is not None:
        meta["n_categories"] = net.category.n_categories
    if extra:
        meta["extra"] = extra
    _write(path, meta, net.named_params())


def load_checkpoint(path) -> ScoringNet:
    meta, tensors = _read(path)
    if meta.get("kind") != "scoring":
        raise CheckpointError(f"{path}: not a scoring-network checkpoint")
    try:
        cfg = NetConfig(**meta["config"])
    except (TypeError, KeyError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from exc
    category = None
    if cfg.uses_category:
        category = CategoryNet(cfg.channels, cfg.roi_size, cfg.category_dim,
                               int(meta["n_categories"]), make_rng(0))
    net = ScoringNet(cfg, seed=0, category_net=category)
    _assign(net.named_params(), tensors, path)
    net.meta = meta
    return net


def save_category_checkpoint(net: CategoryNet, path, train_accuracy=None, seed=0):
    meta = {"kind": "category", "channels": net.channels, "size": net.size,
            "category_dim": net.category_dim, "n_categories": net.n_categories, "seed": int(seed)}
    if train_accuracy is not None:
        meta["train_accuracy"] = train_accuracy
    _write(path, meta, {p.name: p for p in net.params})


def load_category_checkpoint(path) -> CategoryNet:
    meta, tensors = _read(path)
    if meta.get("kind") != "category":
        raise CheckpointError(f"{path}: not a category checkpoint")
    net = CategoryNet(meta["channels"], meta["size"], meta["category_dim"], meta["n_categories"],
                      make_rng(0))
    _assign({p.name: p for p in net.params}, tensors, path)
    net.freeze()
    return net


def parameter_digest(net):
    """Bytes of every tensor, for before/after purity checks."""
    return b"".join(arr.tobytes() for _, arr in _tensor_items(net.named_params()))


# ---------------------------------------------------------------- grad check

@dataclass
class TensorCheck:
    name: str
    checked: int = 0
    skipped: int = 0
    passed: int = 0
    max_rel: float = 0.0


@dataclass
class GradCheckReport:
    variant: str
    tolerance: float
    tensors: list
    passed: bool
    fraction_ok: float
    max_rel: float
    checked: int
    skipped: int

    def to_dict(self):
        return asdict(self)


def relative_error(analytic, numeric):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def _gradcheck_states(net, rng):
    """Two parameter states: every transformer in bounds, and one pushed out."""
    net.head.weight[:] = rng.uniform(-0.5, 0.5, net.head.weight.shape)
    for loc in net.stns:
        loc.head.weight[:] = rng.normal(0.0, 0.02, loc.head.weight.shape)
    yield "in_bounds"
    if net.stns:
        loc = net.stns[0]
        loc.head.bias[1] = 0.7
        yield "out_of_bounds"
        loc.head.bias[1] = 0.0


def grad_check(config: TrainConfig, n_params_sampled=8, step=1e-5, tolerance=1e-5,
               category_net=None) -> GradCheckReport:
    """Analytic vs central-difference gradients on a fixed random pair.

    Parameters whose +-step evaluations change any relu pattern, sampler cell
    or out-of-bounds indicator are counted as skipped, not failed.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    rng = make_rng(config.seed)
    if config.variant in ("c", "mc") and category_net is None:
        category_net = CategoryNet(config.channels, config.roi_size, config.category_dim, 2, rng)
    net = ScoringNet(config.net_config(), seed=config.seed, category_net=category_net)
    shape = (1, config.channels, config.image_size, config.image_size)
    left, right = rng.random(shape), rng.random(shape)
    y = np.array([1.0])
    targets = np.array([[0.8, 0.3]])
    checks = {}

    def objective():
        out, res = pair_objective(net, left, right, y, targets=targets, backward=False)
        return out.mean, net.relu_signature(res)

    for _state in _gradcheck_states(net, rng):
        net.zero_grad()
        pair_objective(net, left, right, y, targets=targets)
        _, base_sig = objective()
        for pname, p in net.named_params().items():
            if p.frozen:
                continue
            for suffix, arr, grad in (("weight", p.weight, p.grad_weight), ("bias", p.bias, p.grad_bias)):
                tc = checks.setdefault(f"{pname}.{suffix}", TensorCheck(f"{pname}.{suffix}"))
                k = min(n_params_sampled, arr.size)
                for flat in rng.choice(arr.size, size=k, replace=False):
                    idx = np.unravel_index(flat, arr.shape)
                    old = arr[idx]
                    arr[idx] = old + step
                    lp, sp = objective()
                    arr[idx] = old - step
                    lm, sm = objective()
                    arr[idx] = old
                    if not (np.array_equal(sp, base_sig) and np.array_equal(sm, base_sig)):
                        tc.skipped += 1
                        continue
                    rel = float(relative_error(grad[idx], (lp - lm) / (2 * step)))
                    tc.checked += 1
                    tc.passed += int(rel < tolerance)
                    tc.max_rel = max(tc.max_rel, rel)
        net.zero_grad()
    tensors = list(checks.values())
    checked = sum(t.checked for t in tensors)
    ok = sum(t.passed for t in tensors)
    max_rel = max((t.max_rel for t in tensors), default=0.0)
    frac = ok / checked if checked else 0.0
    passed = bool(checked > 0 and frac >= 0.99 and max_rel < 10 * tolerance)
    return GradCheckReport(config.variant, tolerance, [asdict(t) for t in tensors], passed, frac,
                           max_rel, checked, sum(t.skipped for t in tensors))
