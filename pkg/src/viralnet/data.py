"""Scored manifests, train/test splits, pair construction, augmentation and
the synthetic planted-attribute generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .numcore import make_rng


class DataError(Exception):
    """Malformed or inconsistent dataset input."""


# ------------------------------------------------------------------ images

def load_image(path) -> np.ndarray:
    """8-bit grayscale or RGB PNG -> (C, H, W) float64 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported image mode {mode!r} (need 8-bit L or RGB)")
            arr = np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr.astype(np.float64) / 255.0


def to_uint8(tensor) -> np.ndarray:
    x = np.asarray(tensor, dtype=np.float64)
    return np.clip(np.floor(x * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image(tensor, path):
    """(C, H, W) with C in {1, 3} -> 8-bit PNG, round-half-up quantization."""
    q = to_uint8(tensor)
    if q.ndim != 3 or q.shape[0] not in (1, 3):
        raise DataError(f"{path}: expected (1|3, H, W) tensor, got {q.shape}")
    img = Image.fromarray(q[0], mode="L") if q.shape[0] == 1 else Image.fromarray(q.transpose(1, 2, 0), mode="RGB")
    img.save(path, format="PNG", optimize=False)


# ---------------------------------------------------------------- manifest

@dataclass(frozen=True)
class Entry:
    path: str
    score: float
    category: int | None = None


@dataclass
class Manifest:
    entries: list
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    @property
    def has_categories(self):
        return bool(self.entries) and self.entries[0].category is not None

    @property
    def scores(self):
        return np.array([e.score for e in self.entries])

    def resolve(self, entry: Entry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices):
        return Manifest([self.entries[i] for i in indices], self.root)

    def index(self):
        return {e.path: i for i, e in enumerate(self.entries)}

    def load_images(self):
        return np.stack([load_image(self.resolve(e)) for e in self.entries])

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                rec = {"path": e.path, "score": e.score}
                if e.category is not None:
                    rec["category"] = e.category
                fh.write(json.dumps(rec) + "\n")


def validate_entries(entries):
    seen = set()
    for e in entries:
        if e.path in seen:
            raise DataError(f"duplicate path in manifest: {e.path}")
        seen.add(e.path)
        if not math.isfinite(e.score):
            raise DataError(f"non-finite score for {e.path}")
    flags = {e.category is not None for e in entries}
    if len(flags) > 1:
        raise DataError("either every manifest entry has a category or none does")


def load_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                img, score = rec["path"], rec["score"]
                cat = rec.get("category")
                if not isinstance(img, str) or isinstance(score, bool) or not isinstance(score, (int, float)):
                    raise TypeError("path must be a string and score a number")
                if cat is not None and (isinstance(cat, bool) or not isinstance(cat, int)):
                    raise TypeError("category must be an integer")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
            entries.append(Entry(img, float(score), cat))
    validate_entries(entries)
    manifest = Manifest(entries, path.parent)
    if check_files:
        for e in entries:
            if not manifest.resolve(e).exists():
                raise DataError(f"missing image file: {manifest.resolve(e)}")
    return manifest


# ------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0


def split(manifest: Manifest, spec: SplitSpec = SplitSpec()):
    n = len(manifest)
    if n < 2:
        raise DataError("need at least two entries to split")
    n_train = int(math.floor(spec.train_fraction * n + 0.5))
    order = make_rng(spec.seed).permutation(n)
    return manifest.subset(sorted(order[:n_train])), manifest.subset(sorted(order[n_train:]))


# -------------------------------------------------------------------- pairs

@dataclass(frozen=True)
class Pair:
    left: int
    right: int
    y: float


def label(score_left, score_right):
    if score_left > score_right:
        return 1.0
    if score_left < score_right:
        return 0.0
    return 0.5


def make_pairs(manifest: Manifest, max_pairs: int, rng) -> list:
    """Uniform unordered pairs without replacement, random left/right order."""
    n = len(manifest)
    if n < 2:
        raise DataError("need at least two entries to make pairs")
    total = n * (n - 1) // 2
    k = min(int(max_pairs), total)
    if 3 * k >= total:
        iu, ju = np.triu_indices(n, 1)
        pick = rng.choice(total, size=k, replace=False) if k < total else rng.permutation(total)
        chosen = list(zip(iu[pick].tolist(), ju[pick].tolist()))
    else:
        seen, chosen = set(), []
        while len(chosen) < k:
            i, j = rng.integers(0, n, size=2).tolist()
            if i == j:
                continue
            key = (min(i, j), max(i, j))
            if key not in seen:
                seen.add(key)
                chosen.append(key)
    flips = rng.random(len(chosen)) < 0.5
    scores = manifest.scores
    pairs = []
    for (i, j), flip in zip(chosen, flips):
        a, b = (j, i) if flip else (i, j)
        pairs.append(Pair(a, b, label(scores[a], scores[b])))
    return pairs


def write_pairs(pairs, manifest: Manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            y = 0.5 if p.y == 0.5 else int(p.y)
            fh.write(json.dumps({"left": manifest.entries[p.left].path,
                                 "right": manifest.entries[p.right].path, "y": y}) + "\n")


def read_pairs(path, manifest: Manifest) -> list:
    idx = manifest.index()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                y = float(rec["y"])
                left, right = idx[rec["left"]], idx[rec["right"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad pair record ({exc})") from exc
            if y not in (0.0, 0.5, 1.0):
                raise DataError(f"{path}:{lineno}: label must be 0, 0.5 or 1")
            pairs.append(Pair(left, right, y))
    return pairs


# ------------------------------------------------------------- augmentation

def crop_augment(image, area_fraction=0.9, rng=None):
    """Random crop keeping ``area_fraction`` of the area, sides rounded down to even."""
    if not 0 < area_fraction <= 1:
        raise ValueError("area_fraction must be in (0, 1]")
    img = np.asarray(image)
    H, W = img.shape[-2:]
    side_h = crop_side(H, area_fraction)
    side_w = crop_side(W, area_fraction)
    if (side_h, side_w) == (H, W):
        return img.copy()
    oy = int(rng.integers(0, H - side_h + 1))
    ox = int(rng.integers(0, W - side_w + 1))
    return img[..., oy:oy + side_h, ox:ox + side_w].copy()


def crop_side(size, area_fraction):
    """Side of a crop keeping ``area_fraction`` of a ``size`` extent, forced even."""
    if area_fraction == 1:
        return size
    side = int(math.floor(size * math.sqrt(area_fraction)))
    return max(2, side - side % 2)


# ---------------------------------------------------------------- synthetic

PLACEMENT_SIDES = {"fine": (10, 20), "coarse": (28, 44)}
CATEGORY_TINTS = np.array([[0.30, 0.34, 0.46], [0.44, 0.40, 0.26],
                           [0.30, 0.44, 0.32], [0.42, 0.30, 0.42]])


@dataclass
class SynthConfig:
    n: int = 1000
    image_size: int = 64
    placement: str = "fine"          # fine | coarse | mixed
    distractors: int = 5
    category_correlation: float = 0.0
    n_categories: int = 2
    min_level: int = 26              # planted intensity = level / 255
    noise: float = 0.04
    signal_side: tuple | None = None  # overrides the placement range

    def validate(self):
        if self.n < 2:
            raise DataError("synthetic n must be >= 2")
        if self.placement not in ("fine", "coarse", "mixed"):
            raise DataError(f"placement must be fine, coarse or mixed, not {self.placement!r}")
        if self.distractors < 0:
            raise DataError("distractor count must be >= 0")
        if not 0.0 <= self.category_correlation <= 1.0:
            raise DataError("category_correlation must lie in [0, 1]")
        if not 1 <= self.n_categories <= len(CATEGORY_TINTS):
            raise DataError(f"n_categories must be in 1..{len(CATEGORY_TINTS)}")
        if not 0 <= self.min_level <= 255:
            raise DataError("min_level must be in 0..255")
        used = ["fine", "coarse"] if self.placement == "mixed" else [self.placement]
        hi = max(self.side_range(p)[1] for p in used)
        if hi + 4 > self.image_size:
            raise DataError("signal patch does not fit inside the image margins")

    def side_range(self, placement):
        if self.signal_side is not None:
            return tuple(self.signal_side)
        return PLACEMENT_SIDES[placement]


@dataclass
class Placement:
    path: str
    score: float
    level: int
    x: int
    y: int
    side: int
    category: int | None
    distractors: list


def _render(cfg: SynthConfig, rng, level, placement, category):
    S = cfg.image_size
    tint = CATEGORY_TINTS[category if category is not None else 0]
    img = np.empty((3, S, S))
    img[:] = tint[:, None, None]
    img += rng.normal(0.0, cfg.noise, size=(3, S, S))
    boxes = []
    lo, hi = cfg.side_range(placement)
    for _ in range(cfg.distractors):
        side = int(rng.integers(lo, hi + 1))
        x, y = (int(v) for v in rng.integers(0, S - side + 1, size=2))
        a = float(rng.uniform(0.1, 1.0))
        kind = int(rng.integers(0, 3))
        color = [(a, a, a), (0.0, a, 0.0), (0.0, 0.0, a)][kind]
        img[:, y:y + side, x:x + side] = np.array(color)[:, None, None]
        boxes.append({"x": x, "y": y, "side": side, "color": [round(c, 6) for c in color]})
    side = int(rng.integers(lo, hi + 1))
    margin = 2
    x, y = (int(v) for v in rng.integers(margin, S - side - margin + 1, size=2))
    img = np.clip(img, 0.0, 1.0)
    img[:, y:y + side, x:x + side] = 0.0
    img[0, y:y + side, x:x + side] = level / 255.0
    return img, x, y, side, boxes


def synth_generate(cfg: SynthConfig, rng, outdir):
    """Write PNGs, ``manifest.jsonl`` and ``placements.jsonl`` into ``outdir``.

    Each image holds one pure-red square whose red intensity is the score,
    drawn on top of gray/green/blue distractor squares over a noisy
    background tinted by the image's category.
    """
    cfg.validate()
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    levels = rng.integers(cfg.min_level, 256, size=cfg.n)
    categories = None
    if cfg.category_correlation > 0 or cfg.n_categories > 1:
        ranks = np.argsort(np.argsort(levels, kind="stable"), kind="stable")
        quantile = (ranks * cfg.n_categories) // cfg.n
        follow = rng.random(cfg.n) < cfg.category_correlation
        random_cat = rng.integers(0, cfg.n_categories, size=cfg.n)
        categories = np.where(follow, quantile, random_cat)
    entries, records = [], []
    for i in range(cfg.n):
        placement = cfg.placement
        if placement == "mixed":
            placement = "fine" if rng.random() < 0.5 else "coarse"
        cat = None if categories is None else int(categories[i])
        img, x, y, side, boxes = _render(cfg, rng, int(levels[i]), placement, cat)
        name = f"img_{i:05d}.png"
        save_image(img, outdir / name)
        score = int(levels[i]) / 255.0
        entries.append(Entry(name, score, cat))
        records.append(Placement(name, score, int(levels[i]), x, y, side, cat, boxes))
    manifest = Manifest(entries, outdir)
    manifest.write(outdir / "manifest.jsonl")
    with open(outdir / "placements.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec)) + "\n")
    return manifest, records


def read_placements(path):
    with open(path, encoding="utf-8") as fh:
        return [Placement(**json.loads(line)) for line in fh if line.strip()]


def oracle_patch_mean(image, placement: Placement):
    """Mean red intensity over the recorded signal square.

    Rounded to 1e-9 so equal planted levels compare equal whatever the
    square's size does to the summation order.
    """
    y, x, s = placement.y, placement.x, placement.side
    return round(float(np.asarray(image)[0, y:y + s, x:x + s].mean()), 9)
