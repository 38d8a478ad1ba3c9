"""Per-sample augmentations and pseudo-class / pseudo-domain construction.

Fusing two samples from distinct real classes mints a pseudo class; fusing
across two real domains mints a pseudo domain. With C real classes and D
real domains there are C(C-1)/2 pseudo classes and D(D-1)/2 pseudo domains,
one per unordered pair. Pseudo data exists only during base training.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .datasets import Dataset, LabeledSample
from .errors import ValidationError

_MIX_KINDS = ("mixup", "cutmix", "cutout")


@dataclass(frozen=True)
class MixOp:
    """A sample-fusion operator and its parameters.

    ``alpha`` is the Beta(alpha, alpha) coefficient parameter for mixup and
    cutmix; ``patch_fraction`` is the cutout patch side as a fraction of the
    image side.
    """

    kind: str
    alpha: float = 1.0
    patch_fraction: float = 0.5

    def __post_init__(self):
        if self.kind not in _MIX_KINDS:
            raise ValidationError(f"unknown mix op {self.kind!r}, expected one of {_MIX_KINDS}")
        if not (self.alpha > 0.0):
            raise ValidationError("alpha must be > 0")
        if not (0.0 < self.patch_fraction <= 1.0):
            raise ValidationError("patch_fraction must be in (0, 1]")


def pseudo_class_count(num_classes: int) -> int:
    """Number of pseudo classes mintable from unordered real-class pairs."""
    if num_classes < 1:
        raise ValidationError("need at least one class")
    return num_classes * (num_classes - 1) // 2


def pseudo_domain_count(num_domains: int) -> int:
    """Number of pseudo domains mintable from unordered real-domain pairs."""
    if num_domains < 1:
        raise ValidationError("need at least one domain")
    return num_domains * (num_domains - 1) // 2


@dataclass(frozen=True)
class PseudoLabelSpace:
    """Bijections from unordered real pairs onto pseudo class / domain ids.

    Pseudo class ids occupy [C, C + C(C-1)/2); pseudo domain ids occupy
    [D, D + D(D-1)/2). Same-domain fusions keep their real domain, so only
    cross-domain pairs appear in ``pseudo_domain_ids``.
    """

    base_class_count: int
    base_domain_count: int
    pseudo_class_ids: dict[tuple[int, int], int]
    pseudo_domain_ids: dict[tuple[int, int], int]
    class_domain_map: dict[int, int]  # real + pseudo classes -> (real or pseudo) domain

    @classmethod
    def build(cls, real_class_domain_map: dict[int, int]) -> "PseudoLabelSpace":
        classes = sorted(real_class_domain_map)
        domains = sorted(set(real_class_domain_map.values()))
        if classes != list(range(len(classes))):
            raise ValidationError("pseudo label space requires contiguous class ids starting at 0")
        if domains != list(range(len(domains))):
            raise ValidationError("pseudo label space requires contiguous domain ids starting at 0")
        c, d = len(classes), len(domains)
        class_pairs = {pair: c + i for i, pair in enumerate(combinations(range(c), 2))}
        domain_pairs = {pair: d + i for i, pair in enumerate(combinations(range(d), 2))}
        cmap = dict(real_class_domain_map)
        for (c1, c2), pid in class_pairs.items():
            d1, d2 = real_class_domain_map[c1], real_class_domain_map[c2]
            cmap[pid] = d1 if d1 == d2 else domain_pairs[(min(d1, d2), max(d1, d2))]
        return cls(c, d, class_pairs, domain_pairs, cmap)

    def pseudo_class_of(self, c1: int, c2: int) -> int:
        if c1 == c2:
            raise ValidationError("pseudo classes fuse two distinct real classes")
        return self.pseudo_class_ids[(min(c1, c2), max(c1, c2))]

    def domain_of_pair(self, d1: int, d2: int) -> int:
        """Domain label of a fusion whose sources live in domains d1, d2."""
        if d1 == d2:
            return d1
        return self.pseudo_domain_ids[(min(d1, d2), max(d1, d2))]


def _pixels(sample) -> np.ndarray:
    return sample.pixels if isinstance(sample, LabeledSample) else np.asarray(sample, dtype=np.float64)


def _check_rect(shape: tuple[int, ...], rect: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    h, w = shape[0], shape[1]
    x, y, rw, rh = (int(v) for v in rect)
    if x < 0 or y < 0 or rw < 0 or rh < 0 or x + rw > w or y + rh > h:
        raise ValidationError(f"rect (x={x}, y={y}, w={rw}, h={rh}) out of bounds for {h}x{w} image")
    return x, y, rw, rh


def mixup(a, b, lam: float) -> np.ndarray:
    """Elementwise convex blend lam*a + (1-lam)*b."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValidationError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    if not (0.0 <= lam <= 1.0):
        raise ValidationError("lam must lie in [0, 1]")
    return lam * pa + (1.0 - lam) * pb


def cutmix(a, b, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Copy of a with the (x, y, w, h) rectangle replaced by pixels of b."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ValidationError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    x, y, rw, rh = _check_rect(pa.shape, rect)
    out = pa.copy()
    out[y:y + rh, x:x + rw] = pb[y:y + rh, x:x + rw]
    return out


def cutout(a, rect: tuple[int, int, int, int], fill: float) -> np.ndarray:
    """Copy of a with the (x, y, w, h) rectangle replaced by a constant."""
    pa = _pixels(a)
    if not (0.0 <= fill <= 1.0):
        raise ValidationError("fill must lie in [0, 1]")
    x, y, rw, rh = _check_rect(pa.shape, rect)
    out = pa.copy()
    out[y:y + rh, x:x + rw] = fill
    return out


def _sample_rect(h: int, w: int, side_fraction: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    rh = min(h, max(0, int(round(side_fraction * h))))
    rw = min(w, max(0, int(round(side_fraction * w))))
    y = int(rng.integers(0, h - rh + 1))
    x = int(rng.integers(0, w - rw + 1))
    return x, y, rw, rh


def build_pseudo_batch(base: Dataset, space: PseudoLabelSpace, op: MixOp, count: int,
                       rng: np.random.Generator) -> list[LabeledSample]:
    """Fuse random cross-class sample pairs from the base data.

    Each output carries the pseudo class id of its unordered source-class
    pair; the domain is the shared source domain for same-domain pairs and
    the pair's pseudo domain otherwise. Cutout is a single-image op and
    cannot mint pseudo labels.
    """
    if op.kind == "cutout":
        raise ValidationError("cutout fuses nothing; pseudo batches need mixup or cutmix")
    classes = base.classes()
    if len(classes) < 2:
        raise ValidationError("pseudo batches need at least two real classes")
    class_arr = np.array(classes, dtype=np.int64)
    indices = {c: base.indices_of_class(c) for c in classes}
    h, w = base.shape[0], base.shape[1]
    out: list[LabeledSample] = []
    for _ in range(int(count)):
        c1, c2 = (int(v) for v in rng.choice(class_arr, size=2, replace=False))
        i1 = int(rng.choice(indices[c1]))
        i2 = int(rng.choice(indices[c2]))
        lam = float(rng.beta(op.alpha, op.alpha))
        if op.kind == "mixup":
            pixels = mixup(base.images[i1], base.images[i2], lam)
        else:  # cutmix
            rect = _sample_rect(h, w, float(np.sqrt(1.0 - lam)), rng)
            pixels = cutmix(base.images[i1], base.images[i2], rect)
        class_id = space.pseudo_class_of(c1, c2)
        domain_id = space.domain_of_pair(base.class_domain_map[c1], base.class_domain_map[c2])
        out.append(LabeledSample(pixels, class_id, domain_id))
    return out


@dataclass(frozen=True)
class AugmentOptions:
    """Config surface for augmentation during base training."""

    pseudo_op: str = "mixup"
    alpha: float = 1.0
    pseudo_per_batch: int = 32
    flip_prob: float = 0.5
    crop_prob: float = 0.5
    jitter_prob: float = 0.5
    crop_pad: int = 2
    jitter: float = 0.1

    def __post_init__(self):
        if self.pseudo_per_batch < 0:
            raise ValidationError("pseudo_per_batch must be >= 0")
        for p in (self.flip_prob, self.crop_prob, self.jitter_prob):
            if not (0.0 <= p <= 1.0):
                raise ValidationError("augmentation probabilities must lie in [0, 1]")
        if self.crop_pad < 0 or not (0.0 <= self.jitter <= 1.0):
            raise ValidationError("crop_pad must be >= 0 and jitter in [0, 1]")

    def mix_op(self) -> MixOp:
        return MixOp(self.pseudo_op, alpha=self.alpha)


def augment_batch(images: np.ndarray, rng: np.random.Generator, opts: AugmentOptions = AugmentOptions()) -> np.ndarray:
    """Standard per-sample training augmentations on an (N, H, W, C) batch.

    Horizontal flip, padded random crop and a brightness shift, each applied
    independently with its configured probability.
    """
    out = np.array(images, dtype=np.float64, copy=True)
    n, h, w, _ = out.shape
    pad = opts.crop_pad
    for i in range(n):
        if rng.random() < opts.flip_prob:
            out[i] = out[i, :, ::-1]
        if pad > 0 and rng.random() < opts.crop_prob:
            padded = np.pad(out[i], ((pad, pad), (pad, pad), (0, 0)), mode="edge")
            oy = int(rng.integers(0, 2 * pad + 1))
            ox = int(rng.integers(0, 2 * pad + 1))
            out[i] = padded[oy:oy + h, ox:ox + w]
        if rng.random() < opts.jitter_prob:
            shift = rng.uniform(-opts.jitter, opts.jitter)
            out[i] = np.clip(out[i] + shift, 0.0, 1.0)
    return out
