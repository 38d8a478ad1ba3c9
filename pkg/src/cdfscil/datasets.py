"""Multi-domain image data: in-memory types, the binary on-disk format, and a
synthetic generator that renders visually distinct domains and classes.

Pixels are float64 in [0, 1] in memory and raw u8 bytes on disk. A "domain"
is a source dataset contributing one or more classes; class ids are global
and each class belongs to exactly one domain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

from .errors import (
    CorruptionError,
    FormatError,
    InsufficientDataError,
    ScheduleError,
    ValidationError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .protocol import SessionSchedule

MANIFEST_SUFFIX = ".manifest.json"
MAX_SYNTHETIC_CLASSES = 27


@dataclass(frozen=True)
class LabeledSample:
    """One image with its class and domain labels."""

    pixels: np.ndarray  # (H, W, C) float64 in [0, 1]
    class_id: int
    domain_id: int


class Dataset:
    """One split of a multi-domain labeled image collection.

    Images are stored stacked as a single (N, H, W, C) array; indexing
    returns :class:`LabeledSample` views. Instances are treated as immutable
    after construction.
    """

    def __init__(self, images, class_ids, domain_ids, class_domain_map, split):
        images = np.asarray(images, dtype=np.float64)
        class_ids = np.asarray(class_ids, dtype=np.int64)
        domain_ids = np.asarray(domain_ids, dtype=np.int64)
        if images.ndim != 4:
            raise ValidationError(f"images must be (N, H, W, C), got shape {images.shape}")
        n = images.shape[0]
        if class_ids.shape != (n,) or domain_ids.shape != (n,):
            raise ValidationError("class_ids / domain_ids must have one entry per image")
        if split not in ("train", "test"):
            raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        cmap = {int(c): int(d) for c, d in class_domain_map.items()}
        present = set(int(c) for c in class_ids)
        missing = present - set(cmap)
        if missing:
            raise ValidationError(f"class_domain_map is missing classes {sorted(missing)}")
        for i in range(n):
            c = int(class_ids[i])
            if int(domain_ids[i]) != cmap[c]:
                raise ValidationError(
                    f"sample {i}: domain_id {int(domain_ids[i])} disagrees with "
                    f"class_domain_map[{c}] = {cmap[c]}"
                )
        self.images = images
        self.class_ids = class_ids
        self.domain_ids = domain_ids
        self.class_domain_map = cmap
        self.split = split

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> LabeledSample:
        return LabeledSample(self.images[i], int(self.class_ids[i]), int(self.domain_ids[i]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list[LabeledSample]:
        return [self[i] for i in range(len(self))]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def classes(self) -> list[int]:
        return sorted(self.class_domain_map)

    def domains(self) -> list[int]:
        return sorted(set(self.class_domain_map.values()))

    def take(self, indices) -> "Dataset":
        """New Dataset from a subset of sample indices (map restricted to what remains)."""
        indices = np.asarray(indices, dtype=np.int64)
        cids = self.class_ids[indices]
        cmap = {int(c): self.class_domain_map[int(c)] for c in np.unique(cids)}
        return Dataset(self.images[indices], cids, self.domain_ids[indices], cmap, self.split)

    def subset_by_classes(self, class_ids: Sequence[int]) -> "Dataset":
        wanted = np.isin(self.class_ids, np.asarray(list(class_ids), dtype=np.int64))
        return self.take(np.flatnonzero(wanted))

    def indices_of_class(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.class_ids == class_id)


def merge_datasets(datasets: Sequence[Dataset]) -> Dataset:
    """Concatenate same-split datasets with compatible label spaces.

    Class ids must either be disjoint or agree on their domain assignment.
    """
    if not datasets:
        raise ValidationError("merge_datasets needs at least one dataset")
    split = datasets[0].split
    shape = datasets[0].shape
    cmap: dict[int, int] = {}
    for ds in datasets:
        if ds.split != split:
            raise ValidationError("cannot merge datasets from different splits")
        if ds.shape != shape:
            raise ValidationError(f"shape mismatch: {ds.shape} vs {shape}")
        for c, d in ds.class_domain_map.items():
            if cmap.get(c, d) != d:
                raise ValidationError(f"class {c} maps to two different domains")
            cmap[c] = d
    return Dataset(
        np.concatenate([ds.images for ds in datasets]),
        np.concatenate([ds.class_ids for ds in datasets]),
        np.concatenate([ds.domain_ids for ds in datasets]),
        cmap,
        split,
    )


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------
#
# Manifest: JSON with {name, shape:[H,W,C], domains:[{name, classes}],
# splits:{train|test: {count, images, labels, domain_ids}}}. Payloads are
# separate files next to the manifest: images as raw u8 (sample-major,
# row-major, exactly count*H*W*C bytes), labels as little-endian u16 per
# sample, domain ids as u8 per sample. Class ids are assigned contiguously
# in domain order: domain 0 owns [0, c0), domain 1 owns [c0, c0+c1), ...


@dataclass(frozen=True)
class SplitFiles:
    count: int
    images: str
    labels: str
    domain_ids: str


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    shape: tuple[int, int, int]
    domains: tuple[tuple[str, int], ...]  # (domain name, class count)
    splits: dict[str, SplitFiles]

    @property
    def total_classes(self) -> int:
        return sum(c for _, c in self.domains)

    def class_domain_map(self) -> dict[int, int]:
        cmap: dict[int, int] = {}
        next_id = 0
        for d, (_, count) in enumerate(self.domains):
            for _ in range(count):
                cmap[next_id] = d
                next_id += 1
        return cmap


def _expect(condition: bool, message: str, exc=FormatError) -> None:
    if not condition:
        raise exc(message)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {path}: {e}") from e
    _expect(isinstance(raw, dict), "manifest root must be an object")
    for key in ("name", "shape", "domains", "splits"):
        _expect(key in raw, f"manifest missing key {key!r}")
    shape = raw["shape"]
    _expect(
        isinstance(shape, list) and len(shape) == 3 and all(isinstance(v, int) and v > 0 for v in shape),
        "manifest shape must be [H, W, C] positive integers",
    )
    domains = []
    _expect(isinstance(raw["domains"], list) and raw["domains"], "manifest domains must be a non-empty list")
    for d in raw["domains"]:
        _expect(isinstance(d, dict) and "name" in d and "classes" in d, "each domain needs name and classes")
        _expect(isinstance(d["classes"], int) and d["classes"] >= 1, "domain class count must be >= 1")
        domains.append((str(d["name"]), d["classes"]))
    splits: dict[str, SplitFiles] = {}
    _expect(isinstance(raw["splits"], dict) and raw["splits"], "manifest splits must be a non-empty object")
    for split, files in raw["splits"].items():
        _expect(split in ("train", "test"), f"unknown split {split!r}")
        for key in ("count", "images", "labels", "domain_ids"):
            _expect(isinstance(files, dict) and key in files, f"split {split!r} missing {key!r}")
        _expect(isinstance(files["count"], int) and files["count"] >= 0, "split count must be a non-negative integer")
        splits[split] = SplitFiles(
            count=files["count"],
            images=str(files["images"]),
            labels=str(files["labels"]),
            domain_ids=str(files["domain_ids"]),
        )
    return DatasetManifest(str(raw["name"]), tuple(shape), tuple(domains), splits)


def _read_payload(base: Path, rel: str, expected_bytes: int, what: str) -> bytes:
    path = base / rel
    if not path.exists():
        raise FormatError(f"{what} payload not found: {path}")
    data = path.read_bytes()
    if len(data) != expected_bytes:
        raise CorruptionError(f"{what} payload {path} has {len(data)} bytes, expected {expected_bytes}")
    return data


def load_dataset(manifest_path, split: str | None = None) -> Dataset:
    """Load one split described by a manifest into memory.

    ``split`` may be omitted when the manifest carries exactly one split.
    Pixels are rescaled from u8 to [0, 1] by division by 255.
    """
    manifest = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    if split is None:
        if len(manifest.splits) != 1:
            raise ValidationError(
                f"manifest {manifest.name!r} declares splits {sorted(manifest.splits)}; pass split= explicitly"
            )
        split = next(iter(manifest.splits))
    if split not in manifest.splits:
        raise ValidationError(f"manifest {manifest.name!r} has no {split!r} split")
    files = manifest.splits[split]
    h, w, c = manifest.shape
    n = files.count
    images = np.frombuffer(_read_payload(base, files.images, n * h * w * c, "image"), dtype=np.uint8)
    labels = np.frombuffer(_read_payload(base, files.labels, 2 * n, "label"), dtype="<u2")
    domain_ids = np.frombuffer(_read_payload(base, files.domain_ids, n, "domain"), dtype=np.uint8)
    cmap = manifest.class_domain_map()
    total = manifest.total_classes
    if n and int(labels.max()) >= total:
        raise ValidationError(f"label {int(labels.max())} out of declared range [0, {total})")
    num_domains = len(manifest.domains)
    if n and int(domain_ids.max()) >= num_domains:
        raise ValidationError(f"domain id {int(domain_ids.max())} out of declared range [0, {num_domains})")
    pixels = images.astype(np.float64).reshape(n, h, w, c) / 255.0
    return Dataset(pixels, labels.astype(np.int64), domain_ids.astype(np.int64), cmap, split)


def save_dataset(dataset: Dataset, out_dir, name: str, domain_names: Sequence[str] | None = None) -> Path:
    """Write one split as manifest + payloads; returns the manifest path.

    The manifest format assigns class ids contiguously per domain, so the
    dataset's label space must already be laid out that way.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classes = dataset.classes()
    if classes != list(range(len(classes))):
        raise ValidationError("on-disk format requires contiguous class ids starting at 0")
    per_domain: dict[int, int] = {}
    prev_domain = -1
    for c in classes:
        d = dataset.class_domain_map[c]
        if d < prev_domain:
            raise ValidationError("on-disk format requires classes grouped by ascending domain id")
        prev_domain = d
        per_domain[d] = per_domain.get(d, 0) + 1
    domains = sorted(per_domain)
    if domains != list(range(len(domains))):
        raise ValidationError("on-disk format requires contiguous domain ids starting at 0")
    if domain_names is None:
        domain_names = [f"domain{d}" for d in domains]
    if len(domain_names) != len(domains):
        raise ValidationError("one domain name per domain required")
    if len(classes) > 0xFFFF:
        raise ValidationError("u16 label payload supports at most 65535 classes")

    stem = f"{name}_{dataset.split}"
    images_file = f"{stem}.images.u8"
    labels_file = f"{stem}.labels.u16"
    domains_file = f"{stem}.domains.u8"
    (out_dir / images_file).write_bytes(np.round(dataset.images * 255.0).astype(np.uint8).tobytes())
    (out_dir / labels_file).write_bytes(dataset.class_ids.astype("<u2").tobytes())
    (out_dir / domains_file).write_bytes(dataset.domain_ids.astype(np.uint8).tobytes())
    manifest = {
        "name": name,
        "shape": list(dataset.shape),
        "domains": [{"name": domain_names[d], "classes": per_domain[d]} for d in domains],
        "splits": {
            dataset.split: {
                "count": len(dataset),
                "images": images_file,
                "labels": labels_file,
                "domain_ids": domains_file,
            }
        },
    }
    manifest_path = out_dir / f"{stem}{MANIFEST_SUFFIX}"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    name: str
    classes: int


@dataclass(frozen=True)
class SyntheticSpec:
    """Layout of a synthetic multi-domain image collection.

    Every domain renders inside its own disjoint intensity band with its own
    background texture, so domains differ far more than classes within a
    domain. Every global class gets a unique glyph from one parametric
    family (disc / square / ring, nine anchor positions, two sizes), so
    class identity survives brightness augmentation and new domains reuse
    the same geometric vocabulary — the cross-domain structure an embedding
    can transfer.
    """

    domains: tuple[DomainSpec, ...]
    train_per_class: int
    test_per_class: int
    height: int = 16
    width: int = 16
    channels: int = 1

    def __post_init__(self):
        if not self.domains:
            raise ValidationError("need at least one domain")
        for d in self.domains:
            if d.classes < 1:
                raise ValidationError(f"domain {d.name!r} needs at least one class")
        if self.total_classes > MAX_SYNTHETIC_CLASSES:
            raise ValidationError(f"glyph family supports at most {MAX_SYNTHETIC_CLASSES} classes in total")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ValidationError("need at least one sample per class per split")
        if min(self.height, self.width) < 8 or self.channels < 1:
            raise ValidationError("images must be at least 8x8 with >= 1 channel")

    @property
    def total_classes(self) -> int:
        return sum(d.classes for d in self.domains)

    def class_domain_map(self) -> dict[int, int]:
        cmap: dict[int, int] = {}
        next_id = 0
        for d, spec in enumerate(self.domains):
            for _ in range(spec.classes):
                cmap[next_id] = d
                next_id += 1
        return cmap


def domain_intensity_bands(num_domains: int) -> list[tuple[float, float]]:
    """Disjoint (lo, hi) mean-intensity band per domain, covering [0.04, 0.96]."""
    slot = 0.92 / num_domains
    bands = []
    for d in range(num_domains):
        lo = 0.04 + d * slot + 0.05 * slot
        hi = 0.04 + (d + 1) * slot - 0.05 * slot
        bands.append((lo, hi))
    return bands


def _glyph_params(class_id: int) -> tuple[int, int]:
    """(shape kind, tier) for a global class id.

    The stride-7 walk through the 27-glyph family keeps consecutive class
    ids geometrically far apart (different shape, not just the next tier).
    """
    g = (class_id * 7) % MAX_SYNTHETIC_CLASSES
    return g % 9, g // 9


def _soft(x: np.ndarray, edge: float = 1.0) -> np.ndarray:
    return np.clip(x / edge + 0.5, 0.0, 1.0)


def _glyph_mask(h: int, w: int, class_id: int, cy: float, cx: float) -> np.ndarray:
    """Soft [0,1] mask of the glyph for a global class id.

    All glyphs are centered and mirror-symmetric, so class identity
    survives the standard training augmentations (flips, small crops,
    brightness shifts); only the domain carries intensity information.
    """
    kind, tier = _glyph_params(class_id)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    r = 0.30 * min(h, w)
    if kind in (0, 1, 2):  # disc / square / diamond, tiers: filled, small, outline
        if kind == 0:
            dist = np.hypot(dy, dx)
        elif kind == 1:
            dist = np.maximum(np.abs(dy), np.abs(dx)) * 1.15
        else:
            dist = (np.abs(dy) + np.abs(dx)) * 0.85
        if tier == 0:
            return _soft(r - dist)
        if tier == 1:
            return _soft(0.55 * r - dist)
        return np.clip(_soft(r - dist) - _soft(0.55 * r - dist), 0.0, 1.0)
    if kind == 3:  # plus, thickness by tier
        t = (0.40, 0.24, 0.70)[tier] * r
        bar_h = _soft(t - np.abs(dy)) * _soft(r - np.abs(dx))
        bar_v = _soft(t - np.abs(dx)) * _soft(r - np.abs(dy))
        return np.clip(bar_h + bar_v, 0.0, 1.0)
    if kind == 4:  # diagonal cross, thickness by tier
        t = (0.40, 0.24, 0.70)[tier] * r
        box = _soft(r - np.maximum(np.abs(dy), np.abs(dx)))
        d1 = _soft(t - np.abs(dy - dx) / np.sqrt(2.0))
        d2 = _soft(t - np.abs(dy + dx) / np.sqrt(2.0))
        return np.clip((d1 + d2) * box, 0.0, 1.0)
    if kind in (5, 6):  # horizontal / vertical stripes, period by tier
        period = (2.0, 3.0, 4.5)[tier]
        u = dy if kind == 5 else dx
        box = _soft(r - np.maximum(np.abs(dy), np.abs(dx)))
        stripes = 0.5 + 0.5 * np.cos(2.0 * np.pi * u / period)
        return _soft(stripes - 0.5, 0.35) * box
    if kind == 7:  # concentric rings, spacing by tier
        period = (2.0, 3.0, 4.5)[tier]
        dist = np.hypot(dy, dx)
        rings = 0.5 + 0.5 * np.cos(2.0 * np.pi * dist / period)
        return _soft(rings - 0.5, 0.35) * _soft(r - dist)
    # kind 8: checkerboard patch, cell size by tier
    cell = (2.0, 3.0, 4.5)[tier]
    box = _soft(r - np.maximum(np.abs(dy), np.abs(dx)))
    checker = np.sin(np.pi * dy / cell) * np.sin(np.pi * dx / cell)
    return _soft(checker, 0.5) * box


def _texture(h: int, w: int, domain_index: int, phase: float) -> np.ndarray:
    """Domain-specific sinusoidal background in [0, 1]."""
    angle = (domain_index * 0.7) % math.pi
    freq = 1.5 + (domain_index % 3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = (math.cos(angle) * xx + math.sin(angle) * yy) / max(h, w)
    return 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * u + phase)


def _render_sample(spec: SyntheticSpec, domain: int, class_id: int, band: tuple[float, float],
                   rng: np.random.Generator) -> np.ndarray:
    h, w, c = spec.height, spec.width, spec.channels
    jitter = 0.03 * min(h, w)
    cy = 0.5 * (h - 1) + rng.uniform(-jitter, jitter)
    cx = 0.5 * (w - 1) + rng.uniform(-jitter, jitter)
    mask = _glyph_mask(h, w, class_id, cy, cx)
    pixels = np.empty((h, w, c), dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    for ch in range(c):
        background = 0.14 + 0.10 * _texture(h, w, domain, phase + 0.7 * ch)
        t = background * (1.0 - mask) + 0.88 * mask
        t = np.clip(t + rng.normal(0.0, 0.03, size=(h, w)), 0.0, 1.0)
        lo, hi = band
        pixels[:, :, ch] = lo + t * (hi - lo)
    # quantize to the u8 grid so save/load round-trips are exact
    return np.round(pixels * 255.0) / 255.0


def generate_synthetic(spec: SyntheticSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministically render (train, test) datasets for a synthetic spec."""
    rng = np.random.default_rng(seed)
    bands = domain_intensity_bands(len(spec.domains))
    cmap = spec.class_domain_map()
    per_split: dict[str, list] = {"train": [], "test": []}
    class_id = 0
    for d, dspec in enumerate(spec.domains):
        for _ in range(dspec.classes):
            for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
                for _ in range(count):
                    per_split[split].append((_render_sample(spec, d, class_id, bands[d], rng), class_id, d))
            class_id += 1

    def build(split: str) -> Dataset:
        rows = per_split[split]
        images = np.stack([r[0] for r in rows])
        cids = np.array([r[1] for r in rows], dtype=np.int64)
        dids = np.array([r[2] for r in rows], dtype=np.int64)
        return Dataset(images, cids, dids, cmap, split)

    return build("train"), build("test")


# ---------------------------------------------------------------------------
# Session splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionData:
    """Materialized data for one protocol session."""

    index: int
    name: str
    class_ids: tuple[int, ...]
    train: Dataset
    test_partition: Dataset


def split_sessions(datasets: Sequence[Dataset], schedule: "SessionSchedule", *, seed: int = 0) -> list[SessionData]:
    """Partition train/test pools into per-session data.

    The schedule's class assignments must partition the pool's classes. The
    base session keeps its full training data; incremental sessions draw
    exactly K shots per class with a deterministic seeded draw.
    """
    train_pool = merge_datasets([d for d in datasets if d.split == "train"])
    test_pool = merge_datasets([d for d in datasets if d.split == "test"])
    if train_pool.shape != test_pool.shape:
        raise ValidationError("train and test pools disagree on image shape")

    scheduled: set[int] = set()
    for spec in schedule.sessions:
        overlap = scheduled & set(spec.class_ids)
        if overlap:
            raise ScheduleError(f"classes {sorted(overlap)} assigned to more than one session")
        scheduled.update(spec.class_ids)
    pool_classes = set(train_pool.class_domain_map)
    if scheduled != pool_classes:
        missing = sorted(pool_classes - scheduled)
        extra = sorted(scheduled - pool_classes)
        raise ScheduleError(
            f"schedule must partition the available classes (unassigned: {missing}, unknown: {extra})"
        )

    rng = np.random.default_rng(seed)
    sessions: list[SessionData] = []
    for b, spec in enumerate(schedule.sessions):
        wanted = sorted(spec.class_ids)
        if spec.role == "base":
            train = train_pool.subset_by_classes(wanted)
        else:
            picked: list[int] = []
            for c in wanted:
                idx = train_pool.indices_of_class(c)
                if len(idx) < spec.shots:
                    raise InsufficientDataError(
                        f"class {c} has {len(idx)} training samples, {spec.shots} shots requested"
                    )
                picked.extend(int(i) for i in rng.choice(idx, size=spec.shots, replace=False))
            train = train_pool.take(np.array(picked, dtype=np.int64))
        test_partition = test_pool.subset_by_classes(wanted)
        sessions.append(SessionData(b, spec.name, tuple(wanted), train, test_partition))
    return sessions
