"""Training objectives on the cosine hypersphere, with analytic gradients.

Logits are cosines between unit-normalized embeddings and unit-normalized
per-class weight rows (bias fixed at zero). The margin loss subtracts an
additive cosine margin from the true class and scales by a radius before
softmax; the domain margin loss restricts each sample's softmax competition
to the classes of its own domain, normalizes per domain, and averages over
the domains present. The blended objective mixes the two with weight
``lam``. All softmaxes use the max-shift log-sum-exp form.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ValidationError
from .network import apply_momentum_sgd, normalize_rows

_COS_TOL = 1e-6
_ROW_NORM_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Blend weight, radii and margins of the training objective."""

    lam: float = 0.8
    r_a: float = 30.0
    r_d: float = 30.0
    m_a: float = 0.4
    m_d: float = 0.4

    def __post_init__(self):
        values = (self.lam, self.r_a, self.r_d, self.m_a, self.m_d)
        if not all(np.isfinite(v) for v in values):
            raise ValidationError("loss configuration must be finite")
        if not (0.0 <= self.lam <= 1.0):
            raise ValidationError("lam must lie in [0, 1]")
        if self.r_a <= 0.0 or self.r_d <= 0.0:
            raise ValidationError("radii must be > 0")
        if self.m_a < 0.0 or self.m_d < 0.0:
            raise ValidationError("margins must be >= 0")


class CosineClassifier:
    """Per-class unit weight rows with class and domain bookkeeping.

    Base-session rows are learned by SGD (with re-normalization after every
    step); incremental rows are class prototypes. Row order is insertion
    order; ``class_ids[i]`` and ``class_domains[i]`` describe row i.
    """

    def __init__(self, weights, class_ids, class_domains, origins):
        weights = np.asarray(weights, dtype=np.float64)
        class_ids = np.asarray(class_ids, dtype=np.int64)
        class_domains = np.asarray(class_domains, dtype=np.int64)
        if weights.ndim != 2:
            raise ValidationError("weights must be a (num_classes, dim) matrix")
        n = weights.shape[0]
        if class_ids.shape != (n,) or class_domains.shape != (n,) or len(origins) != n:
            raise ValidationError("class_ids, class_domains and origins must have one entry per row")
        if len(set(int(c) for c in class_ids)) != n:
            raise ValidationError("classifier class ids must be unique")
        norms = np.linalg.norm(weights, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > _ROW_NORM_TOL:
            raise ValidationError("classifier rows must be unit norm")
        for origin in origins:
            if origin not in ("learned", "prototype"):
                raise ValidationError(f"unknown row origin {origin!r}")
        self.weights = weights
        self.class_ids = class_ids
        self.class_domains = class_domains
        self.origins = list(origins)
        self._row_of = {int(c): i for i, c in enumerate(class_ids)}

    @classmethod
    def random(cls, class_ids, class_domains, dim: int, rng: np.random.Generator) -> "CosineClassifier":
        raw = rng.standard_normal((len(class_ids), dim))
        weights, _ = normalize_rows(raw)
        return cls(weights, class_ids, class_domains, ["learned"] * len(class_ids))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def class_domain_map(self) -> dict[int, int]:
        return {int(c): int(d) for c, d in zip(self.class_ids, self.class_domains)}

    def row_index(self, class_id: int) -> int:
        try:
            return self._row_of[int(class_id)]
        except KeyError:
            raise ValidationError(f"classifier has no row for class {class_id}") from None

    def rows_for(self, class_ids) -> np.ndarray:
        return np.array([self.row_index(c) for c in class_ids], dtype=np.int64)

    def append(self, class_id: int, domain_id: int, weight, origin: str) -> None:
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != (self.dim,):
            raise ValidationError(f"row must have dimension {self.dim}")
        if abs(float(np.linalg.norm(weight)) - 1.0) > _ROW_NORM_TOL:
            raise ValidationError("appended row must be unit norm")
        if int(class_id) in self._row_of:
            raise ValidationError(f"class {class_id} already has a classifier row")
        if origin not in ("learned", "prototype"):
            raise ValidationError(f"unknown row origin {origin!r}")
        self._row_of[int(class_id)] = self.num_classes
        self.weights = np.vstack([self.weights, weight[None, :]])
        self.class_ids = np.append(self.class_ids, np.int64(class_id))
        self.class_domains = np.append(self.class_domains, np.int64(domain_id))
        self.origins.append(origin)

    def restricted(self, keep_class_ids) -> "CosineClassifier":
        """Copy holding only the given classes, in the given order."""
        rows = self.rows_for(keep_class_ids)
        return CosineClassifier(
            self.weights[rows].copy(),
            self.class_ids[rows],
            self.class_domains[rows],
            [self.origins[i] for i in rows],
        )

    def copy(self) -> "CosineClassifier":
        return CosineClassifier(self.weights.copy(), self.class_ids.copy(),
                                self.class_domains.copy(), list(self.origins))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.weights).tobytes())
        digest.update(np.ascontiguousarray(self.class_ids).tobytes())
        digest.update(np.ascontiguousarray(self.class_domains).tobytes())
        return digest.hexdigest()


# ---------------------------------------------------------------------------
# Logits
# ---------------------------------------------------------------------------


def cosine_logits(clf: CosineClassifier, embedding) -> np.ndarray:
    """Cosine of the angle between a unit embedding and every class row."""
    v = np.asarray(embedding, dtype=np.float64)
    if v.shape != (clf.dim,):
        raise ValidationError(f"embedding has shape {v.shape}, classifier dim is {clf.dim}")
    return np.clip(clf.weights @ v, -1.0, 1.0)


def batch_cosines(clf: CosineClassifier, raw_embeddings) -> np.ndarray:
    """Cosines for a raw (un-normalized) embedding batch.

    Both the embeddings and the stored rows are unit-normalized inside, so
    gradients through :func:`cosine_backward` see the exact same map.
    """
    x = np.asarray(raw_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != clf.dim:
        raise ValidationError(f"embedding batch shape {x.shape} does not match classifier dim {clf.dim}")
    x_hat, _ = normalize_rows(x)
    w_hat, _ = normalize_rows(clf.weights)
    return x_hat @ w_hat.T


def _check_cosines(cosines) -> np.ndarray:
    z = np.asarray(cosines, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError("cosines must be a (batch, num_classes) matrix")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite cosine input")
    if z.size and (z.min() < -1.0 - _COS_TOL or z.max() > 1.0 + _COS_TOL):
        raise ValidationError("cosines must lie in [-1, 1]")
    return z


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (batch,):
        raise ValidationError(f"labels must have shape ({batch},)")
    if batch and (y.min() < 0 or y.max() >= num_classes):
        raise ValidationError(f"labels must lie in [0, {num_classes})")
    return y


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log softmax probability of the labels.

    Returns the scalar loss and its gradient with respect to the logits,
    (softmax - onehot) / batch.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError("logits must be a (batch, num_classes) matrix")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    n, _ = z.shape
    y = _check_labels(labels, n, z.shape[1])
    shift = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shift).sum(axis=1, keepdims=True))
    log_p = shift - log_norm
    rows = np.arange(n)
    loss = float(-log_p[rows, y].mean())
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    grad /= n
    return loss, grad


def margin_loss(cosines, labels, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Additive cosine-margin softmax loss over all classes.

    The true class cosine is reduced by the margin, everything is scaled by
    the radius, then mean cross-entropy applies. Returns the loss and its
    gradient with respect to the cosines.
    """
    z = _check_cosines(cosines)
    n = z.shape[0]
    y = _check_labels(labels, n, z.shape[1])
    scaled = cfg.r_a * z
    scaled[np.arange(n), y] -= cfg.r_a * cfg.m_a
    loss, dscaled = cross_entropy_loss(scaled, y)
    return loss, dscaled * cfg.r_a


def domain_margin_loss(cosines, labels, domains, cfg: LossConfig, class_domains) -> tuple[float, np.ndarray]:
    """Margin softmax restricted to each sample's own domain.

    Samples are grouped by the domain of their true class; the softmax for a
    sample competes only over classes of that domain. Losses are averaged
    per domain, then across the domains present in the batch. Columns
    outside a sample's domain receive zero gradient; a domain holding a
    single class contributes zero loss.
    """
    z = _check_cosines(cosines)
    n, num_classes = z.shape
    y = _check_labels(labels, n, num_classes)
    col_domains = np.asarray(class_domains, dtype=np.int64)
    if col_domains.shape != (num_classes,):
        raise ValidationError(f"class_domains must map every one of the {num_classes} classes to a domain")
    sample_domains = np.asarray(domains, dtype=np.int64)
    if sample_domains.shape != (n,):
        raise ValidationError(f"domains must have shape ({n},)")
    if not np.array_equal(col_domains[y], sample_domains):
        raise ValidationError("a sample's domain must equal the domain of its true class")

    present = np.unique(sample_domains)
    grad = np.zeros_like(z)
    total = 0.0
    for d in present:
        rows = np.flatnonzero(sample_domains == d)
        cols = np.flatnonzero(col_domains == d)
        sub = cfg.r_d * z[np.ix_(rows, cols)]
        pos = np.searchsorted(cols, y[rows])
        r = np.arange(len(rows))
        sub[r, pos] -= cfg.r_d * cfg.m_d
        shift = sub - sub.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shift).sum(axis=1, keepdims=True))
        log_p = shift - log_norm
        total += float(-log_p[r, pos].sum()) / len(rows) / len(present)
        g = np.exp(log_p)
        g[r, pos] -= 1.0
        grad[np.ix_(rows, cols)] += g * (cfg.r_d / (len(rows) * len(present)))
    return total, grad


def blended_loss(cosines, labels, domains, cfg: LossConfig, class_domains) -> tuple[float, np.ndarray]:
    """lam * margin loss + (1 - lam) * domain margin loss."""
    la, ga = margin_loss(cosines, labels, cfg)
    ld, gd = domain_margin_loss(cosines, labels, domains, cfg, class_domains)
    return cfg.lam * la + (1.0 - cfg.lam) * ld, cfg.lam * ga + (1.0 - cfg.lam) * gd


# ---------------------------------------------------------------------------
# Chain rule through the cosine map
# ---------------------------------------------------------------------------


def cosine_backward(grad_cosines, raw_embeddings, clf: CosineClassifier) -> tuple[np.ndarray, np.ndarray]:
    """Propagate d(loss)/d(cosines) to raw embeddings and weight rows.

    Mirrors :func:`batch_cosines`: cos = normalize(x) @ normalize(W).T, so
    both unit-normalization Jacobians (I - uu^T)/|v| are applied.
    """
    g = np.asarray(grad_cosines, dtype=np.float64)
    x = np.asarray(raw_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != clf.dim:
        raise ValidationError(f"embedding batch shape {x.shape} does not match classifier dim {clf.dim}")
    if g.shape != (x.shape[0], clf.num_classes):
        raise ValidationError(f"cosine gradient shape {g.shape} != {(x.shape[0], clf.num_classes)}")
    x_hat, x_norms = normalize_rows(x)
    w_hat, w_norms = normalize_rows(clf.weights)
    dx_hat = g @ w_hat
    dx = (dx_hat - (dx_hat * x_hat).sum(axis=1, keepdims=True) * x_hat) / x_norms[:, None]
    dw_hat = g.T @ x_hat
    dw = (dw_hat - (dw_hat * w_hat).sum(axis=1, keepdims=True) * w_hat) / w_norms[:, None]
    return dx, dw


def update_classifier(clf: CosineClassifier, grad_weights, lr: float, momentum: float = 0.0, velocity=None):
    """Momentum-SGD step on the weight rows followed by re-normalization.

    The projected update keeps every row on the unit hypersphere, so stored
    rows always satisfy the classifier invariant.
    """
    velocity = apply_momentum_sgd([clf.weights], [np.asarray(grad_weights, dtype=np.float64)],
                                  lr, momentum, velocity)
    unit, _ = normalize_rows(clf.weights)
    clf.weights[...] = unit
    return velocity
