"""Central finite-difference verification of every analytic gradient.

The checks here are the independent oracle for the hand-written backward
passes: they only ever call forward evaluations. Each component check runs
on freshly randomized small instances and reports the worst relative error
(norm of the difference over the larger norm).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .losses import (
    CosineClassifier,
    LossConfig,
    batch_cosines,
    blended_loss,
    cosine_backward,
    cross_entropy_loss,
    domain_margin_loss,
    margin_loss,
)
from .network import EmbeddingNetwork, build_network

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-5


def finite_difference(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    Perturbs the array in place entry by entry and restores it, so ``f`` may
    close over ``x`` directly.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + step
        f_plus = f()
        x[idx] = original - step
        f_minus = f()
        x[idx] = original
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-based relative error; zero when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n)) / denom


def _random_loss_config(rng: np.random.Generator, *, force_lam: float | None = None) -> LossConfig:
    # moderate radii keep softmax probabilities resolvable by finite differences
    return LossConfig(
        lam=float(rng.uniform()) if force_lam is None else force_lam,
        r_a=float(rng.uniform(1.0, 8.0)),
        r_d=float(rng.uniform(1.0, 8.0)),
        m_a=float(rng.uniform(0.0, 0.5)),
        m_d=float(rng.uniform(0.0, 0.5)),
    )


def _random_domain_layout(rng: np.random.Generator, num_classes: int) -> np.ndarray:
    num_domains = int(rng.integers(1, min(4, num_classes) + 1))
    while True:
        col_domains = rng.integers(0, num_domains, size=num_classes)
        if len(np.unique(col_domains)) == num_domains:
            return col_domains.astype(np.int64)


def check_cross_entropy(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    n = int(rng.integers(2, 7))
    c = int(rng.integers(2, 9))
    logits = rng.normal(0.0, 2.0, size=(n, c))
    labels = rng.integers(0, c, size=n)
    _, analytic = cross_entropy_loss(logits, labels)
    numeric = finite_difference(lambda: cross_entropy_loss(logits, labels)[0], logits, step)
    return relative_error(analytic, numeric)


def check_margin_loss(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    n = int(rng.integers(2, 7))
    c = int(rng.integers(2, 9))
    cosines = rng.uniform(-0.95, 0.95, size=(n, c))
    labels = rng.integers(0, c, size=n)
    cfg = _random_loss_config(rng)
    _, analytic = margin_loss(cosines, labels, cfg)
    numeric = finite_difference(lambda: margin_loss(cosines, labels, cfg)[0], cosines, step)
    return relative_error(analytic, numeric)


def check_domain_loss(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    c = int(rng.integers(2, 9))
    n = int(rng.integers(2, 7))
    col_domains = _random_domain_layout(rng, c)
    cosines = rng.uniform(-0.95, 0.95, size=(n, c))
    labels = rng.integers(0, c, size=n)
    domains = col_domains[labels]
    cfg = _random_loss_config(rng)
    _, analytic = domain_margin_loss(cosines, labels, domains, cfg, col_domains)
    numeric = finite_difference(
        lambda: domain_margin_loss(cosines, labels, domains, cfg, col_domains)[0], cosines, step
    )
    return relative_error(analytic, numeric)


def check_blended_loss(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    c = int(rng.integers(2, 9))
    n = int(rng.integers(2, 7))
    col_domains = _random_domain_layout(rng, c)
    cosines = rng.uniform(-0.95, 0.95, size=(n, c))
    labels = rng.integers(0, c, size=n)
    domains = col_domains[labels]
    cfg = _random_loss_config(rng)
    _, analytic = blended_loss(cosines, labels, domains, cfg, col_domains)
    numeric = finite_difference(
        lambda: blended_loss(cosines, labels, domains, cfg, col_domains)[0], cosines, step
    )
    return relative_error(analytic, numeric)


def check_normalize(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    """Jacobian of v -> v/|v| against the analytic (I - vv^T/|v|^2)/|v| form."""
    d = int(rng.integers(2, 8))
    v = rng.normal(0.0, 1.0, size=d) + np.sign(rng.normal(size=d)) * 0.2
    u = rng.normal(0.0, 1.0, size=d)
    v_hat = v / np.linalg.norm(v)
    analytic = (u - (u @ v_hat) * v_hat) / np.linalg.norm(v)
    numeric = finite_difference(lambda: float(u @ (v / np.linalg.norm(v))), v, step)
    return relative_error(analytic, numeric)


def _kink_margin(net: EmbeddingNetwork, batch: np.ndarray) -> float:
    """Distance of the forward pass from the nearest ReLU/pool kink.

    Finite differences are only meaningful where the network is smooth, so
    instances too close to a kink are resampled by the checks below.
    """
    from .network import MaxPool2, Relu

    x = batch
    margin = np.inf
    for layer in net.layers:
        if isinstance(layer, Relu):
            margin = min(margin, float(np.abs(x).min()))
        elif isinstance(layer, MaxPool2):
            n, h, w, c = x.shape
            h2, w2 = h // 2, w // 2
            if h2 and w2:
                windows = (x[:, :2 * h2, :2 * w2, :]
                           .reshape(n, h2, 2, w2, 2, c)
                           .transpose(0, 1, 3, 5, 2, 4)
                           .reshape(n, h2, w2, c, 4))
                top2 = np.sort(windows, axis=-1)[..., 2:]
                margin = min(margin, float((top2[..., 1] - top2[..., 0]).min()))
        x, _ = layer.forward(x)
    return margin


def _smooth_instance(make, rng: np.random.Generator, threshold: float = 1e-3):
    """Draw (net, batch, extras) instances until the forward pass is smooth."""
    for _ in range(64):
        net, batch, extras = make(rng)
        if _kink_margin(net, batch) > threshold:
            return net, batch, extras
    raise ValidationError("could not draw a smooth random instance; widen the threshold")


def _tiny_conv_descriptor(rng: np.random.Generator) -> EmbeddingNetwork:
    from .network import network_from_descriptor

    descriptor = {
        "input_shape": [6, 6, 1],
        "embedding_dim": 4,
        "layers": [
            {"kind": "conv", "in_channels": 1, "out_channels": 2, "kernel": 3},
            {"kind": "relu"},
            {"kind": "pool"},
            {"kind": "conv", "in_channels": 2, "out_channels": 3, "kernel": 3},
            {"kind": "relu"},
            {"kind": "pool"},
            {"kind": "flatten"},
            {"kind": "affine", "in_features": 3, "out_features": 4},
        ],
    }
    return network_from_descriptor(descriptor, seed=int(rng.integers(1 << 31)))


def _draw_net_and_batch(rng: np.random.Generator):
    if rng.random() < 0.5:
        net = build_network((4, 4, 1), embedding_dim=4, arch="affine-small", seed=int(rng.integers(1 << 31)))
    else:
        net = _tiny_conv_descriptor(rng)
    batch = rng.uniform(0.0, 1.0, size=(3, *net.input_shape))
    return net, batch, None


def check_network(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    """All parameter gradients of a linear functional of the embeddings."""
    net, batch, _ = _smooth_instance(_draw_net_and_batch, rng)
    upstream = rng.normal(0.0, 1.0, size=(3, net.embedding_dim))
    net.forward(batch, record=True)
    analytic = net.backward(upstream)
    worst = 0.0
    for p, a in zip(net.parameters(), analytic):
        numeric = finite_difference(lambda: float((net.forward(batch) * upstream).sum()), p, step)
        worst = max(worst, relative_error(a, numeric))
    return worst


def check_pipeline(rng: np.random.Generator, step: float = DEFAULT_STEP) -> float:
    """Pixels-to-loss chain: network, both normalizations, blended loss."""
    net, batch, _ = _smooth_instance(_draw_net_and_batch, rng)
    n = batch.shape[0]
    c = int(rng.integers(2, 6))
    col_domains = _random_domain_layout(rng, c)
    clf = CosineClassifier.random(list(range(c)), col_domains, net.embedding_dim,
                                  np.random.default_rng(int(rng.integers(1 << 31))))
    labels = rng.integers(0, c, size=n)
    domains = col_domains[labels]
    cfg = _random_loss_config(rng)

    def loss_value() -> float:
        cosines = batch_cosines(clf, net.forward(batch))
        return blended_loss(cosines, labels, domains, cfg, col_domains)[0]

    emb = net.forward(batch, record=True)
    cosines = batch_cosines(clf, emb)
    _, dcos = blended_loss(cosines, labels, domains, cfg, col_domains)
    demb, dweights = cosine_backward(dcos, emb, clf)
    analytic = net.backward(demb) + [dweights]
    worst = 0.0
    for p, a in zip(net.parameters() + [clf.weights], analytic):
        numeric = finite_difference(loss_value, p, step)
        worst = max(worst, relative_error(a, numeric))
    return worst


COMPONENTS = {
    "cross_entropy": (check_cross_entropy, 25),
    "loss_la": (check_margin_loss, 25),
    "loss_ld": (check_domain_loss, 25),
    "total_loss": (check_blended_loss, 15),
    "normalize": (check_normalize, 10),
    "network": (check_network, 6),
    "pipeline": (check_pipeline, 8),
}


@dataclass(frozen=True)
class SuiteResult:
    component: str
    trials: int
    max_rel_error: float

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return self.max_rel_error < tolerance


def run_suite(seed: int = 0, trials: int | None = None, components=None,
              step: float = DEFAULT_STEP) -> list[SuiteResult]:
    """Run the finite-difference suites; deterministic given the seed.

    ``trials`` overrides every component's default trial count; ``components``
    restricts which suites run.
    """
    names = list(COMPONENTS) if components is None else list(components)
    for name in names:
        if name not in COMPONENTS:
            raise ValidationError(f"unknown component {name!r}; choose from {sorted(COMPONENTS)}")
    results = []
    for name in names:
        check, default_trials = COMPONENTS[name]
        count = default_trials if trials is None else int(trials)
        rng = np.random.default_rng(np.random.SeedSequence([seed, _component_tag(name)]))
        worst = 0.0
        for _ in range(count):
            worst = max(worst, check(rng, step))
        results.append(SuiteResult(name, count, worst))
    return results


def _component_tag(name: str) -> int:
    return int.from_bytes(name.encode("utf-8")[:4].ljust(4, b"\0"), "little")
