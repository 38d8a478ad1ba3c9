"""The class-incremental protocol: base training with pseudo data, backbone
freeze, per-session prototype extension, cumulative evaluation, and the
average-accuracy / performance-dropping metrics.

Sessions have pairwise-disjoint label spaces. Session 0 (base) trains the
embedding and the learned classifier rows; every later session contributes
K-shot prototypes only, with no gradient updates. After session b the model
is tested on the union of all test partitions seen so far; row b of the
accuracy matrix holds per-task accuracies a_{b,0..b}, A_b is their mean and
PD = A_0 - A_B.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import AugmentOptions, PseudoLabelSpace, build_pseudo_batch, augment_batch
from .datasets import Dataset, SessionData, split_sessions
from .errors import (
    InsufficientDataError,
    ScheduleError,
    TrainingError,
    UsageError,
    ValidationError,
)
from .losses import (
    CosineClassifier,
    LossConfig,
    batch_cosines,
    blended_loss,
    cosine_backward,
    update_classifier,
)
from .network import EmbeddingNetwork, build_network, freeze, normalize_embedding, normalize_rows, sgd_step

_IMPROVE_TOL = 1e-12


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionSpec:
    """One session of a schedule: which classes, how many shots."""

    name: str
    dataset: str
    class_ids: tuple[int, ...]
    ways: int
    shots: int | None
    role: str  # "base" | "incremental"

    def __post_init__(self):
        if self.role not in ("base", "incremental"):
            raise ScheduleError(f"unknown session role {self.role!r}")
        if self.ways != len(self.class_ids):
            raise ScheduleError(f"session {self.name!r}: ways={self.ways} but {len(self.class_ids)} classes")
        if self.role == "incremental" and (self.shots is None or self.shots < 1):
            raise ScheduleError(f"incremental session {self.name!r} needs shots >= 1")


@dataclass(frozen=True)
class SessionSchedule:
    sessions: tuple[SessionSpec, ...]

    def __post_init__(self):
        if not self.sessions:
            raise ScheduleError("schedule needs at least one session")
        if self.sessions[0].role != "base":
            raise ScheduleError("session 0 must be the base session")
        if any(s.role != "incremental" for s in self.sessions[1:]):
            raise ScheduleError("sessions after the base session must be incremental")
        seen: set[int] = set()
        for s in self.sessions:
            overlap = seen & set(s.class_ids)
            if overlap:
                raise ScheduleError(f"classes {sorted(overlap)} appear in more than one session")
            seen.update(s.class_ids)

    @property
    def num_incremental(self) -> int:
        return len(self.sessions) - 1

    def all_class_ids(self) -> list[int]:
        return sorted(c for s in self.sessions for c in s.class_ids)


def save_schedule(schedule: SessionSchedule, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"sessions": [
        {"name": s.name, "dataset": s.dataset, "class_ids": list(s.class_ids),
         "ways": s.ways, "shots": s.shots, "role": s.role}
        for s in schedule.sessions
    ]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_schedule(path) -> SessionSchedule:
    path = Path(path)
    if not path.exists():
        raise ScheduleError(f"schedule file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ScheduleError(f"schedule is not valid JSON: {path}: {e}") from e
    if not isinstance(raw, dict) or "sessions" not in raw or not isinstance(raw["sessions"], list):
        raise ScheduleError("schedule JSON must be an object with a 'sessions' list")
    sessions = []
    for s in raw["sessions"]:
        try:
            sessions.append(SessionSpec(
                name=str(s["name"]),
                dataset=str(s.get("dataset", "")),
                class_ids=tuple(int(c) for c in s["class_ids"]),
                ways=int(s["ways"]),
                shots=None if s.get("shots") is None else int(s["shots"]),
                role=str(s["role"]),
            ))
        except (KeyError, TypeError, ValueError) as e:
            raise ScheduleError(f"malformed session entry {s!r}: {e}") from e
    return SessionSchedule(tuple(sessions))


def _domains_in_order(class_domain_map: dict[int, int]) -> dict[int, list[int]]:
    by_domain: dict[int, list[int]] = {}
    for c in sorted(class_domain_map):
        by_domain.setdefault(class_domain_map[c], []).append(c)
    return dict(sorted(by_domain.items()))


def _domain_name(domain_names, d: int) -> str:
    if domain_names is not None:
        return str(domain_names[d])
    return f"domain{d}"


def single_domain_schedule(class_domain_map: dict[int, int], base_domains: int, shots: int = 1,
                           domain_names: Sequence[str] | None = None) -> SessionSchedule:
    """Base session over the first ``base_domains`` domains, then one
    incremental session per remaining domain (all its classes at once)."""
    by_domain = _domains_in_order(class_domain_map)
    if base_domains < 1 or base_domains >= len(by_domain):
        raise ScheduleError(f"base_domains must be in [1, {len(by_domain) - 1}]")
    base_classes = [c for d in list(by_domain)[:base_domains] for c in by_domain[d]]
    sessions = [SessionSpec(
        name="base",
        dataset="+".join(_domain_name(domain_names, d) for d in list(by_domain)[:base_domains]),
        class_ids=tuple(base_classes), ways=len(base_classes), shots=None, role="base",
    )]
    for i, d in enumerate(list(by_domain)[base_domains:], start=1):
        classes = by_domain[d]
        sessions.append(SessionSpec(
            name=f"session{i}", dataset=_domain_name(domain_names, d),
            class_ids=tuple(classes), ways=len(classes), shots=shots, role="incremental",
        ))
    return SessionSchedule(tuple(sessions))


def one_way_schedule(class_domain_map: dict[int, int], base_domains: int, shots: int = 1,
                     domain_names: Sequence[str] | None = None) -> SessionSchedule:
    """Base session, then one incremental session per remaining class
    (domain order, class order within a domain)."""
    by_domain = _domains_in_order(class_domain_map)
    if base_domains < 1 or base_domains >= len(by_domain):
        raise ScheduleError(f"base_domains must be in [1, {len(by_domain) - 1}]")
    base_classes = [c for d in list(by_domain)[:base_domains] for c in by_domain[d]]
    sessions = [SessionSpec(
        name="base",
        dataset="+".join(_domain_name(domain_names, d) for d in list(by_domain)[:base_domains]),
        class_ids=tuple(base_classes), ways=len(base_classes), shots=None, role="base",
    )]
    i = 1
    for d in list(by_domain)[base_domains:]:
        for c in by_domain[d]:
            sessions.append(SessionSpec(
                name=f"session{i}", dataset=_domain_name(domain_names, d),
                class_ids=(c,), ways=1, shots=shots, role="incremental",
            ))
            i += 1
    return SessionSchedule(tuple(sessions))


# ---------------------------------------------------------------------------
# Training options and state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainOptions:
    """Base-session optimization settings (desk-scale defaults).

    ``lr`` is the initial learning rate; ``lr_schedule`` decays it per epoch
    ("cosine" anneals to lr/100, "constant" keeps it fixed). ``weight_decay``
    applies to weight matrices only (never biases); without it the feature
    norm grows without bound under cosine losses and learning stalls.
    """

    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 30
    patience: int = 10
    val_fraction: float = 0.1
    weight_decay: float = 1e-3
    lr_schedule: str = "cosine"
    min_epochs: int = 0  # early stopping only arms after this many epochs

    def __post_init__(self):
        if not (self.lr > 0.0):
            raise ValidationError("lr must be > 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ValidationError("batch_size, epochs and patience must be >= 1")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ValidationError("val_fraction must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValidationError("weight_decay must be >= 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError("lr_schedule must be 'cosine' or 'constant'")
        if self.min_epochs < 0:
            raise ValidationError("min_epochs must be >= 0")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        anneal = 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))
        return max(self.lr * anneal, self.lr / 100.0)


@dataclass
class ProtocolState:
    """Mutable protocol state: frozen embedder, growing classifier, results."""

    embedder: EmbeddingNetwork
    classifier: CosineClassifier
    session_index: int = 0
    accuracy_rows: list[list[float]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------


def predict_classes(embedder, clf: CosineClassifier, images, batch_size: int = 512) -> np.ndarray:
    """Predicted class ids by highest cosine; ties go to the lowest class id."""
    if clf.num_classes == 0:
        raise ValidationError("classifier has no rows")
    order = np.argsort(clf.class_ids, kind="stable")
    weights = clf.weights[order]
    ids = clf.class_ids[order]
    out = []
    for start in range(0, len(images), batch_size):
        emb = embedder.forward(images[start:start + batch_size])
        emb_hat, _ = normalize_rows(emb)
        out.append(ids[np.argmax(emb_hat @ weights.T, axis=1)])
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def classify(state: ProtocolState, sample) -> int:
    """Predict the class of one sample (or raw pixel array)."""
    pixels = sample.pixels if hasattr(sample, "pixels") else np.asarray(sample, dtype=np.float64)
    return int(predict_classes(state.embedder, state.classifier, pixels[None])[0])


def accuracy_on(embedder, clf: CosineClassifier, dataset: Dataset) -> float:
    preds = predict_classes(embedder, clf, dataset.images)
    return float(np.mean(preds == dataset.class_ids))


# ---------------------------------------------------------------------------
# Base-session training
# ---------------------------------------------------------------------------


def _stratified_split(data: Dataset, fraction: float, rng: np.random.Generator):
    val_idx: list[int] = []
    train_idx: list[int] = []
    for c in data.classes():
        idx = rng.permutation(data.indices_of_class(c))
        k = int(np.floor(fraction * len(idx)))
        val_idx.extend(int(i) for i in idx[:k])
        train_idx.extend(int(i) for i in idx[k:])
    train = data.take(np.array(sorted(train_idx), dtype=np.int64))
    val = data.take(np.array(sorted(val_idx), dtype=np.int64)) if val_idx else None
    return train, val


def train_base(base_session: SessionData, net: EmbeddingNetwork, classifier: CosineClassifier,
               pseudo_space: PseudoLabelSpace | None, loss_cfg: LossConfig, opts: TrainOptions,
               aug: AugmentOptions, rng: np.random.Generator) -> tuple[CosineClassifier, dict]:
    """Train the embedding and classifier on the base session.

    The classifier must carry rows for every real base class plus, when
    ``pseudo_space`` is given, every pseudo class. Training runs minibatch
    momentum SGD on the blended objective over real batches extended with
    freshly fused pseudo batches, early-stops on a held-out stratified
    validation slice, restores the best snapshot, and returns the classifier
    restricted to real-class rows (the network is trained in place).
    """
    if base_session.index != 0:
        raise UsageError("train_base expects the base session (index 0)")
    if net.frozen:
        raise UsageError("cannot train a frozen network")
    real_ids = sorted(base_session.train.class_domain_map)
    for c in real_ids:
        classifier.row_index(c)  # raises if the caller forgot a class

    train_set, val_set = _stratified_split(base_session.train, opts.val_fraction, rng)
    mix_op = aug.mix_op() if pseudo_space is not None and aug.pseudo_per_batch > 0 else None

    velocity_net = None
    velocity_clf = None
    val_history: list[float] = []
    best_acc = -np.inf
    best_epoch = -1
    best_params = None
    best_weights = None
    since_best = 0
    epochs_run = 0

    for epoch in range(opts.epochs):
        lr = opts.lr_at(epoch)
        perm = rng.permutation(len(train_set))
        for start in range(0, len(train_set), opts.batch_size):
            take = perm[start:start + opts.batch_size]
            images = augment_batch(train_set.images[take], rng, aug)
            labels = train_set.class_ids[take]
            domains = train_set.domain_ids[take]
            if mix_op is not None:
                pseudo = build_pseudo_batch(train_set, pseudo_space, mix_op, aug.pseudo_per_batch, rng)
                images = np.concatenate([images, np.stack([p.pixels for p in pseudo])])
                labels = np.concatenate([labels, np.array([p.class_id for p in pseudo], dtype=np.int64)])
                domains = np.concatenate([domains, np.array([p.domain_id for p in pseudo], dtype=np.int64)])
            rows = classifier.rows_for(labels)
            emb = net.forward(images, record=True)
            cosines = batch_cosines(classifier, emb)
            loss, dcos = blended_loss(cosines, rows, domains, loss_cfg, classifier.class_domains)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch offset {start} "
                    f"(lr={lr}, r_a={loss_cfg.r_a}, r_d={loss_cfg.r_d})"
                )
            demb, dweights = cosine_backward(dcos, emb, classifier)
            grads = net.backward(demb)
            if opts.weight_decay > 0.0:
                for p, g in zip(net.parameters(), grads):
                    if p.ndim > 1:  # decay weights, not biases
                        g += opts.weight_decay * p
            velocity_net = sgd_step(net, grads, lr, opts.momentum, velocity_net)
            velocity_clf = update_classifier(classifier, dweights, lr, opts.momentum, velocity_clf)
        epochs_run = epoch + 1

        if val_set is not None:
            acc = accuracy_on(net, classifier.restricted(real_ids), val_set)
            val_history.append(acc)
            if acc > best_acc + _IMPROVE_TOL:
                best_acc = acc
                best_epoch = epoch
                best_params = net.copy_parameters()
                best_weights = classifier.weights.copy()
                since_best = 0
            else:
                since_best += 1
                if since_best >= opts.patience and epoch + 1 >= opts.min_epochs:
                    break

    if best_params is not None:
        net.load_parameters(best_params)
        classifier.weights[...] = best_weights

    history = {
        "val_accuracy": val_history,
        "epochs_run": epochs_run,
        "best_epoch": best_epoch,
        "best_val_accuracy": None if best_epoch < 0 else best_acc,
    }
    return classifier.restricted(real_ids), history


# ---------------------------------------------------------------------------
# Incremental sessions and evaluation
# ---------------------------------------------------------------------------


def extend_with_prototypes(state: ProtocolState, session: SessionData) -> CosineClassifier:
    """Append one prototype row per new class: the unit-normalized mean of
    the normalized embeddings of its K shots. Existing rows stay untouched."""
    if session.index < 1:
        raise UsageError("prototype extension applies to incremental sessions only")
    if not state.embedder.frozen:
        raise UsageError("backbone must be frozen before prototype extension")
    for c in sorted(session.class_ids):
        idx = session.train.indices_of_class(c)
        if len(idx) == 0:
            raise InsufficientDataError(f"class {c} has no training samples in session {session.index}")
        emb = state.embedder.forward(session.train.images[idx])
        unit, _ = normalize_rows(emb)
        prototype = normalize_embedding(unit.mean(axis=0))
        state.classifier.append(c, session.train.class_domain_map[c], prototype, "prototype")
    return state.classifier


def evaluate_session(state: ProtocolState, test_partitions: Sequence[Dataset]) -> tuple[list[float], float]:
    """Per-task accuracies over the cumulative test partitions and their mean."""
    if not test_partitions:
        raise ValidationError("need at least one test partition")
    accuracies = []
    for i, part in enumerate(test_partitions):
        if len(part) == 0:
            raise ValidationError(f"test partition {i} is empty")
        accuracies.append(accuracy_on(state.embedder, state.classifier, part))
    return accuracies, float(np.mean(accuracies))


# ---------------------------------------------------------------------------
# Metrics and reports
# ---------------------------------------------------------------------------


@dataclass
class ProtocolReport:
    """Everything a run produces: the accuracy matrix, derived metrics, and
    enough configuration echo to reproduce the run."""

    accuracy_matrix: list[list[float]]
    average_accuracy: list[float]
    pd: float
    session_names: list[str]
    config: dict
    seeds: dict
    history: dict

    def to_dict(self) -> dict:
        return {
            "accuracy_matrix": self.accuracy_matrix,
            "average_accuracy": self.average_accuracy,
            "pd": self.pd,
            "session_names": self.session_names,
            "config": self.config,
            "seeds": self.seeds,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ProtocolReport":
        try:
            return cls(
                accuracy_matrix=[[float(v) for v in row] for row in raw["accuracy_matrix"]],
                average_accuracy=[float(v) for v in raw["average_accuracy"]],
                pd=float(raw["pd"]),
                session_names=[str(s) for s in raw["session_names"]],
                config=dict(raw.get("config", {})),
                seeds=dict(raw.get("seeds", {})),
                history=dict(raw.get("history", {})),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed report payload: {e}") from e

    def save_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load_json(cls, path) -> "ProtocolReport":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"report not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"report is not valid JSON: {e}") from e
        return cls.from_dict(raw)

    def csv_rows(self) -> list[tuple[int, int, float]]:
        return [(t, i, acc) for t, row in enumerate(self.accuracy_matrix) for i, acc in enumerate(row)]

    def save_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["session", "task", "accuracy"])
            for session, task, acc in self.csv_rows():
                writer.writerow([session, task, repr(acc)])
        return path


def compute_metrics(accuracy_matrix: Sequence[Sequence[float]], *, session_names=None,
                    config=None, seeds=None, history=None) -> ProtocolReport:
    """Average accuracies and the performance-dropping rate from a complete
    lower-triangular accuracy matrix (row b holds a_{b,0..b})."""
    matrix = [list(map(float, row)) for row in accuracy_matrix]
    if not matrix:
        raise ValidationError("accuracy matrix is empty")
    for t, row in enumerate(matrix):
        if len(row) != t + 1:
            raise ValidationError(f"row {t} has {len(row)} entries, expected {t + 1} (incomplete matrix)")
        if not all(np.isfinite(v) for v in row):
            raise ValidationError(f"row {t} contains non-finite accuracies")
    averages = [float(np.mean(row)) for row in matrix]
    pd = averages[0] - averages[-1]
    names = list(session_names) if session_names is not None else [f"session{t}" for t in range(len(matrix))]
    if len(names) != len(matrix):
        raise ValidationError("one session name per matrix row required")
    return ProtocolReport(
        accuracy_matrix=matrix,
        average_accuracy=averages,
        pd=pd,
        session_names=names,
        config=dict(config or {}),
        seeds=dict(seeds or {}),
        history=dict(history or {}),
    )


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def _derive_seeds(seed: int) -> dict[str, int]:
    state = np.random.SeedSequence(seed).generate_state(3)
    return {"master": int(seed), "init": int(state[0]), "train": int(state[1]), "shots": int(state[2])}


def _prototype_base_classifier(embedder, base_session: SessionData, dim: int) -> CosineClassifier:
    clf = CosineClassifier(np.empty((0, dim)), np.empty(0, dtype=np.int64),
                           np.empty(0, dtype=np.int64), [])
    for c in sorted(base_session.train.class_domain_map):
        idx = base_session.train.indices_of_class(c)
        if len(idx) == 0:
            raise InsufficientDataError(f"base class {c} has no training samples")
        unit, _ = normalize_rows(embedder.forward(base_session.train.images[idx]))
        clf.append(c, base_session.train.class_domain_map[c], normalize_embedding(unit.mean(axis=0)), "prototype")
    return clf


def run_protocol(train_ds: Dataset, test_ds: Dataset, schedule: SessionSchedule, *,
                 loss_cfg: LossConfig = LossConfig(), opts: TrainOptions = TrainOptions(),
                 aug: AugmentOptions = AugmentOptions(), arch: str = "conv-small",
                 embedding_dim: int = 64, seed: int = 0, embedder=None,
                 config_echo: dict | None = None) -> ProtocolReport:
    """Execute the full protocol and return its report.

    With ``embedder`` set (a frozen network-like object), base training is
    skipped and base classifier rows are class prototypes — the plug-in path
    used by oracle tests. Fully deterministic given ``seed``.
    """
    seeds = _derive_seeds(seed)
    sessions = split_sessions([train_ds, test_ds], schedule, seed=seeds["shots"])
    base = sessions[0]
    base_map = base.train.class_domain_map

    if embedder is None:
        rng = np.random.default_rng(seeds["train"])
        net = build_network(train_ds.shape, embedding_dim, arch=arch, seed=seeds["init"])
        pseudo_space = PseudoLabelSpace.build(base_map) if aug.pseudo_per_batch > 0 else None
        if pseudo_space is not None:
            class_ids = sorted(pseudo_space.class_domain_map)
            class_domains = [pseudo_space.class_domain_map[c] for c in class_ids]
        else:
            class_ids = sorted(base_map)
            class_domains = [base_map[c] for c in class_ids]
        clf = CosineClassifier.random(class_ids, class_domains, embedding_dim,
                                      np.random.default_rng(seeds["init"] + 1))
        clf, history = train_base(base, net, clf, pseudo_space, loss_cfg, opts, aug, rng)
        freeze(net)
        state = ProtocolState(net, clf)
    else:
        if not getattr(embedder, "frozen", False):
            raise UsageError("an external embedder must be frozen")
        clf = _prototype_base_classifier(embedder, base, int(embedder.embedding_dim))
        history = {"val_accuracy": [], "epochs_run": 0, "best_epoch": -1, "best_val_accuracy": None}
        state = ProtocolState(embedder, clf)

    partitions = [s.test_partition for s in sessions]
    for b, session in enumerate(sessions):
        state.session_index = b
        if b > 0:
            extend_with_prototypes(state, session)
        row, _ = evaluate_session(state, partitions[:b + 1])
        state.accuracy_rows.append(row)

    echo = config_echo if config_echo is not None else {
        "arch": arch if embedder is None else "external-embedder",
        "embedding_dim": int(embedding_dim if embedder is None else embedder.embedding_dim),
        "loss": asdict(loss_cfg),
        "train": asdict(opts),
        "augment": asdict(aug),
        "schedule": [asdict(s) for s in schedule.sessions],
    }
    return compute_metrics(
        state.accuracy_rows,
        session_names=[s.name for s in schedule.sessions],
        config=echo,
        seeds=seeds,
        history=history,
    )
