"""Frozen-embedding device-type classification.

Classifier instances concatenate five successive per-device flow
embeddings. The classifier itself is deliberately small: blocks of
dropout + dense (widths halving per extra block) into a softmax output,
trained with Adam on sparse cross-entropy, early-stopped on validation
accuracy.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import EmbeddingSet, read_embeddings
from .metrics import EvalReport, evaluate_predictions
from .nn import Adam, Dense, Dropout, ReLU, Sequential, load_checkpoint, save_checkpoint, sparse_ce
from .nn.checkpoint import count_parameters

WINDOW = 5


@dataclass(frozen=True)
class ClassifierInstance:
    features: np.ndarray  # length WINDOW * embedding_dim
    label: str
    device_id: str
    timestamps: tuple[float, ...]


def window_embeddings(
    embeddings: EmbeddingSet | str | Path, stride: int = WINDOW
) -> list[ClassifierInstance]:
    """Per-device windows of five successive embeddings, concatenated.

    Rows keep file order within each device (stores are chronological);
    devices with fewer than five flows contribute nothing. The default
    stride equals the window, so instances do not overlap.
    """
    if not isinstance(embeddings, EmbeddingSet):
        embeddings = read_embeddings(embeddings)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    per_device: dict[str, list[int]] = {}
    for row in range(len(embeddings)):
        per_device.setdefault(embeddings.device_of(row), []).append(row)
    instances = []
    for device, rows in per_device.items():
        for s in range(0, len(rows) - WINDOW + 1, stride):
            take = rows[s : s + WINDOW]
            instances.append(
                ClassifierInstance(
                    features=embeddings.vectors[take].reshape(-1),
                    label=embeddings.labels[take[0]],
                    device_id=device,
                    timestamps=tuple(float(embeddings.timestamps[r]) for r in take),
                )
            )
    return instances


@dataclass
class ClassifierConfig:
    units: int = 256
    dropout: float = 0.3
    blocks: int = 1
    learning_rate: float = 0.01
    batch_size: int = 64
    max_per_class: int = 1000
    patience: int = 5
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.units <= 0:
            raise ValueError(f"units must be positive, got {self.units}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0,1), got {self.dropout}")

    def block_widths(self) -> list[int]:
        # widths halve per extra block: 256, 128, 64, 32
        return [max(1, self.units // (2**k)) for k in range(self.blocks)]


def build_classifier_net(input_dim: int, n_classes: int, config: ClassifierConfig) -> Sequential:
    rng = np.random.default_rng(config.seed)
    layers = []
    width_in = input_dim
    for b, width in enumerate(config.block_widths(), start=1):
        layers.append(Dropout(config.dropout, rng, name=f"drop{b}"))
        layers.append(Dense(width_in, width, rng=rng, name=f"dense{b}"))
        layers.append(ReLU(name=f"relu{b}"))
        width_in = width
    layers.append(Dense(width_in, n_classes, rng=rng, name="logits"))
    return Sequential(layers, name="classifier")


@dataclass
class TrainedClassifier:
    config: ClassifierConfig
    net: Sequential
    label_order: list[str]
    input_dim: int
    history: list[dict] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def parameter_count(self) -> int:
        return count_parameters(self.net)

    def predict(self, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        out = []
        for s in range(0, len(X), batch_size):
            logits = self.net.forward(X[s : s + batch_size].astype(np.float32), train=False)
            out.append(np.argmax(logits, axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def save(self, path: str | Path) -> None:
        arrays = {f"param:{n}": a for n, _, _, a in self.net.named_params()}
        meta = {
            "kind": "classifier",
            "config": asdict(self.config),
            "labels": self.label_order,
            "input_dim": self.input_dim,
            "history": self.history,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
        }
        save_checkpoint(path, meta, arrays, seed=self.config.seed)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedClassifier":
        meta, arrays, _ = load_checkpoint(path)
        if meta.get("kind") != "classifier":
            raise ValueError(f"{path}: not a classifier checkpoint")
        config = ClassifierConfig(**meta["config"])
        net = build_classifier_net(meta["input_dim"], len(meta["labels"]), config)
        for name, layer, key, _ in net.named_params():
            layer.params[key] = arrays[f"param:{name}"].copy()
        return cls(
            config=config,
            net=net,
            label_order=meta["labels"],
            input_dim=meta["input_dim"],
            history=meta["history"],
            stopped_epoch=meta["stopped_epoch"],
            best_epoch=meta["best_epoch"],
        )


def _instances_to_arrays(instances, label_index):
    X = np.stack([inst.features for inst in instances]).astype(np.float32)
    y = np.array([label_index[inst.label] for inst in instances], dtype=np.int64)
    return X, y


def cap_per_class_chronological(instances: Sequence[ClassifierInstance], cap: int) -> list[ClassifierInstance]:
    """Keep the chronologically earliest `cap` instances of each class."""
    if cap <= 0:
        return list(instances)
    ordered = sorted(instances, key=lambda i: (i.label, i.timestamps[0], i.device_id))
    kept, counts = [], {}
    for inst in ordered:
        c = counts.get(inst.label, 0)
        if c < cap:
            kept.append(inst)
            counts[inst.label] = c + 1
    return kept


def cap_per_class_random(
    instances: Sequence[ClassifierInstance], cap: int, seed: int
) -> list[ClassifierInstance]:
    """Seeded random per-class sample, as used for test-set evaluation."""
    if cap <= 0:
        return list(instances)
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[ClassifierInstance]] = {}
    for inst in instances:
        by_label.setdefault(inst.label, []).append(inst)
    kept = []
    for label in sorted(by_label):
        group = by_label[label]
        if len(group) > cap:
            idx = rng.choice(len(group), size=cap, replace=False)
            group = [group[i] for i in sorted(idx)]
        kept.extend(group)
    return kept


def train_classifier(
    train_instances: Sequence[ClassifierInstance],
    val_instances: Sequence[ClassifierInstance],
    config: ClassifierConfig,
) -> TrainedClassifier:
    """Train with early stopping on validation accuracy.

    Stops after `patience` epochs without improvement and restores the
    best epoch's weights.
    """
    labels = sorted({inst.label for inst in train_instances})
    if len(labels) < 2:
        raise ValueError(f"need at least 2 classes to train, got {labels}")
    train_instances = cap_per_class_chronological(train_instances, config.max_per_class)
    label_index = {lab: k for k, lab in enumerate(labels)}
    X_train, y_train = _instances_to_arrays(train_instances, label_index)
    val_known = [i for i in val_instances if i.label in label_index]
    X_val, y_val = _instances_to_arrays(val_known, label_index) if val_known else (None, None)

    net = build_classifier_net(X_train.shape[1], len(labels), config)
    params = {name: arr for name, _, _, arr in net.named_params()}
    grad_src = [(name, layer, key) for name, layer, key, _ in net.named_params()]
    adam = Adam(lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    clf = TrainedClassifier(config=config, net=net, label_order=labels, input_dim=X_train.shape[1])
    best_acc, best_state, best_epoch, stale = -1.0, None, 0, 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(len(X_train))
        losses = []
        for s in range(0, len(X_train), config.batch_size):
            take = perm[s : s + config.batch_size]
            logits = net.forward(X_train[take], train=True)
            loss, g = sparse_ce(logits, y_train[take])
            net.backward(g)
            losses.append(loss)
            adam.step(params, {name: layer.grads[key] for name, layer, key in grad_src})
        if X_val is not None and len(X_val):
            val_acc = float(np.mean(clf.predict(X_val) == y_val))
        else:
            val_acc = float(np.mean(clf.predict(X_train) == y_train))
        clf.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_accuracy": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_state = {name: arr.copy() for name, arr in params.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break
    if best_state is not None:
        for name, layer, key in grad_src:
            layer.params[key] = best_state[name].copy()
    clf.stopped_epoch = len(clf.history)
    clf.best_epoch = best_epoch
    return clf


def evaluate(
    classifier: TrainedClassifier,
    test_instances: Sequence[ClassifierInstance],
    per_class_cap: int = 10_000,
    seed: int = 0,
) -> EvalReport:
    """Evaluate on a seeded per-class sample of the test instances.

    Instances with labels outside the training vocabulary are excluded
    and counted in the report.
    """
    label_index = {lab: k for k, lab in enumerate(classifier.label_order)}
    known = [i for i in test_instances if i.label in label_index]
    excluded = len(test_instances) - len(known)
    if not known:
        raise ValueError("no evaluable classes: test labels share nothing with the training vocabulary")
    sampled = cap_per_class_random(known, per_class_cap, seed)
    X, y = _instances_to_arrays(sampled, label_index)
    y_pred = classifier.predict(X)
    report = evaluate_predictions(y, y_pred, classifier.label_order)
    report.excluded_unknown = excluded
    return report
