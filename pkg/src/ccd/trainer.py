"""Classifier-head training with soft-target BCE plus a consistency term.

The head is linear over globally-average-pooled features, which is exactly
the architecture the activation maps need: the same per-class weight rows
score pooled features here and weight feature-map channels in cam_views.

Training is plain mini-batch gradient descent, fully deterministic given the
config seed. The cross-entropy branch runs on the weakly-augmented features;
the consistency branch pushes the strongly-augmented prediction toward the
weak one, which receives no gradient. All randomness (shuffling, feature
noise) is derived by hashing (seed, image_id, ...) so results do not depend
on dataset order or on whether other draws happened first.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cam_views import derive_seed
from .errors import ConfigError, DataError, NumericError
from .eval_report import evaluate
from .pseudo_label import PseudoLabelSet

_CLAMP = 1e-7


@dataclass
class ClassifierHead:
    weights: np.ndarray  # (C, Q)
    biases: np.ndarray   # (C,)

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise DataError(
                f"head shape mismatch: weights {self.weights.shape}, biases {self.biases.shape}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise NumericError("non-finite head parameters")

    @classmethod
    def initialize(cls, n_classes: int, n_channels: int, seed: int,
                   scale: float = 0.01) -> "ClassifierHead":
        rng = np.random.default_rng(derive_seed(seed, "head_init"))
        return cls(weights=rng.normal(0.0, scale, size=(n_classes, n_channels)),
                   biases=np.zeros(n_classes))

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), self.biases.copy())


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    warmup_epochs: int = 2
    max_epochs: int = 10
    beta_warmup: float = 0.0
    beta_main: float = 1.0
    alpha: float = 0.4
    seed: int = 0
    weak_strength: float = 0.05
    strong_strength: float = 0.2
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.warmup_epochs < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, warmup_epochs and max_epochs must be positive")
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not (0.0 <= self.weak_strength <= self.strong_strength):
            raise ConfigError("need 0 <= weak_strength <= strong_strength")


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    stop_epoch: int = -1
    stop_reason: str = ""

    def map_history(self) -> list[float]:
        return [e["train_map"] for e in self.entries]

    def to_jsonl(self) -> str:
        import json
        lines = [json.dumps(e, sort_keys=True) for e in self.entries]
        lines.append(json.dumps({"stop_epoch": self.stop_epoch,
                                 "stop_reason": self.stop_reason}, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class TrainingSet:
    """Pooled per-image features with their weak/strong augmented views."""

    image_ids: list[str]
    base: np.ndarray    # (n, Q)
    weak: np.ndarray    # (n, Q)
    strong: np.ndarray  # (n, Q)

    def __post_init__(self) -> None:
        n = len(self.image_ids)
        for name in ("base", "weak", "strong"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if arr.shape != self.base.shape or arr.shape[0] != n:
                raise DataError(f"{name} features shape {arr.shape} inconsistent")

    @classmethod
    def from_pooled(cls, image_ids: list[str], base: np.ndarray, cfg: TrainConfig,
                    weak: np.ndarray | None = None,
                    strong: np.ndarray | None = None) -> "TrainingSet":
        """Use precomputed augmented views when provided, else seeded feature noise."""
        base = np.asarray(base, dtype=np.float64)
        if weak is None:
            weak = np.stack([
                augment_features(base[i], cfg.weak_strength,
                                 derive_seed(cfg.seed, "aug", iid, "weak"))
                for i, iid in enumerate(image_ids)
            ])
        if strong is None:
            strong = np.stack([
                augment_features(base[i], cfg.strong_strength,
                                 derive_seed(cfg.seed, "aug", iid, "strong"))
                for i, iid in enumerate(image_ids)
            ])
        return cls(image_ids=list(image_ids), base=base, weak=weak, strong=strong)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(head: ClassifierHead, features: np.ndarray) -> np.ndarray:
    """Per-class sigmoid probabilities for one feature vector or a batch."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != head.weights.shape[1]:
        raise DataError(
            f"feature dim {x.shape[-1]} does not match head Q={head.weights.shape[1]}"
        )
    z = x @ head.weights.T + head.biases
    return _sigmoid(z)


def bce_soft(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-over-classes soft-target BCE and its gradient w.r.t. the logits."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"pred/target shape mismatch: {p.shape} vs {t.shape}")
    c = p.shape[-1]
    pc = np.clip(p, _CLAMP, 1.0 - _CLAMP)
    loss = float(np.mean(-(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc))))
    grad = (p - t) / c
    return loss, grad


def consistency_loss(weak_pred: np.ndarray, strong_pred: np.ndarray) -> tuple[float, np.ndarray]:
    """BCE of the strong prediction against the (constant) weak prediction.

    Gradient flows only to the strong branch.
    """
    return bce_soft(strong_pred, np.asarray(weak_pred, dtype=np.float64))


def augment_features(x: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """x * (1 + g) + d with g, d elementwise zero-mean Gaussian of scale=strength."""
    x = np.asarray(x, dtype=np.float64)
    if strength < 0:
        raise ConfigError(f"augmentation strength must be >= 0, got {strength}")
    if strength == 0.0:
        return x.copy()
    rng = np.random.default_rng(seed)
    gamma = rng.normal(0.0, strength, size=x.shape)
    delta = rng.normal(0.0, strength, size=x.shape)
    return x * (1.0 + gamma) + delta


def batch_loss_and_grads(head: ClassifierHead, x_weak: np.ndarray, x_strong: np.ndarray,
                         targets: np.ndarray, beta: float,
                         ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean batch loss L_ce + beta * L_consist and gradients w.r.t. W and b."""
    n = x_weak.shape[0]
    c = head.weights.shape[0]
    p_w = forward(head, x_weak)
    pc = np.clip(p_w, _CLAMP, 1.0 - _CLAMP)
    loss_ce = float(np.mean(-(targets * np.log(pc) + (1.0 - targets) * np.log(1.0 - pc))))
    gz_w = (p_w - targets) / (c * n)
    d_w = gz_w.T @ x_weak
    d_b = gz_w.sum(axis=0)
    loss = loss_ce
    if beta != 0.0:
        p_s = forward(head, x_strong)
        psc = np.clip(p_s, _CLAMP, 1.0 - _CLAMP)
        loss_cons = float(np.mean(-(p_w * np.log(psc) + (1.0 - p_w) * np.log(1.0 - psc))))
        gz_s = (p_s - p_w) / (c * n)
        d_w = d_w + beta * (gz_s.T @ x_strong)
        d_b = d_b + beta * gz_s.sum(axis=0)
        loss = loss_ce + beta * loss_cons
    return loss, d_w, d_b


def _shuffle_order(image_ids: list[str], seed: int, epoch: int) -> list[int]:
    # keyed to image_id, not position: permuting the dataset leaves the
    # visit sequence unchanged
    keyed = sorted(range(len(image_ids)),
                   key=lambda i: (derive_seed(seed, "shuffle", epoch, image_ids[i]),
                                  image_ids[i]))
    return keyed


def _train_map(head: ClassifierHead, features: np.ndarray, targets: np.ndarray) -> float:
    preds = forward(head, features)
    binarized = (targets >= 0.5).astype(np.int64)
    if binarized.sum() == 0:
        return 0.0
    result = evaluate(preds, binarized)
    return result.mean


def early_stop_check(map_history: list[float]) -> int | None:
    """Index of the epoch whose mAP gradient is the first strict interior
    local minimum of the gradient sequence; None if there is none yet."""
    g = [map_history[i + 1] - map_history[i] for i in range(len(map_history) - 1)]
    if len(g) < 3:
        return None
    for t in range(1, len(g) - 1):
        if g[t - 1] > g[t] and g[t + 1] > g[t]:
            return t + 1  # epoch that produced gradient g[t]
    return None


def train(dataset: TrainingSet, labels: PseudoLabelSet, cfg: TrainConfig,
          phase: str, head: ClassifierHead | None = None,
          bias=None, debias_cfg=None) -> tuple[ClassifierHead, TrainLog]:
    """Mini-batch gradient descent in one of two phases.

    warmup: cfg.warmup_epochs epochs at beta_warmup on initial labels; when a
            bias vector is given the targets are the calibrated rows.
    main:   up to cfg.max_epochs at beta_main on final labels, stopping at the
            first interior local minimum of the train-mAP gradient and rolling
            the head back to that epoch.
    """
    if phase not in ("warmup", "main"):
        raise ConfigError(f"unknown phase {phase!r}")
    expected_kind = "initial" if phase == "warmup" else "final"
    if labels.kind != expected_kind:
        raise DataError(f"{phase} phase expects {expected_kind} labels, got {labels.kind}")

    if not labels.image_ids:
        raise DataError("labels must carry image_ids to align with the dataset")
    index = {iid: i for i, iid in enumerate(labels.image_ids)}
    missing = [iid for iid in dataset.image_ids if iid not in index]
    if missing:
        raise DataError(f"labels missing for images {missing[:3]}...")
    targets = labels.probs[[index[iid] for iid in dataset.image_ids]]
    if bias is not None:
        from .debias import calibrate
        targets = calibrate(targets, bias, debias_cfg)

    n, q = dataset.base.shape
    c = targets.shape[1]
    if head is None:
        head = ClassifierHead.initialize(c, q, cfg.seed, cfg.init_scale)
    else:
        head = head.copy()

    beta = cfg.beta_warmup if phase == "warmup" else cfg.beta_main
    n_epochs = cfg.warmup_epochs if phase == "warmup" else cfg.max_epochs

    log = TrainLog()
    snapshots: list[ClassifierHead] = []
    history: list[float] = []
    prev_map: float | None = None

    for epoch in range(n_epochs):
        order = _shuffle_order(dataset.image_ids, cfg.seed, epoch)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, d_w, d_b = batch_loss_and_grads(
                head, dataset.weak[batch], dataset.strong[batch], targets[batch], beta)
            if not np.isfinite(loss):
                p = forward(head, dataset.weak[batch])
                per_class = -(targets[batch] * np.log(np.clip(p, _CLAMP, 1 - _CLAMP)))
                bad_class = int(np.argwhere(~np.isfinite(per_class.sum(axis=0)))[0][0]) \
                    if not np.all(np.isfinite(per_class)) else -1
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch {start // cfg.batch_size},"
                    f" class {bad_class}"
                )
            head.weights = head.weights - cfg.learning_rate * d_w
            head.biases = head.biases - cfg.learning_rate * d_b
            total_loss += loss * len(batch)

        epoch_map = _train_map(head, dataset.base, targets)
        history.append(epoch_map)
        gradient = None if prev_map is None else epoch_map - prev_map
        prev_map = epoch_map
        log.entries.append({
            "epoch": epoch,
            "mean_loss": total_loss / n,
            "train_map": epoch_map,
            "map_gradient": gradient,
        })
        snapshots.append(head.copy())

        if phase == "main":
            stop = early_stop_check(history)
            if stop is not None:
                log.stop_epoch = stop
                log.stop_reason = "map_gradient_local_min"
                return snapshots[stop], log

    log.stop_epoch = n_epochs - 1
    log.stop_reason = "warmup_complete" if phase == "warmup" else "max_epochs"
    return head, log
