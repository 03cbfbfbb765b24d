"""The simulated two-domain segmentation world.

Scenes are pairs of label maps (random axis-aligned rectangles over a
background class, honoring long-tail frequency weights) with per-pixel
feature vectors drawn around per-class means; the target domain shifts
those means and hides its labels from training. A prototype classifier
stands in for the segmentation network: its score for class c at a pixel is
the negative squared distance from the pixel's feature to the class
prototype, divided by a temperature.

Class-ranked mixing pastes the source pixels of the lower-ranked half of
the per-image ranking into the target image, with the learner's own argmax
pseudo-labels filling the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, backward
from .autodiff import ops
from .policy import ClassRanking
from .rewards import PrototypeTable, cosine
from .statecodec import ClassStatistics


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 8
    feature_dim: int = 6
    height: int = 16
    width: int = 16
    frequency_weights: tuple[float, ...] = ()
    noise: float = 0.3
    severity: float = 0.0
    domain_shift: float = 1.2
    rectangles: int = 8
    temperature: float = 0.5
    means_seed: int = 224

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        weights = self.frequency_weights or default_long_tail(self.num_classes)
        if len(weights) != self.num_classes:
            raise ValueError(
                f"need {self.num_classes} frequency weights, got {len(weights)}")
        if any(w < 0 for w in weights):
            raise ValueError("frequency weights must be nonnegative")
        if not any(w > 0 for w in weights):
            raise ValueError("frequency weights must not all be zero")
        object.__setattr__(self, "frequency_weights", tuple(weights))
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must lie in [0, 1], got {self.severity}")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    def effective_weights(self) -> np.ndarray:
        """Severity further suppresses the tail: w^(1 + severity), normalized."""
        w = np.asarray(self.frequency_weights, dtype=float)
        w = w ** (1.0 + self.severity)
        return w / w.sum()

    def class_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-class source means and their shifted target counterparts."""
        rng = np.random.default_rng(self.means_seed)
        source = rng.normal(0.0, 1.0, (self.num_classes, self.feature_dim))
        offsets = rng.normal(0.0, 1.0, (self.num_classes, self.feature_dim))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
        target = source + self.domain_shift * offsets
        return source, target


def default_long_tail(num_classes: int) -> tuple[float, ...]:
    return tuple(0.7 ** k for k in range(num_classes))


@dataclass
class Scene:
    source_features: np.ndarray
    source_labels: np.ndarray
    target_features: np.ndarray
    target_labels: np.ndarray  # hidden from training, evaluation only
    severity: float


@dataclass
class MixMask:
    mask: np.ndarray
    low_classes: tuple[int, ...]
    ranked_present: tuple[int, ...]


def _label_map(cfg: WorldConfig, weights: np.ndarray,
               rng: np.random.Generator) -> np.ndarray:
    labels = np.full((cfg.height, cfg.width),
                     rng.choice(cfg.num_classes, p=weights), dtype=np.int64)
    for _ in range(cfg.rectangles):
        cls = rng.choice(cfg.num_classes, p=weights)
        h = int(rng.integers(2, max(3, cfg.height // 2 + 1)))
        w = int(rng.integers(2, max(3, cfg.width // 2 + 1)))
        i = int(rng.integers(0, cfg.height - h + 1))
        j = int(rng.integers(0, cfg.width - w + 1))
        labels[i:i + h, j:j + w] = cls
    return labels


def _features(labels: np.ndarray, means: np.ndarray, sigma: float,
              rng: np.random.Generator) -> np.ndarray:
    base = means[labels].transpose(2, 0, 1)
    return base + sigma * rng.standard_normal(base.shape)


def generate_scene(cfg: WorldConfig, rng: np.random.Generator) -> Scene:
    weights = cfg.effective_weights()
    source_means, target_means = cfg.class_means()
    sigma = cfg.noise * (1.0 + cfg.severity)
    source_labels = _label_map(cfg, weights, rng)
    target_labels = _label_map(cfg, weights, rng)
    return Scene(
        source_features=_features(source_labels, source_means, sigma, rng),
        source_labels=source_labels,
        target_features=_features(target_labels, target_means, sigma, rng),
        target_labels=target_labels,
        severity=cfg.severity,
    )


# ---------------------------------------------------------------------------
# prototype learner


@dataclass
class ToyLearner:
    prototypes: np.ndarray
    temperature: float

    @classmethod
    def initial(cls, num_classes: int, feature_dim: int,
                temperature: float) -> "ToyLearner":
        return cls(prototypes=np.zeros((num_classes, feature_dim)),
                   temperature=temperature)

    def scores(self, features: np.ndarray) -> np.ndarray:
        """-(||f - p_c||^2) / temperature as a (C, H, W) map."""
        f = features.reshape(features.shape[0], -1)
        sq = ((f[None, :, :] - self.prototypes[:, :, None]) ** 2).sum(axis=1)
        return (-sq / self.temperature).reshape(
            self.prototypes.shape[0], *features.shape[1:])

    def predict(self, features: np.ndarray) -> np.ndarray:
        # argmax ties break toward the lowest class index
        return self.scores(features).argmax(axis=0)

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        scores = self.scores(features)
        shifted = scores - scores.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# class-ranked mixing


def build_mix_mask(ranking: ClassRanking, source_labels: np.ndarray,
                   paste_half: str = "low") -> MixMask:
    """Restrict the ranking to present classes and mask the chosen half.

    ``low`` pastes the lower-ranked half (positions floor(N/2)+1 .. N of the
    order restricted to present classes); ``high`` pastes the complementary
    top half. Either half has ceil(N/2) classes, so the mask is never empty.
    """
    if source_labels.size == 0:
        raise ValueError("source label map is empty")
    present = set(np.unique(source_labels).tolist())
    num_classes = len(ranking.order)
    if not present <= set(range(num_classes)):
        raise ValueError("label map contains ids outside the ranking")
    ranked_present = tuple(c for c in ranking.order if c in present)
    n = len(ranked_present)
    half = n // 2
    if paste_half == "low":
        chosen = ranked_present[half:]
    elif paste_half == "high":
        chosen = ranked_present[:n - half]
    else:
        raise ValueError(f"unknown paste_half {paste_half!r}")
    mask = np.isin(source_labels, chosen).astype(np.uint8)
    return MixMask(mask=mask, low_classes=tuple(chosen),
                   ranked_present=ranked_present)


def mix_pair(scene: Scene, mask: MixMask,
             learner: ToyLearner) -> tuple[np.ndarray, np.ndarray]:
    """Paste masked source pixels over the target; pseudo-labels fill the rest."""
    pseudo = learner.predict(scene.target_features)
    m = mask.mask
    mixed_features = m[None] * scene.source_features \
        + (1 - m)[None] * scene.target_features
    mixed_labels = np.where(m == 1, scene.source_labels, pseudo)
    return mixed_features, mixed_labels


# ---------------------------------------------------------------------------
# segmentation loss and update


@dataclass
class SegLossReport:
    total: float
    source_ce: float
    mixed_ce: float
    per_class_source_ce: np.ndarray
    observed: np.ndarray


def _pixel_log_probs(features: np.ndarray, protos: Tensor,
                     temperature: float) -> Tensor:
    """(P, C) log-softmax of prototype scores, differentiable in protos."""
    flat = features.reshape(features.shape[0], -1).T  # (P, F)
    f_const = Tensor(flat)
    cross = ops.matmul(f_const, ops.transpose(protos))  # (P, C)
    proto_sq = ops.reshape(
        ops.reduce_sum(ops.square(protos), axis=1), (1, protos.shape[0]))
    f_sq = (flat ** 2).sum(axis=1, keepdims=True)
    dist = ops.shift(ops.sub(proto_sq, ops.scale(cross, 2.0)), f_sq)
    return ops.log_softmax(ops.scale(dist, -1.0 / temperature))


def _cross_entropy(features: np.ndarray, labels: np.ndarray, protos: Tensor,
                   temperature: float) -> Tensor:
    log_probs = _pixel_log_probs(features, protos, temperature)
    picked = ops.take_per_row(log_probs, labels.ravel())
    return ops.scale(ops.reduce_mean(picked), -1.0)


def seg_loss_and_update(scenes: Sequence[Scene],
                        mixed: Sequence[tuple[np.ndarray, np.ndarray]],
                        learner: ToyLearner, source_weight: float,
                        mixed_weight: float,
                        learning_rate: float) -> SegLossReport:
    """One gradient step of the weighted source + mixed cross-entropy."""
    if source_weight < 0 or mixed_weight < 0:
        raise ValueError("loss weights must be nonnegative")
    protos = Tensor(learner.prototypes.copy(), requires_grad=True)
    # scenes share one spatial extent, so pooling pixels across scenes gives
    # exactly the per-scene mean cross-entropy
    src_features = np.concatenate([s.source_features for s in scenes], axis=2)
    src_labels = np.concatenate([s.source_labels for s in scenes], axis=1)
    mix_features = np.concatenate([m[0] for m in mixed], axis=2)
    mix_labels = np.concatenate([m[1] for m in mixed], axis=1)
    source_ce = _cross_entropy(src_features, src_labels, protos,
                               learner.temperature)
    mixed_ce = _cross_entropy(mix_features, mix_labels, protos,
                              learner.temperature)
    total = ops.add(ops.scale(source_ce, source_weight),
                    ops.scale(mixed_ce, mixed_weight))

    source_value = source_ce.item()
    mixed_value = mixed_ce.item()
    backward(total)
    learner.prototypes = protos.values - learning_rate * protos.grad

    per_class, observed = per_class_cross_entropy(scenes, learner)
    return SegLossReport(total=total.item(), source_ce=source_value,
                         mixed_ce=mixed_value,
                         per_class_source_ce=per_class, observed=observed)


def per_class_cross_entropy(scenes: Sequence[Scene],
                            learner: ToyLearner) -> tuple[np.ndarray, np.ndarray]:
    """Mean -log p(true class) over source pixels, grouped by class."""
    num_classes = learner.prototypes.shape[0]
    totals = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    for scene in scenes:
        probs = learner.probabilities(scene.source_features)
        flat = probs.reshape(num_classes, -1)
        labels = scene.source_labels.ravel()
        picked = -np.log(np.maximum(flat[labels, np.arange(labels.size)], 1e-300))
        np.add.at(totals, labels, picked)
        np.add.at(counts, labels, 1)
    observed = counts > 0
    result = np.zeros(num_classes)
    result[observed] = totals[observed] / counts[observed]
    return result, observed


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    per_class_accuracy: np.ndarray
    present: np.ndarray
    mean_accuracy: float
    accuracy_std: float


def evaluate(learner: ToyLearner, scenes: Sequence[Scene]) -> EvalReport:
    """Per-class pixel accuracy on hidden target labels over held-out scenes."""
    if len(scenes) == 0:
        raise ValueError("evaluation needs at least one scene")
    num_classes = learner.prototypes.shape[0]
    correct = np.zeros(num_classes, dtype=np.int64)
    totals = np.zeros(num_classes, dtype=np.int64)
    for scene in scenes:
        pred = learner.predict(scene.target_features)
        labels = scene.target_labels
        for c in range(num_classes):
            mask = labels == c
            totals[c] += int(mask.sum())
            correct[c] += int((pred[mask] == c).sum())
    present = totals > 0
    accuracy = np.zeros(num_classes)
    accuracy[present] = correct[present] / totals[present]
    mean_acc = float(accuracy[present].mean()) if present.any() else 0.0
    std_acc = float(accuracy[present].std()) if present.any() else 0.0
    return EvalReport(per_class_accuracy=accuracy, present=present,
                      mean_accuracy=mean_acc, accuracy_std=std_acc)


# ---------------------------------------------------------------------------
# telemetry feeding the learning state


@dataclass
class WorldTelemetry:
    """Rolling per-class statistics observable without target labels."""

    num_classes: int
    loss: np.ndarray = field(init=False)
    accuracy: np.ndarray = field(init=False)
    domain_cosine: np.ndarray = field(init=False)
    entropy: np.ndarray = field(init=False)
    exposure_counts: np.ndarray = field(init=False)
    mix_events: int = 0

    def __post_init__(self) -> None:
        log_c = math.log(self.num_classes) if self.num_classes > 1 else 0.0
        self.loss = np.full(self.num_classes, log_c)
        self.accuracy = np.zeros(self.num_classes)
        self.domain_cosine = np.zeros(self.num_classes)
        self.entropy = np.full(self.num_classes, log_c)
        self.exposure_counts = np.zeros(self.num_classes, dtype=np.int64)

    def update_seg(self, report: SegLossReport) -> None:
        self.loss[report.observed] = report.per_class_source_ce[report.observed]

    def update_target(self, learner: ToyLearner,
                      scenes: Sequence[Scene]) -> None:
        """Confidence proxy and prediction entropy, grouped by pseudo-label."""
        conf_tot = np.zeros(self.num_classes)
        ent_tot = np.zeros(self.num_classes)
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for scene in scenes:
            probs = learner.probabilities(scene.target_features)
            flat = probs.reshape(self.num_classes, -1)
            pseudo = flat.argmax(axis=0)
            conf = flat[pseudo, np.arange(pseudo.size)]
            ent = -(flat * np.log(np.maximum(flat, 1e-300))).sum(axis=0)
            np.add.at(conf_tot, pseudo, conf)
            np.add.at(ent_tot, pseudo, ent)
            np.add.at(counts, pseudo, 1)
        seen = counts > 0
        self.accuracy[seen] = conf_tot[seen] / counts[seen]
        self.entropy[seen] = ent_tot[seen] / counts[seen]

    def update_alignment(self, source: PrototypeTable,
                         target: PrototypeTable) -> None:
        for c in range(self.num_classes):
            if source.present(c) and target.present(c):
                self.domain_cosine[c] = cosine(source.vectors[c],
                                               target.vectors[c])

    def update_exposure(self, masks: Sequence[MixMask]) -> None:
        for mask in masks:
            for c in mask.low_classes:
                self.exposure_counts[c] += 1
            self.mix_events += 1

    def snapshot(self, learner: ToyLearner) -> ClassStatistics:
        exposure = (self.exposure_counts / self.mix_events
                    if self.mix_events > 0
                    else np.zeros(self.num_classes))
        return ClassStatistics(
            loss=self.loss.copy(),
            accuracy=self.accuracy.copy(),
            prototype_norm=np.linalg.norm(learner.prototypes, axis=1),
            domain_cosine=self.domain_cosine.copy(),
            entropy=self.entropy.copy(),
            exposure=exposure,
        )
