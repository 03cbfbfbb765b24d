"""Per-class composite rewards from domain prototypes.

A prototype is the mean feature vector of all pixels of one class in one
domain. The reward for class c combines cross-domain alignment of its own
prototypes (transferability) with its separation from every other class's
target prototype (discriminability), weighted by ``balance``:

    r_c = cos(S_c, T_c) + balance * sum_{k != c} (1 - cos(T_c, T_k))

Classes absent from either domain score the neutral default 0. Cosines of
zero-norm vectors are defined as 0 so the reward is always finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PrototypeTable:
    domain: str
    feature_dim: int
    vectors: dict[int, np.ndarray]
    counts: dict[int, int]

    def present(self, class_id: int) -> bool:
        return class_id in self.vectors


@dataclass
class RewardVector:
    values: np.ndarray
    balance: float


def compute_prototypes(features: np.ndarray, labels: np.ndarray,
                       domain: str) -> PrototypeTable:
    """Mean feature per class over a (F, H, W) map and aligned (H, W) labels."""
    if features.ndim != 3 or labels.shape != features.shape[1:]:
        raise ValueError(
            f"features {features.shape} and labels {labels.shape} are not "
            "spatially aligned")
    feature_dim = features.shape[0]
    flat = features.reshape(feature_dim, -1)
    flat_labels = labels.ravel()
    vectors: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for class_id in np.unique(flat_labels):
        mask = flat_labels == class_id
        count = int(mask.sum())
        vectors[int(class_id)] = flat[:, mask].mean(axis=1)
        counts[int(class_id)] = count
    return PrototypeTable(domain=domain, feature_dim=feature_dim,
                          vectors=vectors, counts=counts)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


def class_reward(source: PrototypeTable, target: PrototypeTable,
                 num_classes: int, balance: float) -> RewardVector:
    """Evaluate the composite reward for every class id in [0, num_classes)."""
    if source.feature_dim != target.feature_dim:
        raise ValueError(
            f"prototype feature dims differ: {source.feature_dim} vs "
            f"{target.feature_dim}")
    if balance < 0.0:
        raise ValueError(f"balance must be nonnegative, got {balance}")
    values = np.zeros(num_classes)
    target_ids = sorted(target.vectors)
    for c in range(num_classes):
        if not (source.present(c) and target.present(c)):
            continue
        transfer = cosine(source.vectors[c], target.vectors[c])
        separation = 0.0
        for k in target_ids:
            if k == c:
                continue
            separation += 1.0 - cosine(target.vectors[c], target.vectors[k])
        values[c] = transfer + balance * separation
    return RewardVector(values=values, balance=balance)


def reward_bounds(num_classes: int, balance: float) -> tuple[float, float]:
    """Attainable reward range [-1, 1 + 2*balance*(C-1)]."""
    return -1.0, 1.0 + 2.0 * balance * (num_classes - 1)


def map_reward_to_unit(values: np.ndarray, num_classes: int,
                       balance: float) -> np.ndarray:
    """Affine-map raw rewards into [0, 1] using the known bounds."""
    lo, hi = reward_bounds(num_classes, balance)
    return (values - lo) / (hi - lo)
