"""The scheduling agent: ranking policy, fairness weighting, critics, replay.

Rankings are drawn sequentially without replacement: at every stage the
policy softmaxes the logits of the not-yet-chosen classes and samples one,
so the exact log-probability of a full permutation is the sum of per-stage
log-softmax terms. That log-probability is differentiable, which is all the
surrogate loss needs: the fairness-weighted aggregate advantage multiplies
it as a constant.

Per-class critics are linear value heads over the flattened key features.
Fairness weights are w_c = max(V_c, floor)^(-alpha), so lagging classes pull
more gradient for alpha > 0 and the weighting degenerates to the plain sum
at alpha = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import ParamSet, Tensor, backward, sgd_step
from .autodiff.params import clip_gradients
from .autodiff import ops


@dataclass(frozen=True)
class ClassRanking:
    order: tuple[int, ...]
    log_prob: float
    logits: np.ndarray = field(repr=False)


@dataclass
class TransitionRecord:
    """One agent step.

    ``state``/``state_next`` carry the raw high-dimensional states so the
    update can rebuild key features through the live encoder and distiller;
    ``key``/``key_next`` are the flattened key features observed at act time
    and feed the critics.
    """

    state: np.ndarray
    key: np.ndarray
    ranking: ClassRanking
    reward: np.ndarray
    state_next: np.ndarray
    key_next: np.ndarray


@dataclass
class FairnessConfig:
    """Fairness exponent, critic-value floor, and the reward affine map.

    ``reward_shift``/``reward_scale`` map raw class rewards from their known
    bounds into [0, 1]: mapped = (raw + shift) * scale.
    """

    alpha: float = 0.5
    value_floor: float = 1e-3
    reward_shift: float = 1.0
    reward_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if self.value_floor <= 0.0:
            raise ValueError(
                f"value floor must be positive, got {self.value_floor}")
        if self.reward_scale <= 0.0:
            raise ValueError(
                f"reward scale must be positive, got {self.reward_scale}")

    @classmethod
    def for_reward_bounds(cls, lo: float, hi: float, alpha: float = 0.5,
                          value_floor: float = 1e-3) -> "FairnessConfig":
        return cls(alpha=alpha, value_floor=value_floor, reward_shift=-lo,
                   reward_scale=1.0 / (hi - lo))


# ---------------------------------------------------------------------------
# ranking policy head


def init_policy_params(key_dim: int, num_classes: int) -> dict[str, Tensor]:
    # zero init: the starting policy is uniform over permutations
    return {
        "head.weight": Tensor(np.zeros((num_classes, key_dim)),
                              requires_grad=True),
        "head.bias": Tensor(np.zeros(num_classes), requires_grad=True),
    }


def policy_logits(key_flat: np.ndarray, params) -> np.ndarray:
    return params["head.weight"].values @ key_flat + params["head.bias"].values


def policy_logits_graph(key: Tensor, params) -> Tensor:
    return ops.linear(key, params["head.weight"], params["head.bias"])


def _stage_log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - math.log(np.exp(shifted).sum())


def sample_ranking(key_flat: np.ndarray, params,
                   rng: np.random.Generator) -> ClassRanking:
    """Draw a permutation by sequential softmax sampling without replacement."""
    logits = policy_logits(key_flat, params)
    num_classes = logits.shape[0]
    if num_classes == 0:
        raise ValueError("cannot rank zero classes")
    remaining = list(range(num_classes))
    order: list[int] = []
    log_prob = 0.0
    while remaining:
        stage = _stage_log_softmax(logits[remaining])
        pick = int(rng.choice(len(remaining), p=np.exp(stage)))
        log_prob += float(stage[pick])
        order.append(remaining.pop(pick))
    return ClassRanking(order=tuple(order), log_prob=log_prob,
                        logits=logits.copy())


def ranking_log_prob(order: Sequence[int], logits: np.ndarray) -> float:
    """Exact log-probability of a full permutation under the logits."""
    num_classes = logits.shape[0]
    if sorted(order) != list(range(num_classes)):
        raise ValueError(
            f"order {tuple(order)} is not a permutation of 0..{num_classes - 1}")
    remaining = list(range(num_classes))
    total = 0.0
    for class_id in order:
        stage = _stage_log_softmax(logits[remaining])
        total += float(stage[remaining.index(class_id)])
        remaining.remove(class_id)
    return total


def ranking_log_prob_graph(order: Sequence[int], logits: Tensor) -> Tensor:
    """Differentiable permutation log-probability (same stages as above)."""
    num_classes = logits.shape[0]
    if sorted(order) != list(range(num_classes)):
        raise ValueError(
            f"order {tuple(order)} is not a permutation of 0..{num_classes - 1}")
    remaining = list(range(num_classes))
    total: Tensor | None = None
    for class_id in order[:-1]:
        stage_logits = ops.take(logits, remaining)
        stage = ops.sub(
            ops.take(stage_logits, [remaining.index(class_id)]),
            ops.reshape(ops.logsumexp(stage_logits), (1,)))
        total = stage if total is None else ops.add(total, stage)
        remaining.remove(class_id)
    if total is None:  # single class: the only permutation has probability 1
        total = ops.scale(ops.reshape(ops.take(logits, [order[0]]), (1,)), 0.0)
    return ops.reshape(total, ())


# ---------------------------------------------------------------------------
# fairness


def fair_objective(values: np.ndarray, alpha: float) -> float:
    """Concave utility sum((V^(1-alpha)) / (1-alpha)); log at alpha = 1."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    v = np.asarray(values, dtype=float)
    if np.any(v <= 0.0):
        raise ValueError("fair objective needs strictly positive values")
    if alpha == 1.0:
        return float(np.log(v).sum())
    return float((v ** (1.0 - alpha)).sum() / (1.0 - alpha))


def fairness_weights(values: np.ndarray, alpha: float,
                     floor: float) -> np.ndarray:
    """w_c = max(V_c, floor)^(-alpha)."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    return np.maximum(np.asarray(values, dtype=float), floor) ** (-alpha)


# ---------------------------------------------------------------------------
# critics


@dataclass
class CriticBank:
    weight: Tensor
    bias: Tensor
    discount: float

    @classmethod
    def create(cls, key_dim: int, num_classes: int,
               discount: float = 0.95) -> "CriticBank":
        if not 0.0 <= discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {discount}")
        return cls(weight=Tensor(np.zeros((num_classes, key_dim)),
                                 requires_grad=True),
                   bias=Tensor(np.zeros(num_classes), requires_grad=True),
                   discount=discount)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def values(self, key_flat: np.ndarray) -> np.ndarray:
        """V_c(key) for every class, evaluated without gradient tracking."""
        return self.weight.values @ key_flat + self.bias.values

    def param_set(self) -> ParamSet:
        ps = ParamSet()
        ps.add("critic/weight", self.weight)
        ps.add("critic/bias", self.bias)
        return ps


def td_advantage(record: TransitionRecord, critics: CriticBank) -> np.ndarray:
    """One-step bootstrap: A_c = r_c + gamma * V_c(key') - V_c(key)."""
    return (record.reward + critics.discount * critics.values(record.key_next)
            - critics.values(record.key))


def critic_regression_step(critics: CriticBank, keys: np.ndarray,
                           targets: np.ndarray, learning_rate: float,
                           weight_decay: float = 0.0) -> float:
    """One squared-error step of V(keys) toward frozen targets; returns MSE."""
    preds = ops.add(
        ops.matmul(critics.weight, ops.transpose(Tensor(keys))),
        ops.reshape(critics.bias, (critics.num_classes, 1)))
    loss = ops.scale(ops.squared_error(preds, Tensor(targets.T)),
                     1.0 / targets.size)
    backward(loss)
    sgd_step(critics.param_set(), learning_rate, weight_decay)
    return loss.item()


# ---------------------------------------------------------------------------
# replay storage


class RingBuffer:
    """Fixed-capacity ring with strictly oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items: list = []
        self._next = 0

    def push(self, item) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def sample(self, count: int, rng: np.random.Generator) -> list:
        """Uniform sample with replacement; needs at least ``count`` items."""
        if count > len(self._items):
            raise ValueError(
                f"cannot sample {count} items from a buffer of {len(self._items)}")
        idx = rng.integers(0, len(self._items), size=count)
        return [self._items[i] for i in idx]

    def snapshot(self) -> list:
        """Oldest-first contents, for inspection and checkpointing."""
        return self._items[self._next:] + self._items[:self._next] \
            if len(self._items) == self.capacity else list(self._items)

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# the fairness-weighted update


@dataclass
class UpdateReport:
    surrogate: float
    critic_mse: float
    mean_weighted_advantage: float
    policy_grad_norm: float
    fairness_weight_mean: float


def policy_gradient_update(
        batch: Sequence[TransitionRecord],
        agent_params: ParamSet,
        recompute_logits: Callable[[np.ndarray], Tensor],
        critics: CriticBank,
        fairness: FairnessConfig,
        learning_rate: float,
        critic_learning_rate: float,
        weight_decay: float = 0.0,
        max_grad_norm: float = 0.0) -> UpdateReport:
    """One fairness-weighted policy-gradient step plus one critic step.

    ``recompute_logits`` maps the batch's stacked raw states (B, S) to live
    logits (B, C). The weighted aggregate advantage per record is a
    constant: only the permutation log-probabilities carry gradient, flowing
    through the recomputation into every tensor of ``agent_params`` it
    touches. Critics regress separately on the same batch toward frozen
    one-step targets. ``max_grad_norm`` > 0 clips the global agent gradient
    norm before the step; the reported norm is the raw (pre-clip) value.
    """
    if len(batch) == 0:
        raise ValueError("policy update needs a nonempty batch")

    weighted: list[float] = []
    weight_rows: list[np.ndarray] = []
    for record in batch:
        values = critics.values(record.key)
        weights = fairness_weights(values, fairness.alpha, fairness.value_floor)
        advantage = td_advantage(record, critics)
        weighted.append(float(weights @ advantage))
        weight_rows.append(weights)

    states = np.stack([record.state for record in batch])
    orders = np.stack([record.ranking.order for record in batch])
    logits = recompute_logits(states)
    ordered = ops.gather_rows_by_index(logits, orders)
    log_probs = ops.sequential_choice_log_probs(ordered)
    total = ops.scale(ops.matmul(log_probs, Tensor(np.asarray(weighted))),
                      -1.0 / len(batch))
    backward(total)
    grad_norm = clip_gradients(agent_params, max_grad_norm)
    sgd_step(agent_params, learning_rate, weight_decay)

    keys = np.stack([record.key for record in batch])
    targets = np.stack([
        record.reward + critics.discount * critics.values(record.key_next)
        for record in batch])
    critic_mse = critic_regression_step(critics, keys, targets,
                                        critic_learning_rate, weight_decay)

    return UpdateReport(
        surrogate=total.item(),
        critic_mse=critic_mse,
        mean_weighted_advantage=float(np.mean(weighted)),
        policy_grad_norm=grad_norm,
        fairness_weight_mean=float(np.concatenate(weight_rows).mean()),
    )
