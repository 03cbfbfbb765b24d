"""Learning-state assembly and its mixture-prior variational codec.

The high-dimensional learning state concatenates six per-class statistics in
a fixed order. A variational autoencoder with a categorical mixture prior
(K components, learnable per-component prior means, unit prior variance)
compresses that vector into a small latent map. After pretraining the
decoder is frozen and a cloned encoder is fine-tuned alongside the policy,
regularized back toward the frozen decoder's reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ParamSet, Tensor, backward, sgd_step
from .autodiff.params import clip_gradients
from .autodiff import ops

STATE_FIELDS = ("loss", "accuracy", "prototype_norm", "domain_cosine",
                "entropy", "exposure")
FIELDS_PER_CLASS = len(STATE_FIELDS)


@dataclass
class ClassStatistics:
    """Per-class training telemetry, one array entry per semantic class."""

    loss: np.ndarray
    accuracy: np.ndarray
    prototype_norm: np.ndarray
    domain_cosine: np.ndarray
    entropy: np.ndarray
    exposure: np.ndarray

    @classmethod
    def defaults(cls, num_classes: int) -> "ClassStatistics":
        log_c = math.log(num_classes) if num_classes > 1 else 0.0
        return cls(
            loss=np.full(num_classes, log_c),
            accuracy=np.zeros(num_classes),
            prototype_norm=np.zeros(num_classes),
            domain_cosine=np.zeros(num_classes),
            entropy=np.full(num_classes, log_c),
            exposure=np.zeros(num_classes),
        )

    @property
    def num_classes(self) -> int:
        return len(self.loss)


def assemble_state(stats: ClassStatistics) -> np.ndarray:
    """Concatenate per-class blocks [loss, acc, norm, cos, entropy, exposure]."""
    num_classes = stats.num_classes
    state = np.empty(FIELDS_PER_CLASS * num_classes)
    for c in range(num_classes):
        block = state[FIELDS_PER_CLASS * c:FIELDS_PER_CLASS * (c + 1)]
        for i, name in enumerate(STATE_FIELDS):
            value = float(getattr(stats, name)[c])
            if not math.isfinite(value):
                raise ValueError(
                    f"non-finite statistic {name!r} for class {c}: {value}")
            block[i] = value
    return state


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class CodecConfig:
    state_dim: int
    components: int = 4
    hidden: int = 64
    latent_channels: int = 8
    latent_height: int = 4
    latent_width: int = 4

    def __post_init__(self) -> None:
        if self.components < 1:
            raise ValueError("components must be positive")
        if self.state_dim < 1 or self.hidden < 1:
            raise ValueError("state_dim and hidden must be positive")

    @property
    def latent_dim(self) -> int:
        return self.latent_channels * self.latent_height * self.latent_width

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.latent_height, self.latent_width)


@dataclass
class CodecModel:
    cfg: CodecConfig
    encoder: dict[str, Tensor]
    decoder: dict[str, Tensor]
    prior_means: Tensor = field(repr=False)


def _dense(rng: np.random.Generator, out_dim: int, in_dim: int) -> Tensor:
    scale = 1.0 / math.sqrt(in_dim)
    return Tensor(rng.normal(0.0, scale, (out_dim, in_dim)), requires_grad=True)


def init_encoder_params(cfg: CodecConfig,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    k, d, h = cfg.components, cfg.latent_dim, cfg.hidden
    return {
        "trunk.weight": _dense(rng, h, cfg.state_dim),
        "trunk.bias": Tensor(np.zeros(h), requires_grad=True),
        "cat.weight": _dense(rng, k, h),
        "cat.bias": Tensor(np.zeros(k), requires_grad=True),
        "mean.weight": _dense(rng, k * d, h),
        "mean.bias": Tensor(np.zeros(k * d), requires_grad=True),
        "logvar.weight": _dense(rng, k * d, h),
        "logvar.bias": Tensor(np.zeros(k * d), requires_grad=True),
    }


def init_decoder_params(cfg: CodecConfig,
                        rng: np.random.Generator) -> dict[str, Tensor]:
    d, h = cfg.latent_dim, cfg.hidden
    return {
        "hidden.weight": _dense(rng, h, d),
        "hidden.bias": Tensor(np.zeros(h), requires_grad=True),
        "out.weight": _dense(rng, cfg.state_dim, h),
        "out.bias": Tensor(np.zeros(cfg.state_dim), requires_grad=True),
    }


def make_codec_model(cfg: CodecConfig, rng: np.random.Generator) -> CodecModel:
    prior = Tensor(rng.normal(0.0, 1.0, (cfg.components, cfg.latent_dim)),
                   requires_grad=True)
    return CodecModel(cfg=cfg, encoder=init_encoder_params(cfg, rng),
                      decoder=init_decoder_params(cfg, rng), prior_means=prior)


def clone_params(params: Mapping[str, Tensor],
                 trainable: bool = True) -> dict[str, Tensor]:
    return {name: Tensor(t.values.copy(), requires_grad=trainable)
            for name, t in params.items()}


def freeze_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return clone_params(params, trainable=False)


# ---------------------------------------------------------------------------
# forward passes


def encoder_forward(state: np.ndarray, encoder: Mapping[str, Tensor],
                    cfg: CodecConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Return (component logits (K,), means (K, d), log-variances (K, d))."""
    s = Tensor(state)
    h = ops.relu(ops.linear(s, encoder["trunk.weight"], encoder["trunk.bias"]))
    logits = ops.linear(h, encoder["cat.weight"], encoder["cat.bias"])
    k, d = cfg.components, cfg.latent_dim
    means = ops.reshape(
        ops.linear(h, encoder["mean.weight"], encoder["mean.bias"]), (k, d))
    logvars = ops.reshape(
        ops.linear(h, encoder["logvar.weight"], encoder["logvar.bias"]), (k, d))
    return logits, means, logvars


def decoder_forward(z: Tensor, decoder: Mapping[str, Tensor]) -> Tensor:
    h = ops.relu(ops.linear(z, decoder["hidden.weight"], decoder["hidden.bias"]))
    return ops.linear(h, decoder["out.weight"], decoder["out.bias"])


@dataclass
class ElboParts:
    loss: Tensor
    reconstruction: float
    gaussian_kls: np.ndarray
    categorical_kl: float


def codec_elbo(state: np.ndarray, model: CodecModel,
               noise: np.ndarray) -> ElboParts:
    """Negated variational bound with the categorical marginalized exactly.

    The component expectation is an exact sum over the K posterior weights;
    the inner expectation uses one reparameterized draw per component built
    from the shared ``noise`` vector. The reconstruction term is the unit
    variance Gaussian log-density up to its constant, i.e. 0.5*||s - dec||^2.
    """
    cfg = model.cfg
    if noise.shape != (cfg.latent_dim,):
        raise ValueError(
            f"noise must have shape ({cfg.latent_dim},), got {noise.shape}")
    logits, means, logvars = encoder_forward(state, model.encoder, cfg)
    log_q = ops.log_softmax(logits)
    q = ops.softmax(logits)
    categorical_kl = ops.reduce_sum(
        ops.mul(q, ops.shift(log_q, math.log(cfg.components))))

    s_const = Tensor(state)
    noise_const = Tensor(noise)
    total = categorical_kl
    recon_value = 0.0
    gaussian_kls = np.zeros(cfg.components)
    q_values = q.values
    for c in range(cfg.components):
        mu = ops.reshape(ops.take(means, [c]), (cfg.latent_dim,))
        lv = ops.reshape(ops.take(logvars, [c]), (cfg.latent_dim,))
        sigma = ops.exp(ops.scale(lv, 0.5))
        z = ops.add(mu, ops.mul(sigma, noise_const))
        recon = ops.scale(
            ops.squared_error(decoder_forward(z, model.decoder), s_const), 0.5)
        prior = ops.reshape(ops.take(model.prior_means, [c]), (cfg.latent_dim,))
        kl = ops.scale(ops.reduce_sum(ops.shift(
            ops.add(ops.exp(lv),
                    ops.sub(ops.square(ops.sub(mu, prior)), lv)), -1.0)), 0.5)
        weight = ops.reshape(ops.take(q, [c]), ())
        total = ops.add(total, ops.mul(weight, ops.add(recon, kl)))
        recon_value += float(q_values[c]) * recon.item()
        gaussian_kls[c] = kl.item()

    if not np.isfinite(total.item()):
        raise ValueError("non-finite value inside the variational bound")
    return ElboParts(loss=total, reconstruction=recon_value,
                     gaussian_kls=gaussian_kls,
                     categorical_kl=categorical_kl.item())


def encode_graph(state: np.ndarray, encoder: Mapping[str, Tensor],
                 cfg: CodecConfig) -> Tensor:
    """Deterministic differentiable encoding: the argmax component's mean."""
    logits, means, _ = encoder_forward(state, encoder, cfg)
    best = int(np.argmax(logits.values))
    return ops.reshape(ops.take(means, [best]), (cfg.latent_dim,))


def _batch_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ops.add(ops.matmul(x, ops.transpose(weight)), bias)


def encoder_forward_batch(states: np.ndarray, encoder: Mapping[str, Tensor],
                          cfg: CodecConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Batched heads: logits (B, K), means and log-variances (B, K*d)."""
    s = Tensor(states)
    h = ops.relu(_batch_linear(s, encoder["trunk.weight"],
                               encoder["trunk.bias"]))
    logits = _batch_linear(h, encoder["cat.weight"], encoder["cat.bias"])
    means = _batch_linear(h, encoder["mean.weight"], encoder["mean.bias"])
    logvars = _batch_linear(h, encoder["logvar.weight"],
                            encoder["logvar.bias"])
    return logits, means, logvars


def decoder_forward_batch(z: Tensor, decoder: Mapping[str, Tensor]) -> Tensor:
    h = ops.relu(_batch_linear(z, decoder["hidden.weight"],
                               decoder["hidden.bias"]))
    return _batch_linear(h, decoder["out.weight"], decoder["out.bias"])


def encode_graph_batch(states: np.ndarray, encoder: Mapping[str, Tensor],
                       cfg: CodecConfig) -> Tensor:
    """Deterministic encodings for a batch of states, shape (B, latent_dim)."""
    count = states.shape[0]
    logits, means, _ = encoder_forward_batch(states, encoder, cfg)
    best = logits.values.argmax(axis=1)
    flat = ops.reshape(means, (count * cfg.components, cfg.latent_dim))
    return ops.take(flat, np.arange(count) * cfg.components + best)


@dataclass
class ElboBatchParts:
    loss: Tensor
    categorical_kls: np.ndarray
    gaussian_kls: np.ndarray


def codec_elbo_batch(states: np.ndarray, model: CodecModel,
                     noises: np.ndarray) -> ElboBatchParts:
    """Mean negated bound over a batch; same math as ``codec_elbo`` rowwise."""
    cfg = model.cfg
    count = states.shape[0]
    if noises.shape != (count, cfg.latent_dim):
        raise ValueError(
            f"noises must have shape ({count}, {cfg.latent_dim}), "
            f"got {noises.shape}")
    logits, means, logvars = encoder_forward_batch(states, model.encoder, cfg)
    log_q = ops.log_softmax(logits)
    q = ops.softmax(logits)
    cat_kl = ops.reduce_sum(
        ops.mul(q, ops.shift(log_q, math.log(cfg.components))), axis=1)

    s_const = Tensor(states)
    noise_const = Tensor(noises)
    means_flat = ops.reshape(means, (count * cfg.components, cfg.latent_dim))
    logvars_flat = ops.reshape(logvars,
                               (count * cfg.components, cfg.latent_dim))
    total = cat_kl
    gaussian_kls = np.zeros((count, cfg.components))
    for c in range(cfg.components):
        rows = np.arange(count) * cfg.components + c
        mu = ops.take(means_flat, rows)
        lv = ops.take(logvars_flat, rows)
        sigma = ops.exp(ops.scale(lv, 0.5))
        z = ops.add(mu, ops.mul(sigma, noise_const))
        rec = decoder_forward_batch(z, model.decoder)
        recon = ops.scale(
            ops.reduce_sum(ops.square(ops.sub(rec, s_const)), axis=1), 0.5)
        prior = ops.take(model.prior_means, [c])
        kl = ops.scale(ops.reduce_sum(ops.shift(
            ops.add(ops.exp(lv),
                    ops.sub(ops.square(ops.sub(mu, prior)), lv)), -1.0),
            axis=1), 0.5)
        weight = ops.take_per_row(q, np.full(count, c))
        total = ops.add(total, ops.mul(weight, ops.add(recon, kl)))
        gaussian_kls[:, c] = kl.values

    loss = ops.reduce_mean(total)
    if not np.isfinite(loss.item()):
        raise ValueError("non-finite value inside the variational bound")
    return ElboBatchParts(loss=loss, categorical_kls=cat_kl.values.copy(),
                          gaussian_kls=gaussian_kls)


def encode(state: np.ndarray, model: CodecModel, mode: str = "deterministic",
           noise: np.ndarray | None = None) -> np.ndarray:
    """Map a state to its latent map (C, H, W) under the argmax component."""
    cfg = model.cfg
    logits, means, logvars = encoder_forward(state, model.encoder, cfg)
    best = int(np.argmax(logits.values))
    z = means.values[best].copy()
    if mode == "stochastic":
        if noise is None:
            raise ValueError("stochastic encoding needs a noise draw")
        z += np.exp(0.5 * logvars.values[best]) * noise
    elif mode != "deterministic":
        raise ValueError(f"unknown encode mode {mode!r}")
    return z.reshape(cfg.latent_shape)


def recon_loss(states: Sequence[np.ndarray], encoder: Mapping[str, Tensor],
               frozen_decoder: Mapping[str, Tensor],
               cfg: CodecConfig) -> Tensor:
    """Mean squared reconstruction of deterministic encodings.

    The decoder must already be frozen (untracked tensors); gradients reach
    the encoder only.
    """
    if len(states) == 0:
        raise ValueError("recon_loss needs a nonempty batch")
    for tensor in frozen_decoder.values():
        if tensor.requires_grad:
            raise ValueError("recon_loss requires a frozen decoder")
    stacked = np.stack(states)
    z = encode_graph_batch(stacked, encoder, cfg)
    rec = decoder_forward_batch(z, frozen_decoder)
    return ops.scale(ops.squared_error(rec, Tensor(stacked)),
                     1.0 / len(states))


# ---------------------------------------------------------------------------
# pretraining


def codec_param_set(model: CodecModel) -> ParamSet:
    ps = ParamSet()
    ps.merge(model.encoder, "encoder/")
    ps.merge(model.decoder, "decoder/")
    ps.add("prior/means", model.prior_means)
    return ps


def pretrain_codec(model: CodecModel, states: np.ndarray, steps: int,
                   batch_size: int, learning_rate: float,
                   rng: np.random.Generator,
                   weight_decay: float = 0.0,
                   max_grad_norm: float = 10.0) -> list[float]:
    """Train encoder, decoder, and prior means on collected states.

    Gradients are norm-clipped: the reparameterized variance head can blow
    up on unlucky corpora otherwise.
    """
    if states.ndim != 2 or states.shape[0] == 0:
        raise ValueError("pretraining needs a (N, state_dim) corpus")
    ps = codec_param_set(model)
    losses: list[float] = []
    n = states.shape[0]
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        noises = rng.standard_normal((len(idx), model.cfg.latent_dim))
        parts = codec_elbo_batch(states[idx], model, noises)
        backward(parts.loss)
        clip_gradients(ps, max_grad_norm)
        sgd_step(ps, learning_rate, weight_decay)
        losses.append(parts.loss.item())
    return losses


def dump_states(states: Sequence[np.ndarray], path) -> None:
    """One state per line, comma-separated decimals (17 significant digits)."""
    lines = [",".join(format(v, ".17g") for v in state) for state in states]
    with open(path, "w") as handle:
        handle.write("\n".join(lines))
        if lines:
            handle.write("\n")


def load_state_dump(path) -> np.ndarray:
    rows = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.asarray(rows)
