"""Run configuration: a flat, sectioned key=value text format.

Sections are [run], [env], [distill], and [codec]. Every key is optional and
falls back to the documented default; ``default_config_text`` emits the full
annotated template.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

from .distill import DistillConfig
from .segworld import WorldConfig

SCHEDULERS = ("learned", "random", "easy_to_hard", "hard_only", "fixed_order")
ABLATIONS = ("encoder_bypass", "distill_bypass", "alpha_zero")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    total_steps: int = 2000
    warmup_steps: int = 200
    update_period: int = 10
    agent_iterations: int = 4
    agent_batch: int = 32
    buffer_capacity: int = 512
    state_buffer_capacity: int = 512
    pretrain_steps: int = 300
    pretrain_batch: int = 16
    scenes_per_step: int = 4
    eval_scenes: int = 64
    eval_period: int = 0
    source_loss_weight: float = 1.0
    mixed_loss_weight: float = 1.0
    reward_balance: float = 1.0
    fairness_alpha: float = 0.5
    discount: float = 0.95
    value_floor: float = 1e-3
    learner_lr: float = 0.5
    policy_lr: float = 0.02
    critic_lr: float = 0.05
    codec_lr: float = 5e-3
    finetune_lr: float = 1e-3
    weight_decay: float = 1e-4
    max_grad_norm: float = 5.0
    scheduler: str = "learned"
    fixed_order: tuple[int, ...] = ()
    paste_half: str = "low"
    bypass_encoder: bool = False
    bypass_distiller: bool = False
    env: WorldConfig = field(default_factory=WorldConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    codec_components: int = 4
    codec_hidden: int = 64

    def __post_init__(self) -> None:
        if self.total_steps < self.warmup_steps:
            raise ValueError(
                f"total_steps {self.total_steps} must be >= warmup_steps "
                f"{self.warmup_steps}")
        if self.update_period < 1:
            raise ValueError("update_period must be >= 1")
        for name in ("learner_lr", "policy_lr", "critic_lr", "codec_lr",
                     "finetune_lr"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be nonnegative")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(
                f"unknown scheduler {self.scheduler!r}; pick one of {SCHEDULERS}")
        if self.paste_half not in ("low", "high"):
            raise ValueError("paste_half must be 'low' or 'high'")
        if self.scheduler == "fixed_order":
            order = self.fixed_order or tuple(range(self.env.num_classes))
            if sorted(order) != list(range(self.env.num_classes)):
                raise ValueError(
                    f"fixed_order {order} is not a permutation of the classes")
            object.__setattr__(self, "fixed_order", tuple(order))

    @property
    def latent_dim(self) -> int:
        return self.distill.latent_dim

    @property
    def state_dim(self) -> int:
        from .statecodec import FIELDS_PER_CLASS

        return FIELDS_PER_CLASS * self.env.num_classes


DEFAULT_CONFIG_TEXT = """\
# schedlab run configuration. Every key is optional; the value shown is the
# default. Units: steps are environment steps, rates are per-step SGD
# learning rates, weights/coefficients are dimensionless.

[run]
seed = 0                    # master seed (int)
total_steps = 2000          # environment steps, warmup included
warmup_steps = 200          # random-ranking steps collecting codec states
update_period = 10          # env steps between agent update rounds
agent_iterations = 4        # gradient iterations per update round
agent_batch = 32            # transitions per policy-gradient iteration
buffer_capacity = 512       # transition ring size
state_buffer_capacity = 512 # state ring size (codec corpus / regularizer)
pretrain_steps = 300        # codec pretraining iterations after warmup
pretrain_batch = 16         # states per codec pretraining iteration
scenes_per_step = 4         # scene pairs consumed per env step
eval_scenes = 64            # held-out scenes for the final evaluation
eval_period = 0             # mid-run eval every N steps (0 = final only)
source_loss_weight = 1.0    # coefficient on the source cross-entropy
mixed_loss_weight = 1.0     # coefficient on the mixed-pair cross-entropy
reward_balance = 1.0        # separation weight inside the class reward
fairness_alpha = 0.5        # fairness exponent (0 = plain sum)
discount = 0.95             # critic bootstrap discount
value_floor = 1e-3          # floor applied to critic values before weighting
learner_lr = 0.5            # prototype learner step size
policy_lr = 0.02            # policy/distiller/encoder-clone step size
critic_lr = 0.05            # critic regression step size
codec_lr = 5e-3             # codec pretraining step size
finetune_lr = 1e-3          # encoder-clone reconstruction step size
weight_decay = 1e-4         # decoupled weight decay on agent updates
max_grad_norm = 5.0         # global clip on agent gradients (0 disables)
scheduler = learned         # learned | random | easy_to_hard | hard_only | fixed_order
fixed_order =               # comma permutation for scheduler=fixed_order
paste_half = low            # paste the low- or high-ranked half when mixing
bypass_encoder = false      # ablation: trainable linear map replaces encoder
bypass_distiller = false    # ablation: key features = latent state

[env]
classes = 8                 # semantic classes
feature_dim = 6             # per-pixel feature dimension
height = 16                 # scene height in pixels
width = 16                  # scene width in pixels
frequency_weights =         # comma floats; empty = long tail 0.7^k
noise = 0.3                 # feature noise scale
severity = 0.0              # [0,1]; scales noise, suppresses rare classes
domain_shift = 1.2          # distance between source and target class means
rectangles = 8              # rectangles painted per label map
temperature = 0.5           # prototype learner temperature
means_seed = 224            # seed fixing the class mean geometry

[distill]
channels = 8                # latent map channels
expanded = 32               # expanded channels before grouping
groups = 4                  # channel groups
height = 4                  # latent map height
width = 4                   # latent map width

[codec]
components = 4              # mixture components
hidden = 64                 # encoder/decoder hidden width
"""


def _parse_int_list(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(v) for v in raw.split(","))


def _parse_float_list(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(float(v) for v in raw.split(","))


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string(text)

    def section(name: str) -> configparser.SectionProxy:
        return parser[name] if parser.has_section(name) else parser["DEFAULT"]

    run = section("run")
    env_sec = section("env")
    distill_sec = section("distill")
    codec_sec = section("codec")

    env = WorldConfig(
        num_classes=env_sec.getint("classes", 8),
        feature_dim=env_sec.getint("feature_dim", 6),
        height=env_sec.getint("height", 16),
        width=env_sec.getint("width", 16),
        frequency_weights=_parse_float_list(env_sec.get("frequency_weights", "")),
        noise=env_sec.getfloat("noise", 0.3),
        severity=env_sec.getfloat("severity", 0.0),
        domain_shift=env_sec.getfloat("domain_shift", 1.2),
        rectangles=env_sec.getint("rectangles", 8),
        temperature=env_sec.getfloat("temperature", 0.5),
        means_seed=env_sec.getint("means_seed", 224),
    )
    distill = DistillConfig(
        in_channels=distill_sec.getint("channels", 8),
        expanded_channels=distill_sec.getint("expanded", 32),
        groups=distill_sec.getint("groups", 4),
        height=distill_sec.getint("height", 4),
        width=distill_sec.getint("width", 4),
    )
    return RunConfig(
        seed=run.getint("seed", 0),
        total_steps=run.getint("total_steps", 2000),
        warmup_steps=run.getint("warmup_steps", 200),
        update_period=run.getint("update_period", 10),
        agent_iterations=run.getint("agent_iterations", 4),
        agent_batch=run.getint("agent_batch", 32),
        buffer_capacity=run.getint("buffer_capacity", 512),
        state_buffer_capacity=run.getint("state_buffer_capacity", 512),
        pretrain_steps=run.getint("pretrain_steps", 300),
        pretrain_batch=run.getint("pretrain_batch", 16),
        scenes_per_step=run.getint("scenes_per_step", 4),
        eval_scenes=run.getint("eval_scenes", 64),
        eval_period=run.getint("eval_period", 0),
        source_loss_weight=run.getfloat("source_loss_weight", 1.0),
        mixed_loss_weight=run.getfloat("mixed_loss_weight", 1.0),
        reward_balance=run.getfloat("reward_balance", 1.0),
        fairness_alpha=run.getfloat("fairness_alpha", 0.5),
        discount=run.getfloat("discount", 0.95),
        value_floor=run.getfloat("value_floor", 1e-3),
        learner_lr=run.getfloat("learner_lr", 0.5),
        policy_lr=run.getfloat("policy_lr", 0.02),
        critic_lr=run.getfloat("critic_lr", 0.05),
        codec_lr=run.getfloat("codec_lr", 5e-3),
        finetune_lr=run.getfloat("finetune_lr", 1e-3),
        weight_decay=run.getfloat("weight_decay", 1e-4),
        max_grad_norm=run.getfloat("max_grad_norm", 5.0),
        scheduler=run.get("scheduler", "learned").strip(),
        fixed_order=_parse_int_list(run.get("fixed_order", "")),
        paste_half=run.get("paste_half", "low").strip(),
        bypass_encoder=run.getboolean("bypass_encoder", False),
        bypass_distiller=run.getboolean("bypass_distiller", False),
        env=env,
        distill=distill,
        codec_components=codec_sec.getint("components", 4),
        codec_hidden=codec_sec.getint("hidden", 64),
    )


def read_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def config_text(cfg: RunConfig) -> str:
    """Serialize a resolved config back to sectioned key=value text."""
    parser = configparser.ConfigParser()
    parser["run"] = {
        "seed": str(cfg.seed),
        "total_steps": str(cfg.total_steps),
        "warmup_steps": str(cfg.warmup_steps),
        "update_period": str(cfg.update_period),
        "agent_iterations": str(cfg.agent_iterations),
        "agent_batch": str(cfg.agent_batch),
        "buffer_capacity": str(cfg.buffer_capacity),
        "state_buffer_capacity": str(cfg.state_buffer_capacity),
        "pretrain_steps": str(cfg.pretrain_steps),
        "pretrain_batch": str(cfg.pretrain_batch),
        "scenes_per_step": str(cfg.scenes_per_step),
        "eval_scenes": str(cfg.eval_scenes),
        "eval_period": str(cfg.eval_period),
        "source_loss_weight": format(cfg.source_loss_weight, ".17g"),
        "mixed_loss_weight": format(cfg.mixed_loss_weight, ".17g"),
        "reward_balance": format(cfg.reward_balance, ".17g"),
        "fairness_alpha": format(cfg.fairness_alpha, ".17g"),
        "discount": format(cfg.discount, ".17g"),
        "value_floor": format(cfg.value_floor, ".17g"),
        "learner_lr": format(cfg.learner_lr, ".17g"),
        "policy_lr": format(cfg.policy_lr, ".17g"),
        "critic_lr": format(cfg.critic_lr, ".17g"),
        "codec_lr": format(cfg.codec_lr, ".17g"),
        "finetune_lr": format(cfg.finetune_lr, ".17g"),
        "weight_decay": format(cfg.weight_decay, ".17g"),
        "max_grad_norm": format(cfg.max_grad_norm, ".17g"),
        "scheduler": cfg.scheduler,
        "fixed_order": ",".join(str(v) for v in cfg.fixed_order),
        "paste_half": cfg.paste_half,
        "bypass_encoder": str(cfg.bypass_encoder).lower(),
        "bypass_distiller": str(cfg.bypass_distiller).lower(),
    }
    parser["env"] = {
        "classes": str(cfg.env.num_classes),
        "feature_dim": str(cfg.env.feature_dim),
        "height": str(cfg.env.height),
        "width": str(cfg.env.width),
        "frequency_weights": ",".join(
            format(w, ".17g") for w in cfg.env.frequency_weights),
        "noise": format(cfg.env.noise, ".17g"),
        "severity": format(cfg.env.severity, ".17g"),
        "domain_shift": format(cfg.env.domain_shift, ".17g"),
        "rectangles": str(cfg.env.rectangles),
        "temperature": format(cfg.env.temperature, ".17g"),
        "means_seed": str(cfg.env.means_seed),
    }
    parser["distill"] = {
        "channels": str(cfg.distill.in_channels),
        "expanded": str(cfg.distill.expanded_channels),
        "groups": str(cfg.distill.groups),
        "height": str(cfg.distill.height),
        "width": str(cfg.distill.width),
    }
    parser["codec"] = {
        "components": str(cfg.codec_components),
        "hidden": str(cfg.codec_hidden),
    }
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def write_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config_text(cfg))


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    return replace(cfg, **overrides)


def ablation_config(cfg: RunConfig, name: str) -> RunConfig:
    """A learned-scheduler variant for one named ablation."""
    if name == "encoder_bypass":
        return replace(cfg, scheduler="learned", bypass_encoder=True)
    if name == "distill_bypass":
        return replace(cfg, scheduler="learned", bypass_distiller=True)
    if name == "alpha_zero":
        return replace(cfg, scheduler="learned", fairness_alpha=0.0)
    raise ValueError(f"unknown ablation {name!r}; pick one of {ABLATIONS}")
